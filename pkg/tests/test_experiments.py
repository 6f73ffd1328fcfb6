"""Experiment plumbing at toy scale (the desk-scale runs live in the
acceptance suite)."""

from dataclasses import replace

import pytest

from minilion.data.scenes import DataConfig, generate_dataset
from minilion.experiments import (
    BudgetMismatchError,
    ExperimentConfig,
    conflict_experiment,
    soft_prompt_experiment,
)
from minilion.model import ModelConfig


@pytest.fixture(scope="module")
def tiny_exp():
    model = ModelConfig(d_model=8, n_heads=2, n_queries=2, adapter_dim=2, lm_hidden=16, grid=2)
    data = DataConfig(n_train_scenes=8, n_eval_scenes=3, grid=2)
    return ExperimentConfig(seed=1, data=data, model=model, bootstrap_steps=2,
                            stage_steps=(2, 2, 2), single_steps=6, batch_size=2, eval_limit=2)


class TestConfig:
    def test_defaults_match_budget(self):
        cfg = ExperimentConfig()
        cfg.check_budget()
        assert cfg.single_steps == sum(cfg.stage_steps)

    def test_budget_mismatch(self, tiny_exp):
        with pytest.raises(BudgetMismatchError):
            conflict_experiment(replace(tiny_exp, single_steps=5))

    def test_stage_config(self, tiny_exp):
        sc = tiny_exp.stage_config("s1")
        assert sc.steps == 2 and sc.warmup_steps == 1 and sc.batch_size == 2
        assert tiny_exp.stage_config("s3").tags is None
        zero = replace(tiny_exp, stage_steps=(0, 2, 4))
        assert zero.stage_config("s1") is None
        over = replace(tiny_exp, overrides={"s2": {"lr_init": 5e-4}})
        assert over.stage_config("s2").lr_init == 5e-4


class TestRuns:
    def test_zero_steps_identical_arms(self, tiny_exp):
        cfg = replace(tiny_exp, bootstrap_steps=0, stage_steps=(0, 0, 0), single_steps=0,
                      precision="float64")
        rep = conflict_experiment(cfg, log=lambda *_: None)
        single, staged = rep.arms["single"], rep.arms["stagewise"]
        assert (single.image_acc, single.rec_acc) == (staged.image_acc, staged.rec_acc)
        assert rep.margin("rec_acc") == 0.0

    def test_conflict_report(self, tiny_exp):
        ds = generate_dataset(tiny_exp.seed, tiny_exp.data)
        rep = conflict_experiment(replace(tiny_exp, no_router_arm=True), ds, log=lambda *_: None)
        assert set(rep.arms) == {"single", "stagewise", "stagewise_no_router"}
        d = rep.to_dict()
        assert d["margin_rec"] == rep.arms["stagewise"].rec_acc - rep.arms["single"].rec_acc
        for arm in rep.arms.values():
            assert 0.0 <= arm.image_acc <= 1.0 and 0.0 <= arm.rec_acc <= 1.0

    def test_deterministic(self, tiny_exp):
        a = conflict_experiment(tiny_exp, log=lambda *_: None).to_dict()
        b = conflict_experiment(tiny_exp, log=lambda *_: None).to_dict()
        for d in (a, b):
            for arm in d["arms"].values():
                arm.pop("seconds")
        assert a == b

    def test_soft_prompt_arms(self, tiny_exp):
        rep = soft_prompt_experiment(tiny_exp, log=lambda *_: None)
        assert (rep.baseline, rep.candidate) == ("hard", "soft")
        assert set(rep.arms) == {"hard", "soft"}
