"""Shared fixtures: tiny model configs and a small synthetic dataset."""

import numpy as np
import pytest

from minilion.data.scenes import DataConfig, generate_dataset
from minilion.model import LionModel, ModelConfig
from minilion.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Minimal dims: D=8, two LM layers, 2x2 patch grid (N=4)."""
    return ModelConfig(d_model=8, vision_layers=6, lm_layers=2, n_heads=2, n_queries=2,
                       adapter_dim=2, lm_hidden=16, grid=2, max_len=320)


@pytest.fixture
def tiny_model(tiny_cfg):
    return LionModel(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(0, DataConfig(n_train_scenes=24, n_eval_scenes=8))


@pytest.fixture(scope="session")
def tiny_data():
    """Dataset on the 2x2 grid that tiny_cfg expects."""
    return generate_dataset(5, DataConfig(n_train_scenes=12, n_eval_scenes=4, grid=2))


def first_of(samples, subtype):
    return next(s for s in samples if s.subtype == subtype)


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} {detail}".rstrip())
