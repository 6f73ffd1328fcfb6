"""Adapters and the per-task router."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minilion import tensor as T
from minilion.moa import (
    Adapter,
    TaskType,
    adapter_forward,
    adapter_residual,
    init_adapter,
    init_gates,
    router_forward,
)
from minilion.params import ParamStore
from minilion.tensor import InvalidShapeError, Rng, Tensor


def random_adapter(np_rng, d=4, r=2):
    return Adapter(Tensor(np_rng.normal(size=(d, r))), Tensor(np_rng.normal(size=(r, d))))


class TestAdapter:
    def test_zero_input(self, np_rng):
        a = random_adapter(np_rng)
        assert not adapter_forward(T.zeros([2, 3, 4]), a).data.any()

    def test_rank_one_oracle(self):
        w_d = np.zeros((4, 1))
        w_d[0, 0] = 1.0
        a = Adapter(Tensor(w_d), Tensor(w_d.T.copy()))
        x = np.array([[[2.0, -3.0, 0.5, 1.0], [-1.5, 4.0, 0.0, 2.0]]])
        out = adapter_forward(Tensor(x), a).data
        np.testing.assert_array_equal(out, [[[2.0, 0, 0, 0], [0.0, 0, 0, 0]]])

    def test_fresh_adapter_is_noop(self):
        store = ParamStore()
        a = init_adapter(store, "ad", 6, 3, "adapter_img", Rng(0))
        assert not a.w_up.data.any()
        assert a.w_down.data.std() > 0

    def test_shape_mismatch(self, np_rng):
        with pytest.raises(InvalidShapeError):
            Adapter(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 4))))
        with pytest.raises(InvalidShapeError):
            adapter_forward(T.zeros([1, 2, 5]), random_adapter(np_rng))

    def test_grad_check(self, np_rng):
        a = random_adapter(np_rng, 4, 2)
        x = Tensor(np_rng.normal(size=(2, 3, 4)))
        w = Tensor(np_rng.normal(size=(2, 3, 4)))
        err = T.grad_check(lambda: T.sum(T.mul(adapter_forward(x, a), w)), [x, a.w_down, a.w_up])
        assert err < 1e-6

    def test_residual(self, np_rng):
        f = Tensor(np_rng.normal(size=(2, 3, 4)))
        assert adapter_residual(f, T.zeros_like(f)).data.tobytes() == f.data.tobytes()
        np.testing.assert_array_equal(adapter_residual(f, f).data, 2 * f.data)
        h = Tensor(np_rng.normal(size=(2, 3, 4)))
        assert adapter_residual(f, h).data.tobytes() == T.add(f, h).data.tobytes()
        with pytest.raises(InvalidShapeError):
            adapter_residual(f, T.zeros([2, 3, 5]))


class TestGates:
    def test_init_pattern(self):
        g = init_gates(2, 3)
        np.testing.assert_array_equal(g, [[[1, 1, 1], [0, 0, 0]], [[0, 0, 0], [1, 1, 1]]])

    def test_task_type(self):
        assert len(TaskType) == 2
        assert TaskType.parse("region_level") is TaskType.REGION_LEVEL
        assert TaskType.parse(0) is TaskType.IMAGE_LEVEL


class TestRouter:
    @pytest.fixture
    def parts(self, np_rng):
        f = Tensor(np_rng.normal(size=(2, 3, 4)))
        hs = [Tensor(np_rng.normal(size=(2, 3, 4))) for _ in range(2)]
        return f, hs

    def test_zero_gates_bare_ffn(self, parts):
        f, hs = parts
        out = router_forward(f, hs, Tensor(np.zeros((2, 2, 4))), TaskType.IMAGE_LEVEL)
        assert out.data.tobytes() == f.data.tobytes()

    @pytest.mark.parametrize("task", list(TaskType))
    def test_init_gates_reduce_to_single_adapter(self, parts, task):
        f, hs = parts
        out = router_forward(f, hs, Tensor(init_gates(2, 4)), task)
        assert out.data.tobytes() == adapter_residual(f, hs[int(task)]).data.tobytes()

    def test_unit_gate_reduction(self, parts):
        f, hs = parts
        g = np.zeros((2, 2, 4))
        g[1, 0] = 1.0
        out = router_forward(f, hs, Tensor(g), TaskType.REGION_LEVEL)
        assert out.data.tobytes() == adapter_residual(f, hs[0]).data.tobytes()

    def test_k_mismatch(self, parts):
        f, hs = parts
        with pytest.raises(InvalidShapeError):
            router_forward(f, hs, Tensor(np.zeros((2, 3, 4))), TaskType.IMAGE_LEVEL)

    def test_grad_check_gates(self, parts, np_rng):
        f, hs = parts
        g = Tensor(np_rng.normal(size=(2, 2, 4)))
        w = Tensor(np_rng.normal(size=(2, 3, 4)))
        for task in TaskType:
            err = T.grad_check(lambda: T.sum(T.mul(router_forward(f, hs, g, task), w)),
                               [g] + hs + [f])
            assert err < 1e-6

    def test_gate_grad_sparsity(self, np_rng):
        # adapter 1 outputs zero at every position: its gates get no gradient,
        # and the other task's gates are never touched
        f = Tensor(np_rng.normal(size=(1, 2, 4)))
        hs = [Tensor(np_rng.normal(size=(1, 2, 4))), T.zeros([1, 2, 4])]
        g = Tensor(np.ones((2, 2, 4)), requires_grad=True)
        T.backward(T.sum(router_forward(f, hs, g, TaskType.IMAGE_LEVEL)))
        assert np.all(g.grad[0, 0] != 0)
        assert not g.grad[0, 1].any()
        assert not g.grad[1].any()

    @settings(max_examples=40, deadline=None)
    @given(alpha=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 10_000))
    def test_linear_in_gates(self, alpha, seed):
        r = np.random.default_rng(seed)
        f = Tensor(r.normal(size=(2, 3, 4)))
        hs = [Tensor(r.normal(size=(2, 3, 4))) for _ in range(2)]
        g = r.normal(size=(2, 2, 4))
        task = TaskType(seed % 2)
        lhs = router_forward(f, hs, Tensor(alpha * g), task).data - f.data
        rhs = alpha * (router_forward(f, hs, Tensor(g), task).data - f.data)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
