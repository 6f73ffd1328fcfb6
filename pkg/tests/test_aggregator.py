"""Layer taps and the two-block vision aggregator."""

import numpy as np
import pytest

from minilion import tensor as T
from minilion.aggregator import (
    AggregatorConfig,
    EncoderTooShallowError,
    aggregate,
    init_aggregator,
    select_taps,
)
from minilion.params import ParamStore
from minilion.tensor import InvalidShapeError, Rng, Tensor


def make_agg(d=8, residual=True, seed=1, std=0.3):
    store = ParamStore()
    cfg = AggregatorConfig(d, 2, 12, residual=residual)
    init_aggregator(store, "agg", cfg, Rng(seed))
    for name in store:
        if name.endswith(".w"):
            store[name].data[...] = Rng(seed + len(name)).normal(store[name].numel()).reshape(
                store[name].shape) * std
    return cfg, store.view("agg"), store


class TestTaps:
    @pytest.mark.parametrize("n,want", [(24, (23, 16, 8)), (6, (5, 4, 2)), (7, (6, 4, 2))])
    def test_select(self, n, want):
        assert select_taps(n).as_tuple() == want

    def test_too_shallow(self):
        with pytest.raises(EncoderTooShallowError):
            select_taps(5)

    @pytest.mark.parametrize("n", range(6, 40))
    def test_ordering(self, n):
        t = select_taps(n)
        assert 0 <= t.k < t.j < t.i < n


class TestAggregate:
    def test_single_patch_shape(self, np_rng):
        cfg, p, _ = make_agg()
        v = [Tensor(np_rng.normal(size=(2, 1, 8))) for _ in range(3)]
        assert aggregate(*v, cfg, p).shape == (2, 1, 8)

    def test_tap_shapes_must_agree(self, np_rng):
        cfg, p, _ = make_agg()
        with pytest.raises(InvalidShapeError):
            aggregate(T.zeros([1, 2, 8]), T.zeros([1, 3, 8]), T.zeros([1, 2, 8]), cfg, p)

    def test_order_sensitive(self, np_rng):
        cfg, p, _ = make_agg()
        vi, vj, vk = (Tensor(np_rng.normal(size=(1, 4, 8))) for _ in range(3))
        a = aggregate(vi, vj, vk, cfg, p).data
        b = aggregate(vi, vk, vj, cfg, p).data
        assert np.abs(a - b).max() > 1e-6

    @pytest.mark.parametrize("which", range(3))
    def test_depends_on_every_tap(self, np_rng, which):
        cfg, p, _ = make_agg()
        taps = [np_rng.normal(size=(1, 4, 8)) for _ in range(3)]
        base = aggregate(*map(Tensor, taps), cfg, p).data
        taps[which] = taps[which] + np_rng.normal(size=(1, 4, 8))
        moved = aggregate(*map(Tensor, taps), cfg, p).data
        assert np.abs(moved - base).max() > 1e-6

    def test_bare_zero_branches_norm_cascade(self, np_rng):
        # bare composition: each sub-layer output replaces the stream, so with
        # the FFN output zeroed the aggregate is exactly the FFN bias (zero)
        # and with everything zeroed no tap can influence the result
        cfg, p, store = make_agg(residual=False)
        for name in store:
            if name.endswith((".o.w", ".o.b", ".fc2.w", ".fc2.b")):
                store[name].data[...] = 0.0
        taps = [Tensor(np_rng.normal(size=(1, 3, 8))) for _ in range(3)]
        out = aggregate(*taps, cfg, p)
        assert not out.data.any()

    def test_residual_zero_branches_pass_vi(self, np_rng):
        cfg, p, store = make_agg(residual=True)
        for name in store:
            if name.endswith((".o.w", ".o.b", ".fc2.w", ".fc2.b")):
                store[name].data[...] = 0.0
        vi = np_rng.normal(size=(1, 3, 8))
        out = aggregate(Tensor(vi), Tensor(np_rng.normal(size=(1, 3, 8))),
                        Tensor(np_rng.normal(size=(1, 3, 8))), cfg, p)
        assert out.data.tobytes() == vi.tobytes()

    def test_grad_check(self, np_rng):
        cfg, p, store = make_agg(std=0.4)
        taps = [Tensor(np_rng.normal(size=(1, 2, 8))) for _ in range(3)]
        w = Tensor(np_rng.normal(size=(1, 2, 8)))
        params = [store[n] for n in store]
        err = T.grad_check(lambda: T.sum(T.mul(aggregate(*taps, cfg, p), w)), taps + params,
                           coords=400, rng=Rng(9))
        assert err < 1e-4

    def test_frozen_taps_get_no_grad(self, np_rng):
        cfg, p, store = make_agg()
        store.set_trainable({"aggregator"})
        taps = [Tensor(np_rng.normal(size=(1, 2, 8))) for _ in range(3)]
        T.backward(T.sum(aggregate(*taps, cfg, p)))
        assert all(t.grad is None for t in taps)
        assert store["agg.block1.xattn.q.w"].grad is not None
