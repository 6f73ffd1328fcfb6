"""Attention, FFN and Bert-style blocks."""

import numpy as np
import pytest

from minilion import nn
from minilion import tensor as T
from minilion.params import ParamStore
from minilion.tensor import ContractError, InvalidShapeError, Rng, Tensor


def make_attention(d=4, h=1, causal=False, seed=0):
    store = ParamStore()
    cfg = nn.AttentionConfig(d, h, causal)
    nn.init_attention(store, "a", cfg, "bridge", Rng(seed), std=0.5)
    return cfg, store.view("a"), store


def make_block(d=8, h=2, hidden=12, cross=True, seed=0, **kw):
    store = ParamStore()
    cfg = nn.BlockConfig(d, h, hidden, cross=cross, **kw)
    nn.init_block(store, "b", cfg, "aggregator", Rng(seed), std=0.3)
    return cfg, store.view("b"), store


class TestAttention:
    def test_single_token_is_value_projection(self, np_rng):
        cfg, p, _ = make_attention(d=4, h=2)
        x = Tensor(np_rng.normal(size=(1, 1, 4)))
        out = nn.attention(x, None, cfg, p)
        v = nn.linear(x, p.sub("v"))
        want = nn.linear(v, p.sub("o"))
        np.testing.assert_allclose(out.data, want.data, rtol=0, atol=1e-14)

    def test_causal_prefix_unchanged(self, np_rng):
        cfg, p, _ = make_attention(d=4, h=2, causal=True)
        x = np_rng.normal(size=(2, 5, 4))
        base = nn.attention(Tensor(x), None, cfg, p).data
        for t in range(4):
            y = x.copy()
            y[:, t + 1:] += np_rng.normal(size=y[:, t + 1:].shape)
            out = nn.attention(Tensor(y), None, cfg, p).data
            assert out[:, :t + 1].tobytes() == base[:, :t + 1].tobytes()

    def test_causal_refuses_kv(self, np_rng):
        cfg, p, _ = make_attention(causal=True)
        x = Tensor(np_rng.normal(size=(1, 2, 4)))
        with pytest.raises(ContractError):
            nn.attention(x, x, cfg, p)

    def test_kv_width_mismatch(self, np_rng):
        cfg, p, _ = make_attention()
        with pytest.raises(InvalidShapeError):
            nn.attention(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3, 5))), cfg, p)

    def test_heads_must_divide(self):
        with pytest.raises(InvalidShapeError):
            nn.AttentionConfig(6, 4)

    def test_grad_check_two_tokens(self, np_rng):
        cfg, p, store = make_attention(d=4, h=1)
        x = Tensor(np_rng.normal(size=(1, 2, 4)))
        w = Tensor(np_rng.normal(size=(1, 2, 4)))
        params = [store[n] for n in store]
        err = T.grad_check(lambda: T.sum(T.mul(nn.attention(x, None, cfg, p), w)), [x] + params)
        assert err < 1e-5

    def test_batch_equivariance(self, np_rng):
        cfg, p, _ = make_attention(d=4, h=2, causal=True)
        x = np_rng.normal(size=(3, 4, 4))
        perm = [2, 0, 1]
        a = nn.attention(Tensor(x), None, cfg, p).data[perm]
        b = nn.attention(Tensor(x[perm]), None, cfg, p).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


class TestFfn:
    def test_zero_weights(self, np_rng):
        store = ParamStore()
        cfg = nn.FfnConfig(4, 6, "gelu")
        store.zeros("f.fc1.w", (4, 6), "bridge")
        store.zeros("f.fc1.b", (6,), "bridge")
        store.zeros("f.fc2.w", (6, 4), "bridge")
        store.zeros("f.fc2.b", (4,), "bridge")
        out = nn.ffn(Tensor(np_rng.normal(size=(2, 3, 4))), cfg, store.view("f"))
        assert not out.data.any()

    def test_identity_relu_passthrough(self, np_rng):
        store = ParamStore()
        cfg = nn.FfnConfig(4, 4, "relu")
        store.add("f.fc1.w", np.eye(4), "bridge")
        store.zeros("f.fc1.b", (4,), "bridge")
        store.add("f.fc2.w", np.eye(4), "bridge")
        store.zeros("f.fc2.b", (4,), "bridge")
        x = np.abs(np_rng.normal(size=(1, 3, 4)))
        out = nn.ffn(Tensor(x), cfg, store.view("f"))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_hand_composition(self, np_rng):
        store = ParamStore()
        cfg = nn.FfnConfig(3, 5, "relu")
        nn.init_ffn(store, "f", cfg, "bridge", Rng(2), std=0.7)
        x = np_rng.normal(size=(2, 4, 3))
        w1, b1 = store["f.fc1.w"].data, store["f.fc1.b"].data
        w2, b2 = store["f.fc2.w"].data, store["f.fc2.b"].data
        want = np.maximum(x @ w1 + b1, 0) @ w2 + b2
        out = nn.ffn(Tensor(x), cfg, store.view("f"))
        assert out.data.tobytes() == want.tobytes()

    def test_width_mismatch(self):
        store = ParamStore()
        cfg = nn.FfnConfig(3, 5)
        nn.init_ffn(store, "f", cfg, "bridge", Rng(0))
        with pytest.raises(InvalidShapeError):
            nn.ffn(T.zeros([1, 2, 4]), cfg, store.view("f"))


class TestBertBlock:
    def test_cross_block_needs_y(self, np_rng):
        cfg, p, _ = make_block()
        with pytest.raises(ContractError):
            nn.bert_block(Tensor(np_rng.normal(size=(1, 3, 8))), None, cfg, p)

    def test_tied_y_shape(self, np_rng):
        cfg, p, _ = make_block()
        x = Tensor(np_rng.normal(size=(2, 3, 8)))
        assert nn.bert_block(x, x, cfg, p).shape == (2, 3, 8)

    def _zero_branches(self, store):
        for name in store:
            if name.endswith((".attn.o.w", ".attn.o.b", ".xattn.o.w", ".xattn.o.b",
                              ".ffn.fc2.w", ".ffn.fc2.b")):
                store[name].data[...] = 0.0

    def test_zero_branch_pre_norm_is_identity(self, np_rng):
        # with residuals and every branch output zeroed, x passes through
        cfg, p, store = make_block()
        self._zero_branches(store)
        x = np_rng.normal(size=(1, 3, 8))
        y = np_rng.normal(size=(1, 5, 8))
        out = nn.bert_block(Tensor(x), Tensor(y), cfg, p)
        assert out.data.tobytes() == x.tobytes()

    def test_zero_branch_post_norm_is_norm_cascade(self, np_rng):
        cfg, p, store = make_block(norm="post")
        self._zero_branches(store)
        x = np_rng.normal(size=(1, 3, 8))
        out = nn.bert_block(Tensor(x), Tensor(np_rng.normal(size=(1, 2, 8))), cfg, p)
        h = x
        for ln in ("ln1", "ln2", "ln3"):
            g, b = store[f"b.{ln}.g"].data, store[f"b.{ln}.b"].data
            mu = h.mean(-1, keepdims=True)
            var = ((h - mu) ** 2).mean(-1, keepdims=True)
            h = (h - mu) / np.sqrt(var + nn.LN_EPS) * g + b
        np.testing.assert_allclose(out.data, h, rtol=0, atol=1e-12)

    def test_y_enters_through_cross_attention(self, np_rng):
        # self-attention and FFN branches zeroed: y still moves the output
        cfg, p, store = make_block()
        for name in store:
            if name.endswith((".attn.o.w", ".ffn.fc2.w")) and ".xattn." not in name:
                store[name].data[...] = 0.0
        x = Tensor(np_rng.normal(size=(1, 3, 8)))
        a = nn.bert_block(x, Tensor(np_rng.normal(size=(1, 2, 8))), cfg, p).data
        b = nn.bert_block(x, Tensor(np_rng.normal(size=(1, 2, 8))), cfg, p).data
        assert np.abs(a - b).max() > 1e-6

    @pytest.mark.parametrize("norm,residual", [("pre", True), ("post", True), ("pre", False)])
    def test_grad_check_full_block(self, np_rng, norm, residual):
        cfg, p, store = make_block(d=8, h=2, hidden=8, norm=norm, residual=residual)
        x = Tensor(np_rng.normal(size=(1, 3, 8)))
        y = Tensor(np_rng.normal(size=(1, 3, 8)))
        w = Tensor(np_rng.normal(size=(1, 3, 8)))
        params = [store[n] for n in store]
        err = T.grad_check(lambda: T.sum(T.mul(nn.bert_block(x, y, cfg, p), w)),
                           [x, y] + params, coords=250, rng=Rng(4))
        assert err < 1e-4

    def test_batch_equivariance(self, np_rng):
        cfg, p, _ = make_block()
        x = np_rng.normal(size=(3, 2, 8))
        y = np_rng.normal(size=(3, 4, 8))
        perm = [1, 2, 0]
        a = nn.bert_block(Tensor(x), Tensor(y), cfg, p).data[perm]
        b = nn.bert_block(Tensor(x[perm]), Tensor(y[perm]), cfg, p).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)

    def test_causal_block_prefix(self, np_rng):
        cfg, p, _ = make_block(cross=False, causal=True)
        x = np_rng.normal(size=(1, 4, 8))
        base = nn.bert_block(Tensor(x), None, cfg, p).data
        x[:, 2:] += 1.0
        out = nn.bert_block(Tensor(x), None, cfg, p).data
        assert out[:, :2].tobytes() == base[:, :2].tobytes()
