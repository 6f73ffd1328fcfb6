"""Dense tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor`. When any input requires grad, the
result records its parents and a closure that pushes the output gradient
back into them. :func:`backward` walks the graph in reverse topological
order and accumulates into ``.grad``.

Values are float64 unless :func:`precision` selects float32 for a block;
every tensor created inside the block is cast to the active dtype.

Broadcasting is intentionally narrow: a binary op accepts two equal shapes,
or a right operand whose shape is a suffix of the left one (it is repeated
over the leading dimensions). Anything else raises :class:`InvalidShapeError`.
"""

from __future__ import annotations

import contextlib
import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# sqrt(2/pi) and the cubic coefficient of the tanh approximation of GeLU
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


_DTYPES = {"float64": np.float64, "float32": np.float32}
_DTYPE = np.float64


def get_precision() -> str:
    return np.dtype(_DTYPE).name


@contextlib.contextmanager
def precision(name: str):
    """Compute in ``name`` ("float64" or "float32") inside the block."""
    global _DTYPE
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    prev, _DTYPE = _DTYPE, _DTYPES[name]
    try:
        yield
    finally:
        _DTYPE = prev


class InvalidShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class UndefinedLossError(ContractError):
    pass


class Rng:
    """splitmix64 stream with Box-Muller normals.

    Draw ``n`` (1-based) from seed state ``s`` is ``mix(s + n * GAMMA)``; a
    uniform in (0, 1) is ``((z >> 11) + 0.5) / 2**53``. Normals consume two
    uniforms ``u1, u2`` per pair and yield ``r cos(2 pi u2)`` then
    ``r sin(2 pi u2)`` with ``r = sqrt(-2 ln u1)``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @staticmethod
    def _mix(z: int) -> int:
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return self._mix(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """``n`` consecutive draws, vectorised; identical to calling next_u64."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self, n: int | None = None):
        if n is None:
            return ((self.next_u64() >> 11) + 0.5) / 9007199254740992.0
        z = self.u64_array(n)
        return ((z >> np.uint64(11)).astype(np.float64) + 0.5) / 9007199254740992.0

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return out[:n]

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n < 1:
            raise ValueError("randint needs n >= 1")
        return int(self.uniform() * n)

    def choice(self, seq: Sequence):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        # Fisher-Yates, in place
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self) -> "Rng":
        return Rng(self.next_u64())


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShapeError(f"invalid shape {shape}: dims must be >= 1")
    return shape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numel(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"non-finite values in tensor {self.name or ''}".strip())
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise ContractError(f"non-finite grad in tensor {self.name or ''}".strip())

    def _accumulate(self, g: np.ndarray) -> None:
        # never mutate in place: g may be shared with other parents
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# constructors


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones(shape) -> Tensor:
    return Tensor(np.ones(_check_shape(shape)))


def randn(shape, rng: Rng, stddev: float = 1.0) -> Tensor:
    shape = _check_shape(shape)
    if not stddev > 0:
        raise ValueError("stddev must be > 0")
    n = int(np.prod(shape))
    return Tensor(rng.normal(n).reshape(shape) * stddev)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def _broadcast_rule(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise InvalidShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_rule(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_rule(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-_reduce_to(g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_rule(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``
    with identical leading dims."""
    if a.ndim < 1 or b.ndim < 2:
        raise InvalidShapeError(f"matmul: need b with >= 2 dims, got {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise InvalidShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _result(a.data[idx], (a,), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.array(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _result(np.array(a.data.mean()), (a,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat of an empty list")
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise InvalidShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    v2 = v * v
    u = GELU_C * v * (1.0 + GELU_K * v2)
    t = np.tanh(u)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_K * v2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))

    return _result(0.5 * v * (1.0 + t), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - t * t))

    return _result(t, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise InvalidShapeError(f"softmax: axis {axis} out of range for {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


@functools.lru_cache(maxsize=8)
def _causal_bias(l: int, m: int) -> np.ndarray:
    b = np.triu(np.full((l, m), -np.inf), k=1)
    b.flags.writeable = False
    return b


def attention_softmax(x: Tensor, scale: float, causal: bool) -> Tensor:
    """``softmax(scale * x)`` over the last axis, optionally with a causal
    mask on the last two axes. Fused to keep the big score tensors few."""
    if x.ndim < 2:
        raise InvalidShapeError("attention_softmax needs at least 2 dims")
    scale = float(scale)
    z = x.data * scale
    if causal:
        z += _causal_bias(*x.shape[-2:])
    z -= z.max(axis=-1, keepdims=True)
    y = np.exp(z, out=z)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g * y
        gx -= y * gx.sum(axis=-1, keepdims=True)
        gx *= scale
        x._accumulate(gx)

    return _result(y, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then affine."""
    if not eps > 0:
        raise ValueError("layernorm eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise InvalidShapeError(f"layernorm: gamma/beta must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(
                rstd
                * (gh - gh.mean(axis=-1, keepdims=True)
                   - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            )

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def embed(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InvalidShapeError("embed: id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _result(table.data[ids], (table,), backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id."""
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise InvalidShapeError("cross_entropy: targets do not match logits")
    valid = t != ignore_id
    n = int(valid.sum())
    if n == 0:
        raise UndefinedLossError("cross_entropy: every target is ignored")
    if t[valid].min() < 0 or t[valid].max() >= v:
        raise InvalidShapeError("cross_entropy: target id outside vocabulary")
    logp = log_softmax_np(flat)
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, t[rows]].sum() / n

    def backward(g):
        d = np.exp(logp)
        d[rows, t[rows]] -= 1.0
        d[~valid] = 0.0
        logits._accumulate((d * (g / n)).reshape(logits.shape))

    return _result(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# tape traversal


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Interior gradients live only for the duration of the call; leaf grads
    accumulate across calls until zeroed.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    if loss._backward is None:
        loss._accumulate(np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor], x, eps: float = 1e-6,
               coords: int | None = None, rng: Rng | None = None,
               kink_tol: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is a Tensor or a list of Tensors; their ``.data`` is perturbed in
    place and restored exactly. ``f`` is called with ``x`` when ``x`` is a
    single Tensor, otherwise with no arguments. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.

    Coordinates where the one-sided differences disagree by more than
    ``kink_tol`` sit on a kink (e.g. relu at 0) and are excluded. ``coords``
    limits the check to a random subset drawn from ``rng``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    if _DTYPE is not np.float64 or any(t.data.dtype != np.float64 for t in xs):
        raise ContractError("grad_check needs float64 tensors")

    def call() -> Tensor:
        out = f(x) if single else f()
        if out.data.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        return out

    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = call()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    for t in xs:
        t.grad = None

    pool = [(i, j) for i, t in enumerate(xs) for j in range(t.data.size)]
    if coords is not None and coords < len(pool):
        rng = rng or Rng(0)
        rng.shuffle(pool)
        pool = pool[:coords]

    worst = 0.0
    for i, j in pool:
        flat = xs[i].data.reshape(-1)
        orig = flat[j]
        f0 = call().item()
        flat[j] = orig + eps
        fp = call().item()
        flat[j] = orig - eps
        fm = call().item()
        flat[j] = orig
        fwd = (fp - f0) / eps
        bwd = (f0 - fm) / eps
        numeric = (fp - fm) / (2 * eps)
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(numeric)):
            continue
        a = analytic[i].reshape(-1)[j]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
