"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records itself on a module-global tape (rebuilt each forward
pass via :func:`reset_tape`).  :func:`backward` walks the tape in reverse
recording order and accumulates gradients into every tensor that has a
gradient buffer allocated; calling it twice without zeroing doubles the
gradients.  All data is float64 and row-major; there is no broadcasting
beyond the few fixed patterns the ops below implement.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray


class Tensor:
    """A dense float64 value, an optional gradient buffer of the same shape,
    and a back-reference to the tape record that produced it (None for
    leaves).  The shape is fixed at construction."""

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, *, grad: bool = False):
        self.data: Array = np.array(data, dtype=np.float64, order="C")
        self.grad: Array | None = np.zeros_like(self.data) if grad else None
        self.node: Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def alloc_grad(self) -> "Tensor":
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # Arithmetic sugar; scalars go through scale/add_scalar so no general
    # broadcasting sneaks in.
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(NamedTuple):
    """A named trainable tensor; the gradient buffer is always allocated."""

    name: str
    tensor: Tensor


def make_parameter(name: str, data) -> Parameter:
    return Parameter(name, Tensor(data, grad=True))


def check_unique_names(params: Sequence[Parameter]) -> None:
    seen: dict[str, int] = {}
    for p in params:
        if p.name in seen:
            raise ValueError(f"duplicate parameter name: {p.name!r}")
        seen[p.name] = 1


class Record(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[Array], tuple[Array | None, ...]]


class Tape:
    """Ordered log of operations; inputs of each record were recorded
    before it, so reverse iteration is a valid backward order."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)


_tape = Tape()
_grad_enabled = [True]


def active_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.records.clear()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / decoding)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _emit(inputs: tuple[Tensor, ...], out_data: Array,
          backward: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled[-1]:
        rec = Record(inputs, out, backward)
        out.node = rec
        _tape.records.append(rec)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every tensor on the active
    tape whose gradient buffer is allocated.  Adjoints are recomputed from
    scratch on every call, so repeated calls sum exactly."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    adjoint: dict[Tensor, Array] = {loss: np.ones_like(loss.data)}
    for rec in reversed(_tape.records):
        out_adj = adjoint.get(rec.output)
        if out_adj is None:
            continue
        for t, g in zip(rec.inputs, rec.backward(out_adj)):
            if g is None:
                continue
            acc = adjoint.get(t)
            adjoint[t] = g if acc is None else acc + g
    for t, g in adjoint.items():
        if t.grad is not None:
            t.grad += g.reshape(t.grad.shape)


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


# ---------------------------------------------------------------------------
# primitives


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.data.ndim == 2 and b.data.ndim == 2,
             f"matmul needs 2-d tensors, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0],
             f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g: Array):
        return g @ bd.T, ad.T @ g

    return _emit((a, b), ad @ bd, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add shapes differ: {a.shape} vs {b.shape}")
    return _emit((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"sub shapes differ: {a.shape} vs {b.shape}")
    return _emit((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((x,), x.data * c, lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((x,), x.data + c, lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: x is (..., d), b is (d,)."""
    _require(b.data.ndim == 1 and x.shape[-1] == b.shape[0],
             f"add_bias: {x.shape} + {b.shape}")
    return _emit((x, b), x.data + b.data,
                 lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: Array) -> Array:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit((x,), y, lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    s = _sigmoid(x.data)
    return _emit((x,), y, lambda g: (g * s,))


def softmax_rows(x: Tensor) -> Tensor:
    _require(x.data.ndim == 2 and x.shape[1] >= 1,
             f"softmax_rows needs a non-empty 2-d tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g: Array):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit((x,), y, back)


def mask_fill(x: Tensor, mask: Array, value: float) -> Tensor:
    """Replace entries where mask is True by a constant (no gradient there)."""
    _require(mask.shape == x.shape, f"mask shape {mask.shape} != {x.shape}")
    keep = ~mask
    return _emit((x,), np.where(mask, value, x.data), lambda g: (g * keep,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _require(x.data.ndim == 2, f"layer_norm expects 2-d input, got {x.shape}")
    d = x.shape[1]
    _require(d != 0, "layer_norm over zero-width rows")
    _require(gain.shape == (d,) and bias.shape == (d,),
             f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data

    def back(g: Array):
        dxhat = g * gd
        dx = inv * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit((x, gain, bias), xhat * gd + bias.data, back)


def cross_entropy(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean negative log-softmax probability of the target ids, skipping
    positions whose target equals pad_id."""
    _require(logits.data.ndim == 2, f"cross_entropy logits must be 2-d, got {logits.shape}")
    ids = np.asarray(targets, dtype=np.int64)
    _require(ids.ndim == 1 and ids.shape[0] == logits.shape[0],
             f"cross_entropy targets length {ids.shape} vs logits {logits.shape}")
    t, v = logits.shape
    live = ids != pad_id
    bad = live & ((ids < 0) | (ids >= v))
    if bad.any():
        raise ValueError(f"target id {ids[bad][0]} out of range for vocab {v}")
    n_live = int(live.sum())
    if n_live == 0:
        return _emit((logits,), np.zeros(()), lambda g: (np.zeros((t, v)),))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(t)
    loss = -logp[rows[live], ids[live]].sum() / n_live

    def back(g: Array):
        dz = np.exp(logp)
        dz[rows[live], ids[live]] -= 1.0
        dz[~live] = 0.0
        return (dz * (float(g) / n_live),)

    return _emit((logits,), np.asarray(loss), back)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    _require(a.data.ndim == 1 and a.shape == b.shape,
             f"cosine_similarity needs matching vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    s = float(ad @ bd)
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    denom = na * nb + eps
    c = s / denom

    def back(g: Array):
        gf = float(g)
        # Norm derivatives are guarded so a zero vector yields zero gradient
        # rather than NaN; the value itself is already eps-guarded.
        na_s = max(na, 1e-30)
        nb_s = max(nb, 1e-30)
        da = gf * (bd / denom - s * nb * (ad / na_s) / denom ** 2)
        db = gf * (ad / denom - s * na * (bd / nb_s) / denom ** 2)
        return da, db

    return _emit((a, b), np.asarray(c), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    _require(len(parts) >= 1, "concat_cols of nothing")
    rows = parts[0].shape[0]
    for p in parts:
        _require(p.data.ndim == 2 and p.shape[0] == rows,
                 f"concat_cols row mismatch: {[q.shape for q in parts]}")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def back(g: Array):
        return tuple(np.hsplit(g, splits))

    return _emit(tuple(parts), np.concatenate([p.data for p in parts], axis=1), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    return _emit((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose2d(x: Tensor) -> Tensor:
    _require(x.data.ndim == 2, f"transpose2d on shape {x.shape}")
    return _emit((x,), x.data.T.copy(), lambda g: (g.T.copy(),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require(x.data.ndim == 2, f"slice_rows on shape {x.shape}")
    _require(0 <= start <= stop <= x.shape[0],
             f"slice_rows [{start}:{stop}] out of bounds for {x.shape}")

    def back(g: Array):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _emit((x,), x.data[start:stop].copy(), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    _require(table.data.ndim == 2, f"embedding table must be 2-d, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"token id out of range [0, {table.shape[0]}): {idx}")

    def back(g: Array):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _emit((table,), table.data[idx].copy(), back)


def reduce_sum(x: Tensor) -> Tensor:
    return _emit((x,), np.asarray(x.data.sum()),
                 lambda g: (np.full_like(x.data, float(g)),))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit((x,), np.asarray(x.data.mean()),
                 lambda g: (np.full_like(x.data, float(g) / n),))


def mean_axis0(x: Tensor) -> Tensor:
    """Mean over rows: (t, d) -> (d,).  Used to pool positions to one vector."""
    _require(x.data.ndim == 2 and x.shape[0] >= 1, f"mean_axis0 on shape {x.shape}")
    t = x.shape[0]
    return _emit((x,), x.data.mean(axis=0),
                 lambda g: (np.tile(g / t, (t, 1)),))
