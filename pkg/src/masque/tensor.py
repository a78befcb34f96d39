"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learnable quantity in this package is a Tensor: a numpy float64 array
plus a gradient slot. Operations executed while a Tape is active record
nodes (inputs, output, backward rule) in execution order, which is already
a topological order. Tape.backward walks the nodes once in reverse and
accumulates gradients into every tensor that requires them.

Broadcasting follows numpy's trailing-axis alignment and nothing else.
Gradients for broadcast operands are reduced back to the operand shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values lie outside an operation's domain (e.g. log of <= 0)."""


class DegenerateMaskError(ValueError):
    """A softmax slice has no unmasked entry left to normalize over."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite or non-scalar value."""


_GELU_C = math.sqrt(2.0 / math.pi)

# Active tape stack. Ops record onto the innermost tape only; with no tape
# active they run forward-only and build no graph.
_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "backward", "visits")

    def __init__(self, output: Tensor, backward: Callable[[Array], None]):
        self.output = output
        self.backward = backward
        self.visits = 0


class Tape:
    """Records op nodes in execution order for one reverse sweep.

    Execution order is a topological order by construction: an op can only
    consume tensors that already exist. backward() therefore visits nodes in
    reverse recording order, exactly once each, and returns the visit count
    so callers can assert the single-visit invariant.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tapes.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")

    def record(self, output: Tensor, backward: Callable[[Array], None]) -> None:
        self.nodes.append(_Node(output, backward))

    def backward(self, root: Tensor) -> int:
        """Seed root with ones and sweep the tape in reverse.

        Returns the number of nodes visited, which always equals
        len(self.nodes); each node is touched exactly once.
        """
        root.grad = np.ones_like(root.data)
        visited = 0
        for node in reversed(self.nodes):
            node.visits += 1
            if node.visits != 1:
                raise RuntimeError("tape node visited more than once")
            visited += 1
            g = node.output.grad
            if g is None:
                # Output never fed anything downstream of the root.
                continue
            node.backward(g)
        return visited


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: Array, inputs: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    needs = bool(_tapes) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _tapes[-1].record(out, backward)
    return out


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    for da, db in zip(reversed(a.shape), reversed(b.shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g: Array) -> None:
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g: Array) -> None:
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient routes to the first operand."""
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g: Array) -> None:
        _acc(a, _unbroadcast(g * take_a, a.shape))
        _acc(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# unary elementwise


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g: Array) -> None:
        _acc(a, -g)

    return _make(-a.data, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        bad = float(a.data[a.data <= 0.0].flat[0])
        raise DomainError(f"log of non-positive input {bad}")
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        _acc(a, g / a.data)

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    # Branch on sign so neither exp overflows.
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: Array) -> None:
        _acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        _acc(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def backward(g: Array) -> None:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        _acc(a, g * local)

    return _make(out_data, (a,), backward)


_ELEMENTWISE_UNARY = {"log": log, "sigmoid": sigmoid, "tanh": tanh, "gelu": gelu, "neg": neg}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' takes one operand")
        return _ELEMENTWISE_UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind '{kind}'")


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values into [lo, hi]; gradient is zero where the clip engaged."""
    a = _coerce(a)
    out_data = np.clip(a.data, lo, hi)
    passthrough = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        passthrough &= a.data > lo
    if hi is not None:
        passthrough &= a.data < hi

    def backward(g: Array) -> None:
        _acc(a, g * passthrough)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")

    def backward(g: Array) -> None:
        _acc(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        _acc(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty sequence")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g: Array) -> None:
        start = 0
        for t, n in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            _acc(t, g[tuple(idx)])
            start += n

    return _make(out_data, ts, backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _coerce(a)
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"slice_axis axis {axis} out of range for shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx].copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return _make(out_data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# normalizations


def _mask_array(mask, shape) -> Array:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(bool)
    try:
        return np.broadcast_to(m, shape)
    except ValueError as exc:
        raise ShapeError(f"mask shape {m.shape} does not broadcast to {shape}") from exc


def softmax_axis(a, axis: int, mask=None) -> Tensor:
    """Softmax along one axis; masked-out positions get exactly zero weight.

    mask entries are True where a position participates. A slice with no
    participating position cannot be normalized and raises.
    """
    a = _coerce(a)
    x = a.data
    if mask is not None:
        m = _mask_array(mask, x.shape)
        if np.any(~m.any(axis=axis)):
            raise DegenerateMaskError("softmax slice with every position masked")
        x = np.where(m, x, -np.inf)
        mx = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - mx)
    else:
        mx = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - mx)
    s = e.sum(axis=axis, keepdims=True)
    out_data = e / s

    def backward(g: Array) -> None:
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - inner))

    return _make(out_data, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per feature."""
    a, gain, bias = _coerce(a), _coerce(gain), _coerce(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: Array) -> None:
        lead = tuple(range(g.ndim - 1))
        _acc(gain, (g * xhat).sum(axis=lead))
        _acc(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(a, inv * term)

    return _make(out_data, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# indexed reads and writes


def _check_ids(ids: Array, limit: int) -> Array:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        bad = int(ids[(ids < 0) | (ids >= limit)].flat[0])
        raise IndexError(f"id {bad} out of range [0, {limit})")
    return ids


def gather_rows(table, ids) -> Tensor:
    """Select rows of a 2-d table by integer id."""
    table = _coerce(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d table, got {table.shape}")
    ids = _check_ids(ids, table.shape[0])
    out_data = table.data[ids]

    def backward(g: Array) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(out_data, (table,), backward)


def take(vec, ids) -> Tensor:
    """Select entries of a 1-d tensor by integer id."""
    vec = _coerce(vec)
    if vec.ndim != 1:
        raise ShapeError(f"take needs a 1-d tensor, got {vec.shape}")
    ids = _check_ids(ids, vec.shape[0])
    out_data = vec.data[ids]

    def backward(g: Array) -> None:
        if vec.requires_grad:
            if vec.grad is None:
                vec.grad = np.zeros_like(vec.data)
            np.add.at(vec.grad, ids, g)

    return _make(out_data, (vec,), backward)


def scatter_add(base, ids, weights) -> Tensor:
    """Return base with weights[i] added at position ids[i]; ids may repeat."""
    base, weights = _coerce(base), _coerce(weights)
    if base.ndim != 1 or weights.ndim != 1:
        raise ShapeError("scatter_add needs 1-d base and weights")
    ids = _check_ids(ids, base.shape[0])
    if ids.shape != weights.shape:
        raise ShapeError(f"ids {ids.shape} and weights {weights.shape} differ")
    out_data = base.data.copy()
    np.add.at(out_data, ids, weights.data)

    def backward(g: Array) -> None:
        _acc(base, g)
        _acc(weights, g[ids])

    return _make(out_data, (base, weights), backward)


def scatter_add_cols(base, ids, weights) -> Tensor:
    """Row-indexed scatter over a matrix: out[ids[i], :] += weights[i, :]."""
    base, weights = _coerce(base), _coerce(weights)
    if base.ndim != 2 or weights.ndim != 2 or base.shape[1] != weights.shape[1]:
        raise ShapeError(f"scatter_add_cols shapes {base.shape}, {weights.shape}")
    ids = _check_ids(ids, base.shape[0])
    if ids.shape[0] != weights.shape[0]:
        raise ShapeError("one id per weight row required")
    out_data = base.data.copy()
    np.add.at(out_data, ids, weights.data)

    def backward(g: Array) -> None:
        _acc(base, g)
        _acc(weights, g[ids])

    return _make(out_data, (base, weights), backward)


def gather_col_entries(mat, row_ids) -> Tensor:
    """Pick one entry per column: out[t] = mat[row_ids[t], t]."""
    mat = _coerce(mat)
    if mat.ndim != 2:
        raise ShapeError(f"gather_col_entries needs a 2-d tensor, got {mat.shape}")
    row_ids = _check_ids(row_ids, mat.shape[0])
    cols = np.arange(mat.shape[1])
    if row_ids.shape[0] != mat.shape[1]:
        raise ShapeError("need exactly one row id per column")
    out_data = mat.data[row_ids, cols]

    def backward(g: Array) -> None:
        if mat.requires_grad:
            if mat.grad is None:
                mat.grad = np.zeros_like(mat.data)
            np.add.at(mat.grad, (row_ids, cols), g)

    return _make(out_data, (mat,), backward)


# ---------------------------------------------------------------------------
# fused attention kernels

# Feature-major activations (d, n) are split into heads along the feature
# axis once, inside the kernel, instead of materializing per-head slices on
# the tape. d must be divisible by the head count.


def mha_scores(q, k, heads: int, scale: float) -> Tensor:
    """Per-head scaled dot products: (d, nq) x (d, nk) -> (heads, nq, nk)."""
    q, k = _coerce(q), _coerce(k)
    if q.ndim != 2 or k.ndim != 2 or q.shape[0] != k.shape[0]:
        raise ShapeError(f"mha_scores shapes {q.shape}, {k.shape}")
    d = q.shape[0]
    if d % heads != 0:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    q3 = q.data.reshape(heads, dh, q.shape[1])
    k3 = k.data.reshape(heads, dh, k.shape[1])
    out_data = np.einsum("hdq,hdk->hqk", q3, k3) * scale

    def backward(g: Array) -> None:
        gs = g * scale
        _acc(q, np.einsum("hqk,hdk->hdq", gs, k3).reshape(d, q.shape[1]))
        _acc(k, np.einsum("hqk,hdq->hdk", gs, q3).reshape(d, k.shape[1]))

    return _make(out_data, (q, k), backward)


def mha_context(attn, v) -> Tensor:
    """Blend values by per-head attention: (heads, nq, nk) x (d, nk) -> (d, nq)."""
    attn, v = _coerce(attn), _coerce(v)
    if attn.ndim != 3 or v.ndim != 2:
        raise ShapeError(f"mha_context shapes {attn.shape}, {v.shape}")
    heads, nq, nk = attn.shape
    d = v.shape[0]
    if d % heads != 0 or v.shape[1] != nk:
        raise ShapeError(f"mha_context shapes {attn.shape}, {v.shape}")
    dh = d // heads
    v3 = v.data.reshape(heads, dh, nk)
    out_data = np.einsum("hqk,hdk->hdq", attn.data, v3).reshape(d, nq)

    def backward(g: Array) -> None:
        g3 = g.reshape(heads, dh, nq)
        _acc(attn, np.einsum("hdq,hdk->hqk", g3, v3))
        _acc(v, np.einsum("hdq,hqk->hdk", g3, attn.data).reshape(d, nk))

    return _make(out_data, (attn, v), backward)


def contract_first(w, x) -> Tensor:
    """Contract a vector against the first axis: out[...] = sum_d w[d] * x[d, ...]."""
    w, x = _coerce(w), _coerce(x)
    if w.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"contract_first shapes {w.shape}, {x.shape}")
    out_data = np.tensordot(w.data, x.data, axes=(0, 0))

    def backward(g: Array) -> None:
        trailing = list(range(1, x.ndim))
        _acc(w, np.tensordot(x.data, g, axes=(trailing, list(range(g.ndim)))))
        _acc(x, np.multiply.outer(w.data, g))

    return _make(out_data, (w, x), backward)


# ---------------------------------------------------------------------------
# stochastic regularization


def dropout(a, rate: float, training: bool, seed: int) -> Tensor:
    """Inverted dropout; identity when not training. Deterministic in seed."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    a = _coerce(a)
    if not training or rate == 0.0:
        return a
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.random(a.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out_data = a.data * keep * scale

    def backward(g: Array) -> None:
        _acc(a, g * keep * scale)

    return _make(out_data, (a,), backward)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed with splitmix64 steps."""
    mask = (1 << 64) - 1
    z = 0x9E3779B97F4A7C15
    for p in parts:
        z = (z ^ (int(p) & mask)) & mask
        z = (z + 0x9E3779B97F4A7C15) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        z = z ^ (z >> 31)
    return z


# ---------------------------------------------------------------------------
# verification


def gradient_check(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                   h: float = 1e-5, samples_per_param: int = 8,
                   seed: int = 0, noise_floor: float = 1e-6) -> float:
    """Compare tape gradients of a scalar f() against central differences.

    Every parameter is probed at sampled coordinates (all of them when the
    parameter is small). Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Coordinates where both derivatives fall below noise_floor (scaled by
    the magnitude of f) are skipped: central differences at h cannot
    resolve a relative error there, and a wrong near-zero analytic value
    would still be caught through the large numeric side.
    """
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"parameter '{name}' does not require grad")
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.size != 1:
            raise EvaluationError(f"checked function returned shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise EvaluationError("checked function returned a non-finite value")
        tape.backward(out)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    rng = np.random.Generator(np.random.PCG64(seed))
    floor = noise_floor * max(1.0, abs(out.item()))
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        ana_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise EvaluationError(f"non-finite value while probing '{name}'")
            numeric = (hi - lo) / (2.0 * h)
            ana = float(ana_flat[i])
            if max(abs(ana), abs(numeric)) < floor:
                continue
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
