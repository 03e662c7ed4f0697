"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what a small decoder stack needs: elementwise
arithmetic with numpy-style broadcasting, 2-D matmul, plain and causal row
softmax, last-dim RMS normalization, GELU/SiLU, embedding lookup, row and
column concatenation/slicing, a rotary position twist, and a masked
next-token cross-entropy head.

Each op records a backward closure on its output node; ``Tensor.backward``
replays the closures in reverse topological order. Ops never mutate their
inputs, and every reduction runs in a fixed order, so forward results are
bitwise reproducible for identical inputs. A tensor created with
``requires_grad=False`` never accumulates a gradient; outputs require a
gradient exactly when some input does.
"""
from __future__ import annotations

import numbers

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """An operand's shape violates the operation's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable grad-requiring leaf.

        No-op when the value is disconnected from any grad-requiring tensor.
        """
        if self.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._add_grad(np.ones((), dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, numbers.Number):
        return Tensor(float(value))
    raise TypeError(f"cannot operate on {type(value).__name__}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._add_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._add_grad(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._add_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._add_grad(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._add_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._add_grad(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._add_grad(-g)

    return _result(-a.data, (a,), bw)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._add_grad(g @ b.data.T)
        if b.requires_grad:
            b._add_grad(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def bw(g):
        a._add_grad(np.ascontiguousarray(g.T))

    return _result(np.ascontiguousarray(a.data.T), (a,), bw)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        a._add_grad(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")

    def bw(g):
        a._add_grad(np.full_like(a.data, float(g) / n))

    return _result(np.asarray(a.data.mean()), (a,), bw)


# -- activations -----------------------------------------------------------


def _std_normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    # d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
    return _std_normal_cdf(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = a.data

    def bw(g):
        a._add_grad(g * _gelu_grad(x))

    return _result(x * _std_normal_cdf(x), (a,), bw)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data

    def bw(g):
        a._add_grad(g * _silu_grad(x))

    return _result(x * expit(x), (a,), bw)


# -- normalization -----------------------------------------------------------


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each last-dim vector v to gain * v / sqrt(mean(v^2) + eps)."""
    if gain.ndim != 1 or gain.shape[0] != a.shape[-1]:
        raise ShapeError(
            f"rms_norm gain shape {gain.shape} does not match last dim of {a.shape}"
        )
    if eps < 0:
        raise ValueError(f"rms_norm eps must be >= 0, got {eps}")
    x = a.data
    d = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    normed = x / r

    def bw(g):
        if a.requires_grad:
            u = g * gain.data
            proj = np.sum(u * x, axis=-1, keepdims=True)
            a._add_grad(u / r - x * proj / (d * r**3))
        if gain.requires_grad:
            dg = g * normed
            gain._add_grad(dg.reshape(-1, d).sum(axis=0))

    return _result(gain.data * normed, (a, gain), bw)


# -- softmax ------------------------------------------------------------------


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last dimension of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"row_softmax expects a 2-D tensor, got shape {a.shape}")
    z = a.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._add_grad(_softmax_backward(p, g))

    return _result(p, (a,), bw)


def causal_softmax(a: Tensor) -> Tensor:
    """Row softmax of a square score matrix where row i spans columns 0..i.

    Entries above the diagonal get exactly zero weight and receive zero
    gradient.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"causal_softmax expects a square matrix, got shape {a.shape}")
    n = a.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))
    z = np.where(mask, a.data, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._add_grad(_softmax_backward(p, g))

    return _result(p, (a,), bw)


# -- gather / concat / slice ---------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got shape {table.shape}")
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("ids must be a 1-D integer array")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise ValueError(f"token id {bad} outside vocabulary of size {vocab}")

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        table._add_grad(acc)

    return _result(table.data[ids].copy(), (table,), bw)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    cols = {p.shape[1] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(f"concat_rows needs 2-D tensors with equal widths, got "
                         f"{[p.shape for p in parts]}")
    counts = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def bw(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                part._add_grad(g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    rows = {p.shape[0] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(rows) != 1:
        raise ShapeError(f"concat_cols needs 2-D tensors with equal heights, got "
                         f"{[p.shape for p in parts]}")
    counts = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + counts)

    def bw(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                part._add_grad(np.ascontiguousarray(g[:, lo:hi]))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got shape {a.shape}")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[:, start:stop] = g
        a._add_grad(acc)

    return _result(np.ascontiguousarray(a.data[:, start:stop]), (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_rows expects a 2-D tensor, got shape {a.shape}")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[start:stop] = g
        a._add_grad(acc)

    return _result(np.ascontiguousarray(a.data[start:stop]), (a,), bw)


# -- rotary position twist -----------------------------------------------------


def rotary(a: Tensor, base: float = 10000.0, offset: int = 0) -> Tensor:
    """Rotate consecutive feature pairs of row p by angle p * base^(-2i/d).

    Rows are positions ``offset .. offset+S-1``. The underlying map is a
    blockwise 2-D rotation, so the backward pass is the rotation by the
    negated angles.
    """
    if a.ndim != 2 or a.shape[1] % 2:
        raise ShapeError(f"rotary expects a 2-D tensor with even width, got {a.shape}")
    seq, d = a.shape
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = np.outer(np.arange(offset, offset + seq, dtype=np.float64), inv_freq)
    c, s = np.cos(ang), np.sin(ang)
    x1, x2 = a.data[:, 0::2], a.data[:, 1::2]
    out = np.empty_like(a.data)
    out[:, 0::2] = x1 * c - x2 * s
    out[:, 1::2] = x1 * s + x2 * c

    def bw(g):
        g1, g2 = g[:, 0::2], g[:, 1::2]
        acc = np.empty_like(a.data)
        acc[:, 0::2] = g1 * c + g2 * s
        acc[:, 1::2] = -g1 * s + g2 * c
        a._add_grad(acc)

    return _result(out, (a,), bw)


# -- loss -----------------------------------------------------------------------


def cross_entropy_rows(logits: Tensor, targets: np.ndarray, row_mask: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over the rows selected by ``row_mask``.

    ``targets[r]`` is the expected token id at every masked row r; unmasked
    rows contribute nothing and receive zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_rows expects 2-D logits, got {logits.shape}")
    targets = np.asarray(targets)
    row_mask = np.asarray(row_mask, dtype=bool)
    rows, vocab = logits.shape
    if targets.shape != (rows,) or row_mask.shape != (rows,):
        raise ShapeError(
            f"targets/mask shapes {targets.shape}/{row_mask.shape} do not match "
            f"{rows} logit rows"
        )
    idx = np.where(row_mask)[0]
    if idx.size == 0:
        raise ValueError("cross_entropy_rows: no active rows")
    tgt = targets[idx]
    if tgt.min() < 0 or tgt.max() >= vocab:
        bad = int(tgt[(tgt < 0) | (tgt >= vocab)][0])
        raise ValueError(f"target id {bad} outside vocabulary of size {vocab}")
    z = logits.data[idx]
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(idx.size), tgt].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(idx.size), tgt] -= 1.0
        acc = np.zeros_like(logits.data)
        acc[idx] = d * (float(g) / idx.size)
        logits._add_grad(acc)

    return _result(np.asarray(loss), (logits,), bw)
