"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model computation in this package is built from the ops here. Each op
computes its result eagerly with numpy and attaches a backward closure to the
output; ``Tensor.backward()`` replays the closures in reverse execution order.
Tensors are immutable once written by an op, and every forward and backward
value is checked for NaN/Inf (a hard error).
"""

from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """A forward or backward pass produced a non-finite value."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    # single-reduction fast path: any NaN/Inf poisons the sum; re-check
    # element-wise to rule out overflow of a legitimately finite sum
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {what}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        # Iterative post-order walk; reversing it gives a valid topological
        # order, so each node's grad is complete before its rule runs.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, -1.0))

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(_check_finite(np.asarray(data, dtype=np.float64), "op output"))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    _check_finite(g, "gradient")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own buffer, the input may be shared
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _from_op(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2D@2D, 3D@2D and 3D@3D operands."""
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _from_op(np.matmul(a.data, b.data), (a, b), backward)


def transpose_last2(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _from_op(np.swapaxes(x.data, -1, -2), (x,), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop] with zero-padded backward."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        _accumulate(x, gx)

    return _from_op(x.data[..., start:stop], (x,), backward)


def concat_last(parts: list[Tensor]) -> Tensor:
    parts = [_coerce(p) for p in parts]
    widths = [p.data.shape[-1] for p in parts]

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[..., offset:offset + w])
            offset += w

    return _from_op(np.concatenate([p.data for p in parts], axis=-1),
                    tuple(parts), backward)


def row_at(x: Tensor, index: int) -> Tensor:
    """Take x[:, index, :] from a (B, L, c) tensor."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, index, :] = g
        _accumulate(x, gx)

    return _from_op(x.data[:, index, :], (x,), backward)


def splice_rows(x: Tensor, start: int, rows: Tensor) -> Tensor:
    """Overwrite x[:, start:start+b, :] with `rows` (b, c), broadcast over batch.

    The replaced slice passes no gradient back into x; `rows` receives the
    batch-summed gradient of the slice.
    """
    b = rows.data.shape[0]

    def backward(g):
        if x.requires_grad:
            gx = g.copy()
            gx[:, start:start + b, :] = 0.0
            _accumulate(x, gx)
        if rows.requires_grad:
            _accumulate(rows, g[:, start:start + b, :].sum(axis=0))

    out = x.data.copy()
    out[:, start:start + b, :] = rows.data
    return _from_op(out, (x, rows), backward)


def embedding(weights: Tensor, ids) -> Tensor:
    """Row lookup weights[ids] with scatter-add backward into the table."""
    ids = np.asarray(ids)
    n_rows = weights.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"embedding id out of range [0, {n_rows})")

    def backward(g):
        gw = np.zeros_like(weights.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weights.data.shape[1]))
        _accumulate(weights, gw)

    return _from_op(weights.data[ids], (weights,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _from_op(np.where(mask, x.data, 0.0), (x,), backward)


def _sigmoid_arr(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_arr(x.data)

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    return _from_op(s, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * e)

    return _from_op(e, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, g / x.data)

    return _from_op(np.log(x.data), (x,), backward)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _from_op(x.data.sum(axis=axis), (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / n, x.data.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape))

    return _from_op(x.data.mean(axis=axis), (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shift-invariant via row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(x, s * (g - dot))

    return _from_op(s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    n = x.data.shape[-1]

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data  # dL/dxhat
            gx = inv_std * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)

    return _from_op(xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    norm_safe = np.maximum(norm, eps)
    out = x.data / norm_safe

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - out * dot) / norm_safe)

    return _from_op(out, (x,), backward)


def diag(x: Tensor) -> Tensor:
    """Diagonal of a square 2D tensor."""
    n = x.data.shape[0]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[np.arange(n), np.arange(n)] = g
        _accumulate(x, gx)

    return _from_op(np.diagonal(x.data).copy(), (x,), backward)


def logsumexp_rows(x: Tensor, exclude_diagonal: bool = False) -> Tensor:
    """Stable log-sum-exp over rows of a 2D tensor.

    With exclude_diagonal the diagonal entry of each row is left out of the
    sum (and receives zero gradient).
    """
    masked = x.data
    if exclude_diagonal:
        masked = masked.copy()
        np.fill_diagonal(masked, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    out = np.log(np.exp(masked - m).sum(axis=-1)) + m[:, 0]

    def backward(g):
        p = np.exp(masked - out[:, None])  # softmax of the masked row
        _accumulate(x, g[:, None] * p)

    return _from_op(out, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Binary cross-entropy fused with the logit for numerical stability.

    Summed over the last axis, averaged over rows. Computed via the
    log-sum-exp form max(z,0) - z*y + log(1 + exp(-|z|)).
    """
    z = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                   dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} != targets shape {y.shape}")
    per_element = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n_rows = z.shape[0] if z.ndim > 1 else 1

    def backward(g):
        _accumulate(logits, g * (_sigmoid_arr(z) - y) / n_rows)

    return _from_op(per_element.sum() / n_rows, (logits,), backward)
