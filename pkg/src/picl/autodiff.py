"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operations the transformer and its losses need. Graphs are built
eagerly per forward pass; ``backward`` walks the tape in reverse
topological order with a fixed accumulation order, so gradients are
deterministic bit for bit.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "backward"]

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires", "_parents", "_backward")

    def __init__(self, data, requires: bool = False, parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires = requires or any(p.requires for p in parents)
        self._parents = parents if self.requires else ()
        self._backward = backward_fn if self.requires else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        # grads are never mutated in place, so storing a reference is safe
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)

        def bwd(g, a=self, b=other):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor(self.data + other.data, parents=(self, other), backward_fn=bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g, a=self):
            a._accumulate(-g)

        return Tensor(-self.data, parents=(self,), backward_fn=bwd)

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)

        def bwd(g, a=self, b=other):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor(self.data - other.data, parents=(self, other), backward_fn=bwd)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)

        def bwd(g, a=self, b=other):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor(self.data * other.data, parents=(self, other), backward_fn=bwd)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)

        def bwd(g, a=self, b=other):
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor(self.data @ other.data, parents=(self, other), backward_fn=bwd)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        old = self.shape

        def bwd(g, a=self):
            a._accumulate(g.reshape(old))

        return Tensor(self.data.reshape(*shape), parents=(self,), backward_fn=bwd)

    def transpose(self, axes):
        inverse = np.argsort(axes)

        def bwd(g, a=self):
            a._accumulate(g.transpose(inverse))

        return Tensor(self.data.transpose(axes), parents=(self,), backward_fn=bwd)

    def slice_axis(self, axis: int, start: int, stop: int):
        index = [slice(None)] * self.data.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)

        def bwd(g, a=self):
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

        return Tensor(self.data[index], parents=(self,), backward_fn=bwd)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,), backward_fn=bwd)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int):
        """Max over one axis; gradient flows to the first argmax."""
        idx = np.argmax(self.data, axis=axis)

        def bwd(g, a=self, axis=axis, idx=idx):
            full = np.zeros_like(a.data)
            np.put_along_axis(
                full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
            )
            a._accumulate(full)

        return Tensor(np.max(self.data, axis=axis), parents=(self,), backward_fn=bwd)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# free functions
# ---------------------------------------------------------------------------

def concat(tensors, axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=tuple(tensors), axis=axis, offsets=offsets):
        index = [slice(None)] * g.ndim
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            index[axis] = slice(start, stop)
            t._accumulate(g[tuple(index)])

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward_fn=bwd,
    )


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g, a=x, out=out):
        a._accumulate(g * (out > 0.0))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + _GELU_A * x2))
    out = 0.5 * x.data * (1.0 + t)

    def bwd(g, a=x, t=t, x2=x2):
        d = 0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t * t) * _GELU_C * (
            1.0 + 3.0 * _GELU_A * x2
        )
        a._accumulate(g * d)

    return Tensor(out, parents=(x,), backward_fn=bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=x, s=s, axis=axis):
        inner = (g * s).sum(axis=axis, keepdims=True)
        a._accumulate(s * (g - inner))

    return Tensor(s, parents=(x,), backward_fn=bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.data * xhat + beta.data

    def bwd(g, a=x, gam=gamma, bet=beta, xhat=xhat, inv=inv):
        gam._accumulate(_unbroadcast(g * xhat, gam.shape))
        bet._accumulate(_unbroadcast(g, bet.shape))
        gx = g * gam.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (gx - m1 - xhat * m2))

    return Tensor(out, parents=(x, gamma, beta), backward_fn=bwd)


def index_select(t: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """np.take along one axis; backward scatter-adds."""
    idx = np.asarray(idx)

    def bwd(g, a=t, idx=idx, axis=axis):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        a._accumulate(full)

    return Tensor(np.take(t.data, idx, axis=axis), parents=(t,), backward_fn=bwd)


def gather_tokens(t: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch token gather: t (B, T, ...), idx (B, K) -> (B, K, ...)."""
    batch = np.arange(t.shape[0])[:, None]

    def bwd(g, a=t, idx=idx, batch=batch):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch, idx), g)
        a._accumulate(full)

    return Tensor(t.data[batch, idx], parents=(t,), backward_fn=bwd)


def scatter_tokens(src: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Inverse of gather_tokens: place (B, K, ...) rows at idx in (B, length, ...).

    Unwritten positions are zero. Indices must be distinct per batch row.
    """
    batch = np.arange(src.shape[0])[:, None]
    out = np.zeros((src.shape[0], length) + src.shape[2:], dtype=src.dtype)
    out[batch, idx] = src.data

    def bwd(g, a=src, idx=idx, batch=batch):
        a._accumulate(g[batch, idx])

    return Tensor(out, parents=(src,), backward_fn=bwd)


def chamfer_patches(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean over patches of the squared symmetric Chamfer distance.

    pred: (..., M, 3) predicted patch points; gt: same-shape array. The
    result averages the per-patch Chamfer values over all leading axes.
    """
    gt = np.asarray(gt, dtype=pred.dtype)
    p = pred.data.reshape(-1, pred.shape[-2], 3)
    g = gt.reshape(-1, gt.shape[-2], 3)
    n_patch, m_p, _ = p.shape
    m_g = g.shape[1]
    diff = p[:, :, None, :] - g[:, None, :, :]
    d2 = np.einsum("pijk,pijk->pij", diff, diff)
    j_star = np.argmin(d2, axis=2)
    i_star = np.argmin(d2, axis=1)
    rows = np.arange(n_patch)[:, None]
    term1 = d2[rows, np.arange(m_p)[None, :], j_star].mean(axis=1)
    term2 = d2[rows, i_star, np.arange(m_g)[None, :]].mean(axis=1)
    value = (term1 + term2).mean()

    def bwd(grad, a=pred, p=p, g=g, j_star=j_star, i_star=i_star):
        scale = float(grad) / n_patch
        gp = (2.0 * scale / m_p) * (p - g[rows, j_star])
        matched = p[rows, i_star]
        np.add.at(gp, (rows, i_star), (2.0 * scale / m_g) * (matched - g))
        a._accumulate(gp.reshape(a.shape).astype(a.dtype, copy=False))

    return Tensor(np.asarray(value, dtype=pred.dtype), parents=(pred,), backward_fn=bwd)


def smooth_l1_elems(pred: Tensor, gt: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over all index-aligned coordinates."""
    gt = np.asarray(gt, dtype=pred.dtype)
    r = pred.data - gt
    absr = np.abs(r)
    inner = absr < beta
    vals = np.where(inner, 0.5 * r * r / beta, absr - 0.5 * beta)
    value = vals.mean()

    def bwd(grad, a=pred, r=r, inner=inner):
        d = np.where(inner, r / beta, np.sign(r)) * (float(grad) / r.size)
        a._accumulate(d.astype(a.dtype, copy=False))

    return Tensor(np.asarray(value, dtype=pred.dtype), parents=(pred,), backward_fn=bwd)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires or loss._backward is None and not loss._parents:
        raise ValueError("no recorded graph: forward ran without gradient recording")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires and id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
