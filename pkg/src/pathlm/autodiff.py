"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are built eagerly by the op functions below; ``backward`` walks the
graph in reverse topological order and accumulates gradients into leaves.
All math is float64 so that repeated runs are bit-identical. Ops that see no
differentiable input return detached leaves, which keeps forward-only
inference free of graph bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tree import ParamTree


class DetachedGraphError(RuntimeError):
    """Raised when a loss node does not reach any of the given parameters."""


class Tensor:
    """A node in the computation graph. data is always a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        name: str | None = None,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def leaf(data: np.ndarray, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def wrap_params(params: ParamTree) -> dict[str, Tensor]:
    """Wrap a ParamTree as named differentiable leaves."""
    return {k: leaf(v, requires_grad=True, name=k) for k, v in params.items()}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else leaf(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _node(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics; leading batch dims of either side may broadcast."""
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(out, (table,), vjp)


# ---------------------------------------------------------------------------
# fused network ops
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        g_bias = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return gx, g_gain, g_bias

    return _node(out, (x, gain, bias), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximate gelu (smooth, so finite differences stay accurate)."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * (x2 * xd)))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = (3.0 * _GELU_A) * x2
        du += 1.0
        du *= _GELU_C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        du *= sech2  # (1 - t^2) * c (1 + 3a x^2)
        du *= xd
        du += 1.0 + t
        du *= 0.5  # full dy/dx
        du *= g
        return (du,)

    return _node(out, (x,), vjp)


def masked_softmax(scores: Tensor, additive_mask: np.ndarray) -> Tensor:
    """softmax(scores + additive_mask) over the last axis; mask is a constant."""
    z = scores.data + additive_mask
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)

    def vjp(g):
        gp = g * p
        gp -= p * gp.sum(axis=-1, keepdims=True)
        return (gp,)

    return _node(p, (scores,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of targets over mask-selected positions.

    logits: [..., V]; targets: int array matching the leading shape; mask:
    boolean array matching targets. Raises if no position is selected.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.data.shape[:-1] or mask.shape != targets.shape:
        raise ValueError("targets/mask shape must match logits leading shape")
    n_sel = int(mask.sum())
    if n_sel == 0:
        raise ValueError("mask selects no positions")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n_sel

    def vjp(g):
        p = np.exp(logp)
        gl = p.copy()
        np.put_along_axis(
            gl, targets[..., None], np.take_along_axis(gl, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        gl *= mask[..., None]
        gl *= float(g) / n_sel
        return (gl,)

    return _node(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf."""
    if not loss.requires_grad:
        raise DetachedGraphError("loss does not depend on any differentiable leaf")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.full_like(loss.data, seed)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = pg


def param_grads(loss: Tensor, ptensors: dict[str, Tensor]) -> ParamTree:
    """Run backward and collect per-parameter gradients as a congruent tree.

    Parameters the loss never touched get zero gradients; if the loss touches
    none of them the graph is considered detached and an error is raised.
    """
    backward(loss)
    if not any(t.grad is not None for t in ptensors.values()):
        raise DetachedGraphError("loss is not connected to the given parameters")
    return {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in ptensors.items()
    }
