"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the generator network needs are provided.  The graph
is recorded dynamically on every forward pass; ``Tensor.backward`` walks
it in reverse topological order.  Leaf tensors with ``requires_grad``
accumulate into ``.grad`` across calls, so callers zero them between
optimizer steps.

Layouts: sequences are ``[T, C]`` or batched ``[B, T, C]``; dense inputs
are ``[N]`` or ``[B, N]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate d(self)/d(leaf) to every reachable leaf needing gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _result(data, parents, backward):
    parents = tuple(parents)
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _check_same(x: Tensor, y: Tensor, op: str):
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


# ------------------------------------------------------------ elementwise

def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "add")
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "mul")
    return _result(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, so a diverged upstream stays visible in the loss
    return _result(np.maximum(x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# ------------------------------------------------------------ structural

def flatten(x: Tensor) -> Tensor:
    """Row-major flatten; a leading batch axis is kept when ``x`` is 3-D."""
    shape = x.shape
    new = (shape[0], -1) if x.data.ndim == 3 else (-1,)
    return _result(x.data.reshape(new), (x,), lambda g: (g.reshape(shape),))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for ``x`` of shape [N] or [B, N]."""
    n = x.shape[-1]
    if w.data.ndim != 2 or w.shape[0] != n or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        x2 = x.data.reshape(-1, n)
        g2 = g.reshape(-1, w.shape[1])
        return g @ w.data.T, x2.T @ g2, g2.sum(axis=0)

    return _result(out, (x, w, b), backward)


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """Same-length causal dilated convolution.

    ``y[t, o] = b[o] + sum_{k, c} w[k, c, o] * x[t - k*dilation, c]`` with
    zeros for negative time indices.
    """
    if dilation < 1:
        raise ShapeError("dilation must be >= 1")
    xd = x.data
    unbatched = xd.ndim == 2
    if unbatched:
        xd = xd[None]
    if xd.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d_causal: x {x.shape}, w {w.shape}")
    B, T, cin = xd.shape
    K, wcin, cout = w.shape
    if wcin != cin or b.shape != (cout,):
        raise ShapeError(f"conv1d_causal: x {x.shape}, w {w.shape}, b {b.shape}")
    pad = (K - 1) * dilation
    w2 = w.data.reshape(K * cin, cout)
    if K == 1:
        cols = xd.reshape(B * T, cin)
    else:
        xp = np.concatenate([np.zeros((B, pad, cin), dtype=xd.dtype), xd], axis=1)
        cols = np.stack([xp[:, pad - k * dilation : pad - k * dilation + T] for k in range(K)], axis=2)
        cols = cols.reshape(B * T, K * cin)
    out = (cols @ w2 + b.data).reshape(B, T, cout)
    if unbatched:
        out = out[0]

    def backward(g):
        g2 = g.reshape(B * T, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w2.T).reshape(B, T, K, cin)
        if K == 1:
            gx = gcols[:, :, 0]
        else:
            gxp = np.zeros((B, T + pad, cin), dtype=g.dtype)
            for k in range(K):
                s = pad - k * dilation
                gxp[:, s : s + T] += gcols[:, :, k]
            gx = gxp[:, pad:]
        if unbatched:
            gx = gx[0]
        return gx, gw, gb

    return _result(out, (x, w, b), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)
    return _result(out, (pred,), lambda g: (g * (2.0 / n) * diff,))


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("adam_step: parameter/gradient/state count mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
