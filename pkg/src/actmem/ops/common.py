"""Operators whose stashing is the same in the reference and in-place variants."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ShapeError
from ..tape import Tape, Var, register_backward
from ..tensor import Role, Tensor, sum_to_shape


def _wrap(arr, like: np.ndarray) -> Tensor:
    return Tensor.wrap(np.asarray(arr, dtype=like.dtype))


def linear_forward(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as ``[in, out]``."""
    X, W = x.data, w.data
    if W.ndim != 2 or X.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {X.shape} incompatible with weight {W.shape}")
    y = X @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        y = y + b.data
    return _wrap(y, X)


def linear_backward(g, x: Tensor, w: Tensor, with_bias: bool = True):
    """Return ``(dx, dw, db)``; ``db`` is None when the layer has no bias."""
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    X, W = x.data, w.data
    dx = G @ W.T
    dw = X.reshape(-1, X.shape[-1]).T @ G.reshape(-1, G.shape[-1])
    db = G.reshape(-1, G.shape[-1]).sum(axis=0) if with_bias else None
    return (_wrap(dx, X), _wrap(dw, X), None if db is None else _wrap(db, X))


@register_backward("linear")
def _linear_rule(g, stashes, attrs):
    (x,) = stashes
    dx, dw, db = linear_backward(g, x, attrs["weight"], attrs["has_bias"])
    grads = [dx.data, dw.data]
    if attrs["has_bias"]:
        grads.append(db.data)
    return tuple(grads)


def linear(tape: Tape, x: Var, w: Var, b: Optional[Var] = None, name: Optional[str] = None) -> Var:
    y = linear_forward(x.value, w.value, None if b is None else b.value)
    inputs = [x, w] + ([b] if b is not None else [])
    attrs = {"weight": w.value, "has_bias": b is not None}
    return tape.record("linear", inputs, y, [tape.stash(x)], "linear", attrs, name)


@register_backward("matmul")
def _matmul_rule(g, stashes, attrs):
    a, b = (s.data for s in stashes)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return (sum_to_shape(ga, a.shape), sum_to_shape(gb, b.shape))


def matmul(tape: Tape, a: Var, b: Var, name: Optional[str] = None) -> Var:
    A, B = a.value.data, b.value.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {A.shape} x {B.shape}")
    out = _wrap(np.matmul(A, B), A)
    return tape.record("matmul", [a, b], out, [tape.stash(a), tape.stash(b)], "matmul", {}, name)


@register_backward("attn_scores")
def _scores_rule(g, stashes, attrs):
    q, k = (s.data for s in stashes)
    c = attrs["scale"]
    gq = np.matmul(g, k) * c
    gk = np.matmul(np.swapaxes(g, -1, -2), q) * c
    return (gq, gk)


def attention_scores(tape: Tape, q: Var, k: Var, scale: float, name: Optional[str] = None) -> Var:
    """``scale * q @ k^T`` over the trailing two axes."""
    Q, K = q.value.data, k.value.data
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention head dimensions differ: {Q.shape} vs {K.shape}")
    if Q.shape[:-2] != K.shape[:-2]:
        raise ShapeError(f"attention batch dimensions differ: {Q.shape} vs {K.shape}")
    c = Q.dtype.type(scale)
    out = _wrap(np.matmul(Q, np.swapaxes(K, -1, -2)) * c, Q)
    return tape.record("attn_scores", [q, k], out, [tape.stash(q), tape.stash(k)],
                       "attn_scores", {"scale": c}, name)


@register_backward("split_heads")
def _split_rule(g, stashes, attrs):
    b, a, s, d = g.shape
    return (np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b, s, a * d),)


def split_heads(tape: Tape, x: Var, heads: int, name: Optional[str] = None) -> Var:
    """``[B, S, H] -> [B, A, S, H/A]``."""
    X = x.value.data
    if X.ndim != 3 or X.shape[-1] % heads:
        raise ShapeError(f"cannot split {X.shape} into {heads} heads")
    b, s, h = X.shape
    out = np.ascontiguousarray(X.reshape(b, s, heads, h // heads).transpose(0, 2, 1, 3))
    return tape.record("split_heads", [x], Tensor.wrap(out), [], "split_heads", {}, name)


@register_backward("merge_heads")
def _merge_rule(g, stashes, attrs):
    b, s, h = g.shape
    a = attrs["heads"]
    return (np.ascontiguousarray(g.reshape(b, s, a, h // a).transpose(0, 2, 1, 3)),)


def merge_heads(tape: Tape, x: Var, name: Optional[str] = None) -> Var:
    """``[B, A, S, d] -> [B, S, A*d]``."""
    X = x.value.data
    b, a, s, d = X.shape
    out = np.ascontiguousarray(X.transpose(0, 2, 1, 3)).reshape(b, s, a * d)
    return tape.record("merge_heads", [x], Tensor.wrap(out), [], "merge_heads", {"heads": a}, name)


@register_backward("mse")
def _mse_rule(g, stashes, attrs):
    (y,) = stashes
    diff = y.data - attrs["target"]
    return (g * diff * y.dtype.type(2.0 / diff.size),)


def mse_loss(tape: Tape, y: Var, target: np.ndarray, name: str = "loss") -> Var:
    """Mean squared error against a constant target; retains ``y``."""
    target = np.asarray(target, dtype=y.value.dtype)
    if target.shape != y.shape:
        raise ShapeError(f"target {target.shape} does not match prediction {y.shape}")
    diff = y.value.data - target
    loss = Tensor.wrap(np.asarray(np.mean(diff * diff), dtype=y.value.dtype))
    return tape.record("mse", [y], loss, [tape.stash(y, Role.SHARED)], "mse",
                       {"target": target}, name)


@register_backward("weighted_sum")
def _wsum_rule(g, stashes, attrs):
    return (g * attrs["weights"],)


def weighted_sum(tape: Tape, y: Var, weights: np.ndarray, name: str = "loss") -> Var:
    """``sum(y * weights)`` for a constant ``weights``; retains nothing."""
    w = np.asarray(weights, dtype=y.value.dtype)
    if w.shape != y.shape:
        raise ShapeError(f"weights {w.shape} do not match {y.shape}")
    loss = Tensor.wrap(np.asarray(np.sum(y.value.data * w), dtype=y.value.dtype))
    return tape.record("weighted_sum", [y], loss, [], "weighted_sum", {"weights": w}, name)
