"""Baseline operators that retain what a stock framework retains.

These are the correctness oracles for the in-place operators in
:mod:`actmem.ops.tempo`. Forward math is shared with the in-place twins so the
two variants produce bitwise-identical activations; only stashing differs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ParameterError, ShapeError
from ..gelu_math import gelu, gelu_prime
from ..tape import LazyStash, Tape, Var, register_backward, register_recompute
from ..tensor import BoolMask, Role, Tensor
from .common import attention_scores, linear, linear_backward, linear_forward, matmul

__all__ = [
    "LayerNormParams", "DropoutSpec", "make_dropout_mask",
    "gelu_ref_forward", "gelu_ref_backward",
    "layernorm_ref_forward", "layernorm_ref_backward",
    "softmax_ref_forward", "softmax_backward",
    "dropout_ref_forward", "dropout_backward",
    "linear_forward", "linear_backward",
    "gelu_ref", "layernorm_ref", "softmax_ref", "dropout_ref", "linear", "sdpa_ref",
]


# -- parameter types ---------------------------------------------------------


@dataclass(frozen=True)
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.gamma.data.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ShapeError(f"gamma {self.gamma.shape} and beta {self.beta.shape} must be "
                             "matching vectors")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def identity(cls, m: int, dtype=np.float64, epsilon: float = 1e-5) -> "LayerNormParams":
        return cls(Tensor(np.ones(m), dtype), Tensor(np.zeros(m), dtype), epsilon)


@dataclass(frozen=True)
class DropoutSpec:
    """Drop probability, RNG seed and an optional injected mask.

    Masks come from ``numpy.random.default_rng(seed)`` (PCG64); an injected
    mask overrides generation so paired runs can share bits.
    """

    p: float = 0.1
    seed: int = 0
    injected_mask: Optional[BoolMask] = None

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ParameterError(f"dropout probability must be in [0, 1), got {self.p}")

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.p)


def make_dropout_mask(spec: DropoutSpec, shape) -> BoolMask:
    if spec.injected_mask is not None:
        if tuple(spec.injected_mask.shape) != tuple(shape):
            raise ShapeError(f"injected mask {spec.injected_mask.shape} does not match {shape}")
        return spec.injected_mask
    rng = np.random.default_rng(spec.seed)
    return BoolMask(rng.random(shape) >= spec.p)


# -- pure kernels ------------------------------------------------------------


def gelu_ref_forward(x: Tensor) -> Tensor:
    return Tensor.wrap(gelu(x.data))


def gelu_ref_backward(g, x: Tensor) -> Tensor:
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    if G.shape != x.shape:
        raise ShapeError(f"gradient {G.shape} does not match input {x.shape}")
    return Tensor.wrap(np.asarray(G * gelu_prime(x.data), dtype=x.dtype))


def _ln_params_arrays(params: LayerNormParams, m: int, dtype):
    if params.gamma.shape != (m,):
        raise ShapeError(f"gamma {params.gamma.shape} does not match normalized size {m}")
    return params.gamma.data.astype(dtype, copy=False), params.beta.data.astype(dtype, copy=False)


def layernorm_forward_stats(x: Tensor, params: LayerNormParams):
    """Shared forward math: returns ``(y, mean, rstd)`` arrays over the last axis."""
    X = x.data
    m = X.shape[-1]
    gamma, beta = _ln_params_arrays(params, m, X.dtype)
    mean = X.mean(axis=-1, keepdims=True)
    centered = X - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + X.dtype.type(params.epsilon))
    xhat = centered * rstd
    y = xhat * gamma + beta
    return y, mean[..., 0], rstd[..., 0]


def layernorm_ref_forward(x: Tensor, params: LayerNormParams) -> Tensor:
    y, _, _ = layernorm_forward_stats(x, params)
    return Tensor.wrap(y)


def layernorm_grads_from_xhat(G: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gamma: np.ndarray):
    """Closed-form LayerNorm gradients given the normalized input."""
    m = G.shape[-1]
    lead = tuple(range(G.ndim - 1))
    dgamma = (G * xhat).sum(axis=lead)
    dbeta = G.sum(axis=lead)
    gg = G * gamma
    sum_ggx = (gg * xhat).sum(axis=-1, keepdims=True)
    sum_gg = gg.sum(axis=-1, keepdims=True)
    dx = (gg - sum_ggx * xhat / m - sum_gg / m) * rstd[..., None]
    return dx, dgamma, dbeta


def layernorm_ref_backward(g, x: Tensor, params: LayerNormParams,
                           mean: Optional[Tensor] = None, var: Optional[Tensor] = None):
    """Return ``(dx, dgamma, dbeta)`` from the retained input.

    Row moments are recomputed from ``x`` unless passed in.
    """
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    X = x.data
    if G.shape != X.shape:
        raise ShapeError(f"gradient {G.shape} does not match input {X.shape}")
    gamma, _ = _ln_params_arrays(params, X.shape[-1], X.dtype)
    if mean is None or var is None:
        mu = X.mean(axis=-1, keepdims=True)
        centered = X - mu
        v = (centered * centered).mean(axis=-1, keepdims=True)
    else:
        centered = X - mean.data[..., None]
        v = var.data[..., None]
    rstd = 1.0 / np.sqrt(v + X.dtype.type(params.epsilon))
    xhat = centered * rstd
    dx, dgamma, dbeta = layernorm_grads_from_xhat(G, xhat, rstd[..., 0], gamma)
    return Tensor.wrap(dx), Tensor.wrap(dgamma), Tensor.wrap(dbeta)


def softmax_ref_forward(z: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    Z = z.data
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    return Tensor.wrap(e / e.sum(axis=-1, keepdims=True))


def softmax_backward(g, y: Tensor) -> Tensor:
    """``y * (g - sum(g * y))`` along the last axis; needs only the output."""
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    Y = y.data
    if G.shape != Y.shape:
        raise ShapeError(f"gradient {G.shape} does not match output {Y.shape}")
    return Tensor.wrap(Y * (G - (G * Y).sum(axis=-1, keepdims=True)))


def apply_dropout(x: np.ndarray, bits: np.ndarray, p: float) -> np.ndarray:
    scale = x.dtype.type(1.0 / (1.0 - p))
    return x * bits * scale


def dropout_ref_forward(x: Tensor, spec: DropoutSpec):
    """Return ``(y, mask)`` with ``y = x * mask / (1 - p)``."""
    mask = make_dropout_mask(spec, x.shape)
    return Tensor.wrap(apply_dropout(x.data, mask.bits, spec.p)), mask


def dropout_backward(g, mask: BoolMask, p: float) -> Tensor:
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    return Tensor.wrap(apply_dropout(G, mask.bits, p))


# -- tape bindings -----------------------------------------------------------


@register_backward("gelu_ref")
def _gelu_rule(g, stashes, attrs):
    (x,) = stashes
    return (gelu_ref_backward(g, x).data,)


def gelu_ref(tape: Tape, x: Var, name: Optional[str] = None) -> Var:
    """GELU that retains its input for backward."""
    y = gelu_ref_forward(x.value)
    return tape.record("gelu", [x], y, [tape.stash(x, Role.OP_OWN)], "gelu_ref", {}, name)


@register_backward("layernorm_ref")
def _layernorm_rule(g, stashes, attrs):
    (x,) = stashes
    dx, dgamma, dbeta = layernorm_ref_backward(g, x, attrs["params"])
    return (dx.data, dgamma.data, dbeta.data)


def layernorm_ref(tape: Tape, x: Var, gamma: Var, beta: Var, epsilon: float = 1e-5,
                  name: Optional[str] = None) -> Var:
    """LayerNorm over the last axis that retains its input."""
    params = LayerNormParams(gamma.value, beta.value, epsilon)
    y = layernorm_ref_forward(x.value, params)
    return tape.record("layernorm", [x, gamma, beta], y, [tape.stash(x, Role.OP_OWN)],
                       "layernorm_ref", {"params": params}, name)


@register_backward("softmax")
def _softmax_rule(g, stashes, attrs):
    y = stashes[-1]
    return (softmax_backward(g, y).data,)


def softmax_ref(tape: Tape, z: Var, name: Optional[str] = None) -> Var:
    """Softmax that retains both its input and its output."""
    y = softmax_ref_forward(z.value)
    if name is not None:
        y.tag = name
    z_stash = tape.stash(z, Role.OP_OWN)
    y_stash = LazyStash.materialized(y, Role.OP_OWN)
    return tape.record("softmax", [z], y, [z_stash, y_stash], "softmax", {}, name,
                       output_stash=y_stash)


@register_backward("dropout")
def _dropout_rule(g, stashes, attrs):
    (mask,) = stashes
    return (dropout_backward(g, mask, attrs["p"]).data,)


@register_recompute("dropout")
def _dropout_recompute(sources, params):
    x, mask = sources
    return Tensor.wrap(apply_dropout(x.data, mask.bits, params["p"]))


def dropout_ref(tape: Tape, x: Var, spec: DropoutSpec, name: Optional[str] = None,
                mask_name: Optional[str] = None) -> Var:
    """Dropout that retains its mask; a consumer that retains the output pays for it."""
    y, mask = dropout_ref_forward(x.value, spec)
    mask.tag = mask_name or (f"{name}.mask" if name else "dropout.mask")
    return tape.record("dropout", [x], y, [LazyStash.materialized(mask, Role.OP_OWN)], "dropout",
                       {"p": spec.p}, name)


def sdpa_ref(tape: Tape, q: Var, k: Var, v: Var, spec: DropoutSpec, scale: Optional[float] = None,
             name: str = "attn") -> Var:
    """Scaled dot-product attention from retaining baseline pieces.

    ``q, k, v`` are ``[..., S, d]``; ``scale`` defaults to ``1/sqrt(d)``.
    """
    _check_qkv(q, k, v)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = attention_scores(tape, q, k, scale, name=f"{name}.scores")
    probs = softmax_ref(tape, scores, name=f"{name}.probs")
    dropped = dropout_ref(tape, probs, spec, name=f"{name}.dropout.out",
                          mask_name=f"{name}.dropout.mask")
    return matmul(tape, dropped, v, name=f"{name}.context_heads")


def _check_qkv(q: Var, k: Var, v: Var):
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key head dimensions differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"key/value shapes disagree: {k.shape} vs {v.shape}")
