"""In-place and recomputing operators: drop-in twins of :mod:`actmem.ops.reference`.

* GELU keeps its output plus a one-byte branch mask and differentiates from the
  output through a fitted table.
* LayerNorm keeps its output plus one reciprocal standard deviation per row.
* Softmax keeps only its output.
* Attention dropout keeps only its mask; its output is rebuilt in backward from
  the retained softmax output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..errors import ConfigurationError, ParameterError, ShapeError, VerificationError
from ..gelu_fit import GeluMinimum, GeluPolyTable, locate_minimum
from ..gelu_math import gelu, gelu_prime
from ..tape import LazyStash, Tape, Var, register_backward
from ..tensor import BoolMask, Role, Tensor
from .common import attention_scores, matmul
from .reference import (
    DropoutSpec,
    LayerNormParams,
    _check_qkv,
    apply_dropout,
    layernorm_forward_stats,
    layernorm_grads_from_xhat,
    make_dropout_mask,
    softmax_backward,
    softmax_ref_forward,
)

GAMMA_MIN = 1e-12


def gelu_minimum() -> GeluMinimum:
    return locate_minimum()


# -- generic in-place elementwise framework ----------------------------------


@dataclass(frozen=True)
class InPlaceElementwiseSpec:
    """Describes an elementwise op whose gradient is recoverable from its output.

    ``grad_from_output(y, m)`` must equal ``derivative(x)`` whenever
    ``y = forward(x)`` and ``m = indicator(x)``.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    indicator: Callable[[np.ndarray], np.ndarray]
    grad_from_output: Callable[[np.ndarray, np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    domain: tuple = (-10.0, 10.0)
    tolerance: float = 1e-10
    mask_bytes: int = 1
    name: str = "elementwise"


class InPlaceElementwise:
    """Verified forward/backward pair built by :func:`make_inplace_elementwise`."""

    def __init__(self, spec: InPlaceElementwiseSpec, max_error: float):
        self.spec = spec
        self.max_error = max_error

    def forward(self, x: Tensor):
        X = x.data
        y = np.asarray(self.spec.forward(X), dtype=X.dtype)
        m = BoolMask(np.asarray(self.spec.indicator(X), dtype=bool))
        return Tensor.wrap(y), m

    def backward(self, g, y: Tensor, m: BoolMask) -> Tensor:
        G = g.data if isinstance(g, Tensor) else np.asarray(g)
        if G.shape != y.shape or m.shape != y.shape:
            raise ShapeError(f"gradient {G.shape}, output {y.shape} and mask {m.shape} must match")
        h = self.spec.grad_from_output(y.data, m.bits)
        return Tensor.wrap(np.asarray(G * h, dtype=y.dtype))


def make_inplace_elementwise(spec: InPlaceElementwiseSpec, samples: int = 100_001) -> InPlaceElementwise:
    """Check the output-side gradient rule on a dense grid, then build the op pair."""
    x = np.linspace(spec.domain[0], spec.domain[1], samples)
    y = spec.forward(x)
    m = np.asarray(spec.indicator(x), dtype=bool)
    err = np.abs(np.asarray(spec.grad_from_output(y, m), dtype=np.float64) - spec.derivative(x))
    i = int(np.argmax(err))
    if not np.isfinite(err[i]) or err[i] > spec.tolerance:
        raise VerificationError(
            f"{spec.name}: gradient-from-output rule misses by {err[i]:.3e} at x={x[i]!r} "
            f"(tolerance {spec.tolerance:g})", max_error=float(err[i]), worst_point=float(x[i]))
    return InPlaceElementwise(spec, float(err[i]))


def _require_verified(table: Optional[GeluPolyTable]) -> GeluPolyTable:
    if table is None:
        raise ConfigurationError("in-place GELU backward needs a polynomial table")
    if not table.is_verified:
        raise ConfigurationError("polynomial table has not been verified")
    return table


def gelu_inplace_spec(table: GeluPolyTable) -> InPlaceElementwiseSpec:
    table = _require_verified(table)
    x_star = table.x_star
    return InPlaceElementwiseSpec(
        forward=gelu,
        indicator=lambda x: x > x_star,
        grad_from_output=table.evaluate,
        derivative=gelu_prime,
        tolerance=table.tolerance,
        name="gelu",
    )


# -- GELU --------------------------------------------------------------------


def gelu_ip_forward(x: Tensor):
    """Return ``(GELU(x), x > x_star)``."""
    X = x.data
    return Tensor.wrap(gelu(X)), BoolMask(X > gelu_minimum().x_star)


def gelu_ip_backward(g, y: Tensor, m: BoolMask, table: Optional[GeluPolyTable]) -> Tensor:
    """``g * h(y, m)`` with ``h`` read from the fitted table."""
    table = _require_verified(table)
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    if G.shape != y.shape or m.shape != y.shape:
        raise ShapeError(f"gradient {G.shape}, output {y.shape} and mask {m.shape} must match")
    return Tensor.wrap(np.asarray(G * table.evaluate(y.data, m.bits), dtype=y.dtype))


@register_backward("elementwise_ip")
def _elementwise_rule(g, stashes, attrs):
    y, m = stashes
    return (attrs["op"].backward(g, y, m).data,)


def elementwise_ip(tape: Tape, x: Var, op: InPlaceElementwise, name: Optional[str] = None,
                   mask_name: Optional[str] = None) -> Var:
    """Run ``op`` keeping only its output (shared downstream) and its branch mask."""
    y, m = op.forward(x.value)
    if name is not None:
        y.tag = name
    m.tag = mask_name or (f"{name}.mask" if name else f"{op.spec.name}.mask")
    y_stash = LazyStash.materialized(y, Role.SHARED)
    return tape.record(op.spec.name, [x], y, [y_stash, LazyStash.materialized(m, Role.OP_OWN)],
                       "elementwise_ip", {"op": op}, name, output_stash=y_stash)


def gelu_op(table: GeluPolyTable) -> InPlaceElementwise:
    """In-place GELU as an instance of the elementwise framework."""
    return make_inplace_elementwise(gelu_inplace_spec(table), samples=20_001)


def gelu_ip(tape: Tape, x: Var, table: GeluPolyTable, name: Optional[str] = None,
            mask_name: Optional[str] = None) -> Var:
    return elementwise_ip(tape, x, _cached_gelu_op(table), name, mask_name)


_GELU_OPS: dict = {}


def _cached_gelu_op(table: GeluPolyTable) -> InPlaceElementwise:
    key = id(table)
    hit = _GELU_OPS.get(key)
    if hit is None or hit[0] is not table:
        hit = (table, gelu_op(table))
        _GELU_OPS[key] = hit
    return hit[1]


# -- LayerNorm ---------------------------------------------------------------


@dataclass(frozen=True)
class LnStats:
    rstd: Tensor


def _check_gamma(params: LayerNormParams):
    small = np.abs(params.gamma.data) < GAMMA_MIN
    if small.any():
        j = int(np.flatnonzero(small)[0])
        raise ParameterError(
            f"in-place LayerNorm needs |gamma| >= {GAMMA_MIN:g}; gamma[{j}] = {params.gamma.data[j]!r}")


def layernorm_ip_forward(x: Tensor, params: LayerNormParams):
    """Same output as the reference; returns ``(y, LnStats)``."""
    _check_gamma(params)
    y, _, rstd = layernorm_forward_stats(x, params)
    return Tensor.wrap(y), LnStats(Tensor.wrap(np.ascontiguousarray(rstd)))


def layernorm_ip_backward(g, y: Tensor, stats: LnStats, params: LayerNormParams):
    """Gradients from the output: the normalized input is ``(y - beta) / gamma``."""
    G = g.data if isinstance(g, Tensor) else np.asarray(g)
    Y = y.data
    if G.shape != Y.shape:
        raise ShapeError(f"gradient {G.shape} does not match output {Y.shape}")
    gamma = params.gamma.data.astype(Y.dtype, copy=False)
    beta = params.beta.data.astype(Y.dtype, copy=False)
    xhat = (Y - beta) / gamma
    dx, dgamma, dbeta = layernorm_grads_from_xhat(G, xhat, stats.rstd.data, gamma)
    return Tensor.wrap(dx), Tensor.wrap(dgamma), Tensor.wrap(dbeta)


@register_backward("layernorm_ip")
def _layernorm_ip_rule(g, stashes, attrs):
    y, rstd = stashes
    dx, dgamma, dbeta = layernorm_ip_backward(g, y, LnStats(rstd), attrs["params"])
    return (dx.data, dgamma.data, dbeta.data)


def layernorm_ip(tape: Tape, x: Var, gamma: Var, beta: Var, epsilon: float = 1e-5,
                 name: Optional[str] = None, stats_name: Optional[str] = None) -> Var:
    """LayerNorm that retains its output and one ``rstd`` per row."""
    params = LayerNormParams(gamma.value, beta.value, epsilon)
    y, stats = layernorm_ip_forward(x.value, params)
    if name is not None:
        y.tag = name
    stats.rstd.tag = stats_name or (f"{name}.rstd" if name else "layernorm.rstd")
    y_stash = LazyStash.materialized(y, Role.SHARED)
    return tape.record("layernorm", [x, gamma, beta], y,
                       [y_stash, LazyStash.materialized(stats.rstd, Role.STATISTIC)],
                       "layernorm_ip", {"params": params}, name, output_stash=y_stash)


# -- softmax -----------------------------------------------------------------


def softmax_ip(z: Tensor) -> Tensor:
    return softmax_ref_forward(z)


def softmax_ip_backward(g, y: Tensor) -> Tensor:
    return softmax_backward(g, y)


def softmax_out(tape: Tape, z: Var, name: Optional[str] = None) -> Var:
    """Softmax that retains only its output."""
    y = softmax_ip(z.value)
    if name is not None:
        y.tag = name
    y_stash = LazyStash.materialized(y, Role.OP_OWN)
    return tape.record("softmax", [z], y, [y_stash], "softmax", {}, name, output_stash=y_stash)


# -- dropout with recomputation ----------------------------------------------


def dropout_recompute_forward(tape: Tape, x: Var, spec: DropoutSpec, name: Optional[str] = None,
                              mask_name: Optional[str] = None) -> Var:
    """Dropout that retains only its mask.

    Consumers that retain the output receive a recomputable stash built from
    the mask and the already-retained input, so the output costs no bytes.
    """
    x_stash = tape.retained(x)
    if x_stash is None:
        raise ConfigurationError(
            f"dropout recomputation needs its input {x.name!r} to be retained upstream")
    y, mask = _dropout_apply(x.value, spec)
    mask.tag = mask_name or (f"{name}.mask" if name else "dropout.mask")
    if name is not None:
        y.tag = name
    mask_stash = LazyStash.materialized(mask, Role.OP_OWN)
    lazy = LazyStash.recomputable("dropout", [x_stash, mask_stash], {"p": spec.p},
                                  role=Role.SHARED, tag=name)
    return tape.record("dropout", [x], y, [mask_stash], "dropout", {"p": spec.p}, name,
                       output_stash=lazy)


def _dropout_apply(x: Tensor, spec: DropoutSpec):
    mask = make_dropout_mask(spec, x.shape)
    return Tensor.wrap(apply_dropout(x.data, mask.bits, spec.p)), mask


def sdpa_tempo(tape: Tape, q: Var, k: Var, v: Var, spec: DropoutSpec, scale: Optional[float] = None,
               name: str = "attn") -> Var:
    """Attention whose ``[.., S, S]`` storage is one probability map plus one mask."""
    _check_qkv(q, k, v)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = attention_scores(tape, q, k, scale, name=f"{name}.scores")
    probs = softmax_out(tape, scores, name=f"{name}.probs")
    dropped = dropout_recompute_forward(tape, probs, spec, name=f"{name}.dropout.out",
                                        mask_name=f"{name}.dropout.mask")
    return matmul(tape, dropped, v, name=f"{name}.context_heads")
