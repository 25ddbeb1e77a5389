"""Toy encoder layer in reference and in-place variants, plus training and bench loops.

Block order: Q/K/V projections, scaled scores, softmax, dropout, context,
output projection, dropout, residual + LayerNorm, FFN (H -> 4H), GELU,
FFN (4H -> H), dropout, residual + LayerNorm.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError, ParameterError
from .gelu_fit import GeluPolyTable, load_table
from .memory_model import LAYER_INPUT_TAG, OPTIMIZATIONS, EncoderConfig, _resolve
from .ops import reference as ref
from .ops import tempo
from .ops.common import attention_scores, linear, matmul, merge_heads, mse_loss, split_heads
from .tape import Tape, Var, add
from .tensor import BoolMask, Role, StashLedger, Tensor

DROPOUT_SITES = ("attn.dropout", "attn.out.dropout", "ffn.out.dropout")
PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.gamma", "ln1.beta",
               "w1", "b1", "w2", "b2", "ln2.gamma", "ln2.beta")
# Parameters whose gradient flows through the GELU backward.
_DOWNSTREAM_OF_GELU = ("w2", "b2", "ln2.gamma", "ln2.beta")


@dataclass(frozen=True)
class EncoderLayerSpec:
    """What to build: dimensions, which optimizations are on, and the GELU table.

    ``variant`` is ``"reference"``, ``"tempo"`` or ``"mixed"``; ``toggles``
    picks the optimizations for ``"mixed"``.
    """

    cfg: EncoderConfig
    variant: str = "reference"
    toggles: frozenset = frozenset()
    table: Optional[GeluPolyTable] = None
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.variant == "mixed":
            object.__setattr__(self, "toggles", _resolve(self.toggles))
        elif self.variant in ("reference", "tempo"):
            object.__setattr__(self, "toggles", _resolve(self.variant))
        else:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if "gelu" in self.toggles:
            if self.table is None:
                raise ConfigurationError("in-place GELU needs a polynomial table")
            if not self.table.is_verified:
                raise ConfigurationError("in-place GELU needs a verified polynomial table")

    @classmethod
    def with_table_path(cls, cfg: EncoderConfig, variant: str, table_path, **kw) -> "EncoderLayerSpec":
        return cls(cfg, variant, table=load_table(table_path), **kw)

    def with_variant(self, variant: str, toggles=frozenset()) -> "EncoderLayerSpec":
        return EncoderLayerSpec(self.cfg, variant, toggles, self.table, self.epsilon)


class MaskBank:
    """Dropout masks keyed by ``(layer, site, step)``, reproducible from a seed.

    Paired reference and in-place runs built from the same bank see identical
    masks.
    """

    def __init__(self, seed: int, p: float):
        self.seed = seed
        self.p = p

    def mask(self, layer: int, site: str, step: int, shape) -> BoolMask:
        rng = np.random.default_rng([self.seed, layer, DROPOUT_SITES.index(site), step])
        return BoolMask(rng.random(shape) >= self.p)

    def spec(self, layer: int, site: str, step: int, shape) -> ref.DropoutSpec:
        return ref.DropoutSpec(self.p, injected_mask=self.mask(layer, site, step, shape))


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float64, layer: int = 0) -> dict:
    """Weights ``~ N(0, 1/fan_in)``; biases and LayerNorm shifts small and nonzero."""
    rng = np.random.default_rng([seed, layer, 7919])
    H = cfg.H

    def w(i, o):
        return rng.standard_normal((i, o)) / np.sqrt(i)

    def b(o):
        return 0.1 * rng.standard_normal(o)

    raw = {
        "wq": w(H, H), "bq": b(H), "wk": w(H, H), "bk": b(H), "wv": w(H, H), "bv": b(H),
        "wo": w(H, H), "bo": b(H),
        "ln1.gamma": 1.0 + 0.1 * rng.standard_normal(H), "ln1.beta": b(H),
        "w1": w(H, 4 * H), "b1": b(4 * H), "w2": w(4 * H, H), "b2": b(H),
        "ln2.gamma": 1.0 + 0.1 * rng.standard_normal(H), "ln2.beta": b(H),
    }
    return {k: np.asarray(v, dtype=dtype) for k, v in raw.items()}


def _attention(tape: Tape, q: Var, k: Var, v: Var, spec: ref.DropoutSpec, on: frozenset) -> Var:
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = attention_scores(tape, q, k, scale, name="attn.scores")
    if "softmax" in on:
        probs = tempo.softmax_out(tape, scores, name="attn.probs")
    else:
        probs = ref.softmax_ref(tape, scores, name="attn.probs")
    if "dropout" in on:
        dropped = tempo.dropout_recompute_forward(tape, probs, spec, name="attn.dropout.out",
                                                  mask_name="attn.dropout.mask")
    else:
        dropped = ref.dropout_ref(tape, probs, spec, name="attn.dropout.out",
                                  mask_name="attn.dropout.mask")
    return matmul(tape, dropped, v, name="attn.context_heads")


def _layernorm(tape: Tape, x: Var, gamma: Var, beta: Var, eps: float, prefix: str, on: frozenset) -> Var:
    if "layernorm" in on:
        return tempo.layernorm_ip(tape, x, gamma, beta, eps, name=f"{prefix}.output",
                                  stats_name=f"{prefix}.rstd")
    return ref.layernorm_ref(tape, x, gamma, beta, eps, name=f"{prefix}.output")


def encoder_layer(tape: Tape, x: Var, params: dict, spec: EncoderLayerSpec, bank: MaskBank,
                  step: int = 0, layer: int = 0) -> Var:
    """Apply one layer to ``x`` of shape ``[B, S, H]``; ``params`` maps names to Vars."""
    cfg, on = spec.cfg, spec.toggles
    B, S, H = x.shape
    if H != cfg.H:
        raise ConfigurationError(f"input hidden size {H} does not match config H={cfg.H}")
    P = params
    q = split_heads(tape, linear(tape, x, P["wq"], P["bq"], name="attn.q_proj"), cfg.A, name="attn.q")
    k = split_heads(tape, linear(tape, x, P["wk"], P["bk"], name="attn.k_proj"), cfg.A, name="attn.k")
    v = split_heads(tape, linear(tape, x, P["wv"], P["bv"], name="attn.v_proj"), cfg.A, name="attn.v")
    ctx_heads = _attention(tape, q, k, v, bank.spec(layer, "attn.dropout", step, (B, cfg.A, S, S)), on)
    ctx = merge_heads(tape, ctx_heads, name="attn.context")
    attn_out = linear(tape, ctx, P["wo"], P["bo"], name="attn.out")
    attn_out = ref.dropout_ref(tape, attn_out, bank.spec(layer, "attn.out.dropout", step, (B, S, H)),
                               name="attn.out.dropout")
    h1 = _layernorm(tape, add(tape, x, attn_out, name="ln1.input"), P["ln1.gamma"], P["ln1.beta"],
                    spec.epsilon, "ln1", on)
    f = linear(tape, h1, P["w1"], P["b1"], name="ffn.gelu.input")
    if "gelu" in on:
        f = tempo.gelu_ip(tape, f, spec.table, name="ffn.gelu.output", mask_name="ffn.gelu.mask")
    else:
        f = ref.gelu_ref(tape, f, name="ffn.gelu.output")
    f = linear(tape, f, P["w2"], P["b2"], name="ffn.out")
    f = ref.dropout_ref(tape, f, bank.spec(layer, "ffn.out.dropout", step, (B, S, H)),
                        name="ffn.out.dropout")
    return _layernorm(tape, add(tape, h1, f, name="ln2.input"), P["ln2.gamma"], P["ln2.beta"],
                      spec.epsilon, "ln2", on)


def param_leaves(tape: Tape, params: dict, prefix: str = "") -> dict:
    return {k: tape.leaf(Tensor(v), name=f"{prefix}{k}") for k, v in params.items()}


def stack_forward(tape: Tape, x: Var, layers: list, spec: EncoderLayerSpec, bank: MaskBank,
                  step: int = 0) -> Var:
    h = x
    for i, P in enumerate(layers):
        h = encoder_layer(tape, h, P, spec, bank, step, i)
    return h


def measure_ledger(spec: EncoderLayerSpec, seed: int = 0, dtype=np.float32, step: int = 0) -> StashLedger:
    """Forward an ``L``-layer stack and return its ledger.

    The stack input is pinned under ``layer.input`` and the output is pinned
    as if a downstream consumer held it, so the ledger holds exactly what a
    stack embedded in a larger model would retain.
    """
    cfg = spec.cfg
    tape = Tape()
    rng = np.random.default_rng(seed)
    x = tape.leaf(Tensor(rng.standard_normal((cfg.B, cfg.S, cfg.H)), dtype), name=LAYER_INPUT_TAG)
    tape.retain(x)
    layers = [param_leaves(tape, {k: v.astype(dtype) for k, v in init_params(cfg, seed, layer=i).items()})
              for i in range(cfg.L)]
    bank = MaskBank(seed, cfg.p)
    out = stack_forward(tape, x, layers, spec, bank, step)
    tape.retain(out)
    return tape.ledger


# -- training ---------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss: float
    peak_bytes: int
    transient_bytes: int
    seconds: float


@dataclass
class TrainRun:
    seed: int = 0
    steps: int = 200
    lr: float = 1e-2
    dtype: type = np.float32
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError(f"steps must be non-negative, got {self.steps}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")

    @property
    def losses(self) -> list:
        return [r.loss for r in self.records]


def synthetic_data(cfg: EncoderConfig, seed: int, dtype=np.float32):
    rng = np.random.default_rng([seed, 104729])
    x = rng.standard_normal((cfg.B, cfg.S, cfg.H)).astype(dtype)
    y = rng.standard_normal((cfg.B, cfg.S, cfg.H)).astype(dtype)
    return x, y


def train(run: TrainRun, spec: EncoderLayerSpec) -> TrainRun:
    """Plain SGD on mean-squared regression to fixed random targets."""
    cfg = spec.cfg
    x_data, target = synthetic_data(cfg, run.seed, run.dtype)
    layers = [{k: v.astype(run.dtype) for k, v in init_params(cfg, run.seed, layer=i).items()}
              for i in range(cfg.L)]
    bank = MaskBank(run.seed, cfg.p)
    lr = run.dtype(run.lr)
    run.records = []
    for step in range(run.steps):
        t0 = time.perf_counter()
        tape = Tape()
        x = tape.leaf(Tensor(x_data), requires_grad=False, name=LAYER_INPUT_TAG)
        leaves = [param_leaves(tape, P) for P in layers]
        out = stack_forward(tape, x, leaves, spec, bank, step)
        loss = mse_loss(tape, out, target)
        value = float(loss.value.data)
        if not np.isfinite(value):
            raise DivergenceError(step)
        grads = tape.backward(loss)
        for P, V in zip(layers, leaves):
            for k in P:
                P[k] = (P[k] - lr * grads[V[k]].data).astype(run.dtype)
        run.records.append(StepRecord(step, value, tape.ledger.peak_bytes,
                                      tape.ledger.peak_transient_bytes, time.perf_counter() - t0))
    return run


# -- benchmark --------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    variant: str
    reps: int
    tokens: int
    seconds: float
    tokens_per_second: float
    peak_bytes: int


@dataclass
class BenchReport:
    rows: list

    @property
    def ratio(self) -> float:
        by = {r.variant: r for r in self.rows}
        return by["tempo"].tokens_per_second / by["reference"].tokens_per_second

    CSV_HEADER = "variant,reps,tokens,seconds,tokens_per_second,peak_bytes"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r.variant},{r.reps},{r.tokens},{r.seconds:.6f},"
                         f"{r.tokens_per_second:.3f},{r.peak_bytes}")
        lines.append(f"ratio,,,,{self.ratio:.6f},")
        return "\n".join(lines)

    def to_text(self) -> str:
        lines = []
        for r in self.rows:
            lines.append(f"{r.variant:<10} {r.tokens_per_second:12.1f} tokens/s  "
                         f"peak stash {r.peak_bytes} B  ({r.reps} reps, {r.seconds:.3f} s)")
        lines.append(f"tempo/reference throughput ratio: {self.ratio:.3f}")
        return "\n".join(lines)


def bench(spec: EncoderLayerSpec, reps: int = 5, seed: int = 0) -> BenchReport:
    """Forward+backward wall-clock throughput of the reference and tempo variants."""
    if reps < 1:
        raise ParameterError(f"reps must be at least 1, got {reps}")
    cfg = spec.cfg
    x_data, target = synthetic_data(cfg, seed)
    layers = [{k: v.astype(np.float32) for k, v in init_params(cfg, seed, layer=i).items()}
              for i in range(cfg.L)]
    bank = MaskBank(seed, cfg.p)
    rows = []
    for variant in ("reference", "tempo"):
        s = spec.with_variant(variant)
        peak = 0
        t0 = time.perf_counter()
        for _ in range(reps):
            tape = Tape()
            x = tape.leaf(Tensor(x_data), requires_grad=False, name=LAYER_INPUT_TAG)
            leaves = [param_leaves(tape, P) for P in layers]
            loss = mse_loss(tape, stack_forward(tape, x, leaves, s, bank), target)
            tape.backward(loss)
            peak = tape.ledger.peak_bytes
        dt = time.perf_counter() - t0
        tokens = reps * cfg.tokens
        rows.append(BenchRow(variant, reps, tokens, dt, tokens / dt, peak))
    return BenchReport(rows)


__all__ = [
    "DROPOUT_SITES", "PARAM_NAMES", "OPTIMIZATIONS", "EncoderLayerSpec", "MaskBank", "init_params",
    "encoder_layer", "param_leaves", "stack_forward", "measure_ledger", "TrainRun", "StepRecord",
    "train", "synthetic_data", "BenchRow", "BenchReport", "bench", "Role",
]
