"""Analytic activation-memory inventory of one encoder layer.

Per token, a reference layer retains ``66*H + 13*A*S`` bytes with 4-byte
floats and 1-byte masks. The inventory below names every retained tensor with
the tag the encoder uses in its ledger, so a measured ledger can be diffed
against it entry by entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .errors import ConfigurationError, ParameterError
from .tensor import Role, StashLedger

OPTIMIZATIONS = ("gelu", "layernorm", "dropout", "softmax")
LAYER_INPUT_TAG = "layer.input"


@dataclass(frozen=True)
class EncoderConfig:
    H: int
    A: int
    S: int
    B: int = 1
    L: int = 1
    p: float = 0.1
    float_bytes: int = 4
    mask_bytes: int = 1

    def __post_init__(self):
        for name in ("H", "A", "S", "B", "L", "float_bytes", "mask_bytes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.H % self.A:
            raise ConfigurationError(f"H={self.H} is not divisible by A={self.A}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {self.p}")

    @property
    def head_dim(self) -> int:
        return self.H // self.A

    @property
    def tokens(self) -> int:
        return self.B * self.S


BERT_BASE = dict(H=768, A=12)
BERT_LARGE = dict(H=1024, A=16)


@dataclass(frozen=True)
class InventoryItem:
    name: str
    shape: tuple
    bytes: int
    role: Role


def toggles_for(variant: str) -> frozenset:
    if variant == "reference":
        return frozenset()
    if variant == "tempo":
        return frozenset(OPTIMIZATIONS)
    raise ParameterError(f"unknown variant {variant!r}; use reference or tempo or a toggle set")


def _resolve(toggles) -> frozenset:
    if isinstance(toggles, str):
        return toggles_for(toggles)
    out = frozenset(toggles)
    unknown = out - set(OPTIMIZATIONS)
    if unknown:
        raise ParameterError(f"unknown optimization(s) {sorted(unknown)}; known: {OPTIMIZATIONS}")
    return out


def inventory(cfg: EncoderConfig, toggles="reference") -> list:
    """Retained tensors of one layer, excluding the layer input.

    ``toggles`` is ``"reference"``, ``"tempo"`` or any subset of
    :data:`OPTIMIZATIONS`.
    """
    on = _resolve(toggles)
    B, S, H, A, d = cfg.B, cfg.S, cfg.H, cfg.A, cfg.head_dim
    f, k = cfg.float_bytes, cfg.mask_bytes
    tok, heads, amap = (B, S, H), (B, A, S, d), (B, A, S, S)
    wide = (B, S, 4 * H)
    rows = (B, S)

    def n(shape):
        out = 1
        for s in shape:
            out *= s
        return out

    items = []

    def add(name, shape, width, role):
        items.append(InventoryItem(name, shape, n(shape) * width, role))

    add("attn.q", heads, f, Role.SHARED)
    add("attn.k", heads, f, Role.SHARED)
    add("attn.v", heads, f, Role.SHARED)
    if "softmax" not in on:
        add("attn.scores", amap, f, Role.OP_OWN)
    add("attn.probs", amap, f, Role.OP_OWN)
    if "dropout" not in on:
        add("attn.dropout.out", amap, f, Role.SHARED)
    add("attn.dropout.mask", amap, k, Role.OP_OWN)
    add("attn.context", tok, f, Role.SHARED)
    add("attn.out.dropout.mask", tok, k, Role.OP_OWN)
    if "layernorm" in on:
        add("ln1.output", tok, f, Role.SHARED)
        add("ln1.rstd", rows, f, Role.STATISTIC)
    else:
        add("ln1.input", tok, f, Role.OP_OWN)
        add("ln1.output", tok, f, Role.SHARED)
    if "gelu" in on:
        add("ffn.gelu.mask", wide, k, Role.OP_OWN)
    else:
        add("ffn.gelu.input", wide, f, Role.OP_OWN)
    add("ffn.gelu.output", wide, f, Role.SHARED)
    add("ffn.out.dropout.mask", tok, k, Role.OP_OWN)
    if "layernorm" in on:
        add("ln2.output", tok, f, Role.SHARED)
        add("ln2.rstd", rows, f, Role.STATISTIC)
    else:
        add("ln2.input", tok, f, Role.OP_OWN)
        add("ln2.output", tok, f, Role.SHARED)
    return items


def layer_bytes(cfg: EncoderConfig, toggles="reference") -> int:
    """Absolute retained bytes of one layer at batch ``cfg.B``."""
    return sum(i.bytes for i in inventory(cfg, toggles))


def layer_activation_bytes(cfg: EncoderConfig, toggles="reference") -> int:
    """Retained bytes per token for one layer."""
    total = layer_bytes(cfg, toggles)
    assert total % cfg.tokens == 0
    return total // cfg.tokens


def closed_form_bytes(cfg: EncoderConfig) -> int:
    """``16fH + 2kH + 3f*AS + k*AS`` per token; equals ``66H + 13AS`` for f=4, k=1."""
    f, k = cfg.float_bytes, cfg.mask_bytes
    return 16 * f * cfg.H + 2 * k * cfg.H + 3 * f * cfg.A * cfg.S + k * cfg.A * cfg.S


def stack_activation_bytes(cfg: EncoderConfig, toggles="reference") -> int:
    """Bytes retained by an ``L``-layer stack including its input."""
    return cfg.tokens * cfg.float_bytes * cfg.H + cfg.L * layer_bytes(cfg, toggles)


def savings(cfg: EncoderConfig, optimization: str) -> tuple:
    """``(bytes per token, fraction of the reference total)`` for one optimization.

    LayerNorm is reported gross; its rstd cost is in :func:`overheads`.
    """
    f, k = cfg.float_bytes, cfg.mask_bytes
    H, AS = cfg.H, cfg.A * cfg.S
    if optimization == "gelu":
        saved = 4 * H * f - 4 * H * k
    elif optimization == "layernorm":
        saved = 2 * H * f
    elif optimization in ("dropout", "softmax"):
        saved = f * AS
    else:
        raise ParameterError(f"unknown optimization {optimization!r}; known: {OPTIMIZATIONS}")
    return saved, saved / layer_activation_bytes(cfg)


def overheads(cfg: EncoderConfig, optimization: str) -> int:
    """Bytes per token an optimization adds back (rstd for LayerNorm)."""
    if optimization not in OPTIMIZATIONS:
        raise ParameterError(f"unknown optimization {optimization!r}; known: {OPTIMIZATIONS}")
    return 2 * cfg.float_bytes if optimization == "layernorm" else 0


def net_savings(cfg: EncoderConfig, toggles="tempo") -> int:
    on = _resolve(toggles)
    return sum(savings(cfg, o)[0] - overheads(cfg, o) for o in on)


@dataclass(frozen=True)
class NamedFractions:
    attention_maps: float
    gelu_input: float


def named_fractions(cfg: EncoderConfig) -> NamedFractions:
    total = layer_activation_bytes(cfg)
    f = cfg.float_bytes
    return NamedFractions(
        attention_maps=3 * f * cfg.A * cfg.S / total,
        gelu_input=4 * f * cfg.H / total,
    )


@dataclass
class MemoryReport:
    cfg: EncoderConfig
    inventory: list
    total_bytes: int
    per_token_bytes: int
    savings: dict
    overheads: dict
    named_fractions: NamedFractions
    tempo_per_token_bytes: int

    def rows(self) -> list:
        out = [("total_per_token", self.per_token_bytes, 1.0),
               ("tempo_per_token", self.tempo_per_token_bytes,
                self.tempo_per_token_bytes / self.per_token_bytes)]
        for name, (b, frac) in self.savings.items():
            out.append((f"saving.{name}", b, frac))
        out.append(("share.attention_maps", None, self.named_fractions.attention_maps))
        out.append(("share.gelu_input", None, self.named_fractions.gelu_input))
        return out

    def to_text(self) -> str:
        c = self.cfg
        lines = [f"encoder layer H={c.H} A={c.A} S={c.S} B={c.B} L={c.L}",
                 f"  reference: {self.per_token_bytes} B/token, {self.total_bytes} B/layer",
                 f"  tempo:     {self.tempo_per_token_bytes} B/token",
                 "  savings (fraction of reference):"]
        for name, (b, frac) in self.savings.items():
            extra = f" (+{self.overheads[name]} B overhead)" if self.overheads[name] else ""
            lines.append(f"    {name:<10} {b:>10} B/token  {100 * frac:6.2f}%{extra}")
        lines.append(f"  attention maps share: {100 * self.named_fractions.attention_maps:.2f}%")
        lines.append(f"  GELU input share:     {100 * self.named_fractions.gelu_input:.2f}%")
        lines.append("  inventory:")
        for it in self.inventory:
            lines.append(f"    {it.name:<22} {str(it.shape):<22} {it.bytes:>12} B  {it.role.value}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["name,bytes,fraction"]
        for name, b, frac in self.rows():
            lines.append(f"{name},{'' if b is None else b},{frac:.6f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        c = self.cfg
        doc = {
            "config": {"H": c.H, "A": c.A, "S": c.S, "B": c.B, "L": c.L},
            "per_token_bytes": self.per_token_bytes,
            "tempo_per_token_bytes": self.tempo_per_token_bytes,
            "total_bytes": self.total_bytes,
            "savings": {k: {"bytes": b, "fraction": fr} for k, (b, fr) in self.savings.items()},
            "overheads": self.overheads,
            "named_fractions": {"attention_maps": self.named_fractions.attention_maps,
                                "gelu_input": self.named_fractions.gelu_input},
            "inventory": [{"name": i.name, "shape": list(i.shape), "bytes": i.bytes,
                           "role": i.role.value} for i in self.inventory],
        }
        return json.dumps(doc, indent=2)


def memory_report(cfg: EncoderConfig) -> MemoryReport:
    inv = inventory(cfg)
    return MemoryReport(
        cfg=cfg,
        inventory=inv,
        total_bytes=sum(i.bytes for i in inv),
        per_token_bytes=layer_activation_bytes(cfg),
        savings={o: savings(cfg, o) for o in OPTIMIZATIONS},
        overheads={o: overheads(cfg, o) for o in OPTIMIZATIONS},
        named_fractions=named_fractions(cfg),
        tempo_per_token_bytes=layer_activation_bytes(cfg, "tempo"),
    )


@dataclass
class CrossCheck:
    expected: dict
    measured: dict
    diffs: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.diffs

    def describe(self) -> str:
        if self.ok:
            return f"ledger matches inventory ({sum(self.expected.values())} B)"
        parts = [f"{tag}: expected {e} B, measured {m} B" for tag, (e, m) in sorted(self.diffs.items())]
        return "; ".join(parts)


def cross_check(cfg: EncoderConfig, ledger: StashLedger, toggles="reference",
                exclude: Iterable[str] = (LAYER_INPUT_TAG,)) -> CrossCheck:
    """Per-tag diff between ``cfg.L`` layers of inventory and a measured ledger."""
    skip = set(exclude)
    expected: dict = {}
    for it in inventory(cfg, toggles):
        expected[it.name] = expected.get(it.name, 0) + cfg.L * it.bytes
    measured = {t: b for t, b in ledger.bytes_by_tag().items() if t not in skip}
    return _diff(expected, measured)


def _diff(expected: Mapping, measured: Mapping) -> CrossCheck:
    diffs = {}
    for tag in set(expected) | set(measured):
        e, m = expected.get(tag, 0), measured.get(tag, 0)
        if e != m:
            diffs[tag] = (e, m)
    return CrossCheck(dict(expected), dict(measured), diffs)


def config_from_mapping(values: Mapping, defaults: Optional[Mapping] = None) -> EncoderConfig:
    merged = dict(defaults or {})
    merged.update({k: v for k, v in values.items() if v is not None})
    fields_ = {k: merged[k] for k in ("H", "A", "S", "B", "L", "p") if k in merged}
    return EncoderConfig(**fields_)
