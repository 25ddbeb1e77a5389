"""Central finite-difference checks of every tape operator and the full layer.

Each check reduces the operator output to a scalar with fixed random weights,
then compares the tape gradient of every input against central differences
along one random direction and at a few random coordinates. Errors are
relative: ``|fd - an| / max(|fd|, |an|, scale, floor)``. ``scale`` is the
gradient's 2-norm for a Gaussian direction and its largest entry for a
coordinate probe; ``floor`` is a small absolute constant for gradients that
vanish identically, such as the key bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .encoder import EncoderLayerSpec, MaskBank, encoder_layer, init_params, _DOWNSTREAM_OF_GELU
from .gelu_fit import GeluPolyTable
from .memory_model import EncoderConfig
from .ops import reference as ref
from .ops import tempo
from .ops.common import attention_scores, linear, matmul, merge_heads, mse_loss, split_heads, weighted_sum
from .tape import Tape, add, scale
from .tensor import BoolMask, Tensor

LOSSLESS_TOL = 1e-4
FD_STEP = 1e-4
FLOOR = 1e-5


def gelu_path_tolerance(table: Optional[GeluPolyTable]) -> float:
    return LOSSLESS_TOL if table is None else max(LOSSLESS_TOL, 5 * table.tolerance)


@dataclass(frozen=True)
class CheckResult:
    case: str
    input: str
    trial: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


@dataclass
class GradCheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def worst_by_case(self) -> dict:
        out: dict = {}
        for r in self.results:
            best = out.get(r.case)
            if best is None or r.error / r.tolerance > best.error / best.tolerance:
                out[r.case] = r
        return out

    def to_text(self) -> str:
        lines = []
        for case, r in sorted(self.worst_by_case().items()):
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{status} {case:<28} worst {r.error:.2e} (tol {r.tolerance:.0e}) on {r.input}")
        n = len(self.results)
        lines.append(f"{n - len(self.failures)}/{n} comparisons within tolerance")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["case,input,worst_error,tolerance,passed"]
        for case, r in sorted(self.worst_by_case().items()):
            lines.append(f"{case},{r.input},{r.error:.3e},{r.tolerance:.0e},{int(r.passed)}")
        return "\n".join(lines)

    def extend(self, other: "GradCheckReport") -> "GradCheckReport":
        self.results.extend(other.results)
        return self


Builder = Callable[[Tape, dict], object]


def check_gradients(case: str, build: Builder, inputs: dict, rng: np.random.Generator,
                    tolerances: Optional[dict] = None, trial: int = 0, coords: int = 2,
                    step: float = FD_STEP, default_tol: float = LOSSLESS_TOL) -> GradCheckReport:
    """Compare tape gradients of ``build`` with central differences.

    ``build(tape, leaves)`` returns the output Var; ``inputs`` maps names to
    float64 arrays. A scalar output is used as the loss directly.
    """
    tolerances = tolerances or {}
    weights = None

    def run(arrays, want_grads):
        nonlocal weights
        tape = Tape()
        leaves = {k: tape.leaf(Tensor(v), name=k) for k, v in arrays.items()}
        out = build(tape, leaves)
        if out.value.data.ndim == 0:
            loss = out
        else:
            if weights is None:
                weights = rng.standard_normal(out.shape)
            loss = weighted_sum(tape, out, weights)
        if not want_grads:
            return float(loss.value.data)
        grads = tape.backward(loss)
        return {k: grads[leaves[k]].data for k in arrays}

    grads = run(inputs, True)
    report = GradCheckReport()
    for name, base in inputs.items():
        # Probes are judged against the typical size of their projection so a
        # projection that is small by chance (or an entry near a zero of the
        # derivative) is not measured against its own tiny magnitude.
        g_scale = float(np.max(np.abs(grads[name])))
        probes = [(rng.standard_normal(base.shape), float(np.linalg.norm(grads[name])))]
        for _ in range(coords):
            e = np.zeros(base.shape)
            e[tuple(rng.integers(0, d) for d in base.shape)] = 1.0
            probes.append((e, g_scale))
        worst = 0.0
        for direction, scale_floor in probes:
            plus = dict(inputs, **{name: base + step * direction})
            minus = dict(inputs, **{name: base - step * direction})
            fd = (run(plus, False) - run(minus, False)) / (2 * step)
            an = float(np.sum(grads[name] * direction))
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), scale_floor, FLOOR))
        report.results.append(CheckResult(case, name, trial, worst, tolerances.get(name, default_tol)))
    return report


# -- per-operator cases -----------------------------------------------------


def _dropout_spec(rng, shape, p):
    return ref.DropoutSpec(p, injected_mask=BoolMask(rng.random(shape) >= p))


def operator_cases(rng: np.random.Generator, table: Optional[GeluPolyTable], p: float = 0.1) -> list:
    """``(case, build, inputs, tolerances)`` tuples with fresh random shapes."""
    B, A, S, d = 2, 2, int(rng.integers(3, 6)), int(rng.integers(2, 5))
    M = int(rng.integers(3, 7))
    x = rng.standard_normal((B, S, M))
    w = rng.standard_normal((M, d))
    bias = rng.standard_normal(d)
    gamma = 1.0 + 0.2 * rng.standard_normal(M)
    beta = 0.2 * rng.standard_normal(M)
    q, k, v = (rng.standard_normal((B, A, S, d)) for _ in range(3))
    z = rng.standard_normal((B, A, S, S))
    # Keep GELU inputs away from the kink of the exact inverse at x_star.
    xg = 3.0 * rng.standard_normal((B, S, M))
    mask_bs = _dropout_spec(rng, (B, S, M), p)
    mask_attn = _dropout_spec(rng, (B, A, S, S), p)
    heads_x = rng.standard_normal((B, S, A * d))
    target = rng.standard_normal((B, S, d))

    cases = [
        ("linear", lambda t, L: linear(t, L["x"], L["w"], L["b"]), {"x": x, "w": w, "b": bias}, {}),
        ("matmul", lambda t, L: matmul(t, L["a"], L["b"]), {"a": q, "b": np.swapaxes(k, -1, -2).copy()}, {}),
        ("attention_scores", lambda t, L: attention_scores(t, L["q"], L["k"], 0.5), {"q": q, "k": k}, {}),
        ("split_merge_heads", lambda t, L: merge_heads(t, split_heads(t, L["x"], A)), {"x": heads_x}, {}),
        ("add_scale", lambda t, L: scale(t, add(t, L["a"], L["b"]), 1.5), {"a": x, "b": gamma}, {}),
        ("mse_loss", lambda t, L: mse_loss(t, L["y"], target), {"y": rng.standard_normal((B, S, d))}, {}),
        ("gelu_ref", lambda t, L: ref.gelu_ref(t, L["x"]), {"x": xg}, {}),
        ("layernorm_ref", lambda t, L: ref.layernorm_ref(t, L["x"], L["g"], L["b"]),
         {"x": x, "g": gamma, "b": beta}, {}),
        ("layernorm_ip", lambda t, L: tempo.layernorm_ip(t, L["x"], L["g"], L["b"]),
         {"x": x, "g": gamma, "b": beta}, {}),
        ("softmax_ref", lambda t, L: ref.softmax_ref(t, L["z"]), {"z": z}, {}),
        ("softmax_ip", lambda t, L: tempo.softmax_out(t, L["z"]), {"z": z}, {}),
        ("dropout_ref", lambda t, L: ref.dropout_ref(t, L["x"], mask_bs), {"x": x}, {}),
        ("dropout_recompute",
         lambda t, L: matmul(t, tempo.dropout_recompute_forward(t, tempo.softmax_out(t, L["z"]), mask_attn),
                             L["v"]),
         {"z": z, "v": v}, {}),
        ("sdpa_ref", lambda t, L: ref.sdpa_ref(t, L["q"], L["k"], L["v"], mask_attn),
         {"q": q, "k": k, "v": v}, {}),
        ("sdpa_tempo", lambda t, L: tempo.sdpa_tempo(t, L["q"], L["k"], L["v"], mask_attn),
         {"q": q, "k": k, "v": v}, {}),
    ]
    if table is not None:
        tol = gelu_path_tolerance(table)
        cases.append(("gelu_ip", lambda t, L: tempo.gelu_ip(t, L["x"], table), {"x": xg}, {"x": tol}))
    return cases


def operator_grad_check(trials: int = 100, seed: int = 0, table: Optional[GeluPolyTable] = None,
                        p: float = 0.1) -> GradCheckReport:
    report = GradCheckReport()
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        for case, build, inputs, tols in operator_cases(rng, table, p):
            report.extend(check_gradients(case, build, inputs, rng, tols, trial))
    return report


# -- full layer ---------------------------------------------------------------


def layer_grad_check(spec: EncoderLayerSpec, trials: int = 100, seed: int = 0,
                     gamma_one: bool = False) -> GradCheckReport:
    """Finite-difference check of every input and parameter of one layer in double precision."""
    cfg = spec.cfg
    gelu_tol = gelu_path_tolerance(spec.table) if "gelu" in spec.toggles else None
    report = GradCheckReport()
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        params = init_params(cfg, seed=int(rng.integers(2**31)))
        if gamma_one:
            params["ln1.gamma"] = np.ones(cfg.H)
            params["ln2.gamma"] = np.ones(cfg.H)
        bank = MaskBank(int(rng.integers(2**31)), cfg.p)
        inputs = dict(params, x=rng.standard_normal((cfg.B, cfg.S, cfg.H)))
        tols = {}
        if gelu_tol is not None:
            tols = {k: gelu_tol for k in inputs if k not in _DOWNSTREAM_OF_GELU}

        def build(tape, L):
            P = {k: L[k] for k in params}
            return encoder_layer(tape, L["x"], P, spec, bank)

        report.extend(check_gradients(f"layer.{spec.variant}", build, inputs, rng, tols, trial))
    return report


def full_grad_check(cfg: EncoderConfig, table: GeluPolyTable, trials: int = 100,
                    seed: int = 0) -> GradCheckReport:
    """Operators plus the reference and tempo layers."""
    report = operator_grad_check(trials, seed, table, cfg.p)
    for variant in ("reference", "tempo"):
        spec = EncoderLayerSpec(cfg, variant, table=table)
        report.extend(layer_grad_check(spec, trials, seed + 1))
    return report
