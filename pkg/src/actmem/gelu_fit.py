"""Piecewise-polynomial table for the GELU derivative as a function of its output.

GELU has a single minimum at ``x_star``; on either side it is one-to-one, so a
branch bit ``m`` (1 when ``x > x_star``) plus the output ``y`` determines the
input. The backward kernel needs ``h(y, m) = GELU'(x(y, m))``, which has no
closed form. This module builds that function numerically (bisection-based
inversion), fits it with Chebyshev least squares per segment, verifies the
result on a dense sweep, and reads/writes a plain-text coefficient table.

Segments whose left edge is the minimum use ``t = sqrt(y - y_min)`` as the
polynomial variable: near the minimum ``h`` behaves like ``+-sqrt(y - y_min)``,
which is analytic in ``t`` but not in ``y``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.polynomial import chebyshev as C

from .errors import ConfigurationError, DomainError, FitError, ParameterError, TableFormatError
from .gelu_math import gelu, gelu_prime

MAX_DEGREE = 13
DIRECT = "direct-y"
SQRT_SHIFT = "sqrt-shift"
FORMAT_TAG = "gelu-poly-table"
FORMAT_VERSION = "v1"


@dataclass(frozen=True)
class GeluMinimum:
    x_star: float
    y_min: float


@functools.lru_cache(maxsize=None)
def locate_minimum(lo: float = -2.0, hi: float = 0.0, xtol: float = 1e-12) -> GeluMinimum:
    """Bisect ``GELU'(x) = 0`` on ``[lo, hi]``."""
    f_lo, f_hi = float(gelu_prime(lo)), float(gelu_prime(hi))
    if f_lo * f_hi > 0:
        raise ValueError(f"GELU' does not change sign on [{lo}, {hi}]")
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if (float(gelu_prime(mid)) < 0) == (f_lo < 0):
            lo = mid
        else:
            hi = mid
    x_star = 0.5 * (lo + hi)
    return GeluMinimum(x_star, float(gelu(x_star)))


# -- inversion ---------------------------------------------------------------


def _check_domain(y: np.ndarray, m: np.ndarray, y_min: float):
    bad = (y < y_min) | (~m & (y >= 0.0)) | ~np.isfinite(y)
    if np.any(bad):
        i = int(np.flatnonzero(bad.ravel())[0])
        raise DomainError(
            f"y={y.ravel()[i]!r} is outside the image of branch m={int(m.ravel()[i])} "
            f"(y_min={y_min!r})")


def invert_gelu_array(y, m, xtol: float = 1e-13, check: bool = True) -> np.ndarray:
    """Vectorized inverse of GELU on the branch selected by ``m``."""
    mn = locate_minimum()
    y = np.asarray(y, dtype=np.float64)
    m = np.broadcast_to(np.asarray(m, dtype=bool), y.shape)
    if check:
        _check_domain(y, m, mn.y_min)
    shape = y.shape
    y = y.ravel()
    m = m.ravel()
    lo = np.where(m, mn.x_star, -2.0)
    hi = np.where(m, np.maximum(1.0, y + 1.0), mn.x_star)
    # expand the open end of each bracket until it encloses the root
    for _ in range(64):
        grow_right = m & (gelu(hi) < y)
        grow_left = ~m & (gelu(lo) <= y)
        if not (grow_right.any() or grow_left.any()):
            break
        hi = np.where(grow_right, 2.0 * hi, hi)
        lo = np.where(grow_left, 2.0 * lo, lo)
    for _ in range(200):
        if np.all(hi - lo <= xtol):
            break
        mid = 0.5 * (lo + hi)
        below = gelu(mid) < y
        # GELU increases on the right branch and decreases on the left one
        go_right = np.where(m, below, ~below)
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    x = 0.5 * (lo + hi)
    x = np.where(y <= mn.y_min, mn.x_star, x)
    return x.reshape(shape)


def invert_gelu(y: float, m: int) -> float:
    """Return ``x`` on branch ``m`` with ``GELU(x) = y``; raises DomainError off-branch."""
    x = invert_gelu_array(np.array([y], dtype=np.float64), np.array([bool(m)]))
    return float(x[0])


def composed_derivative_array(y, m, check: bool = True) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    m = np.broadcast_to(np.asarray(m, dtype=bool), y.shape)
    return gelu_prime(invert_gelu_array(y, m, check=check)).reshape(y.shape)


def composed_derivative_oracle(y: float, m: int) -> float:
    """Ground truth ``GELU'(GELU^-1(y, m))``."""
    return float(composed_derivative_array(np.array([y]), np.array([bool(m)]))[0])


# -- table -------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    branch: int
    lo: float
    hi: float
    variable: str
    coeffs: tuple

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1


def _variable_range(seg: Segment, y_min: float):
    if seg.variable == SQRT_SHIFT:
        return math.sqrt(max(seg.lo - y_min, 0.0)), math.sqrt(max(seg.hi - y_min, 0.0))
    return seg.lo, seg.hi


def _to_unit(y: np.ndarray, variable: str, va: float, vb: float, y_min: float) -> np.ndarray:
    v = np.sqrt(np.maximum(y - y_min, 0.0)) if variable == SQRT_SHIFT else y
    return (2.0 * v - (va + vb)) / (vb - va)


def _from_unit(u: np.ndarray, variable: str, va: float, vb: float, y_min: float) -> np.ndarray:
    v = 0.5 * (va + vb) + 0.5 * (vb - va) * u
    return v * v + y_min if variable == SQRT_SHIFT else v


@dataclass
class GeluPolyTable:
    """Fitted coefficients for ``h(y, m)``; evaluation clamps out-of-image ``y``.

    Coefficients multiply Chebyshev polynomials ``T_k(u)`` of the segment's
    variable mapped affinely onto ``[-1, 1]``. On branch 1, ``y`` above the last
    segment uses the asymptote ``h = 1``.
    """

    x_star: float
    y_min: float
    tolerance: float
    segments: tuple
    verified_max_error: Optional[float] = None
    fit_residual: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        self.segments = tuple(self.segments)
        self.validate()
        self._prepare()

    def _prepare(self):
        self._bounds = {}
        self._ranges = {}
        for b in (0, 1):
            segs = self.branch_segments(b)
            self._bounds[b] = np.array([s.lo for s in segs] + [segs[-1].hi])
            self._ranges[b] = [(_variable_range(s, self.y_min), s) for s in segs]

    def branch_segments(self, branch: int) -> list:
        return [s for s in self.segments if s.branch == branch]

    @property
    def tail_threshold(self) -> float:
        return self.branch_segments(1)[-1].hi

    def validate(self):
        if not self.segments:
            raise TableFormatError("table has no segments")
        if not self.tolerance > 0:
            raise TableFormatError(f"tolerance must be positive, got {self.tolerance}")
        for s in self.segments:
            if s.branch not in (0, 1):
                raise TableFormatError(f"branch must be 0 or 1, got {s.branch}")
            if s.variable not in (DIRECT, SQRT_SHIFT):
                raise TableFormatError(f"unknown variable {s.variable!r}")
            if not 0 <= s.degree <= MAX_DEGREE:
                raise TableFormatError(f"segment degree {s.degree} exceeds {MAX_DEGREE}")
            if not s.hi > s.lo:
                raise TableFormatError(f"empty segment [{s.lo!r}, {s.hi!r}]")
        for b in (0, 1):
            segs = self.branch_segments(b)
            if not segs:
                raise TableFormatError(f"branch {b} has no segments")
            if segs[0].lo != self.y_min:
                raise TableFormatError(f"branch {b} starts at {segs[0].lo!r}, not y_min")
            for left, right in zip(segs, segs[1:]):
                if left.hi != right.lo:
                    kind = "gap" if left.hi < right.lo else "overlap"
                    raise TableFormatError(
                        f"{kind} between segments on branch {b}: {left.hi!r} vs {right.lo!r}")
        if self.branch_segments(0)[-1].hi != 0.0:
            raise TableFormatError("left branch must end at y = 0")
        if self.verified_max_error is not None and self.verified_max_error > self.tolerance:
            raise TableFormatError(
                f"verified error {self.verified_max_error!r} exceeds tolerance {self.tolerance!r}")

    @property
    def is_verified(self) -> bool:
        return self.verified_max_error is not None

    def evaluate(self, y, m) -> np.ndarray:
        """``h(y, m)`` with ``y`` clamped into each branch's image."""
        y = np.asarray(y, dtype=np.float64)
        m = np.broadcast_to(np.asarray(m, dtype=bool), y.shape)
        y = np.maximum(y, self.y_min)
        out = np.empty(y.shape, dtype=np.float64)
        for b in (0, 1):
            sel = m == bool(b)
            if not sel.any():
                continue
            yb = y[sel]
            if b == 0:
                yb = np.minimum(yb, 0.0)
            out[sel] = self._eval_branch(b, yb)
        return out

    def _eval_branch(self, b: int, yb: np.ndarray) -> np.ndarray:
        bounds = self._bounds[b]
        ranges = self._ranges[b]
        res = np.ones_like(yb)
        inside = yb <= bounds[-1]
        idx = np.clip(np.searchsorted(bounds, yb, side="right") - 1, 0, len(ranges) - 1)
        for i in np.unique(idx[inside]):
            (va, vb), seg = ranges[i]
            pick = inside & (idx == i)
            u = _to_unit(yb[pick], seg.variable, va, vb, self.y_min)
            res[pick] = C.chebval(u, np.asarray(seg.coeffs))
        return res

    def summary(self) -> str:
        lines = [f"x_star={self.x_star:.10f} y_min={self.y_min:.10f} tol={self.tolerance:g} "
                 f"max_err={self.verified_max_error!r} segments={len(self.segments)}"]
        for s in self.segments:
            lines.append(f"  m={s.branch} [{s.lo:+.6e}, {s.hi:+.6e}] {s.variable:<10} degree {s.degree}")
        return "\n".join(lines)


# -- fitting -----------------------------------------------------------------


def _oracle_on_branch(y: np.ndarray, branch: int) -> np.ndarray:
    """Composed derivative, extended by its limit 0 at the open end y=0 of branch 0."""
    out = np.zeros_like(y)
    ok = ~((branch == 0) & (y >= 0.0))
    if ok.any():
        out[ok] = composed_derivative_array(y[ok], np.full(int(ok.sum()), bool(branch)))
    return out


@dataclass
class _SegmentFit:
    segment: Segment
    error: float


def _fit_segment(branch: int, lo: float, hi: float, y_min: float, target: float,
                 max_degree: int, check_points: int) -> Optional[_SegmentFit]:
    variable = SQRT_SHIFT if lo == y_min else DIRECT
    probe = Segment(branch, lo, hi, variable, (0.0,))
    va, vb = _variable_range(probe, y_min)
    u_check = np.linspace(-1.0, 1.0, check_points)
    y_check = np.clip(_from_unit(u_check, variable, va, vb, y_min), lo, hi)
    h_check = _oracle_on_branch(y_check, branch)
    for degree in range(1, max_degree + 1):
        n = 4 * (degree + 1)
        u = np.cos(np.pi * (np.arange(n) + 0.5) / n)
        y = np.clip(_from_unit(u, variable, va, vb, y_min), lo, hi)
        coeffs = C.chebfit(u, _oracle_on_branch(y, branch), degree)
        err = float(np.max(np.abs(C.chebval(u_check, coeffs) - h_check)))
        if err <= target:
            return _SegmentFit(Segment(branch, lo, hi, variable, tuple(float(c) for c in coeffs)), err)
    return None


def fit_table(tolerance: float = 1e-4, max_degree: int = MAX_DEGREE, tail_threshold: float = 8.0,
              safety: float = 0.5, check_points: int = 257, min_width: float = 1e-10,
              verify_samples: int = 10**6) -> GeluPolyTable:
    """Fit, verify and return a table whose max error is at most ``tolerance``.

    Each branch image is bisected recursively; a segment is accepted at the
    lowest degree whose error on a dense check grid is at most
    ``safety * tolerance``.
    """
    if not tolerance > 0:
        raise ParameterError(f"tolerance must be positive, got {tolerance}")
    if not 1 <= max_degree <= MAX_DEGREE:
        raise ParameterError(f"max_degree must be in [1, {MAX_DEGREE}], got {max_degree}")
    mn = locate_minimum()
    target = safety * tolerance
    segments = []
    worst = 0.0
    for branch, top in ((0, 0.0), (1, tail_threshold)):
        stack = [(mn.y_min, top)]
        done = []
        while stack:
            lo, hi = stack.pop()
            fit = _fit_segment(branch, lo, hi, mn.y_min, target, max_degree, check_points)
            if fit is not None:
                done.append(fit.segment)
                worst = max(worst, fit.error)
                continue
            if hi - lo < min_width:
                raise FitError(
                    f"branch {branch}: cannot reach {target:g} on [{lo!r}, {hi!r}] with degree "
                    f"<= {max_degree} (segment floor {min_width:g})")
            mid = 0.5 * (lo + hi)
            stack.append((mid, hi))
            stack.append((lo, mid))
        segments.extend(sorted(done, key=lambda s: s.lo))
    table = GeluPolyTable(mn.x_star, mn.y_min, tolerance, tuple(segments), fit_residual=worst)
    report = verify_table(table, verify_samples, store=False)
    if report.max_error > tolerance:
        raise FitError(
            f"verified error {report.max_error:.3e} exceeds tolerance {tolerance:g} "
            f"at x={report.worst_x!r}")
    table.verified_max_error = report.max_error
    return table


@dataclass(frozen=True)
class VerificationReport:
    max_error: float
    worst_x: float
    worst_y: float
    worst_branch: int
    samples: int


def verify_table(table: GeluPolyTable, samples: Union[int, np.ndarray] = 10**6,
                 x_range: tuple = (-10.0, 10.0), store: bool = True) -> VerificationReport:
    """Compare ``table`` against exact ``GELU'`` on an x-grid mapped through GELU."""
    if table is None or not table.segments:
        raise ConfigurationError("cannot verify an empty table")
    if np.isscalar(samples):
        if int(samples) < 2:
            raise ParameterError("need at least two verification samples")
        x = np.linspace(x_range[0], x_range[1], int(samples))
    else:
        x = np.asarray(samples, dtype=np.float64).ravel()
    y = gelu(x)
    m = x > table.x_star
    err = np.abs(table.evaluate(y, m) - gelu_prime(x))
    i = int(np.argmax(err))
    report = VerificationReport(float(err[i]), float(x[i]), float(y[i]), int(m[i]), int(x.size))
    if store:
        table.verified_max_error = report.max_error
    return report


def check_points_x(table: GeluPolyTable, check_points: int = 257) -> np.ndarray:
    """x-values of every segment's acceptance grid (for re-verifying a fit)."""
    xs = []
    for seg in table.segments:
        va, vb = _variable_range(seg, table.y_min)
        y = np.clip(_from_unit(np.linspace(-1, 1, check_points), seg.variable, va, vb, table.y_min),
                    seg.lo, seg.hi)
        if seg.branch == 0:
            y = y[y < 0.0]
        xs.append(invert_gelu_array(y, np.full(y.shape, bool(seg.branch))))
    return np.concatenate(xs)


# -- serialization -----------------------------------------------------------


def _fmt(v: Optional[float]) -> str:
    return "nan" if v is None else format(float(v), ".17g")


def dumps(table: GeluPolyTable) -> str:
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION} x_star={_fmt(table.x_star)} y_min={_fmt(table.y_min)} "
             f"tol={_fmt(table.tolerance)} max_err={_fmt(table.verified_max_error)}"]
    for s in table.segments:
        coeffs = " ".join(_fmt(c) for c in s.coeffs)
        lines.append(f"{s.branch} {_fmt(s.lo)} {_fmt(s.hi)} {s.variable} {s.degree} {coeffs}")
    return "\n".join(lines) + "\n"


def _float(tok: str, what: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise TableFormatError(f"line {lineno}: bad {what} {tok!r}") from None


def loads(text: str) -> GeluPolyTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TableFormatError("empty table file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != FORMAT_TAG:
        raise TableFormatError(f"line 1: not a {FORMAT_TAG} header")
    if head[1] != FORMAT_VERSION:
        raise TableFormatError(f"unsupported table version {head[1]!r}")
    fields = {}
    for tok in head[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise TableFormatError(f"line 1: malformed field {tok!r}")
        fields[key] = _float(val, key, 1)
    if set(fields) != {"x_star", "y_min", "tol", "max_err"}:
        raise TableFormatError(f"line 1: unexpected fields {sorted(fields)}")
    segments = []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if len(tok) < 6:
            raise TableFormatError(f"line {lineno}: too few fields")
        if tok[0] not in ("0", "1"):
            raise TableFormatError(f"line {lineno}: branch must be 0 or 1")
        try:
            degree = int(tok[4])
        except ValueError:
            raise TableFormatError(f"line {lineno}: bad degree {tok[4]!r}") from None
        coeffs = tuple(_float(c, "coefficient", lineno) for c in tok[5:])
        if len(coeffs) != degree + 1:
            raise TableFormatError(
                f"line {lineno}: degree {degree} needs {degree + 1} coefficients, got {len(coeffs)}")
        segments.append(Segment(int(tok[0]), _float(tok[1], "lo", lineno),
                                _float(tok[2], "hi", lineno), tok[3], coeffs))
    max_err = fields["max_err"]
    return GeluPolyTable(fields["x_star"], fields["y_min"], fields["tol"], tuple(segments),
                         None if math.isnan(max_err) else max_err)


def save_table(table: GeluPolyTable, path) -> None:
    Path(path).write_text(dumps(table))


def load_table(path) -> GeluPolyTable:
    return loads(Path(path).read_text())


DEFAULT_TABLE_PATH = Path(__file__).with_name("data") / "gelu_table.txt"


@functools.lru_cache(maxsize=None)
def default_table() -> GeluPolyTable:
    """The packaged table fitted at tolerance 1e-4."""
    return load_table(DEFAULT_TABLE_PATH)
