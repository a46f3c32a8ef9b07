"""Closed-form EM with per-component mode interval constraints.

After each closed-form M-step, every component whose mode (a - 1) * b falls
outside its interval is moved to the nearest boundary m: the scale solves the
profile score equation of the expected complete-data log-likelihood along
shape = m / scale + 1, and the shape follows from that relation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .em import WeightedSums, _closed_form, _Data, as_data, run_em
from .errors import DegenerateComponentError, SolveError
from .model import FitConfig, FitResult
from .special import NO_MODE, digamma, trigamma

__all__ = ["ModeBounds", "check_and_project", "newton_solve_b", "score_residual",
           "constrained_em_fit"]

RESIDUAL_TOL = 1e-8
_MAX_STEPS = 200


@dataclass(frozen=True)
class ModeBounds:
    """Closed intervals [lower, upper] for each component's mode.

    A lower bound of -inf admits components with shape < 1, which have no
    mode.  Finite bounds must be non-negative because gamma modes are.
    """

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        cleaned = []
        for i, pair in enumerate(self.intervals):
            lo, hi = (float(v) for v in pair)
            if math.isnan(lo) or math.isnan(hi) or lo == math.inf or hi == -math.inf:
                raise ValueError(f"interval {i + 1}: invalid bounds ({lo}, {hi})")
            if not lo < hi:
                raise ValueError(f"interval {i + 1}: lower bound {lo} must be below upper {hi}")
            if math.isfinite(lo) and lo < 0 or math.isfinite(hi) and hi < 0:
                raise ValueError(f"interval {i + 1}: finite mode bounds must be >= 0 "
                                 "(use -inf to allow components without a mode)")
            cleaned.append((lo, hi))
        if not cleaned:
            raise ValueError("at least one interval is required")
        object.__setattr__(self, "intervals", tuple(cleaned))

    def __len__(self) -> int:
        return len(self.intervals)

    def __getitem__(self, k: int) -> tuple[float, float]:
        return self.intervals[k]

    @classmethod
    def unbounded(cls, k: int) -> "ModeBounds":
        return cls(((-math.inf, math.inf),) * k)

    @classmethod
    def parse(cls, text: str) -> "ModeBounds":
        """Parse ``"l1,u1;l2,u2"``; ``-inf`` and ``inf`` are accepted."""
        pairs = []
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            parts = [p.strip() for p in re.split(r",", chunk)]
            if len(parts) != 2:
                raise ValueError(f"bad interval {chunk!r}; expected 'lower,upper'")
            try:
                pairs.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ValueError(f"bad interval {chunk!r}: {exc}") from None
        return cls(tuple(pairs))

    def format(self) -> str:
        return ";".join(f"{_fmt(lo)},{_fmt(hi)}" for lo, hi in self.intervals)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _residual(b: float, m: float, mean_x: float, mean_logx: float) -> float:
    # Score along shape = m/b + 1, divided by the mass sum z and with the
    # non-vanishing -1/b^2 factor removed.
    return m + b - m * math.log(b) - m * digamma(m / b + 1.0) + m * mean_logx - mean_x


def _residual_slope(b: float, m: float) -> float:
    r = m / b
    return 1.0 - r + r * r * trigamma(r + 1.0)


def score_residual(data, z_column, m: float, b: float) -> float:
    """sum_i z_i (m + b - m log b - m psi(m/b + 1) + m log x_i - x_i)."""
    x = as_data(data)
    z = np.asarray(z_column, dtype=float)
    sz = math.fsum(z)
    return sz * _residual(b, m, float(x @ z) / sz, float(np.log(x) @ z) / sz)


def _solve_scale(m: float, mean_x: float, mean_logx: float, initial: float | None) -> float:
    if m == 0.0:
        return mean_x
    lo_lim, hi_lim = 1e-12 * mean_x, 1e12 * mean_x
    b = mean_x if initial is None or not math.isfinite(initial) or initial <= 0 else initial
    b = min(max(b, lo_lim), hi_lim)

    def h(v):
        return _residual(v, m, mean_x, mean_logx)

    hb = h(b)
    if abs(hb) <= RESIDUAL_TOL:
        return b
    # The residual grows without bound as b -> inf, so a positive value means
    # the root lies below b.
    step = 0.5 if hb > 0 else 2.0
    other, h_other = b, hb
    while (h_other > 0) == (hb > 0):
        other *= step
        if other < lo_lim or other > hi_lim:
            raise SolveError(f"no sign change of the boundary score for mode {m!r} "
                             f"on [{lo_lim:.3g}, {hi_lim:.3g}]")
        h_other = h(other)
        if abs(h_other) <= RESIDUAL_TOL:
            return other
    if hb < 0:
        neg, pos = b, other
    else:
        neg, pos = other, b
    # Newton in log-scale, bisection when a step leaves the bracket.
    t_neg, t_pos = math.log(neg), math.log(pos)
    t, ht = math.log(b), hb
    for _ in range(_MAX_STEPS):
        if abs(ht) <= RESIDUAL_TOL:
            return math.exp(t)
        if ht < 0:
            t_neg = t
        else:
            t_pos = t
        bt = math.exp(t)
        slope = bt * _residual_slope(bt, m)
        t_new = t - ht / slope if slope != 0 and math.isfinite(slope) else math.nan
        lo, hi = min(t_neg, t_pos), max(t_neg, t_pos)
        if not (lo < t_new < hi):
            t_new = 0.5 * (t_neg + t_pos)
        if t_new == t:
            break
        t = t_new
        ht = h(math.exp(t))
    if abs(ht) <= RESIDUAL_TOL:
        return math.exp(t)
    raise SolveError(f"boundary score solve stalled at residual {ht!r} for mode {m!r}")


def newton_solve_b(data, z_column, m: float, initial: float | None = None) -> float:
    """Scale b whose boundary score residual vanishes for the target mode ``m``.

    The returned b satisfies |residual| <= 1e-8 * sum(z), where the residual
    is ``score_residual``.  ``m == 0`` returns the weighted mean directly.

    Raises
    ------
    SolveError
        If no sign change is found on [1e-12, 1e12] times the weighted mean.
    """
    if not (math.isfinite(m) and m >= 0):
        raise ValueError(f"boundary mode must be finite and >= 0, got {m!r}")
    x = as_data(data)
    z = np.asarray(z_column, dtype=float)
    sz = math.fsum(z)
    if not sz > 0:
        raise DegenerateComponentError("component has no responsibility mass")
    return _solve_scale(m, float(x @ z) / sz, float(np.log(x) @ z) / sz, initial)


def _mode(shape: float, scale: float) -> float:
    return NO_MODE if shape < 1.0 else (shape - 1.0) * scale


def _target_mode(mode: float, interval: tuple[float, float]) -> float | None:
    lo, hi = interval
    if lo <= mode <= hi:
        return None
    return lo if mode < lo else hi


def _project(shape, scale, interval, sz, sx, slogx):
    target = _target_mode(_mode(shape, scale), interval)
    if target is None:
        return shape, scale, False
    b = _solve_scale(target, sx / sz, slogx / sz, scale)
    return target / b + 1.0, b, True


def check_and_project(shape: float, scale: float, interval, data, z_column):
    """Return ``(shape, scale, was_projected)`` with the mode inside ``interval``.

    A violating component is moved to the nearest violated bound m, with the
    scale from ``newton_solve_b`` and shape = m / scale + 1.
    """
    interval = ModeBounds((tuple(interval),))[0]
    x = as_data(data)
    z = np.asarray(z_column, dtype=float)
    sz = math.fsum(z)
    return _project(shape, scale, interval, sz, float(x @ z), float(np.log(x) @ z))


def _make_step(bounds: ModeBounds):
    def step(d: _Data, s: WeightedSums, shapes, scales):
        out_a = np.empty_like(shapes)
        out_b = np.empty_like(scales)
        for k in range(s.sz.size):
            a, b = _closed_form(s.sz[k], s.sx[k], s.cov[k])
            out_a[k], out_b[k], _ = _project(a, b, bounds[k], s.sz[k], s.sx[k], s.slogx[k])
        return out_a, out_b
    return step


def constrained_em_fit(data, k: int, bounds: ModeBounds, config: FitConfig = FitConfig(),
                       rng: np.random.Generator | None = None) -> FitResult:
    """Mode-constrained closed-form EM.

    Components are returned in bound order (component k satisfies interval
    k), not re-sorted by mean.
    """
    if not isinstance(bounds, ModeBounds):
        bounds = ModeBounds(tuple(bounds))
    if len(bounds) != k:
        raise ValueError(f"got {len(bounds)} mode intervals for {k} components")
    return run_em(data, k, config, _make_step(bounds), "constrained", rng, reorder=False)
