"""Reference gamma-mixture EM with a numerically solved M-step.

Each M-step computes the exact weighted gamma MLE per component, which has
no closed form: the shape solves log(a) - digamma(a) = s by safeguarded
Newton iteration.  Everything else (initialisation, stopping rule,
divergence restarts) is the shared EM driver, so timing differences against
the closed-form fit come from the M-step alone.
"""

from __future__ import annotations

import math

import numpy as np

from .em import WeightedSums, _Data, as_data, run_em
from .errors import DegenerateComponentError, SolveError
from .model import FitConfig, FitResult
from .special import digamma, trigamma

__all__ = ["weighted_gamma_mle", "baseline_em_fit"]

NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-10


def _shape_residual(a: float, s: float) -> float:
    return math.log(a) - digamma(a) - s


def _solve_shape(s: float) -> float:
    if not (s > 0.0 and math.isfinite(s)):
        raise DegenerateComponentError(f"log-mean minus mean-log is {s!r}; need > 0")
    a = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    f = _shape_residual(a, s)
    if abs(f) <= NEWTON_TOL:
        return a
    # f decreases in a: f > 0 means the root is larger.
    lo = hi = a
    if f > 0:
        while _shape_residual(hi, s) > 0:
            hi *= 2.0
            if hi > 1e300:
                raise SolveError("shape root not bracketed")
    else:
        while _shape_residual(lo, s) < 0:
            lo *= 0.5
            if lo < 1e-300:
                raise SolveError("shape root not bracketed")
    for _ in range(NEWTON_MAX_ITER):
        if abs(f) <= NEWTON_TOL:
            return a
        if f > 0:
            lo = a
        else:
            hi = a
        slope = 1.0 / a - trigamma(a)
        step = a - f / slope if slope < 0 else math.nan
        a = step if lo < step < hi else 0.5 * (lo + hi)
        f = _shape_residual(a, s)
    if abs(f) <= NEWTON_TOL:
        return a
    raise SolveError(f"shape Newton iteration did not converge (residual {f!r})")


def _mle_from_sums(sz: float, sx: float, slogx: float) -> tuple[float, float]:
    mean_x = sx / sz
    s = math.log(mean_x) - slogx / sz
    a = _solve_shape(s)
    return a, mean_x / a


def weighted_gamma_mle(data, z_column) -> tuple[float, float]:
    """Weighted gamma maximum-likelihood (shape, scale).

    Raises
    ------
    DegenerateComponentError
        When all weight sits on a single value (log-mean equals mean-log).
    SolveError
        When the shape root cannot be bracketed or the iteration stalls.
    """
    x = as_data(data)
    z = np.asarray(z_column, dtype=float)
    sz = math.fsum(z)
    if not sz > 0:
        raise DegenerateComponentError("component has no responsibility mass")
    return _mle_from_sums(sz, float(x @ z), float(np.log(x) @ z))


def _mle_step(d: _Data, s: WeightedSums, shapes, scales):
    out_a = np.empty_like(shapes)
    out_b = np.empty_like(scales)
    for k in range(s.sz.size):
        out_a[k], out_b[k] = _mle_from_sums(s.sz[k], s.sx[k], s.slogx[k])
    return out_a, out_b


def baseline_em_fit(data, k: int, config: FitConfig = FitConfig(),
                    rng: np.random.Generator | None = None) -> FitResult:
    """Gamma mixture EM with the numerical weighted-MLE M-step."""
    return run_em(data, k, config, _mle_step, "baseline", rng)
