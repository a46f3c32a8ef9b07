"""Closed-form EM for finite gamma mixtures.

The M-step uses the weighted closed-form gamma estimators obtained from the
generalized-gamma score equations (power fixed at 1), so no root finding is
needed per iteration.  The EM driver in this module is shared with the
constrained and numerical-MLE variants, which only swap the M-step.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from typing import Callable

import numpy as np

from .errors import (DegenerateComponentError, DegenerateInputError, DivergenceError,
                     SolveError)
from .model import FitConfig, FitResult, MixtureModel
from .special import log_gamma_fn, mom_estimate

__all__ = [
    "StabilityWarning",
    "initialize",
    "responsibilities",
    "update_component",
    "update_weights",
    "log_likelihood",
    "em_fit",
    "multi_restart_fit",
    "METHODS",
]

logger = logging.getLogger(__name__)

METHODS = ("cfgmm", "constrained", "baseline")

# A component whose responsibility mass falls below this fraction of n is
# treated as empty, which counts as divergence.
EMPTY_COMPONENT_FRACTION = 1e-8


class StabilityWarning(RuntimeWarning):
    """Every component density underflowed at some observation."""


def as_data(values, k: int = 1) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if x.ndim != 1:
        raise DegenerateInputError("data must be one-dimensional")
    if x.size < 2 * k:
        raise DegenerateInputError(f"need at least {2 * k} observations for {k} components, "
                                   f"got {x.size}")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DegenerateInputError("data must be finite and strictly positive")
    return x


class _Data:
    """Data with the per-observation transforms the updates need."""

    __slots__ = ("x", "logx", "n")

    def __init__(self, x: np.ndarray):
        self.x = x
        self.logx = np.log(x)
        self.n = x.size


# --------------------------------------------------------------------------
# E-step pieces


def _weighted_log_densities(d: _Data, shapes, scales, weights) -> np.ndarray:
    """(K, n) array of log(w_k) + log f(x_i | a_k, b_k)."""
    shapes = np.asarray(shapes, dtype=float)
    scales = np.asarray(scales, dtype=float)
    lgam = np.array([log_gamma_fn(a) for a in shapes])
    with np.errstate(divide="ignore"):
        offset = np.log(weights) - shapes * np.log(scales) - lgam
    return ((shapes - 1.0)[:, None] * d.logx - d.x / scales[:, None]) + offset[:, None]


def _colwise(op, arr: np.ndarray) -> np.ndarray:
    # Reduce over the (short) component axis with elementwise ops; much faster
    # than an axis reduction when K is small.
    out = arr[0].copy()
    for row in arr[1:]:
        op(out, row, out=out)
    return out


def _e_step(logp: np.ndarray) -> tuple[float, np.ndarray]:
    """Normalise (K, n) weighted log-densities; returns (log-likelihood, z as (K, n))."""
    colmax = _colwise(np.maximum, logp)
    bad = ~np.isfinite(colmax)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} observation(s) have zero density under every "
                      "component; assigning them to the nearest component", StabilityWarning,
                      stacklevel=3)
        colmax = np.where(bad, 0.0, colmax)
    with np.errstate(invalid="ignore", over="ignore"):
        w = np.exp(logp - colmax)
    total = _colwise(np.add, w)
    z = w / total
    if bad.any():
        z[:, bad] = _fallback_columns(logp[:, bad])
        ll = -math.inf
    else:
        ll = float(np.sum(colmax + np.log(total)))
    return ll, z


def _fallback_columns(logp: np.ndarray) -> np.ndarray:
    # All weighted densities are -inf (or nan): uniform assignment, unless a
    # single component overflowed to +inf, which then takes the point.
    k = logp.shape[0]
    out = np.full(logp.shape, 1.0 / k)
    for i in range(logp.shape[1]):
        hits = np.isposinf(logp[:, i])
        if hits.sum() == 1:
            out[:, i] = hits.astype(float)
    return out


def responsibilities(data, model: MixtureModel) -> np.ndarray:
    """Posterior membership probabilities, an (n, K) array with unit row sums."""
    d = _Data(as_data(data))
    logp = _weighted_log_densities(d, model.shapes, model.scales, model.weights)
    return _e_step(logp)[1].T.copy()


def log_likelihood(data, model: MixtureModel) -> float:
    """Observed-data log-likelihood sum_i log sum_k w_k f(x_i | a_k, b_k).

    Returns -inf when some observation has zero density under every component.
    """
    d = _Data(as_data(data))
    logp = _weighted_log_densities(d, model.shapes, model.scales, model.weights)
    colmax = _colwise(np.maximum, logp)
    if not np.all(np.isfinite(colmax)):
        return -math.inf
    return float(np.sum(colmax + np.log(_colwise(np.add, np.exp(logp - colmax)))))


# --------------------------------------------------------------------------
# M-step pieces


class WeightedSums:
    """Responsibility-weighted sums per component, each of length K.

    ``z`` is laid out as (K, n).
    """

    __slots__ = ("sz", "sx", "slogx", "cov")

    def __init__(self, d: _Data, z: np.ndarray):
        self.sz = z.sum(axis=1)
        self.sx = z @ d.x
        self.slogx = z @ d.logx
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_log = self.slogx / self.sz
        # sum_i z_ik x_i (log x_i - mean log) equals the shape denominator
        # sz*sum(z x log x) - sum(z log x)*sum(z x) divided by sz, without the
        # cancellation of the uncentred form.
        self.cov = ((d.logx - mean_log[:, None]) * z) @ d.x


def _closed_form(sz: float, sx: float, cov: float) -> tuple[float, float]:
    den = sz * cov
    if not (den > 0.0) or not math.isfinite(den):
        raise DegenerateComponentError(f"closed-form shape denominator is {den!r}")
    return sz * sx / den, den / (sz * sz)


def update_component(data, z_column) -> tuple[float, float]:
    """Closed-form weighted (shape, scale) for one component.

    shape = (sum z)(sum z x) / ((sum z)(sum z x log x) - (sum z log x)(sum z x))
    scale = ((sum z)(sum z x log x) - (sum z log x)(sum z x)) / (sum z)^2

    so that shape * scale is the z-weighted mean.

    Raises
    ------
    DegenerateComponentError
        If the shape denominator is not positive.
    """
    d = _Data(as_data(data))
    z = np.asarray(z_column, dtype=float).reshape(1, -1)
    if z.shape[1] != d.n:
        raise ValueError("z_column must have one weight per observation")
    if not (z.sum() > 0):
        raise DegenerateComponentError("component has no responsibility mass")
    s = WeightedSums(d, z)
    return _closed_form(s.sz[0], s.sx[0], s.cov[0])


def update_weights(z) -> np.ndarray:
    """Mixing weights: column sums of an (n, K) responsibility matrix over n."""
    z = np.asarray(z, dtype=float)
    return _weights_from_mass(z.sum(axis=0), z.shape[0])


def _weights_from_mass(mass: np.ndarray, n: int) -> np.ndarray:
    w = mass / n
    return w / math.fsum(w)


def _closed_form_step(d: _Data, s: WeightedSums, shapes, scales):
    out_a = np.empty_like(shapes)
    out_b = np.empty_like(scales)
    for k in range(s.sz.size):
        out_a[k], out_b[k] = _closed_form(s.sz[k], s.sx[k], s.cov[k])
    return out_a, out_b


# --------------------------------------------------------------------------
# Initialisation


def _block_sizes(weights: np.ndarray, n: int) -> np.ndarray:
    raw = weights * n
    sizes = np.floor(raw).astype(int)
    short = n - sizes.sum()
    if short > 0:
        for k in np.argsort(-(raw - sizes), kind="stable")[:short]:
            sizes[k] += 1
    for k in range(sizes.size):
        while sizes[k] < 2:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[k] += 1
    return sizes


def initialize(data, k: int, rng: np.random.Generator, max_tries: int = 100) -> MixtureModel:
    """Random starting mixture.

    Draws weights uniformly on the simplex, splits the sorted data into K
    contiguous blocks of proportional size (at least 2 points each) and fits
    each block by the method of moments.  Blocks with zero variance trigger a
    fresh weight draw.
    """
    x = np.sort(as_data(data, k))
    if k == 1:
        p = mom_estimate(x)
        return MixtureModel.from_arrays([p.shape], [p.scale], [1.0])
    for _ in range(max_tries):
        weights = rng.dirichlet(np.ones(k))
        weights = weights / math.fsum(weights)
        sizes = _block_sizes(weights, x.size)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        try:
            params = [mom_estimate(x[bounds[j]:bounds[j + 1]]) for j in range(k)]
        except DegenerateInputError:
            continue
        return MixtureModel.from_arrays([p.shape for p in params],
                                        [p.scale for p in params], weights)
    raise DegenerateInputError("could not find a partition with positive variance in every block")


# --------------------------------------------------------------------------
# Driver

MStep = Callable[[_Data, WeightedSums, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def _iterate(d: _Data, model: MixtureModel, config: FitConfig, mstep: MStep):
    """One EM run from ``model``; raises DivergenceError on breakdown."""
    shapes, scales, weights = model.shapes, model.scales, model.weights
    ll, z = _e_step(_weighted_log_densities(d, shapes, scales, weights))
    trajectory = [ll]
    converged = False
    iterations = 0
    empty = EMPTY_COMPONENT_FRACTION * d.n
    for _ in range(int(config.max_iter)):
        s = WeightedSums(d, z)
        if np.any(s.sz < empty):
            raise DivergenceError("a component lost all of its responsibility mass")
        try:
            new_a, new_b = mstep(d, s, shapes, scales)
        except (DegenerateComponentError, SolveError) as exc:
            raise DivergenceError(str(exc)) from exc
        if not (np.all(np.isfinite(new_a)) and np.all(np.isfinite(new_b))
                and np.all(new_a > 0) and np.all(new_b > 0)):
            raise DivergenceError("non-finite or non-positive parameter after M-step")
        new_w = _weights_from_mass(s.sz, d.n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilityWarning)
            new_ll, new_z = _e_step(_weighted_log_densities(d, new_a, new_b, new_w))
        if not math.isfinite(new_ll):
            raise DivergenceError("log-likelihood is no longer finite")
        shapes, scales, weights, z = new_a, new_b, new_w, new_z
        iterations += 1
        trajectory.append(new_ll)
        if abs(new_ll - ll) / d.n <= config.tol:
            converged = True
            break
        ll = new_ll
    return MixtureModel.from_arrays(shapes, scales, weights), converged, iterations, trajectory


def run_em(data, k: int, config: FitConfig, mstep: MStep, method: str,
           rng: np.random.Generator | None = None, reorder: bool = True) -> FitResult:
    """Single EM run with divergence restarts (fresh initialisation each time).

    With ``reorder`` the output components are in canonical (mean) order.
    """
    start = time.perf_counter()
    x = as_data(data, k)
    d = _Data(x)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    divergences = 0
    last_model = None
    while True:
        model = initialize(x, k, rng)
        last_model = model
        try:
            fitted, converged, iterations, trajectory = _iterate(d, model, config, mstep)
        except DivergenceError as exc:
            divergences += 1
            logger.debug("%s run diverged (%s); restart %d", method, exc, divergences)
            if divergences > config.max_divergence_retries:
                ll = log_likelihood(x, last_model)
                return FitResult(model=last_model.canonical() if reorder else last_model,
                                 converged=False, iterations=0,
                                 loglik_trajectory=(ll,), final_loglik=ll,
                                 wall_time=time.perf_counter() - start, restarts_used=1,
                                 divergence_restarts=divergences, method=method,
                                 status="diverged")
            continue
        break
    return FitResult(model=fitted.canonical() if reorder else fitted, converged=converged, iterations=iterations,
                     loglik_trajectory=tuple(trajectory), final_loglik=trajectory[-1],
                     wall_time=time.perf_counter() - start, restarts_used=1,
                     divergence_restarts=divergences, method=method,
                     status="converged" if converged else "max_iter")


def em_fit(data, k: int, config: FitConfig = FitConfig(),
           rng: np.random.Generator | None = None) -> FitResult:
    """Unconstrained closed-form EM (one initialisation plus divergence restarts)."""
    return run_em(data, k, config, _closed_form_step, "cfgmm", rng)


def select_best(results: list[FitResult]) -> FitResult:
    """Highest final log-likelihood among converged runs (lowest index on ties)."""
    pool = [r for r in results if r.converged] or list(results)
    best = pool[0]
    for r in pool[1:]:
        if r.final_loglik > best.final_loglik:
            best = r
    return best


def multi_restart_fit(data, k: int, config: FitConfig = FitConfig(), method: str = "cfgmm",
                      bounds=None) -> FitResult:
    """Run ``config.restarts`` independent fits and keep the best converged one.

    Restart ``r`` uses seed ``config.seed + r``, so ``restarts=1`` reproduces
    the single-run fit for the same seed.  ``method`` is one of ``METHODS``;
    ``bounds`` is required for ``"constrained"``.
    """
    from .baseline import baseline_em_fit
    from .constrained import constrained_em_fit

    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "constrained" and bounds is None:
        raise ValueError("the constrained method needs mode bounds")
    start = time.perf_counter()
    results = []
    for r in range(int(config.restarts)):
        rng = np.random.default_rng(config.seed + r)
        if method == "cfgmm":
            results.append(em_fit(data, k, config, rng))
        elif method == "constrained":
            results.append(constrained_em_fit(data, k, bounds, config, rng))
        else:
            results.append(baseline_em_fit(data, k, config, rng))
    best = select_best(results)
    return FitResult(model=best.model, converged=best.converged, iterations=best.iterations,
                     loglik_trajectory=best.loglik_trajectory, final_loglik=best.final_loglik,
                     wall_time=time.perf_counter() - start, restarts_used=len(results),
                     divergence_restarts=sum(r.divergence_restarts for r in results),
                     method=method, status=best.status,
                     restart_logliks=tuple(r.final_loglik for r in results))
