"""Special functions, gamma densities and gamma variate generation.

Everything here is the numeric substrate for the EM estimators: the
log-gamma, digamma and trigamma functions are evaluated with the
recurrence-plus-asymptotic-series approach rather than borrowed from a
runtime library, so their accuracy is under our control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError

__all__ = [
    "NO_MODE",
    "GammaParams",
    "GenGammaParams",
    "log_gamma_fn",
    "digamma",
    "trigamma",
    "gamma_log_density",
    "gen_gamma_log_density",
    "gamma_mode",
    "mom_estimate",
    "gamma_sample",
]

#: Mode of a gamma component with shape < 1 (the density has no interior peak).
NO_MODE = -math.inf

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Below this the argument is shifted up by recurrence before the asymptotic
# series is used; at 10 the truncated series is accurate to ~1e-17.
_ASYMPTOTIC_MIN = 10.0

# B_2k / (2k (2k - 1)) for k = 1..8 (Stirling series of ln Gamma).
_LGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)

# B_2k / (2k) for k = 1..7 (asymptotic series of digamma).
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# B_2k for k = 1..7 (asymptotic series of trigamma).
_TRIGAMMA_SERIES = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def _check_positive(x: float, name: str = "x") -> float:
    try:
        x = float(x)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"{name} must be a real number, got {x!r}") from exc
    if not math.isfinite(x) or x <= 0.0:
        raise DomainError(f"{name} must be positive and finite, got {x!r}")
    return x


def _poly_in_inverse_square(coeffs: tuple[float, ...], inv_sq: float) -> float:
    # Horner evaluation of sum_k coeffs[k] * inv_sq**k.
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * inv_sq + c
    return acc


def log_gamma_fn(x: float) -> float:
    """Natural logarithm of the gamma function for x > 0.

    Raises
    ------
    DomainError
        If ``x`` is not a positive finite number.
    """
    x = _check_positive(x)
    shift = 0.0
    if x < _ASYMPTOTIC_MIN:
        # ln Gamma(x) = ln Gamma(x + N) - ln(x (x+1) ... (x+N-1))
        prod = 1.0
        while x < _ASYMPTOTIC_MIN:
            prod *= x
            x += 1.0
        shift = math.log(prod)
    inv = 1.0 / x
    series = inv * _poly_in_inverse_square(_LGAMMA_SERIES, inv * inv)
    return math.fsum(((x - 0.5) * math.log(x), -x, _HALF_LOG_2PI, series, -shift))


def digamma(x: float) -> float:
    """Digamma function psi(x) = d/dx ln Gamma(x) for x > 0."""
    x = _check_positive(x)
    terms = []
    while x < _ASYMPTOTIC_MIN:
        terms.append(-1.0 / x)
        x += 1.0
    inv_sq = 1.0 / (x * x)
    terms += [math.log(x), -0.5 / x, -inv_sq * _poly_in_inverse_square(_DIGAMMA_SERIES, inv_sq)]
    return math.fsum(terms)


def trigamma(x: float) -> float:
    """Trigamma function psi'(x) for x > 0."""
    x = _check_positive(x)
    terms = []
    while x < _ASYMPTOTIC_MIN:
        terms.append(1.0 / (x * x))
        x += 1.0
    inv = 1.0 / x
    inv_sq = inv * inv
    terms += [inv, 0.5 * inv_sq, inv * inv_sq * _poly_in_inverse_square(_TRIGAMMA_SERIES, inv_sq)]
    return math.fsum(terms)


@dataclass(frozen=True)
class GammaParams:
    """Shape-scale gamma parameters."""

    shape: float
    scale: float

    def __post_init__(self):
        for name in ("shape", "scale"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float, np.floating, np.integer))
                    and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
            object.__setattr__(self, name, float(value))

    @property
    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class GenGammaParams:
    """Stacy generalized gamma parameters; ``power`` = 1 is the plain gamma."""

    shape: float
    scale: float
    power: float

    def __post_init__(self):
        for name in ("shape", "scale", "power"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float, np.floating, np.integer))
                    and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
            object.__setattr__(self, name, float(value))


def _positive_support(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError("density is only defined for finite x > 0")
    return arr


def gamma_log_density(x, p: GammaParams):
    """Log-density of the shape-scale gamma distribution.

    Accepts a scalar or an array; returns the same shape (a float for scalars).
    """
    arr = _positive_support(x)
    a, b = p.shape, p.scale
    out = (a - 1.0) * np.log(arr) - arr / b - a * math.log(b) - log_gamma_fn(a)
    return float(out) if out.ndim == 0 else out


def gen_gamma_log_density(x, p: GenGammaParams):
    """Log-density of the generalized gamma, exp(-(x/b)**power) kernel."""
    arr = _positive_support(x)
    a, b, g = p.shape, p.scale, p.power
    out = (math.log(g) + (a * g - 1.0) * np.log(arr) - (arr / b) ** g
           - a * g * math.log(b) - log_gamma_fn(a))
    return float(out) if out.ndim == 0 else out


def gamma_mode(p: GammaParams) -> float:
    """Mode (a - 1) * b, or ``NO_MODE`` (-inf) when shape < 1."""
    if p.shape < 1.0:
        return NO_MODE
    return (p.shape - 1.0) * p.scale


def mom_estimate(values) -> GammaParams:
    """Method-of-moments gamma fit using the (n - 1) sample variance."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise DegenerateInputError("method of moments needs at least 2 values")
    mean = float(arr.mean())
    var = float(arr.var(ddof=1))
    if not (var > 0.0) or not (mean > 0.0):
        raise DegenerateInputError(
            f"method of moments needs positive mean and variance (mean={mean}, var={var})")
    return GammaParams(shape=mean * mean / var, scale=var / mean)


def _standard_gamma_ge1(shape: float, rng: np.random.Generator, n: int) -> np.ndarray:
    # Marsaglia-Tsang squeeze/rejection for shape >= 1, vectorised in batches.
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        batch = need + need // 8 + 16
        z = rng.standard_normal(batch)
        u = rng.random(batch)
        v = 1.0 + c * z
        ok = v > 0.0
        z, u, v = z[ok], u[ok], v[ok] ** 3
        z2 = z * z
        accept = u < 1.0 - 0.0331 * z2 * z2
        slow = ~accept
        with np.errstate(divide="ignore"):
            accept[slow] = np.log(u[slow]) < 0.5 * z2[slow] + d * (1.0 - v[slow] + np.log(v[slow]))
        draws = d * v[accept]
        take = min(need, draws.size)
        out[filled:filled + take] = draws[:take]
        filled += take
    return out


def gamma_sample(p: GammaParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. gamma variates.

    Shape < 1 uses the boost identity Gamma(a) = Gamma(a + 1) * U**(1/a).
    The output is a deterministic function of the generator state.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be at least 1")
    if p.shape >= 1.0:
        return p.scale * _standard_gamma_ge1(p.shape, rng, n)
    base = _standard_gamma_ge1(p.shape + 1.0, rng, n)
    u = rng.random(n)
    return p.scale * base * u ** (1.0 / p.shape)
