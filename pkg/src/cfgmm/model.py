"""Mixture model containers, fit configuration and fit results."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .special import GammaParams, gamma_mode

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GammaComponent:
    shape: float
    scale: float
    weight: float

    def __post_init__(self):
        for name in ("shape", "scale"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"component {name} must be positive and finite, got {value!r}")
            object.__setattr__(self, name, value)
        w = float(self.weight)
        if not (0.0 <= w <= 1.0):
            raise ValueError(f"component weight must lie in [0, 1], got {w!r}")
        object.__setattr__(self, "weight", w)

    @property
    def params(self) -> GammaParams:
        return GammaParams(self.shape, self.scale)

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def mode(self) -> float:
        return gamma_mode(self.params)


@dataclass(frozen=True)
class MixtureModel:
    """An ordered set of gamma components whose weights sum to one."""

    components: tuple[GammaComponent, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        total = math.fsum(c.weight for c in comps)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"mixture weights must sum to 1, got {total!r}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, shapes, scales, weights) -> "MixtureModel":
        shapes, scales, weights = (np.asarray(v, dtype=float).ravel()
                                   for v in (shapes, scales, weights))
        if not (shapes.size == scales.size == weights.size):
            raise ValueError("shapes, scales and weights must have equal length")
        return cls(tuple(GammaComponent(a, b, w) for a, b, w in zip(shapes, scales, weights)))

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def shapes(self) -> np.ndarray:
        return np.array([c.shape for c in self.components])

    @property
    def scales(self) -> np.ndarray:
        return np.array([c.scale for c in self.components])

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        return self.shapes * self.scales

    @property
    def modes(self) -> np.ndarray:
        return np.array([c.mode for c in self.components])

    def canonical(self) -> "MixtureModel":
        """Components sorted by mean a*b, ties broken by weight."""
        order = sorted(range(self.k), key=lambda i: (self.components[i].mean,
                                                     self.components[i].weight))
        return MixtureModel(tuple(self.components[i] for i in order))

    def to_dict(self) -> dict:
        return {"components": [asdict(c) for c in self.components]}


@dataclass(frozen=True)
class FitConfig:
    """EM stopping rules, restart policy and seed.

    ``tol`` is compared with the per-observation log-likelihood change
    |l(t) - l(t-1)| / n.
    """

    max_iter: int = 1000
    tol: float = 1e-8
    restarts: int = 5
    max_divergence_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if not (self.tol > 0):
            raise ValueError("tol must be > 0")
        if int(self.restarts) < 1:
            raise ValueError("restarts must be >= 1")
        if int(self.max_divergence_retries) < 0:
            raise ValueError("max_divergence_retries must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FitResult:
    model: MixtureModel
    converged: bool
    iterations: int
    loglik_trajectory: tuple[float, ...]
    final_loglik: float
    wall_time: float  # seconds
    restarts_used: int = 1
    divergence_restarts: int = 0
    method: str = "cfgmm"
    status: str = "converged"
    restart_logliks: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        comps = []
        for c in self.model.components:
            mode = c.mode
            comps.append({"shape": c.shape, "scale": c.scale, "weight": c.weight,
                          "mean": c.mean, "mode": mode if math.isfinite(mode) else None})
        return {
            "method": self.method,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "final_loglik": self.final_loglik,
            "restarts_used": self.restarts_used,
            "divergence_restarts": self.divergence_restarts,
            "wall_time_s": self.wall_time,
            "components": comps,
        }
