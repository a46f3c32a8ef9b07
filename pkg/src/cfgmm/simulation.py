"""Simulation harness comparing the three estimators on synthetic mixtures.

A replicate draws one dataset per sample size and fits it with every
selected method (paired design).  Fitted components are matched to the true
ones by component mean, and the per-parameter errors, convergence flags and
wall times are aggregated into a :class:`SimulationReport`.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .constrained import ModeBounds
from .em import METHODS, multi_restart_fit
from .model import FitConfig, MixtureModel
from .special import gamma_sample

__all__ = [
    "SCHEMA_VERSION",
    "PARAMETERS",
    "LONG_COLUMNS",
    "AGGREGATE_COLUMNS",
    "SimulationSpec",
    "SimulationReport",
    "preset",
    "generate_mixture_sample",
    "match_components",
    "winsorize",
    "run_experiment",
    "emit_report",
    "emit_long_csv",
    "write_report",
    "read_report_json",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PARAMETERS = ("shape", "scale", "weight")
LONG_COLUMNS = ("method", "design", "n", "replicate", "component", "parameter", "true_value",
                "estimate", "converged", "iterations", "wall_time_ms")
AGGREGATE_COLUMNS = ("method", "design", "n", "component", "parameter", "true_value",
                     "mean_bias", "median_bias", "winsorized_bias", "variance",
                     "median_estimate", "n_fits", "n_runs", "convergence_proportion",
                     "wall_time_min_ms", "wall_time_median_ms", "wall_time_max_ms")
TIMING_FIELDS = ("wall_time_ms", "wall_time_min_ms", "wall_time_median_ms", "wall_time_max_ms")


@dataclass(frozen=True)
class SimulationSpec:
    design: str
    true_model: MixtureModel
    sample_sizes: tuple[int, ...] = (100, 1000, 10000)
    replicates: int = 100
    bounds: ModeBounds | None = None
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    winsor_level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "methods", tuple(self.methods))
        if int(self.replicates) < 1:
            raise ValueError("replicates must be >= 1")
        for n in self.sample_sizes:
            if n < 2 * self.true_model.k:
                raise ValueError(f"sample size {n} is below 2K = {2 * self.true_model.k}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if "constrained" in self.methods:
            if self.bounds is None:
                raise ValueError("the constrained method needs mode bounds")
            if len(self.bounds) != self.true_model.k:
                raise ValueError("need one mode interval per component")
        if not (0 < self.winsor_level <= 1):
            raise ValueError("winsor_level must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "true_model": self.true_model.to_dict(),
            "sample_sizes": list(self.sample_sizes),
            "replicates": int(self.replicates),
            "bounds": self.bounds.format() if self.bounds is not None else None,
            "methods": list(self.methods),
            "seed": int(self.seed),
            "winsor_level": self.winsor_level,
        }


_PRESETS = {
    "2comp": (MixtureModel.from_arrays([0.5, 8.0], [0.5, 1.0 / 3.0], [0.3, 0.7]),
              ModeBounds(((-math.inf, 0.0), (0.0, 5.0)))),
    "3comp": (MixtureModel.from_arrays([0.5, 6.0, 8.0], [2.0, 1.0 / 3.0, 1.0], [0.3, 0.5, 0.2]),
              ModeBounds(((-math.inf, 0.0), (0.0, 5.0), (5.0, 15.0)))),
}


def preset(name: str, **overrides) -> SimulationSpec:
    """The two- or three-component benchmark design (``"2comp"``/``"3comp"``)."""
    try:
        model, bounds = _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(_PRESETS)}") from None
    return SimulationSpec(design=name, true_model=model, bounds=bounds, **overrides)


def generate_mixture_sample(model: MixtureModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw labels from the mixing weights, then values from each labelled component."""
    n = int(n)
    if n < 1:
        raise ValueError("n must be at least 1")
    if model.k == 1:
        return gamma_sample(model.components[0].params, rng, n)
    labels = rng.choice(model.k, size=n, p=model.weights)
    out = np.empty(n)
    for k, comp in enumerate(model.components):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            out[idx] = gamma_sample(comp.params, rng, idx.size)
    return out


def match_components(fitted: MixtureModel, truth: MixtureModel) -> tuple[int, ...]:
    """Permutation p with fitted component p[k] assigned to true component k.

    Minimises the total absolute difference of component means; exhaustive
    search, so only meant for small K.
    """
    if fitted.k != truth.k:
        raise ValueError("fitted and true models have different numbers of components")
    fm, tm = fitted.means, truth.means
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(truth.k)):
        cost = sum(abs(fm[p] - tm[k]) for k, p in enumerate(perm))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


def winsorize(values, level: float) -> np.ndarray:
    """Clamp values to the symmetric ((1-level)/2, 1-(1-level)/2) quantiles.

    Quantiles use linear interpolation; ``level == 1`` is the identity.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot winsorize an empty list")
    if not (0 < level <= 1):
        raise ValueError("level must be in (0, 1]")
    if level == 1:
        return arr.copy()
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(arr, [tail, 1.0 - tail])
    return np.clip(arr, lo, hi)


# --------------------------------------------------------------------------
# Running


def _unit_seeds(seed: int, replicate: int, size_index: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([int(seed), int(replicate), int(size_index)])
    data_ss, fit_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(fit_ss.generate_state(1)[0])


def _run_unit(args) -> list[dict]:
    spec, config, replicate, size_index = args
    n = spec.sample_sizes[size_index]
    rng, fit_seed = _unit_seeds(spec.seed, replicate, size_index)
    data = generate_mixture_sample(spec.true_model, n, rng)
    cfg = replace(config, seed=fit_seed)
    rows = []
    for method in spec.methods:
        try:
            result = multi_restart_fit(data, spec.true_model.k, cfg, method=method,
                                       bounds=spec.bounds)
        except Exception as exc:  # a failed fit is data, not a crash
            logger.warning("%s fit failed (n=%d, replicate=%d): %s", method, n, replicate, exc)
            rows.append({"method": method, "n": n, "replicate": replicate, "converged": False,
                         "iterations": 0, "wall_time_ms": None, "estimates": None})
            continue
        perm = match_components(result.model, spec.true_model)
        comps = [result.model.components[p] for p in perm]
        rows.append({
            "method": method,
            "n": n,
            "replicate": replicate,
            "converged": bool(result.converged),
            "iterations": int(result.iterations),
            "wall_time_ms": result.wall_time * 1e3,
            "estimates": {name: [getattr(c, name) for c in comps] for name in PARAMETERS},
        })
    return rows


@dataclass
class SimulationReport:
    design: str
    records: list[dict]
    aggregate: list[dict]
    summary: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "design": self.design,
                "metadata": self.metadata, "records": self.records,
                "aggregate": self.aggregate, "summary": self.summary}

    @classmethod
    def from_dict(cls, doc: dict) -> "SimulationReport":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
        return cls(design=doc["design"], records=doc["records"], aggregate=doc["aggregate"],
                   summary=doc["summary"], metadata=doc["metadata"])

    def summary_for(self, method: str, n: int) -> dict:
        for row in self.summary:
            if row["method"] == method and row["n"] == n:
                return row
        raise KeyError((method, n))

    def aggregate_for(self, method: str, n: int, component: int, parameter: str) -> dict:
        for row in self.aggregate:
            if (row["method"], row["n"], row["component"], row["parameter"]) == (
                    method, n, component, parameter):
                return row
        raise KeyError((method, n, component, parameter))


def _aggregate(spec: SimulationSpec, records: list[dict]) -> tuple[list[dict], list[dict]]:
    truth = {name: getattr(spec.true_model, name + "s") for name in PARAMETERS}
    aggregate, summary = [], []
    for method in spec.methods:
        for n in spec.sample_sizes:
            runs = [r for r in records if r["method"] == method and r["n"] == n]
            fits = [r for r in runs if r["converged"] and r["estimates"] is not None]
            times = sorted(r["wall_time_ms"] for r in runs if r["wall_time_ms"] is not None)
            summary.append({
                "method": method, "design": spec.design, "n": n,
                "n_runs": len(runs), "n_converged": len(fits),
                "convergence_proportion": len(fits) / len(runs) if runs else None,
                "wall_time_min_ms": times[0] if times else None,
                "wall_time_median_ms": float(np.median(times)) if times else None,
                "wall_time_max_ms": times[-1] if times else None,
            })
            for k in range(spec.true_model.k):
                for name in PARAMETERS:
                    true_value = float(truth[name][k])
                    est = np.array([r["estimates"][name][k] for r in fits])
                    err = est - true_value
                    row = {"method": method, "design": spec.design, "n": n,
                           "component": k + 1, "parameter": name, "true_value": true_value,
                           "n_fits": int(est.size)}
                    if est.size:
                        row.update(
                            mean_bias=float(np.mean(err)),
                            median_bias=float(np.median(err)),
                            winsorized_bias=float(np.mean(winsorize(err, spec.winsor_level))),
                            variance=float(np.var(est, ddof=1)) if est.size > 1 else None,
                            median_estimate=float(np.median(est)))
                    else:
                        row.update(mean_bias=None, median_bias=None, winsorized_bias=None,
                                   variance=None, median_estimate=None)
                    aggregate.append(row)
    return aggregate, summary


def run_experiment(spec: SimulationSpec, config: FitConfig = FitConfig(),
                   workers: int = 1) -> SimulationReport:
    """Fit every (replicate, sample size) dataset with every selected method.

    Each work unit seeds itself from (spec.seed, replicate, size index), so
    results do not depend on ``workers`` or scheduling.  Individual fit
    failures are recorded as non-converged.
    """
    units = [(spec, config, r, j) for j in range(len(spec.sample_sizes))
             for r in range(int(spec.replicates))]
    workers = max(1, int(workers))
    if workers == 1 or len(units) == 1:
        chunks = [_run_unit(u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_unit, units, chunksize=max(1, len(units) // (4 * workers))))
    order = {m: i for i, m in enumerate(spec.methods)}
    records = sorted((row for chunk in chunks for row in chunk),
                     key=lambda r: (order[r["method"]], r["n"], r["replicate"]))
    aggregate, summary = _aggregate(spec, records)
    metadata = {"spec": spec.to_dict(), "config": config.to_dict(), "version": __version__,
                "seed": int(spec.seed), "workers": workers}
    return SimulationReport(design=spec.design, records=records, aggregate=aggregate,
                            summary=summary, metadata=metadata)


# --------------------------------------------------------------------------
# Serialisation


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def _aggregate_rows(report: SimulationReport) -> list[dict]:
    rows = []
    for s in report.summary:
        for a in report.aggregate:
            if a["method"] == s["method"] and a["n"] == s["n"]:
                rows.append(a)
        rows.append({**s, "component": "all", "parameter": "summary"})
    return rows


def emit_long_csv(report: SimulationReport) -> str:
    """One row per (fit, component, parameter) with the ``LONG_COLUMNS`` header."""
    truth = report.metadata["spec"]["true_model"]["components"]
    rows = []
    for r in report.records:
        for k, comp in enumerate(truth):
            for name in PARAMETERS:
                rows.append({"method": r["method"], "design": report.design, "n": r["n"],
                             "replicate": r["replicate"], "component": k + 1,
                             "parameter": name, "true_value": comp[name],
                             "estimate": (r["estimates"][name][k]
                                          if r["estimates"] is not None else None),
                             "converged": r["converged"], "iterations": r["iterations"],
                             "wall_time_ms": r["wall_time_ms"]})
    return _write_csv(LONG_COLUMNS, rows)


def emit_report(report: SimulationReport, fmt: str = "json") -> str:
    """Serialise a report.

    ``"csv"`` gives the aggregate table (``AGGREGATE_COLUMNS``): one row per
    (method, n, component, parameter) followed, for each (method, n), by a
    summary row with ``component=all`` and ``parameter=summary`` carrying
    convergence and timing.  ``"json"`` gives the full report, keys sorted.
    """
    if fmt == "csv":
        return _write_csv(AGGREGATE_COLUMNS, _aggregate_rows(report))
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def read_report_json(text: str) -> SimulationReport:
    return SimulationReport.from_dict(json.loads(text))


def write_report(report: SimulationReport, path, fmt: str | None = None) -> None:
    """Write ``report`` to ``path``; the format defaults to the file extension."""
    path = os.fspath(path)
    if fmt is None:
        fmt = "csv" if path.lower().endswith(".csv") else "json"
    text = emit_report(report, fmt)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"could not write report to {path}: {exc}") from exc
