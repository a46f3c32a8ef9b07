"""Command-line interface: ``cfgmm fit`` and ``cfgmm simulate``.

Machine-readable output goes to stdout (or the ``--output`` file); logs and
the simulation summary go to stderr.

Exit codes: 0 success, 1 fit did not converge (result still printed),
2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .constrained import ModeBounds
from .em import METHODS, multi_restart_fit, responsibilities
from .model import FitConfig
from .simulation import emit_long_csv, preset, run_experiment, write_report

logger = logging.getLogger("cfgmm")

FIT_SCHEMA_VERSION = 1


class InputError(ValueError):
    """Bad input file or values; reported with exit code 2."""


@dataclass
class Dataset:
    values: np.ndarray
    source: str
    name: str
    skipped_rows: list[int] = field(default_factory=list)
    dropped_nonpositive: int = 0


def transform_mif(values) -> np.ndarray:
    """log10(x / mean(x) + 1) for nonnegative intensities."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise InputError("cannot transform an empty list")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise InputError("the mIF transform needs finite, nonnegative values")
    mean = x.mean()
    if not mean > 0:
        raise InputError("the mIF transform needs a positive mean (all values are zero)")
    return np.log10(x / mean + 1.0)


def _resolve_column(header: list[str] | None, column: str, width: int) -> int:
    if header is not None and column in header:
        return header.index(column)
    try:
        idx = int(column)
    except ValueError:
        raise InputError(f"column {column!r} not found"
                         + (f"; available: {', '.join(header)}" if header else "")) from None
    if not 0 <= idx < width:
        raise InputError(f"column index {idx} out of range (file has {width} columns)")
    return idx


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def ingest_csv(path, column: str | int = 0, header: bool | None = None,
               transform: str | None = None, drop_nonpositive: bool = False) -> Dataset:
    """Read one numeric column of a comma-separated file.

    ``column`` is a header name or a 0-based index.  With ``header=None`` the
    first row is treated as a header when its selected cell is not numeric.
    Unparseable rows are skipped and listed in ``skipped_rows`` (1-based line
    numbers).  The optional ``"mif"`` transform runs before the positivity
    check; remaining non-positive values are an error unless
    ``drop_nonpositive`` is set.
    """
    path = os.fspath(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path} is empty")
    column = str(column)
    first_line, first = rows[0]
    width = len(first)
    if header is None:
        # a header row has a non-numeric cell in the selected column
        try:
            idx = _resolve_column(None, column, width)
            header = not _is_number(first[idx].strip())
        except InputError:
            header = True
    names = [c.strip() for c in first] if header else None
    idx = _resolve_column(names, column, width)
    body = rows[1:] if header else rows
    values, lines, skipped = [], [], []
    for line, row in body:
        try:
            values.append(float(row[idx]))
            lines.append(line)
        except (IndexError, ValueError):
            skipped.append(line)
    if skipped:
        logger.warning("%s: skipped %d unparseable row(s) (lines %s%s)", path, len(skipped),
                       ", ".join(map(str, skipped[:10])), ", ..." if len(skipped) > 10 else "")
    if not values:
        raise InputError(f"{path}: no numeric values in column {column!r}")
    x = np.array(values)
    if not np.all(np.isfinite(x)):
        bad = lines[int(np.flatnonzero(~np.isfinite(x))[0])]
        raise InputError(f"{path}: non-finite value on line {bad}")
    if transform == "mif":
        x = transform_mif(x)
    elif transform is not None:
        raise InputError(f"unknown transform {transform!r}")
    nonpos = np.flatnonzero(x <= 0)
    dropped = 0
    if nonpos.size:
        if not drop_nonpositive:
            line = lines[int(nonpos[0])]
            raise InputError(f"{path}: non-positive value {values[int(nonpos[0])]!r} on line "
                             f"{line} ({nonpos.size} in total); gamma mixtures need x > 0")
        dropped = int(nonpos.size)
        logger.warning("%s: dropped %d non-positive value(s)", path, dropped)
        x = x[x > 0]
    name = names[idx] if names else f"column {idx}"
    return Dataset(values=x, source=path, name=name, skipped_rows=skipped,
                   dropped_nonpositive=dropped)


# --------------------------------------------------------------------------
# argument parsing


def _default_seed() -> tuple[int, str]:
    env = os.environ.get("CFGMM_SEED")
    if env is None:
        return 0, "default"
    try:
        return int(env), "CFGMM_SEED"
    except ValueError:
        raise SystemExit(f"cfgmm: CFGMM_SEED must be an integer, got {env!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _method_list(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise argparse.ArgumentTypeError(f"unknown method {m!r}; choose from {METHODS}")
    return methods


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--restarts", type=int, default=FitConfig.restarts,
                   help="independent initialisations (default %(default)s)")
    p.add_argument("--tol", type=float, default=FitConfig.tol,
                   help="per-observation log-likelihood tolerance (default %(default)s)")
    p.add_argument("--max-iter", type=int, default=FitConfig.max_iter,
                   help="maximum EM iterations (default %(default)s)")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: $CFGMM_SEED or 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfgmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a gamma mixture to one column of a CSV file")
    fit.add_argument("file")
    fit.add_argument("--column", default="0", help="header name or 0-based index")
    fit.add_argument("--header", choices=("auto", "yes", "no"), default="auto")
    fit.add_argument("--components", "-k", type=int, required=True)
    fit.add_argument("--bounds", help='mode intervals "l1,u1;l2,u2;..." (-inf/inf allowed)')
    fit.add_argument("--method", choices=METHODS, default=None,
                     help="cfgmm, constrained or baseline (default: constrained when "
                          "--bounds is given, else cfgmm)")
    fit.add_argument("--transform", choices=("mif",), default=None,
                     help="mif: log10(x/mean(x)+1) before fitting")
    fit.add_argument("--drop-nonpositive", action="store_true",
                     help="drop values <= 0 (after any transform) instead of failing")
    fit.add_argument("--output", choices=("json", "csv"), default="json")
    fit.add_argument("--posteriors", metavar="PATH",
                     help="write the n x K responsibility matrix as CSV")
    _add_fit_options(fit)

    sim = sub.add_parser("simulate", help="run the benchmark simulation on a preset design")
    sim.add_argument("--preset", choices=("2comp", "3comp"), required=True)
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--sizes", type=_int_list, default=[100, 1000, 10000])
    sim.add_argument("--methods", type=_method_list, default=list(METHODS))
    sim.add_argument("--output", required=True,
                     help="report path; .csv writes the aggregate table, anything else JSON")
    sim.add_argument("--long-csv", metavar="PATH", help="also write the per-fit long table")
    sim.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    _add_fit_options(sim)
    return parser


def _config(args, parser) -> tuple[FitConfig, str]:
    seed, source = (args.seed, "--seed") if args.seed is not None else _default_seed()
    try:
        return FitConfig(max_iter=args.max_iter, tol=args.tol, restarts=args.restarts,
                         seed=seed), source
    except ValueError as exc:
        parser.error(str(exc))


# --------------------------------------------------------------------------
# commands


def _fit_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["component", "shape", "scale", "weight", "mean", "mode"])
    for i, c in enumerate(doc["result"]["components"], 1):
        w.writerow([i, repr(c["shape"]), repr(c["scale"]), repr(c["weight"]), repr(c["mean"]),
                    "-inf" if c["mode"] is None else repr(c["mode"])])
    r = doc["result"]
    w.writerow([])
    w.writerow(["final_loglik", "converged", "iterations", "status", "method", "seed"])
    w.writerow([repr(r["final_loglik"]), str(r["converged"]).lower(), r["iterations"],
                r["status"], r["method"], doc["config"]["seed"]])
    return buf.getvalue()


def cmd_fit(args, parser) -> int:
    k = args.components
    if k < 1:
        parser.error("--components must be >= 1")
    method = args.method or ("constrained" if args.bounds else "cfgmm")
    bounds = None
    if args.bounds:
        if method != "constrained":
            parser.error(f"--bounds only applies to --method constrained (got {method})")
        try:
            bounds = ModeBounds.parse(args.bounds)
        except ValueError as exc:
            parser.error(f"--bounds: {exc}")
        if len(bounds) != k:
            parser.error(f"--bounds gives {len(bounds)} interval(s) for {k} component(s)")
    elif method == "constrained":
        parser.error("--method constrained requires --bounds")
    config, seed_source = _config(args, parser)
    header = {"auto": None, "yes": True, "no": False}[args.header]
    try:
        data = ingest_csv(args.file, args.column, header=header, transform=args.transform,
                          drop_nonpositive=args.drop_nonpositive)
        if data.values.size < 2 * k:
            raise InputError(f"need at least {2 * k} values for {k} components, "
                             f"got {data.values.size}")
    except InputError as exc:
        print(f"cfgmm fit: error: {exc}", file=sys.stderr)
        return 2
    result = multi_restart_fit(data.values, k, config, method=method, bounds=bounds)
    doc = {
        "schema_version": FIT_SCHEMA_VERSION,
        "version": __version__,
        "input": {"path": data.source, "column": data.name, "n": int(data.values.size),
                  "transform": args.transform, "skipped_rows": len(data.skipped_rows),
                  "dropped_nonpositive": data.dropped_nonpositive},
        "components": k,
        "bounds": bounds.format() if bounds else None,
        "config": {**config.to_dict(), "seed_source": seed_source},
        "result": result.to_dict(),
    }
    if args.posteriors:
        z = responsibilities(data.values, result.model)
        try:
            with open(args.posteriors, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([f"z{j + 1}" for j in range(k)])
                w.writerows([[repr(float(v)) for v in row] for row in z])
        except OSError as exc:
            print(f"cfgmm fit: error: cannot write {args.posteriors}: {exc}", file=sys.stderr)
            return 2
    if args.output == "json":
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(_fit_csv(doc))
    if not result.converged:
        logger.warning("fit did not converge (%s)", result.status)
        return 1
    return 0


def cmd_simulate(args, parser) -> int:
    config, _ = _config(args, parser)
    try:
        spec = preset(args.preset, sample_sizes=tuple(args.sizes), replicates=args.replicates,
                      methods=tuple(args.methods), seed=config.seed)
    except ValueError as exc:
        parser.error(str(exc))
    logger.info("running %s: %d replicates x sizes %s x methods %s", args.preset,
                args.replicates, args.sizes, args.methods)
    report = run_experiment(spec, config, workers=args.workers)
    try:
        write_report(report, args.output)
        if args.long_csv:
            with open(args.long_csv, "w", newline="", encoding="utf-8") as fh:
                fh.write(emit_long_csv(report))
    except OSError as exc:
        print(f"cfgmm simulate: error: {exc}", file=sys.stderr)
        return 2
    print(f"convergence proportion / median wall time (ms), design {args.preset}",
          file=sys.stderr)
    for row in report.summary:
        med = row["wall_time_median_ms"]
        print(f"  {row['method']:<12} n={row['n']:<6} "
              f"{row['convergence_proportion']:.3f}  "
              f"{'nan' if med is None else f'{med:.2f}'}", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "fit":
        return cmd_fit(args, parser)
    return cmd_simulate(args, parser)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
