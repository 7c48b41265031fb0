"""Command line entry point: ``tmsynce run | report | allocate | validate-config``.

Exit codes: 0 on success, 2 for configuration or usage errors and 3 for
runtime errors, in which case completed per-chain artifacts stay on disk.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import estimator as est
from .config import SCHEMA_VERSION, bundled_configs, load_config
from .errors import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("tmsynce")


class UsageError(Exception):
    """Bad command line input; maps to exit code 2."""


def _resolve_config(path: str):
    """Accept a file path or the stem of a bundled config."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_configs()
        if path in bundled:
            p = bundled[path]
    return load_config(p)


# -------------------------------------------------------------------- run

def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _resolve_config(args.config).with_overrides(seed=args.seed, output=args.out, workers=args.workers)
    out = run_experiment(cfg)
    print(_format_table([out.report.row()]))
    alloc = out.allocation
    if "variance_ratio" in alloc:
        print("variance ratio per output: " + " ".join(f"{v:.3f}" for v in alloc["variance_ratio"]))
    if "estimate" in alloc:
        print("estimate z-scores vs reference: " + " ".join(f"{v:.2f}" for v in alloc["estimate"]["z"]))
    print(f"artifacts written to {out.out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------- report

def _load_run(run_dir: Path):
    diag = run_dir / "diagnostics.json"
    if not diag.is_file():
        return None, f"{run_dir}: missing diagnostics.json"
    doc = json.loads(diag.read_text())
    return doc, None


def _report_from_dict(d: dict) -> dg.DiagnosticsReport:
    fields = {k: v for k, v in d.items() if k in dg.DiagnosticsReport.__dataclass_fields__}
    fields["chains"] = [dg.ChainDiagnostics(**c) for c in d.get("chains", [])]
    return dg.DiagnosticsReport(**{k: (math.nan if v is None else v) for k, v in fields.items()})


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run directory")
    docs, reports, skipped = [], [], []
    for path in map(Path, args.runs):
        doc, problem = _load_run(path)
        if problem:
            skipped.append(problem)
            continue
        docs.append((path, doc))
    for msg in skipped:
        print(f"skipped {msg}", file=sys.stderr)
    if not docs:
        print("no complete runs to report", file=sys.stderr)
        return EXIT_RUNTIME
    versions = {doc["header"]["schema_version"] for _, doc in docs}
    if len(versions) > 1 or versions != {SCHEMA_VERSION}:
        raise ConfigurationError(f"refusing to merge runs with schema versions {sorted(versions)}; "
                                 f"this build reads version {SCHEMA_VERSION}")
    reports = [_report_from_dict(doc["report"]) for _, doc in docs]
    if args.baseline:
        try:
            dg.compare(reports, args.baseline)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    print(_format_table([r.row() for r in reports]))
    if args.out:
        _write_report(Path(args.out), docs, reports)
    return EXIT_OK


def _write_report(out: Path, docs, reports) -> None:
    out.mkdir(parents=True, exist_ok=True)
    hashes = ";".join(doc["header"]["config_hash"] for _, doc in docs)
    seeds = ";".join(str(doc["header"]["seed"]) for _, doc in docs)
    head = f"# tmsynce config_hash={hashes} seed={seeds} schema_version={SCHEMA_VERSION}"
    with (out / "comparison.csv").open("w") as fh:
        fh.write(head + "\n" + ",".join(dg.REPORT_COLUMNS) + "\n")
        for rep in reports:
            fh.write(",".join(_cell(v) for v in rep.row().values()) + "\n")
    payload = {"header": {"config_hash": hashes, "seed": seeds, "schema_version": SCHEMA_VERSION},
               "rows": [r.row() for r in reports], "runs": [str(p) for p, _ in docs]}
    (out / "comparison.json").write_text(json.dumps(payload, indent=1) + "\n")
    for name in ("autocorrelation.csv", "variance_ratio.csv"):
        _merge_series(out / name, head, [(p / name, r) for (p, _), r in zip(docs, reports)])


def _merge_series(target: Path, head: str, sources) -> None:
    columns = None
    lines = []
    for path, rep in sources:
        if not path.is_file():
            continue
        with path.open() as fh:
            fh.readline()
            cols = fh.readline().rstrip("\n")
            columns = columns or cols
            prefix = f"{rep.method},{_cell(rep.omega)},"
            lines.extend(prefix + ln.rstrip("\n") for ln in fh if ln.strip())
    if columns is None:
        return
    with target.open("w") as fh:
        fh.write(head + "\nmethod,omega," + columns + "\n")
        fh.write("\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def _format_table(rows: list[dict]) -> str:
    cols = list(dg.REPORT_COLUMNS)
    body = [[_short(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)


# --------------------------------------------------------------- allocate

def _stats_from_file(path: Path):
    if path.is_dir():
        path = path / "allocation.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read stats file {path}: {exc}") from None
    try:
        stats = est.CoupledStatistics(np.asarray(doc["rho"], float), np.asarray(doc["V0"], float),
                                      np.asarray(doc["V1"], float), np.asarray(doc["var_fine"], float),
                                      int(doc.get("n_pairs", 0)))
        return stats, float(doc["C0"]), float(doc["C1"]), float(doc["eps2"])
    except KeyError as exc:
        raise UsageError(f"stats file {path} lacks field {exc}") from None


def cmd_allocate(args) -> int:
    stats = None
    if args.stats:
        if args.values:
            raise UsageError("give either --stats or the five inline values, not both")
        stats, c0, c1, eps2 = _stats_from_file(Path(args.stats))
        v0, v1 = stats.V0_total, stats.V1_total
    else:
        if len(args.values) != 5:
            raise UsageError("allocate needs V0 V1 C0 C1 EPS2 or --stats PATH")
        v0, v1, c0, c1, eps2 = args.values
    bad = [n for n, v in zip(("V0", "V1", "C0", "C1", "EPS2"), (v0, v1, c0, c1, eps2))
           if not (math.isfinite(v) and v > 0)]
    if bad:
        raise UsageError(f"allocation inputs must be positive: {', '.join(bad)}")
    alloc = est.optimal_allocation(v0, v1, c0, c1, eps2)
    n0, n1, ncost = est.numerical_allocation(v0, v1, c0, c1, eps2)
    out = {"allocation": alloc.to_dict(), "numerical": {"N0": n0, "N1": n1, "cost": ncost}}
    print(f"closed form:  N0* = {alloc.N0:.6g}  N1* = {alloc.N1:.6g}  cost = {alloc.cost:.6g}  "
          f"variance = {alloc.variance:.6g}  (target {eps2 / 2:.6g})")
    print(f"classical:    N0 = {alloc.classical_N0:.6g}  N1 = {alloc.classical_N1:.6g}  "
          f"cost = {alloc.classical_cost:.6g}  variance = {alloc.classical_variance:.6g}")
    print(f"numerical:    N0 = {n0:.6g}  N1 = {n1:.6g}  cost = {ncost:.6g}")
    if math.isnan(alloc.N_eq):
        print("N_eq: missing, because C1 <= C0 means the coupled sample is no dearer than a coarse one "
              "and the equivalent-cost fine count is undefined")
    else:
        print(f"N_eq = {alloc.N_eq:.6g}")
    if stats is not None:
        ratio = est.variance_ratio(stats, c0, c1)
        out["variance_ratio"] = ratio.tolist()
        print("variance ratio: " + " ".join(f"{v:.4g}" for v in ratio))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out, indent=1) + "\n")
    return EXIT_OK


# -------------------------------------------------------- validate-config

def cmd_validate(args) -> int:
    cfg = _resolve_config(args.config)
    print(f"ok: {args.config} config_hash={cfg.hash()} schema_version={cfg.schema_version}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmsynce", description="Coupled bi-fidelity MCMC with transport maps.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True, help="TOML file or bundled config name")
    run.add_argument("--seed", type=int, help="master seed, overriding the config")
    run.add_argument("--out", help="output directory, overriding the config")
    run.add_argument("--workers", type=int, help="parallel repetitions")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="compare completed runs")
    rep.add_argument("runs", nargs="*", help="run directories")
    rep.add_argument("--baseline", help="method name used for the relative columns")
    rep.add_argument("--out", help="directory for merged tables and series")
    rep.set_defaults(func=cmd_report)

    alloc = sub.add_parser("allocate", help="optimal bi-fidelity sample allocation")
    alloc.add_argument("values", nargs="*", type=float, metavar="V0 V1 C0 C1 EPS2")
    alloc.add_argument("--stats", help="allocation.json or run directory with coupled statistics")
    alloc.add_argument("--out", help="write the allocation as JSON")
    alloc.set_defaults(func=cmd_allocate)

    val = sub.add_parser("validate-config", help="check a config without running it")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        logger.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
