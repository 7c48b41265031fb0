"""Config-driven experiments: build the problem, run repetitions, write artifacts.

Artifacts in the output directory, each stamped with the config hash,
master seed and schema version:

- ``samples/chain_XX.csv``: per-iteration records of both levels
- ``diagnostics.csv`` / ``diagnostics.json``: the summary row
- ``allocation.json`` and ``variance_ratio.csv``: bi-fidelity estimator report
- ``autocorrelation.csv``: fine-level autocorrelation against lag
- ``maps/chain_XX_<level>.json``: final map parameters
- ``events.json`` and ``run.json``: training events and the run manifest
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from . import diagnostics as dg
from . import estimator as est
from .config import ExperimentConfig
from .model import (BananaDensity, QuarticDensity, laplace_approximation, sample_banana, sample_quartic,
                    synthetic_bifidelity_problem)
from .sampler import (OPTIMAL_SCALE, ChainResult, LevelMaps, ProposalConfig, RunConfig, run_coupled,
                      run_single)
from .transport import (AffineMap, AnalyticalBananaMap, AnalyticalQuarticMap, AnalyticalQuarticToBananaMap,
                        IdentityMap, MapTrainer, MonotoneTriangularMap, TransportMap, variance_diagnostic)

logger = logging.getLogger(__name__)

SAMPLE_COLUMNS = ("iteration", "chain", "level")
FINE, COARSE = 1, 0
MAX_LAG = 500
SIGMA_SAMPLES = 20000


@dataclass
class Problem:
    """Targets, starting points and quantities of interest of one experiment."""

    targets: tuple
    initial: tuple[np.ndarray, np.ndarray]
    laplace: tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    outputs: tuple[Callable, Callable]
    exact: tuple[Callable, Callable] | None

    @property
    def dim(self) -> int:
        return self.targets[0].dim


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Targets ordered ``(fine, coarse)``; chains start at the Laplace modes."""
    if cfg.problem == "banana-quartic":
        targets = (QuarticDensity(), BananaDensity())
        starts = ([4.0, 0.0], [-4.0, 0.0])
        outputs = (_identity_output, _identity_output)
        exact = (sample_quartic, sample_banana)
    else:
        prob = synthetic_bifidelity_problem(cfg.cost_ratio, cfg.noise_variance, cfg.target_rho, cfg.data_seed)
        targets = (prob.fine, prob.coarse)
        starts = (prob.initial_point, prob.initial_point)
        outputs = (prob.model.fine, prob.model.coarse)
        exact = None
    laplace = tuple(laplace_approximation(t, s) for t, s in zip(targets, starts))
    initial = (laplace[0][0], laplace[1][0])
    return Problem(targets, initial, laplace, outputs, exact)


def _identity_output(theta):
    return np.asarray(theta, dtype=float)


def _level_map(cfg: ExperimentConfig, level: int, problem: Problem) -> TransportMap:
    spec = cfg.fine_map if level == FINE else cfg.coarse_map
    d = problem.dim
    if spec.kind == "identity":
        return IdentityMap(d)
    if spec.kind == "analytical":
        if level == COARSE:
            return AnalyticalBananaMap()
        return AnalyticalQuarticToBananaMap() if cfg.configuration == "deep" else AnalyticalQuarticMap()
    tmap = MonotoneTriangularMap(d, spec.order)
    if spec.init == "laplace":
        mode, cov = problem.laplace[0 if level == FINE else 1]
        tmap.center = np.array(mode, dtype=float)
        tmap.scale = np.sqrt(np.diag(cov))
    return tmap


def build_maps(cfg: ExperimentConfig, problem: Problem) -> LevelMaps:
    """Level maps; the no-map baseline uses fixed Laplace-scaled affine maps."""
    if cfg.method == "no-map-synce":
        factor = OPTIMAL_SCALE / problem.dim
        fine, coarse = (AffineMap.from_covariance(m, c, factor) for m, c in problem.laplace)
        return LevelMaps(fine, coarse, "direct")
    return LevelMaps(_level_map(cfg, FINE, problem), _level_map(cfg, COARSE, problem), cfg.configuration)


def build_proposal(cfg: ExperimentConfig, dim: int) -> ProposalConfig:
    scale = cfg.covariance_scale
    if scale is None:
        scale = 1.0 if cfg.method == "no-map-synce" else OPTIMAL_SCALE / dim
    return ProposalConfig(dim, scale * np.eye(dim), omega=cfg.omega, adapt=cfg.adapt,
                          adapt_epoch=cfg.adapt_epoch, adapt_eps=cfg.adapt_eps, adapt_warmup=cfg.adapt_warmup)


def _trainer(cfg: ExperimentConfig, maps: LevelMaps) -> MapTrainer | None:
    if any(m.trainable for m in (maps.fine, maps.coarse)):
        return MapTrainer(period=cfg.retrain_period)
    return None


def run_chain(cfg: ExperimentConfig, chain: int) -> ChainResult:
    """One coupled repetition; deterministic in ``(cfg, chain)``."""
    problem = build_problem(cfg)
    maps = build_maps(cfg, problem)
    run_config = RunConfig(cfg.iterations, cfg.burn_in, cfg.retrain_period, cfg.repetitions, cfg.seed)
    return run_coupled(problem.targets, maps, _trainer(cfg, maps), run_config,
                       build_proposal(cfg, problem.dim), problem.initial, chain)


def _iterate_chains(cfg: ExperimentConfig, workers: int):
    job = partial(run_chain, cfg)
    if workers <= 1 or cfg.repetitions == 1:
        for c in range(cfg.repetitions):
            yield job(c)
        return
    with ProcessPoolExecutor(max_workers=min(workers, cfg.repetitions)) as pool:
        yield from pool.map(job, range(cfg.repetitions))


# ---------------------------------------------------------------- artifacts

def header(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "schema_version": cfg.schema_version}


def header_line(cfg: ExperimentConfig) -> str:
    h = header(cfg)
    return f"# tmsynce config_hash={h['config_hash']} seed={h['seed']} schema_version={h['schema_version']}"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def write_json(path: Path, cfg: ExperimentConfig, payload: dict) -> None:
    doc = {"header": header(cfg), **payload}
    path.write_text(json.dumps(doc, indent=1, default=_json_default, allow_nan=True) + "\n")


def write_csv(path: Path, cfg: ExperimentConfig, columns, rows) -> None:
    with path.open("w") as fh:
        fh.write(header_line(cfg) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _sample_block(trace, chain: int, level: int, branch: np.ndarray, burn_in: int) -> np.ndarray:
    n = trace.theta.shape[0]
    it = np.arange(1, n + 1)
    return np.column_stack([it, np.full(n, chain), np.full(n, level), trace.theta, trace.log_pdf,
                            trace.accepted, branch, it <= burn_in])


def _write_table(path: Path, cfg: ExperimentConfig, table: np.ndarray, d: int) -> None:
    columns = list(SAMPLE_COLUMNS) + [f"theta_{j + 1}" for j in range(d)] + ["log_pdf", "accepted", "branch",
                                                                           "burnin_flag"]
    fmt = ["%d"] * 3 + ["%.17g"] * (d + 1) + ["%d"] * 3
    with path.open("w") as fh:
        fh.write(header_line(cfg) + "\n")
        np.savetxt(fh, table, fmt=fmt, delimiter=",", header=",".join(columns), comments="")


def write_samples(path: Path, cfg: ExperimentConfig, result: ChainResult, level: int | None = None) -> None:
    """Per-iteration records at full precision.

    Coupled results interleave the levels per iteration, fine first; a
    single-level result is written under ``level``.
    """
    n, d = result.fine.theta.shape
    if len(result.levels) == 1:
        table = _sample_block(result.fine, result.chain, level, result.branch, result.burn_in)
    else:
        blocks = [_sample_block(trace, result.chain, lvl, result.branch, result.burn_in)
                  for lvl, trace in ((FINE, result.fine), (COARSE, result.coarse))]
        table = np.stack(blocks, axis=1).reshape(2 * n, -1)
    _write_table(path, cfg, table, d)


def read_samples(path) -> tuple[str, list[str], np.ndarray]:
    """Header line, column names and data of a sample CSV."""
    path = Path(path)
    with path.open() as fh:
        head = fh.readline().rstrip("\n")
        cols = fh.readline().rstrip("\n").split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    return head, cols, data


def map_record(tmap: TransportMap) -> dict:
    if isinstance(tmap, MonotoneTriangularMap):
        return tmap.to_dict()
    if isinstance(tmap, AffineMap):
        return {"type": "affine", "shift": tmap.shift, "factor": tmap.factor}
    return {"type": type(tmap).__name__, "parameters": tmap.parameters}


# ------------------------------------------------------------- summaries

def map_quality(cfg: ExperimentConfig, problem: Problem, result: ChainResult) -> dict[str, float]:
    """``sigma^2_M`` per level; exact samples when available, else the chain itself."""
    if cfg.method == "no-map-synce":
        return {"fine": math.nan, "coarse": math.nan}
    maps = LevelMaps(result.maps[0], result.maps[1], cfg.configuration)
    out = {}
    for name, idx, tmap in (("fine", 0, maps.fine_effective), ("coarse", 1, maps.coarse)):
        if problem.exact is not None:
            rng = np.random.default_rng([cfg.seed, 7919, idx])
            x = problem.exact[idx](SIGMA_SAMPLES, rng)
        else:
            x = result.post_burn_in(idx)
        out[name] = variance_diagnostic(tmap, problem.targets[idx], x)[0]
    return out


def autocorrelation_rows(results: list[ChainResult], max_lag: int = MAX_LAG):
    for res in results:
        x = res.post_burn_in(0)
        lag = min(max_lag, x.shape[0] - 1)
        for j in range(x.shape[1]):
            try:
                acf = dg.autocorrelation(x[:, j], lag)
            except ValueError:
                continue
            for k, v in enumerate(acf):
                yield (k, res.chain, j + 1, float(v))


def _se(q: np.ndarray) -> np.ndarray:
    """Monte Carlo standard error per column, inflated by the IAT."""
    out = []
    for j in range(q.shape[1]):
        col = q[:, j]
        tau = dg.integrated_time(col).tau
        out.append(math.sqrt(col.var(ddof=1) * tau / col.size))
    return np.array(out)


def allocation_report(cfg: ExperimentConfig, problem: Problem, results: list[ChainResult],
                      workers: int = 1) -> dict:
    """Coupled statistics, optimal allocation and, when configured, the estimate check."""
    q1 = np.vstack([problem.outputs[0](r.post_burn_in(0)) for r in results])
    q0 = np.vstack([problem.outputs[1](r.post_burn_in(1)) for r in results])
    stats = est.coupled_statistics(q1, q0)
    c0, c1 = cfg.cost_ratio, 1.0 + cfg.cost_ratio
    out = {"C0": c0, "C1": c1, "eps2": cfg.eps2, "n_pairs": stats.n, "rho": stats.rho, "V0": stats.V0,
           "V1": stats.V1, "var_fine": stats.var_fine, "V0_total": stats.V0_total, "V1_total": stats.V1_total}
    if stats.V0_total > 0 and stats.V1_total > 0:
        alloc = est.optimal_allocation(stats.V0_total, stats.V1_total, c0, c1, cfg.eps2)
        n0, n1, cost = est.numerical_allocation(stats.V0_total, stats.V1_total, c0, c1, cfg.eps2)
        out["allocation"] = alloc.to_dict()
        out["numerical"] = {"N0": n0, "N1": n1, "cost": cost}
        out["variance_ratio"] = est.variance_ratio(stats, c0, c1)
        out["n_target"] = est.n_target(stats.var_fine, cfg.eps2)
    if cfg.coarse_iterations and cfg.reference_iterations:
        out["estimate"] = _estimate_check(cfg, problem, results[0], q1, q0, workers)
    return out


def _single_chain(cfg: ExperimentConfig, which: int, tmap: TransportMap, covariance, chain: int) -> ChainResult:
    problem = build_problem(cfg)
    n = cfg.coarse_iterations if which == COARSE else cfg.reference_iterations
    idx = 1 if which == COARSE else 0
    rc = RunConfig(n, cfg.burn_in, n, 1, cfg.seed)
    proposal = ProposalConfig(problem.dim, covariance, 0.0)
    return run_single(problem.targets[idx], tmap, None, rc, proposal, problem.initial[idx], chain)


def extra_chains(cfg: ExperimentConfig, first: ChainResult, workers: int = 1) -> tuple[ChainResult, ChainResult]:
    """Coarse-only and fine-only chains using the first repetition's final maps, held fixed."""
    maps = LevelMaps(first.maps[0], first.maps[1], cfg.configuration)
    jobs = [(COARSE, maps.coarse, cfg.repetitions), (FINE, maps.fine_effective, cfg.repetitions + 1)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=2) as pool:
            futs = [pool.submit(_single_chain, cfg, w, m, first.covariance, c) for w, m, c in jobs]
            return tuple(f.result() for f in futs)
    return tuple(_single_chain(cfg, w, m, first.covariance, c) for w, m, c in jobs)


def _estimate_check(cfg, problem, first, q1, q0, workers) -> dict:
    coarse_run, ref_run = extra_chains(cfg, first, workers)
    qc = problem.outputs[1](coarse_run.post_burn_in(0))
    qr = problem.outputs[0](ref_run.post_burn_in(0))
    estimate = est.mlmc_estimate(qc, q1, q0)
    reference = est.mc_mean(qr)
    se = np.sqrt(_se(qc) ** 2 + _se(q1 - q0) ** 2 + _se(qr) ** 2)
    return {"mlmc": estimate, "reference": reference, "combined_se": se, "z": (estimate - reference) / se,
            "coarse_iterations": cfg.coarse_iterations, "reference_iterations": cfg.reference_iterations,
            "coarse_acceptance": coarse_run.fine.acceptance_rate,
            "reference_acceptance": ref_run.fine.acceptance_rate,
            "_chains": (coarse_run, ref_run)}


# ------------------------------------------------------------------ driver

@dataclass
class RunOutcome:
    """In-memory results of :func:`run_experiment`."""

    config: ExperimentConfig
    out_dir: Path
    results: list[ChainResult]
    report: dg.DiagnosticsReport
    allocation: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> RunOutcome:
    """Run every repetition and write the artifacts.

    Per-chain files are written as chains finish, so a failure part-way
    leaves the completed chains on disk.
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    workers = cfg.workers if workers is None else workers
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    manifest = {"name": cfg.name, "problem": cfg.problem, "method": cfg.method,
                "configuration": cfg.configuration, "omega": cfg.omega, "config": cfg.to_dict()}
    write_json(out / "run.json", cfg, {**manifest, "status": "running"})

    problem = build_problem(cfg)
    results: list[ChainResult] = []
    events = []
    for res in _iterate_chains(cfg, workers):
        results.append(res)
        write_samples(out / "samples" / f"chain_{res.chain:02d}.csv", cfg, res)
        for level, tmap in zip(("fine", "coarse"), res.maps):
            write_json(out / "maps" / f"chain_{res.chain:02d}_{level}.json", cfg, {"map": map_record(tmap)})
        events.append({"chain": res.chain, "events": res.events})
        logger.info("chain %d finished in %.1fs", res.chain, res.wall_time)

    chains = [dg.chain_diagnostics(r.post_burn_in(0), r.post_burn_in(1), r.wall_time) for r in results]
    quality = [map_quality(cfg, problem, r) for r in results]
    sigma_fine = float(np.median([q["fine"] for q in quality]))
    rep = dg.report(chains, cfg.name, cfg.omega, sigma2_M=sigma_fine)
    rep_dict = rep.to_dict()
    rep_dict["sigma2_M_levels"] = quality
    rep_dict["acceptance"] = [[r.fine.acceptance_rate, r.coarse.acceptance_rate] for r in results]
    write_json(out / "diagnostics.json", cfg, {"report": rep_dict})
    extra = ["ESS_min_dimension", "sigma2_M", "KL_m", "flagged"]
    row = rep.row()
    write_csv(out / "diagnostics.csv", cfg, list(row) + extra,
              [list(row.values()) + [";".join("%.17g" % v for v in rep.ESS_min_dimension),
                                     rep.sigma2_M, rep.KL_m, rep.flagged]])
    write_csv(out / "autocorrelation.csv", cfg, ("lag", "chain", "dim", "acf"), autocorrelation_rows(results))

    alloc = allocation_report(cfg, problem, results, workers)
    estimate_chains = alloc.get("estimate", {}).pop("_chains", ())
    for res, level in zip(estimate_chains, (COARSE, FINE)):
        write_samples(out / "samples" / f"chain_{res.chain:02d}.csv", cfg, res, level)
    write_json(out / "allocation.json", cfg, alloc)
    if "variance_ratio" in alloc:
        rows = [(k + 1, alloc["rho"][k], alloc["V0"][k], alloc["V1"][k], alloc["var_fine"][k],
                 alloc["variance_ratio"][k]) for k in range(len(alloc["V0"]))]
        write_csv(out / "variance_ratio.csv", cfg, ("output", "rho", "V0", "V1", "var_fine", "ratio"), rows)
    write_json(out / "events.json", cfg, {"chains": events})
    write_json(out / "run.json", cfg, {**manifest, "status": "complete",
                                       "wall_time": [r.wall_time for r in results]})
    return RunOutcome(cfg, out, results, rep, alloc)
