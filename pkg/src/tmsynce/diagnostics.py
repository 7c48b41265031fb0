"""Chain and coupling diagnostics: autocorrelation, IAT, ESS and summary reports."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

SOKAL_WINDOW_FACTOR = 5.0
REPORT_COLUMNS = ("method", "omega", "rho_min", "tau_max", "ESS", "time", "ESS_per_sec",
                  "rel_rho_min", "rel_ESS_per_sec")


class DiagnosticWarning(RuntimeWarning):
    """Raised as a warning when an estimate should not be trusted."""


def autocorrelation(series, max_lag: int | None = None) -> np.ndarray:
    """Biased autocorrelation ``r(0..max_lag)`` computed by FFT.

    Raises:
        ValueError: ``series`` is constant or not longer than ``max_lag``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    max_lag = n - 1 if max_lag is None else int(max_lag)
    if n <= max_lag or max_lag < 0:
        raise ValueError("series must be longer than max_lag")
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1] / n
    if acov[0] <= 0.0:
        raise ValueError("autocorrelation undefined for a constant series")
    out = acov / acov[0]
    out[0] = 1.0
    return out


@dataclass
class IatEstimate:
    """Integrated autocorrelation time with its window and a trust flag."""

    tau: float
    window: int
    flagged: bool
    n: int

    @property
    def ess(self) -> float:
        return self.n / self.tau


def integrated_time(series, c: float = SOKAL_WINDOW_FACTOR) -> IatEstimate:
    """Self-consistent windowed IAT ``1 + 2 sum_{k<=W} r(k)``.

    ``W`` is the first lag with ``W >= c * tau(W)``. The estimate is flagged
    when that window exceeds a quarter of the series or the series is
    constant (``tau`` is then set to the series length).
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 2 or np.all(x == x[0]):
        return IatEstimate(float(max(n, 1)), 0, True, n)
    try:
        rho = autocorrelation(x)
    except ValueError:
        # spread too small to survive squaring
        return IatEstimate(float(n), 0, True, n)
    taus = 1.0 + 2.0 * np.cumsum(rho[1:])
    lags = np.arange(1, n)
    ok = lags >= c * taus
    window = int(lags[np.argmax(ok)]) if ok.any() else n - 1
    tau = max(float(taus[window - 1]), 1.0)
    flagged = window > n // 4
    return IatEstimate(tau, window, flagged, n)


def iat(series) -> float:
    """Integrated autocorrelation time, warning when the window does not converge."""
    est = integrated_time(series)
    if est.flagged:
        warnings.warn("IAT window did not converge; estimate unreliable", DiagnosticWarning, stacklevel=2)
    return est.tau


def ess(series) -> float:
    """Effective sample size ``n / tau``."""
    est = integrated_time(series)
    if est.flagged:
        warnings.warn("ESS from a non-converged IAT window", DiagnosticWarning, stacklevel=2)
    return est.ess


def pearson(x, y) -> float:
    """Pearson correlation; NaN marks a zero-variance input."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equally long series of at least two values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx <= 0.0 or syy <= 0.0:
        return math.nan
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class ChainDiagnostics:
    """Per-dimension metrics of one repetition."""

    rho: list[float]
    tau: list[float]
    ess: list[float]
    flagged: bool
    time: float

    @property
    def rho_min(self) -> float:
        vals = [r for r in self.rho if not math.isnan(r)]
        return min(vals) if vals else math.nan

    @property
    def tau_max(self) -> float:
        return max(self.tau)

    @property
    def ess_min(self) -> float:
        return min(self.ess)


def chain_diagnostics(fine: np.ndarray, coarse: np.ndarray | None, wall_time: float) -> ChainDiagnostics:
    """Metrics for one post-burn-in fine chain and, if coupled, its coarse partner."""
    fine = np.atleast_2d(fine)
    rho, tau, ess_vals = [], [], []
    flagged = False
    for j in range(fine.shape[1]):
        est = integrated_time(fine[:, j])
        flagged |= est.flagged
        tau.append(est.tau)
        ess_vals.append(est.ess)
        rho.append(pearson(fine[:, j], coarse[:, j]) if coarse is not None else math.nan)
    return ChainDiagnostics(rho, tau, ess_vals, flagged, wall_time)


@dataclass
class DiagnosticsReport:
    """One table row: medians over repetitions, mean wall time.

    Relative columns are filled by :func:`relative_to`.
    """

    method: str
    omega: float
    rho_min: float
    tau_max: float
    ESS: float
    time: float
    ESS_per_sec: float
    rel_rho_min: float = math.nan
    rel_ESS_per_sec: float = math.nan
    ESS_min_dimension: list[float] = field(default_factory=list)
    sigma2_M: float = math.nan
    KL_m: float = math.nan
    flagged: bool = False
    chains: list[ChainDiagnostics] = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["chains"] = [asdict(c) for c in self.chains]
        return out


def report(chains: list[ChainDiagnostics], method: str, omega: float,
           baseline: DiagnosticsReport | None = None, sigma2_M: float = math.nan) -> DiagnosticsReport:
    """Aggregate repetitions: worst dimension per chain, median across chains."""
    if not chains:
        raise ValueError("report needs at least one chain")
    rho = float(np.median([c.rho_min for c in chains]))
    tau = float(np.median([c.tau_max for c in chains]))
    ess_med = float(np.median([c.ess_min for c in chains]))
    wall = float(np.mean([c.time for c in chains]))
    kl = -math.expm1(-sigma2_M) if math.isfinite(sigma2_M) else math.nan
    out = DiagnosticsReport(method, float(omega), rho, tau, ess_med, wall,
                            ess_med / wall if wall > 0 else math.inf,
                            ESS_min_dimension=[c.ess_min for c in chains], sigma2_M=sigma2_M, KL_m=kl,
                            flagged=any(c.flagged for c in chains), chains=list(chains))
    if baseline is not None:
        relative_to(out, baseline)
    return out


def relative_to(rep: DiagnosticsReport, baseline: DiagnosticsReport) -> DiagnosticsReport:
    """Fill the relative columns from ``baseline`` (in place)."""
    rep.rel_rho_min = _ratio(rep.rho_min, baseline.rho_min)
    rep.rel_ESS_per_sec = _ratio(rep.ESS_per_sec, baseline.ESS_per_sec)
    return rep


def _ratio(a: float, b: float) -> float:
    if b == 0 or math.isnan(a) or math.isnan(b):
        return math.nan
    return a / b


def compare(reports: list[DiagnosticsReport], baseline_method: str) -> list[DiagnosticsReport]:
    """Relative columns against the baseline row with the same omega.

    Falls back to the first baseline row when no omega matches.
    """
    bases = [r for r in reports if r.method == baseline_method]
    if not bases:
        raise ValueError(f"baseline {baseline_method!r} not among the reports")
    for rep in reports:
        match = [b for b in bases if b.omega == rep.omega]
        relative_to(rep, match[0] if match else bases[0])
    return reports
