"""Monte Carlo and bi-fidelity multilevel estimators with optimal allocation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize

from .errors import ConfigurationError


def _as_values(q) -> np.ndarray:
    arr = np.asarray(q, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigurationError("output samples must be a (n, m) array")
    return arr


def mc_mean(q) -> np.ndarray:
    """Sample mean of ``n`` output vectors."""
    q = _as_values(q)
    if q.shape[0] < 1:
        raise ConfigurationError("mc_mean needs at least one sample")
    return q.mean(axis=0)


def mc_variance(q) -> np.ndarray:
    """Variance of the sample mean: unbiased sample variance divided by ``n``."""
    q = _as_values(q)
    if q.shape[0] < 2:
        raise ConfigurationError("mc_variance needs at least two samples")
    return q.var(axis=0, ddof=1) / q.shape[0]


def mlmc_estimate(coarse_only, fine_pairs, coarse_pairs) -> np.ndarray:
    """Two-level estimate ``mean(Q0) + mean(Q1 - Q0)``.

    Args:
        coarse_only: ``(N0, m)`` coarse outputs from an independent chain.
        fine_pairs: ``(N1, m)`` fine outputs of the coupled pairs.
        coarse_pairs: ``(N1, m)`` coarse outputs of the same pairs.
    """
    return telescoping_estimate(coarse_only, [(fine_pairs, coarse_pairs)])


def telescoping_estimate(base, corrections) -> np.ndarray:
    """L-level telescoping sum: base mean plus the mean of each level difference.

    ``corrections`` holds ``(fine, coarse)`` output arrays per level.
    """
    est = mc_mean(base)
    for fine, coarse in corrections:
        fine, coarse = _as_values(fine), _as_values(coarse)
        if fine.shape != coarse.shape or fine.shape[0] < 1:
            raise ConfigurationError("each correction needs equally shaped, nonempty pair arrays")
        est = est + (fine - coarse).mean(axis=0)
    return est


@dataclass
class CoupledStatistics:
    """Per-output statistics of coupled fine/coarse outputs.

    ``V0`` is the coarse variance, ``V1`` the variance of ``Q1 - Q0`` and
    ``var_fine`` the fine variance; the tilde quantities are their sums.
    """

    rho: np.ndarray
    V0: np.ndarray
    V1: np.ndarray
    var_fine: np.ndarray
    n: int

    @property
    def V0_total(self) -> float:
        return float(self.V0.sum())

    @property
    def V1_total(self) -> float:
        return float(self.V1.sum())


def coupled_statistics(fine, coarse) -> CoupledStatistics:
    """Correlations and variances from paired outputs; NaN marks undefined ``rho``."""
    fine, coarse = _as_values(fine), _as_values(coarse)
    if fine.shape != coarse.shape:
        raise ConfigurationError("paired outputs must have equal shapes")
    if fine.shape[0] < 2:
        raise ConfigurationError("coupled statistics need at least two pairs")
    df = fine - fine.mean(axis=0)
    dc = coarse - coarse.mean(axis=0)
    sff = np.einsum("ij,ij->j", df, df)
    scc = np.einsum("ij,ij->j", dc, dc)
    sfc = np.einsum("ij,ij->j", df, dc)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where((sff > 0) & (scc > 0), sfc / np.sqrt(sff * scc), np.nan)
    rho = np.clip(rho, -1.0, 1.0)
    diff = fine - coarse
    return CoupledStatistics(rho, coarse.var(axis=0, ddof=1), diff.var(axis=0, ddof=1),
                             fine.var(axis=0, ddof=1), fine.shape[0])


@dataclass
class MlmcAllocation:
    """Optimal bi-fidelity sample allocation.

    The primary fields follow the closed-form allocation with a shared
    ``sqrt(V0~ C0 + V1~ C1)`` factor. ``classical_*`` fields use the
    Lagrange solution ``sum_k sqrt(Vk~ Ck)``, which meets the variance
    constraint exactly; the two disagree in general and both are reported.
    """

    V0: float
    V1: float
    C0: float
    C1: float
    eps2: float
    N0: float
    N1: float
    N0_ceil: int
    N1_ceil: int
    cost: float
    variance: float
    N_eq: float
    classical_N0: float
    classical_N1: float
    classical_cost: float
    classical_variance: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_positive(**values) -> None:
    for name, v in values.items():
        if not (isinstance(v, (int, float, np.floating)) and math.isfinite(v) and v > 0):
            raise ConfigurationError(f"{name} must be a positive finite number, got {v}")


def optimal_allocation(V0: float, V1: float, C0: float, C1: float, eps2: float) -> MlmcAllocation:
    """Sample counts minimizing ``N0 C0 + N1 C1`` for target variance ``eps2 / 2``.

    Args:
        V0: Summed coarse-output variance.
        V1: Summed variance of the fine-coarse difference.
        C0: Cost of one coarse evaluation.
        C1: Cost of one coupled sample (fine plus coarse).
        eps2: Squared target error.

    ``N_eq = C* / (C1 - C0)`` is NaN when ``C1 <= C0``.
    """
    _check_positive(V0=V0, V1=V1, C0=C0, C1=C1, eps2=eps2)
    s = math.sqrt(V0 * C0 + V1 * C1)
    a0, a1 = math.sqrt(V0 * C0), math.sqrt(V1 * C1)
    factor = 2.0 / eps2
    N0 = factor * math.sqrt(V0 / C0) * s
    N1 = factor * math.sqrt(V1 / C1) * s
    cost = factor * s * (a0 + a1)
    variance = (V0 * math.sqrt(C0 / V0) + V1 * math.sqrt(C1 / V1)) / (factor * s)
    cN0 = factor * math.sqrt(V0 / C0) * (a0 + a1)
    cN1 = factor * math.sqrt(V1 / C1) * (a0 + a1)
    n_eq = cost / (C1 - C0) if C1 > C0 else math.nan
    return MlmcAllocation(V0, V1, C0, C1, eps2, N0, N1, math.ceil(N0), math.ceil(N1), cost, variance,
                          n_eq, cN0, cN1, cN0 * C0 + cN1 * C1, V0 / cN0 + V1 / cN1)


def numerical_allocation(V0: float, V1: float, C0: float, C1: float, eps2: float) -> tuple[float, float, float]:
    """Constrained minimization of ``N0 C0 + N1 C1`` by SLSQP in log-counts.

    Serves as an independent check of the closed forms.
    """
    _check_positive(V0=V0, V1=V1, C0=C0, C1=C1, eps2=eps2)
    # counts are N_k = base * exp(y_k); y = 0 is feasible and O(1)
    base = (V0 + V1) / (eps2 / 2.0)
    w0, w1 = V0 / (V0 + V1), V1 / (V0 + V1)
    c0, c1 = C0 / (C0 + C1), C1 / (C0 + C1)

    def cost(y):
        return c0 * np.exp(y[0]) + c1 * np.exp(y[1])

    cons = {"type": "eq", "fun": lambda y: w0 * np.exp(-y[0]) + w1 * np.exp(-y[1]) - 1.0}
    res = optimize.minimize(cost, np.zeros(2), method="SLSQP", constraints=[cons],
                            options={"ftol": 1e-15, "maxiter": 500})
    n0, n1 = base * math.exp(res.x[0]), base * math.exp(res.x[1])
    return n0, n1, n0 * C0 + n1 * C1


def variance_ratio(stats: CoupledStatistics, C0: float, C1: float) -> np.ndarray:
    """Per-output ratio of equal-cost fine-only MC variance to optimal MLMC variance.

    The target error cancels, so no ``eps2`` is needed.
    """
    _check_positive(C0=C0, C1=C1)
    V0t, V1t = stats.V0_total, stats.V1_total
    if V0t <= 0 or V1t <= 0:
        raise ConfigurationError("variance ratio needs positive summed variances")
    denom = ((math.sqrt(V0t * C0) + math.sqrt(V1t * C1))
             * (stats.V0 * math.sqrt(C0 / V0t) + stats.V1 * math.sqrt(C1 / V1t)))
    return stats.var_fine * (C1 - C0) / denom


def n_target(var_fine, eps2: float) -> float:
    """Fine-only sample count whose summed estimator variance equals ``eps2 / 2``."""
    return float(np.sum(var_fine)) / (eps2 / 2.0)


def mlmc_variance(V0, V1, N0: float, N1: float) -> np.ndarray:
    """Estimator variance ``V0 / N0 + V1 / N1`` for given sample counts."""
    return np.asarray(V0, dtype=float) / N0 + np.asarray(V1, dtype=float) / N1


def optimal_variance(V0, V1, allocation: MlmcAllocation) -> np.ndarray:
    """Closed-form per-output variance at the optimal counts of ``allocation``."""
    a = allocation
    s = math.sqrt(a.V0 * a.C0 + a.V1 * a.C1)
    return ((np.asarray(V0, dtype=float) * math.sqrt(a.C0 / a.V0)
             + np.asarray(V1, dtype=float) * math.sqrt(a.C1 / a.V1)) / (2.0 / a.eps2 * s))
