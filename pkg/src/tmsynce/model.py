"""Probability models: reference Gaussian, banana/quartic targets and
Gaussian-likelihood posteriors over pluggable forward models.

All log-densities are unnormalized except the reference, whose normalizing
constant is kept so that transport-map losses carry their usual offset.
Every ``log_pdf`` accepts either a single point of shape ``(d,)`` (returns a
float) or a batch of shape ``(n, d)`` (returns an array of shape ``(n,)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import optimize

from .errors import ConfigurationError, DomainError

LOG_2PI = math.log(2.0 * math.pi)

# Nominal values and epistemic bounds of the four SA coefficients
# (kappa, C_b1, sigma_SA, C_nu1), reused as the synthetic demo's prior box.
SA_NOMINAL = (0.41, 0.1355, 0.6667, 7.1)
SA_BOUNDS = (
    (0.205, 0.615),
    (0.06775, 0.20325),
    (0.33335, 1.0005),
    (3.55, 10.65),
)
SA_NAMES = ("kappa", "C_b1", "sigma_SA", "C_nu1")


@runtime_checkable
class TargetDensity(Protocol):
    """Evaluable (possibly unnormalized) log-density on R^dim."""

    dim: int

    def log_pdf(self, x: np.ndarray) -> float | np.ndarray: ...


def as_points(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    """Return ``x`` as an ``(n, dim)`` float array and whether it was a single point."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ConfigurationError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


def _check_finite(points: np.ndarray) -> None:
    if not np.all(np.isfinite(points)):
        raise DomainError("log-density evaluated at a non-finite point")


def _unwrap(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


class StandardGaussian:
    """Normalized standard multivariate normal, the reference density."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ConfigurationError("dimension must be positive")
        self.dim = dim

    def log_pdf(self, x):
        pts, single = as_points(x, self.dim)
        _check_finite(pts)
        out = -0.5 * np.sum(pts * pts, axis=1) - 0.5 * self.dim * LOG_2PI
        return _unwrap(out, single)

    def grad_log_pdf(self, x):
        return -np.asarray(x, dtype=float)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_reference(n, self.dim, rng)


@dataclass
class BananaDensity:
    """Banana target ``-1/2 [(x1-s)^2 + (x2 + (x1-s)^2)^2]``."""

    shift: float = -4.0
    dim: int = field(default=2, init=False)

    def log_pdf(self, x):
        pts, single = as_points(x, 2)
        _check_finite(pts)
        u = pts[:, 0] - self.shift
        v = pts[:, 1] + u * u
        return _unwrap(-0.5 * (u * u + v * v), single)

    def grad_log_pdf(self, x):
        pts = np.asarray(x, dtype=float)
        u = pts[..., 0] - self.shift
        v = pts[..., 1] + u * u
        return np.stack([-u - 2.0 * u * v, -v], axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_banana(n, rng, self.shift)


@dataclass
class QuarticDensity:
    """Quartic target ``-1/2 [(x1-s)^2 + (x2 + (x1-s)^2 + (x1-s)^4)^2]``."""

    shift: float = 4.0
    dim: int = field(default=2, init=False)

    def log_pdf(self, x):
        pts, single = as_points(x, 2)
        _check_finite(pts)
        u = pts[:, 0] - self.shift
        u2 = u * u
        v = pts[:, 1] + u2 + u2 * u2
        return _unwrap(-0.5 * (u2 + v * v), single)

    def grad_log_pdf(self, x):
        pts = np.asarray(x, dtype=float)
        u = pts[..., 0] - self.shift
        u2 = u * u
        v = pts[..., 1] + u2 + u2 * u2
        return np.stack([-u - v * (2.0 * u + 4.0 * u * u2), -v], axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_quartic(n, rng, self.shift)


def log_pdf_banana(x, shift: float = -4.0):
    return BananaDensity(shift).log_pdf(x)


def log_pdf_quartic(x, shift: float = 4.0):
    return QuarticDensity(shift).log_pdf(x)


def sample_reference(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. standard-normal vectors of dimension ``d``."""
    if n < 1:
        raise ConfigurationError("need at least one sample")
    return rng.standard_normal((n, d))


def sample_banana(n: int, rng: np.random.Generator, shift: float = -4.0) -> np.ndarray:
    z = sample_reference(n, 2, rng)
    x1 = z[:, 0] + shift
    u = x1 - shift
    return np.column_stack([x1, z[:, 1] - u * u])


def sample_quartic(n: int, rng: np.random.Generator, shift: float = 4.0) -> np.ndarray:
    z = sample_reference(n, 2, rng)
    x1 = z[:, 0] + shift
    u2 = (x1 - shift) ** 2
    return np.column_stack([x1, z[:, 1] - u2 - u2 * u2])


class GaussianPosterior:
    """Posterior with additive Gaussian noise and a hard box prior.

    ``log_pdf(theta) = -1/2 r^T Sigma^{-1} r`` with ``r = y_D - f(theta)``
    inside the box and ``-inf`` outside. Forward outputs that are not finite
    give ``-inf`` so that the sampler rejects them.

    Args:
        forward_model: Map from a parameter vector ``(d,)`` to outputs ``(m,)``.
        data: Observed outputs ``y_D`` of shape ``(m,)``.
        noise_covariance: SPD matrix ``(m, m)``, or a scalar for ``s * I``.
        prior_box: Sequence of ``(lower, upper)`` pairs, one per parameter.
    """

    def __init__(
        self,
        forward_model: Callable[[np.ndarray], np.ndarray],
        data: np.ndarray,
        noise_covariance,
        prior_box: Sequence[tuple[float, float]],
    ):
        self.forward_model = forward_model
        self.data = np.atleast_1d(np.asarray(data, dtype=float))
        m = self.data.size
        cov = np.asarray(noise_covariance, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(m)
        if cov.shape != (m, m) or not np.allclose(cov, cov.T):
            raise ConfigurationError("noise covariance must be a symmetric (m, m) matrix")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("noise covariance is not positive definite") from exc
        self.noise_covariance = cov
        self._whiten = np.linalg.inv(chol)
        box = np.asarray(prior_box, dtype=float)
        if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
            raise ConfigurationError("prior box must be a list of (lower, upper) with lower < upper")
        self.lower = box[:, 0]
        self.upper = box[:, 1]
        self.dim = box.shape[0]

    def in_support(self, theta: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(theta)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def misfit(self, outputs: np.ndarray) -> float:
        resid = self.data - outputs
        if not np.all(np.isfinite(resid)):
            return -math.inf
        w = self._whiten @ resid
        return -0.5 * float(w @ w)

    def log_pdf(self, theta):
        pts, single = as_points(theta, self.dim)
        _check_finite(pts)
        inside = self.in_support(pts)
        out = np.full(pts.shape[0], -math.inf)
        for i in np.flatnonzero(inside):
            out[i] = self.misfit(np.asarray(self.forward_model(pts[i]), dtype=float))
        return _unwrap(out, single)


def log_pdf_gaussian_posterior(posterior: GaussianPosterior, theta):
    return posterior.log_pdf(theta)


def laplace_approximation(target: TargetDensity, x0: np.ndarray, step: float = 1e-4):
    """Mode and covariance of a Gaussian fit at the mode of ``target``.

    The mode is found by BFGS on ``-log_pdf``; the Hessian is then taken by
    central finite differences and inverted.

    Returns:
        ``(mode, covariance)``.
    """

    def neg(x):
        val = target.log_pdf(x)
        return 1e300 if not np.isfinite(val) else -val

    res = optimize.minimize(neg, np.asarray(x0, dtype=float), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    res = optimize.minimize(neg, res.x, method="BFGS", options={"gtol": 1e-9})
    mode = res.x
    d = mode.size
    hess = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = step
            ej[j] = step
            val = (neg(mode + ei + ej) - neg(mode + ei - ej)
                   - neg(mode - ei + ej) + neg(mode - ei - ej)) / (4 * step * step)
            hess[i, j] = hess[j, i] = val
    cov = np.linalg.inv(hess)
    return mode, 0.5 * (cov + cov.T)


class SyntheticBiFidelityModel:
    """Cheap bi-fidelity forward-model pair over the SA prior box.

    The fine model maps the four box parameters to six lift-curve-like
    outputs (one per "angle" index). The coarse model adds a fixed smooth
    perturbation whose amplitude is calibrated so that, under the prior, the
    per-output correlation between the two levels averages ``target_rho``.

    Args:
        cost_ratio: Coarse-to-fine evaluation cost ratio, in (0, 1].
        target_rho: Desired average prior correlation between levels.
    """

    n_outputs = 6

    def __init__(self, cost_ratio: float = 0.001, target_rho: float = 0.9):
        if not 0.0 < cost_ratio <= 1.0:
            raise ConfigurationError("cost ratio must lie in (0, 1]")
        if not 0.0 < target_rho < 1.0:
            raise ConfigurationError("target correlation must lie in (0, 1)")
        self.cost_ratio = cost_ratio
        self.target_rho = target_rho
        box = np.asarray(SA_BOUNDS)
        self.lower = box[:, 0]
        self.upper = box[:, 1]
        self.dim = 4
        self._s = np.linspace(0.0, 1.0, self.n_outputs)
        self.perturbation_scale = self._calibrate_scale()

    def normalized(self, theta: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(theta, dtype=float) - self.lower) / (self.upper - self.lower) - 1.0

    def _profiles(self):
        s = self._s
        return (1.0 - s, s, 4.0 * s * (1.0 - s), np.sin(2.0 * np.pi * s))

    def _fine_normalized(self, c: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(c)
        s = self._s
        c1, c2, c3, c4 = (c[:, i:i + 1] for i in range(4))
        p1, p2, p3, p4 = self._profiles()
        base = 0.9 + 0.7 * s - 0.45 * s * s
        return (base
                + 0.20 * (c2 + 1.5 * c1 * c1) * p1
                + 0.15 * c1 * p2
                + 0.15 * c3 * p3
                + 0.12 * c4 * p4
                + 0.05 * c3 * c4 * p2)

    def _perturbation_normalized(self, c: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(c)
        c1, c2, c3, c4 = (c[:, i:i + 1] for i in range(4))
        p1, p2, p3, p4 = self._profiles()
        return (np.sin(2.5 * c1) * p1
                + 0.8 * c2 * c3 * p3
                + np.sin(2.0 * c4) * c1 * p2
                + 0.6 * (np.cos(2.0 * c3) - 0.5) * c4 * p4)

    def _calibrate_scale(self) -> float:
        grid = np.random.default_rng(12345).uniform(-1.0, 1.0, (20000, 4))
        f1 = self._fine_normalized(grid)
        g = self._perturbation_normalized(grid)

        def mean_rho(lam):
            f0 = f1 + lam * g
            rhos = [np.corrcoef(f0[:, j], f1[:, j])[0, 1] for j in range(self.n_outputs)]
            return float(np.mean(rhos)) - self.target_rho

        return float(optimize.brentq(mean_rho, 0.0, 10.0, xtol=1e-12))

    def fine(self, theta: np.ndarray) -> np.ndarray:
        out = self._fine_normalized(self.normalized(theta))
        return out[0] if np.ndim(theta) == 1 else out

    def coarse(self, theta: np.ndarray) -> np.ndarray:
        c = self.normalized(theta)
        out = self._fine_normalized(c) + self.perturbation_scale * self._perturbation_normalized(c)
        return out[0] if np.ndim(theta) == 1 else out

    def output_correlation(self, n: int = 20000, seed: int = 0) -> np.ndarray:
        """Per-output Pearson correlation between levels under the prior."""
        rng = np.random.default_rng(seed)
        theta = self.lower + (self.upper - self.lower) * rng.uniform(size=(n, self.dim))
        f0, f1 = self.coarse(theta), self.fine(theta)
        return np.array([np.corrcoef(f0[:, j], f1[:, j])[0, 1] for j in range(self.n_outputs)])


@dataclass
class BiFidelityProblem:
    """Fine/coarse posteriors of the synthetic demo sharing data and prior."""

    model: SyntheticBiFidelityModel
    fine: GaussianPosterior
    coarse: GaussianPosterior
    data: np.ndarray
    noise_variance: float
    initial_point: np.ndarray


def synthetic_bifidelity_problem(
    cost_ratio: float = 0.001,
    noise_variance: float = 0.001,
    target_rho: float = 0.9,
    data_seed: int = 2024,
) -> BiFidelityProblem:
    """Build the synthetic calibration problem on the SA prior box.

    Data are the fine model at the nominal coefficients plus one fixed draw
    of ``N(0, noise_variance * I)`` noise.
    """
    model = SyntheticBiFidelityModel(cost_ratio=cost_ratio, target_rho=target_rho)
    nominal = np.asarray(SA_NOMINAL)
    noise = np.sqrt(noise_variance) * np.random.default_rng(data_seed).standard_normal(model.n_outputs)
    data = model.fine(nominal) + noise
    fine = GaussianPosterior(model.fine, data, noise_variance, SA_BOUNDS)
    coarse = GaussianPosterior(model.coarse, data, noise_variance, SA_BOUNDS)
    return BiFidelityProblem(model, fine, coarse, data, noise_variance, nominal)
