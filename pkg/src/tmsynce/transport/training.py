"""KL-based training of triangular maps and the map-quality diagnostic."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ..errors import TrainingError
from ..model import LOG_2PI, TargetDensity
from .base import TransportMap
from .triangular import ComponentDesign, MonotoneTriangularMap

logger = logging.getLogger(__name__)

MAX_NONFINITE_FRACTION = 0.01


def _reference_log_pdf(r: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(r * r, axis=1) - 0.5 * r.shape[1] * LOG_2PI


def _loss_terms(tmap: TransportMap, samples: np.ndarray, target: TargetDensity | None):
    r = tmap.forward(samples)
    log_ref = _reference_log_pdf(r) if target is None else np.asarray(target.log_pdf(r), dtype=float)
    return -(log_ref + tmap.log_det_jacobian(samples))


def kl_sa_loss(tmap: TransportMap, samples, weights=None, target: TargetDensity | None = None) -> float:
    """Sample-average KL loss ``mean(-[log pi_r(T(x)) + log|det J_T(x)|])``.

    ``pi_r`` is the standard normal unless ``target`` supplies another
    density on the map's output space. Non-finite summands are dropped;
    more than 1% of them raises :class:`TrainingError`.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("kl_sa_loss needs at least one sample")
    terms = _loss_terms(tmap, samples, target)
    w = np.ones(samples.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    finite = np.isfinite(terms)
    bad = w[~finite].sum() / w.sum()
    if bad > MAX_NONFINITE_FRACTION:
        raise TrainingError(f"{bad:.1%} of loss summands are non-finite")
    if bad > 0:
        logger.debug("excluded %d non-finite loss summands", int((~finite).sum()))
    return float(np.sum(w[finite] * terms[finite]) / w[finite].sum())


def variance_diagnostic(tmap: TransportMap, target: TargetDensity, samples) -> tuple[float, float]:
    """Variance of ``log pi - log pi_r(T) - log|det J_T|`` and its KL normalization.

    Returns:
        ``(sigma2, 1 - exp(-sigma2))``; both vanish for an exact map.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("variance_diagnostic needs at least one sample")
    mismatch = (np.asarray(target.log_pdf(samples), dtype=float)
                - _reference_log_pdf(tmap.forward(samples))
                - tmap.log_det_jacobian(samples))
    mismatch = mismatch[np.isfinite(mismatch)]
    if mismatch.size < 2:
        return 0.0, 0.0
    sigma2 = float(np.var(mismatch, ddof=1))
    return sigma2, float(-math.expm1(-sigma2))


@dataclass
class TrainingResult:
    parameters: np.ndarray
    loss: float
    initial_loss: float
    iterations: int
    converged: bool
    n_samples: int
    n_unique: int


class _ComponentObjective:
    """Separable standard-normal loss for one triangular component."""

    def __init__(self, comp, design: ComponentDesign, weights: np.ndarray, eps: float,
                 log_scale: float):
        self.design = design
        self.w = weights
        self.eps = eps
        self.na = comp.a.size
        self.pow = comp.diag_pow
        self.select = comp.select
        self.Qd = design.F * design.Hd[:, self.pow]
        self.const = 0.5 * LOG_2PI + log_scale
        self.groups = [np.flatnonzero(self.pow == beta) for beta in range(self.select.shape[1])]

    def _state(self, phi):
        d = self.design
        a, b = phi[: self.na], phi[self.na:]
        c = (d.F * b) @ self.select
        Mc = np.einsum("nab,nb->na", d.M, c)
        T = d.P @ a + np.sum(c * Mc, axis=1) + self.eps * d.zk
        q = self.Qd @ b
        return a, b, c, Mc, T, q

    def least_squares_start(self) -> np.ndarray:
        """Constant unit integrand with the off-diagonal part fitted exactly.

        ``T`` is linear in ``a`` for fixed ``b``, so this start is the best
        map with a constant diagonal slope.
        """
        b = np.zeros(self.Qd.shape[1])
        b[0] = 1.0
        phi = np.concatenate([np.zeros(self.na), b])
        *_, rest, _ = self._state(phi)
        if self.na:
            sw = np.sqrt(self.w)
            phi[: self.na] = -np.linalg.lstsq(self.design.P * sw[:, None], rest * sw, rcond=None)[0]
        return phi

    def value(self, phi) -> float:
        *_, T, q = self._state(phi)
        return float(self.w @ (0.5 * T * T - np.log(q * q + self.eps)) + self.const)

    def value_and_grad(self, phi):
        _, _, _, Mc, T, q = self._state(phi)
        d = self.design
        s = q * q + self.eps
        f = float(self.w @ (0.5 * T * T - np.log(s)) + self.const)
        wT = self.w * T
        Db = 2.0 * d.F * Mc[:, self.pow]
        grad = np.concatenate([d.P.T @ wT, Db.T @ wT - self.Qd.T @ (self.w * 2.0 * q / s)])
        return f, grad

    def hessian(self, phi):
        _, _, _, Mc, T, q = self._state(phi)
        d = self.design
        s = q * q + self.eps
        Db = 2.0 * d.F * Mc[:, self.pow]
        J = np.hstack([d.P, Db])
        H = J.T @ (self.w[:, None] * J)
        wT2 = 2.0 * self.w * T
        Hbb = H[self.na:, self.na:]
        for ba, ia in enumerate(self.groups):
            for bb, ib in enumerate(self.groups):
                if ia.size == 0 or ib.size == 0:
                    continue
                scale = wT2 * d.M[:, ba, bb]
                Hbb[np.ix_(ia, ib)] += (d.F[:, ia] * scale[:, None]).T @ d.F[:, ib]
        curv = self.w * 2.0 * (self.eps - q * q) / (s * s)
        Hbb -= self.Qd.T @ (curv[:, None] * self.Qd)
        return H


@dataclass
class MapTrainer:
    """Full-batch deterministic optimizer for triangular maps.

    Attributes:
        period: Retrain every ``period`` chain iterations.
        max_iterations: Optimizer iteration cap per component.
        gtol: Gradient tolerance.
        warm_start: Start from the current coefficients instead of identity.
        min_samples_per_parameter: Training needs this many samples per
            coefficient.
    """

    period: int = 5000
    max_iterations: int = 200
    gtol: float = 1e-6
    warm_start: bool = True
    min_samples_per_parameter: int = 10

    def train(self, tmap: MonotoneTriangularMap, samples, target: TargetDensity | None = None,
              target_samples=None) -> TrainingResult:
        """Minimize the sample-average KL loss over ``tmap``'s coefficients in place.

        Args:
            tmap: Map to train.
            samples: Training points, one per row; duplicates become weights.
            target: Density replacing the standard-normal reference (deep
                configuration).
            target_samples: Draws from ``target``; their mean and spread
                set the map's output affine before optimizing.

        Raises:
            TrainingError: Too few samples or a failed optimization; the
                previous coefficients are restored.
        """
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        samples = samples[np.all(np.isfinite(samples), axis=1)]
        need = self.min_samples_per_parameter * tmap.num_parameters
        if samples.shape[0] < need:
            raise TrainingError(f"{samples.shape[0]} samples are fewer than the required {need}")
        unique, counts = np.unique(samples, axis=0, return_counts=True)
        weights = counts / counts.sum()
        previous = (tmap.parameters.copy(), tmap.center.copy(), tmap.scale.copy(),
                    tmap.output_center.copy(), tmap.output_scale.copy())
        if not self.warm_start:
            tmap.reset()
        tmap.standardize(samples)
        if target_samples is not None:
            ts = np.atleast_2d(np.asarray(target_samples, dtype=float))
            spread = ts.std(axis=0)
            tmap.output_center = ts.mean(axis=0)
            tmap.output_scale = np.where(spread > 1e-12, spread, 1.0)
        try:
            if target is None:
                result = self._train_reference(tmap, unique, weights)
            else:
                result = self._train_target_multistart(tmap, unique, weights, target)
        except (TrainingError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            _restore(tmap, previous)
            raise TrainingError(f"map training failed: {exc}") from exc
        if not math.isfinite(result.loss):
            _restore(tmap, previous)
            raise TrainingError("map training produced a non-finite loss")
        result.n_samples = samples.shape[0]
        result.n_unique = unique.shape[0]
        return result

    def _train_reference(self, tmap, points, weights) -> TrainingResult:
        z = (points - tmap.center) / tmap.scale
        total = total0 = 0.0
        iters = 0
        converged = True
        for k, comp in enumerate(tmap.components):
            obj = _ComponentObjective(comp, tmap.component_design(k, z), weights, tmap.eps,
                                      float(np.log(tmap.scale[k])))
            phi0 = tmap.component_parameters(k)
            f0 = obj.value(phi0)
            if not math.isfinite(f0):
                raise TrainingError("initial loss is non-finite")
            # squaring the integrand makes the loss non-convex; a second start
            # avoids basins where the integrand changes sign
            phi, f, res = phi0, f0, None
            for start in (phi0, obj.least_squares_start()):
                trial = optimize.minimize(obj.value_and_grad, start, jac=True, hess=obj.hessian,
                                          method="trust-exact",
                                          options={"gtol": self.gtol, "maxiter": self.max_iterations})
                if math.isfinite(trial.fun) and trial.fun < f:
                    phi, f, res = trial.x, float(trial.fun), trial
            tmap.set_component_parameters(k, phi)
            total += f
            total0 += f0
            if res is not None:
                iters = max(iters, int(res.nit))
                converged &= bool(np.max(np.abs(res.jac)) <= self.gtol * 10 or res.success)
        return TrainingResult(tmap.parameters, total, total0, iters, converged, 0, 0)

    def _train_target_multistart(self, tmap, points, weights, target) -> TrainingResult:
        """Target-space loss is not convex: optimize from the current coefficients
        and from a reference-trained map, keep the lower loss."""
        start = tmap.parameters.copy()
        first = self._train_target(tmap, points, weights, target)
        best = (first.loss, tmap.parameters.copy(), first)
        tmap.parameters = start
        try:
            self._train_reference(tmap, points, weights)
            second = self._train_target(tmap, points, weights, target)
        except (TrainingError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            logger.debug("pretrained start skipped: %s", exc)
        else:
            if second.loss < best[0]:
                best = (second.loss, tmap.parameters.copy(), second)
        tmap.parameters = best[1]
        result = best[2]
        result.initial_loss = first.initial_loss
        result.iterations = max(first.iterations, result.iterations)
        return result

    def _train_target(self, tmap, points, weights, target) -> TrainingResult:
        z = (points - tmap.center) / tmap.scale
        designs = [tmap.component_design(k, z) for k in range(tmap.dim)]
        objs = [_ComponentObjective(c, designs[k], weights, tmap.eps, 0.0)
                for k, c in enumerate(tmap.components)]
        sizes = [c.size for c in tmap.components]
        splits = np.cumsum(sizes)[:-1]
        log_scale = -tmap._log_scale_shift()
        oc, os_ = tmap.output_center, tmap.output_scale
        grad_fn = getattr(target, "grad_log_pdf", None)

        def fun(phi):
            parts = np.split(phi, splits)
            T = np.empty((z.shape[0], tmap.dim))
            ld = np.zeros(z.shape[0])
            states = []
            for k, obj in enumerate(objs):
                st = obj._state(parts[k])
                T[:, k] = oc[k] + os_[k] * st[4]
                q = st[5]
                ld += np.log(q * q + obj.eps)
                states.append(st)
            logp = np.asarray(target.log_pdf(T), dtype=float)
            finite = np.isfinite(logp)
            if weights[~finite].sum() > MAX_NONFINITE_FRACTION:
                return np.inf, np.zeros_like(phi)
            w = np.where(finite, weights, 0.0)
            w = w / w.sum()
            f = float(-(w @ (logp + ld)) + log_scale) if finite.all() else float(
                -(w[finite] @ (logp[finite] + ld[finite])) + log_scale)
            g_target = _target_gradient(target, grad_fn, T)
            g_target[~finite] = 0.0
            grads = []
            for k, obj in enumerate(objs):
                _, _, _, Mc, _, q = states[k]
                wg = w * g_target[:, k] * os_[k]
                Db = 2.0 * obj.design.F * Mc[:, obj.pow]
                s = q * q + obj.eps
                grads.append(-obj.design.P.T @ wg)
                grads.append(-Db.T @ wg - obj.Qd.T @ (w * 2.0 * q / s))
            return f, np.concatenate(grads)

        phi0 = tmap.parameters
        f0, _ = fun(phi0)
        if not math.isfinite(f0):
            raise TrainingError("initial loss is non-finite for the target-space objective")
        res = optimize.minimize(fun, phi0, jac=True, method="BFGS",
                                options={"gtol": self.gtol, "maxiter": self.max_iterations})
        phi, f = res.x, float(res.fun)
        if not math.isfinite(f) or f > f0:
            phi, f = phi0, f0
        tmap.parameters = phi
        return TrainingResult(tmap.parameters, f, f0, int(res.nit), bool(res.success), 0, 0)


def _restore(tmap, previous) -> None:
    (tmap.parameters, tmap.center, tmap.scale,
     tmap.output_center, tmap.output_scale) = previous


def _target_gradient(target, grad_fn, points, step=1e-6):
    if grad_fn is not None:
        return np.asarray(grad_fn(points), dtype=float).reshape(points.shape)
    out = np.empty_like(points)
    for j in range(points.shape[1]):
        e = np.zeros(points.shape[1])
        e[j] = step
        out[:, j] = (np.asarray(target.log_pdf(points + e)) - np.asarray(target.log_pdf(points - e))) / (2 * step)
    return np.where(np.isfinite(out), out, 0.0)


def train(trainer: MapTrainer, tmap: MonotoneTriangularMap, samples,
          target: TargetDensity | None = None, target_samples=None) -> TrainingResult:
    """Functional form of :meth:`MapTrainer.train`."""
    return trainer.train(tmap, samples, target, target_samples)
