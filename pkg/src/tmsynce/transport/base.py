"""Transport-map interface plus the identity, affine and composed maps."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, DomainError
from ..model import as_points


class TransportMap:
    """Invertible map from a target space onto a reference space.

    Subclasses implement ``_forward``, ``_inverse`` and ``_log_det`` on
    ``(n, dim)`` arrays; the public methods also accept single ``(dim,)``
    points and return matching shapes (a float for single-point log-dets).
    """

    dim: int
    trainable: bool = False

    def forward(self, x):
        pts, single = self._points(x)
        out = self._forward(pts)
        return out[0] if single else out

    def inverse(self, r, hint=None):
        pts, single = self._points(r)
        hints = None if hint is None else np.atleast_2d(np.asarray(hint, dtype=float))
        out = self._inverse(pts, hints)
        return out[0] if single else out

    def log_det_jacobian(self, x):
        pts, single = self._points(x)
        out = self._log_det(pts)
        return float(out[0]) if single else out

    def inverse_and_log_det(self, r, hint=None):
        """Inverse image of ``r`` together with the log-determinant there."""
        x = self.inverse(r, hint)
        return x, self.log_det_jacobian(x)

    @property
    def parameters(self) -> np.ndarray:
        return np.empty(0)

    def _points(self, x):
        pts, single = as_points(x, self.dim)
        if not np.all(np.isfinite(pts)):
            raise DomainError("transport map evaluated at a non-finite point")
        return pts, single

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _inverse(self, r: np.ndarray, hint: np.ndarray | None) -> np.ndarray:
        raise NotImplementedError

    def _log_det(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityMap(TransportMap):
    def __init__(self, dim: int):
        self.dim = dim

    def _forward(self, x):
        return x.copy()

    def _inverse(self, r, hint):
        return r.copy()

    def _log_det(self, x):
        return np.zeros(x.shape[0])


class AffineMap(TransportMap):
    """``T(x) = L^{-1} (x - shift)`` for an invertible lower-triangular ``L``.

    With ``shift`` at a posterior mode and ``L`` a scaled Cholesky factor of
    the Laplace covariance this whitens the target, which is how the no-map
    baseline expresses its target-space proposals.
    """

    def __init__(self, shift: np.ndarray, factor: np.ndarray):
        self.shift = np.asarray(shift, dtype=float)
        self.factor = np.atleast_2d(np.asarray(factor, dtype=float))
        self.dim = self.shift.size
        if self.factor.shape != (self.dim, self.dim):
            raise ConfigurationError("affine factor must be a (dim, dim) matrix")
        sign, logabs = np.linalg.slogdet(self.factor)
        if sign == 0:
            raise ConfigurationError("affine factor is singular")
        self._inv = np.linalg.inv(self.factor)
        self._log_det_value = -logabs

    @classmethod
    def from_covariance(cls, shift: np.ndarray, covariance: np.ndarray, scale: float = 1.0):
        return cls(shift, scale * np.linalg.cholesky(np.atleast_2d(covariance)))

    def _forward(self, x):
        return (x - self.shift) @ self._inv.T

    def _inverse(self, r, hint):
        return self.shift + r @ self.factor.T

    def _log_det(self, x):
        return np.full(x.shape[0], self._log_det_value)


class ComposedMap(TransportMap):
    """``outer(inner(x))``; used by the deep configuration."""

    def __init__(self, outer: TransportMap, inner: TransportMap):
        if outer.dim != inner.dim:
            raise ConfigurationError(
                f"cannot compose maps of dimension {outer.dim} and {inner.dim}")
        self.outer = outer
        self.inner = inner
        self.dim = inner.dim

    @property
    def trainable(self) -> bool:
        return self.outer.trainable or self.inner.trainable

    def _forward(self, x):
        return self.outer._forward(self.inner._forward(x))

    def _inverse(self, r, hint):
        return self.inner._inverse(self.outer._inverse(r, None), hint)

    def _log_det(self, x):
        return self.inner._log_det(x) + self.outer._log_det(self.inner._forward(x))

    def inverse_and_log_det(self, r, hint=None):
        y, ld_outer = self.outer.inverse_and_log_det(r)
        x, ld_inner = self.inner.inverse_and_log_det(y, hint)
        return x, ld_inner + ld_outer


def compose(outer: TransportMap, inner: TransportMap) -> ComposedMap:
    return ComposedMap(outer, inner)


def finite_difference_log_det(tmap: TransportMap, x: np.ndarray, step: float = 1e-5) -> float:
    """log|det J| of ``tmap`` at ``x`` from a central-difference Jacobian."""
    x = np.asarray(x, dtype=float)
    d = x.size
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[:, j] = (tmap.forward(x + e) - tmap.forward(x - e)) / (2.0 * step)
    sign, logabs = np.linalg.slogdet(jac)
    return logabs if sign != 0 else -math.inf
