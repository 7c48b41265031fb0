"""Monotone lower-triangular polynomial transport maps.

Component ``k`` acts on standardized inputs ``z = (x - center) / scale``:

    T_k(z) = p_k(z_<k) + int_0^{z_k} (q_k(z_<k, t)^2 + eps) dt

with ``p_k`` and ``q_k`` expansions in probabilists' Hermite polynomials
under a total-order truncation. The integrand is a polynomial in ``t``, so a
Gauss-Legendre rule with enough nodes evaluates it exactly, and the inverse
reduces to a sequence of scalar monotone polynomial equations.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import hermite_e

from ..errors import ConfigurationError, InversionError
from .base import TransportMap

MONOTONE_EPS = 1e-6
INVERSE_TOL = 1e-10
_CHUNK = 8192


def total_order_multi_indices(nvars: int, order: int) -> np.ndarray:
    """All multi-indices over ``nvars`` variables with total degree <= ``order``.

    Sorted by total degree, then lexicographically, so the constant term
    comes first. Zero variables give a single empty index (the constant).
    """
    if order < 0:
        return np.zeros((0, nvars), dtype=int)
    idx = [a for a in itertools.product(range(order + 1), repeat=nvars) if sum(a) <= order]
    idx.sort(key=lambda a: (sum(a), a))
    return np.array(idx, dtype=int).reshape(len(idx), nvars)


def hermite_table(z: np.ndarray, degree: int) -> np.ndarray:
    """Values He_0..He_degree at ``z``; the new trailing axis indexes degree."""
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = z
    for n in range(1, degree):
        out[..., n + 1] = z * out[..., n] - n * out[..., n - 1]
    return out


def integrand_order(order: int) -> int:
    """Total order of ``q_k`` that keeps ``T_k`` within total order ``order``."""
    return (order - 1) // 2


def _hermite_to_monomial(degree: int) -> np.ndarray:
    conv = np.zeros((degree + 1, degree + 1))
    for n in range(degree + 1):
        coef = hermite_e.herme2poly(np.eye(degree + 1)[n])
        conv[n, : coef.size] = coef
    return conv


def _tensor_basis(table: np.ndarray, multi: np.ndarray) -> np.ndarray:
    """Tensor-product basis values from a ``(n, nvars, deg+1)`` Hermite table."""
    out = np.ones((table.shape[0], multi.shape[0]))
    for j in range(multi.shape[1]):
        out *= table[:, j, multi[:, j]]
    return out


@dataclass
class ComponentDesign:
    """Parameter-independent arrays for one component over a sample set.

    With ``c = (F * b) @ select`` the component value is
    ``P @ a + c^T M c + eps * zk`` and its diagonal derivative is
    ``(Hd * c).sum(1)`` squared plus ``eps``.
    """

    P: np.ndarray
    F: np.ndarray
    Hd: np.ndarray
    M: np.ndarray
    zk: np.ndarray


class _Component:
    def __init__(self, k: int, order: int):
        self.k = k
        self.t_degree = integrand_order(order)
        self.off_idx = total_order_multi_indices(k, order)
        self.diag_idx = total_order_multi_indices(k + 1, self.t_degree)
        self.diag_off = self.diag_idx[:, :k]
        self.diag_pow = self.diag_idx[:, k]
        self.select = np.zeros((self.diag_idx.shape[0], self.t_degree + 1))
        self.select[np.arange(self.diag_idx.shape[0]), self.diag_pow] = 1.0
        self.a = np.zeros(self.off_idx.shape[0])
        self.b = np.zeros(self.diag_idx.shape[0])
        self.b[0] = 1.0

    @property
    def size(self) -> int:
        return self.a.size + self.b.size

    def t_coefficients(self, table_lower: np.ndarray) -> np.ndarray:
        """Hermite-in-t coefficients of ``q_k`` for each point."""
        F = _tensor_basis(table_lower, self.diag_off)
        return (F * self.b) @ self.select


class MonotoneTriangularMap(TransportMap):
    """Trainable monotone Knothe-Rosenblatt style map.

    Args:
        dim: Input dimension.
        order: Total polynomial order of each component. ``p_k`` uses it
            directly and ``q_k`` uses ``(order - 1) // 2`` so that the
            squared, integrated term does not exceed it.
        quadrature_nodes: Gauss-Legendre nodes for the monotone integral.
        eps: Floor added to the squared integrand.
    """

    trainable = True

    def __init__(self, dim: int, order: int = 2, quadrature_nodes: int = 32,
                 eps: float = MONOTONE_EPS):
        if dim < 1:
            raise ConfigurationError("map dimension must be positive")
        if order < 1:
            raise ConfigurationError("triangular map order must be at least 1")
        if quadrature_nodes < order:
            raise ConfigurationError("too few quadrature nodes for the requested order")
        self.dim = dim
        self.order = order
        self.quadrature_nodes = quadrature_nodes
        self.eps = eps
        self.center = np.zeros(dim)
        self.scale = np.ones(dim)
        self.output_center = np.zeros(dim)
        self.output_scale = np.ones(dim)
        self.components = [_Component(k, order) for k in range(dim)]
        nodes, weights = np.polynomial.legendre.leggauss(quadrature_nodes)
        self._gl_nodes = 0.5 * (nodes + 1.0)
        self._gl_weights = 0.5 * weights
        self._to_mono = _hermite_to_monomial(integrand_order(order))

    # parameters -------------------------------------------------------

    @property
    def num_parameters(self) -> int:
        return sum(c.size for c in self.components)

    @property
    def parameters(self) -> np.ndarray:
        return np.concatenate([np.concatenate([c.a, c.b]) for c in self.components])

    @parameters.setter
    def parameters(self, phi) -> None:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.num_parameters,):
            raise ConfigurationError(
                f"expected {self.num_parameters} parameters, got shape {phi.shape}")
        pos = 0
        for c in self.components:
            c.a = phi[pos:pos + c.a.size].copy()
            pos += c.a.size
            c.b = phi[pos:pos + c.b.size].copy()
            pos += c.b.size

    def component_parameters(self, k: int) -> np.ndarray:
        c = self.components[k]
        return np.concatenate([c.a, c.b])

    def set_component_parameters(self, k: int, phi: np.ndarray) -> None:
        c = self.components[k]
        c.a = np.array(phi[: c.a.size], dtype=float)
        c.b = np.array(phi[c.a.size:], dtype=float)

    def reset(self) -> None:
        """Return to the identity initialization in standardized coordinates."""
        self.components = [_Component(k, self.order) for k in range(self.dim)]

    def standardize(self, samples: np.ndarray) -> None:
        samples = np.atleast_2d(samples)
        self.center = samples.mean(axis=0)
        spread = samples.std(axis=0)
        self.scale = np.where(spread > 1e-12, spread, 1.0)

    # evaluation -------------------------------------------------------

    def _standardized(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / self.scale

    def _forward(self, x):
        out = np.empty_like(x)
        for s in range(0, x.shape[0], _CHUNK):
            out[s:s + _CHUNK] = self._forward_chunk(self._standardized(x[s:s + _CHUNK]))
        return self.output_center + self.output_scale * out

    def _forward_chunk(self, z):
        table = hermite_table(z, self.order)
        out = np.empty_like(z)
        for comp in self.components:
            k = comp.k
            lower = table[:, :k]
            p = _tensor_basis(lower, comp.off_idx) @ comp.a
            coef = comp.t_coefficients(lower)
            zk = z[:, k:k + 1]
            t_table = hermite_table(zk * self._gl_nodes, comp.t_degree)
            qt = np.einsum("njb,nb->nj", t_table, coef)
            integral = (qt * qt) @ self._gl_weights * z[:, k]
            out[:, k] = p + integral + self.eps * z[:, k]
        return out

    def _log_det(self, x):
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], _CHUNK):
            z = self._standardized(x[s:s + _CHUNK])
            table = hermite_table(z, self.order)
            ld = np.zeros(z.shape[0])
            for comp in self.components:
                k = comp.k
                coef = comp.t_coefficients(table[:, :k])
                q = (table[:, k, : comp.t_degree + 1] * coef).sum(axis=1)
                ld += np.log(q * q + self.eps)
            out[s:s + _CHUNK] = ld
        return out + self._log_scale_shift()

    def _log_scale_shift(self) -> float:
        return float(np.log(self.output_scale).sum() - np.log(self.scale).sum())

    def diagonal_derivatives(self, x) -> np.ndarray:
        """``dT_k/dx_k`` for every component, shape ``(n, dim)``."""
        pts, _ = self._points(x)
        z = self._standardized(pts)
        table = hermite_table(z, self.order)
        out = np.empty_like(z)
        for comp in self.components:
            k = comp.k
            coef = comp.t_coefficients(table[:, :k])
            q = (table[:, k, : comp.t_degree + 1] * coef).sum(axis=1)
            out[:, k] = (q * q + self.eps) * self.output_scale[k] / self.scale[k]
        return out

    # inversion --------------------------------------------------------

    def _inverse(self, r, hint):
        return np.array([self._invert_point(r[i], None if hint is None else hint[i % hint.shape[0]])[0]
                         for i in range(r.shape[0])])

    def inverse_and_log_det(self, r, hint=None):
        pts, single = self._points(r)
        hints = None if hint is None else np.atleast_2d(np.asarray(hint, dtype=float))
        xs = np.empty_like(pts)
        lds = np.empty(pts.shape[0])
        for i in range(pts.shape[0]):
            xs[i], lds[i] = self._invert_point(pts[i], None if hints is None else hints[i % hints.shape[0]])
        if single:
            return xs[0], float(lds[0])
        return xs, lds

    def _invert_point(self, r: np.ndarray, hint: np.ndarray | None):
        d = self.dim
        r = (r - self.output_center) / self.output_scale
        z = np.empty(d)
        log_det = 0.0
        for comp in self.components:
            k = comp.k
            if k:
                table = hermite_table(z[:k], self.order)
                rows = np.arange(k)
                p = float(np.prod(table[rows, comp.off_idx], axis=1) @ comp.a)
                F = np.prod(table[rows, comp.diag_off], axis=1)
            else:
                p = float(comp.a[0])
                F = np.ones(comp.b.size)
            mono = ((F * comp.b) @ comp.select) @ self._to_mono
            sq = np.convolve(mono, mono)
            coeffs = [p, float(sq[0]) + self.eps]
            coeffs.extend(float(sq[i]) / (i + 1) for i in range(1, sq.size))
            t0 = None if hint is None else (float(hint[k]) - self.center[k]) / self.scale[k]
            t, _ = _solve_monotone(coeffs, float(r[k]), t0, INVERSE_TOL / self.scale[k])
            z[k] = t
            qv = _poly(mono.tolist(), t)
            log_det += math.log(qv * qv + self.eps)
        x = self.center + self.scale * z
        return x, log_det + self._log_scale_shift()

    # training support -------------------------------------------------

    def component_design(self, k: int, z: np.ndarray) -> ComponentDesign:
        """Arrays that make component ``k`` a cheap function of its coefficients."""
        comp = self.components[k]
        lower = hermite_table(z[:, :k], self.order)
        P = _tensor_basis(lower, comp.off_idx)
        F = _tensor_basis(lower, comp.diag_off)
        zk = z[:, k].copy()
        Hd = hermite_table(zk, comp.t_degree)
        nb = comp.t_degree + 1
        M = np.empty((z.shape[0], nb, nb))
        for s in range(0, z.shape[0], _CHUNK):
            zc = zk[s:s + _CHUNK]
            t_table = hermite_table(zc[:, None] * self._gl_nodes, comp.t_degree)
            w = zc[:, None] * self._gl_weights
            M[s:s + _CHUNK] = np.einsum("nj,nja,njb->nab", w, t_table, t_table)
        return ComponentDesign(P=P, F=F, Hd=Hd, M=M, zk=zk)

    # serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "type": "monotone_triangular",
            "dim": self.dim,
            "order": self.order,
            "quadrature_nodes": self.quadrature_nodes,
            "eps": self.eps,
            "basis": "probabilists_hermite",
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "output_center": self.output_center.tolist(),
            "output_scale": self.output_scale.tolist(),
            "components": [
                {
                    "offdiag_multi_indices": c.off_idx.tolist(),
                    "offdiag_coefficients": c.a.tolist(),
                    "diag_multi_indices": c.diag_idx.tolist(),
                    "diag_coefficients": c.b.tolist(),
                }
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "MonotoneTriangularMap":
        if record.get("type") != "monotone_triangular":
            raise ConfigurationError("record does not describe a monotone triangular map")
        tmap = cls(int(record["dim"]), int(record["order"]),
                   int(record["quadrature_nodes"]), float(record["eps"]))
        tmap.center = np.asarray(record["center"], dtype=float)
        tmap.scale = np.asarray(record["scale"], dtype=float)
        tmap.output_center = np.asarray(record.get("output_center", np.zeros(tmap.dim)), dtype=float)
        tmap.output_scale = np.asarray(record.get("output_scale", np.ones(tmap.dim)), dtype=float)
        for comp, rec in zip(tmap.components, record["components"]):
            if (np.asarray(rec["offdiag_multi_indices"]).reshape(comp.off_idx.shape).tolist()
                    != comp.off_idx.tolist()
                    or rec["diag_multi_indices"] != comp.diag_idx.tolist()):
                raise ConfigurationError("multi-index set does not match the map order")
            comp.a = np.asarray(rec["offdiag_coefficients"], dtype=float)
            comp.b = np.asarray(rec["diag_coefficients"], dtype=float)
        return tmap

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "MonotoneTriangularMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _poly(coeffs, t):
    val = 0.0
    for c in reversed(coeffs):
        val = val * t + c
    return val


def _poly_slope(coeffs, t):
    val = 0.0
    for i in range(len(coeffs) - 1, 0, -1):
        val = val * t + i * coeffs[i]
    return val


def _polish(coeffs, target, t, steps=3):
    # errors in early components are amplified by later ones, so keep taking
    # Newton steps while the residual shrinks instead of stopping at tol
    f = _poly(coeffs, t) - target
    for _ in range(steps):
        slope = _poly_slope(coeffs, t)
        if f == 0.0 or slope <= 0.0:
            break
        t_new = t - f / slope
        f_new = _poly(coeffs, t_new) - target
        if not abs(f_new) < abs(f):
            break
        t, f = t_new, f_new
    return t, _poly_slope(coeffs, t)


def _solve_monotone(coeffs, target, t0, tol, max_expand=80, max_iter=200):
    """Root of an increasing polynomial ``F(t) = target``.

    The bracket grows geometrically from ``t0``; a safeguarded Newton
    iteration then refines it. Returns the root and ``F'`` there.
    """
    if t0 is None or not math.isfinite(t0):
        slope0 = _poly_slope(coeffs, 0.0)
        t0 = (target - coeffs[0]) / slope0
    f0 = _poly(coeffs, t0) - target
    if f0 == 0.0:
        return t0, _poly_slope(coeffs, t0)
    step = 1.0
    if f0 < 0.0:
        lo, hi = t0, t0 + step
        for _ in range(max_expand):
            fh = _poly(coeffs, hi) - target
            if not math.isfinite(fh):
                raise InversionError("monotone component overflowed while bracketing")
            if fh >= 0.0:
                break
            lo, step = hi, 2.0 * step
            hi = t0 + step
        else:
            raise InversionError("failed to bracket the inverse of a map component")
    else:
        lo, hi = t0 - step, t0
        for _ in range(max_expand):
            fl = _poly(coeffs, lo) - target
            if not math.isfinite(fl):
                raise InversionError("monotone component overflowed while bracketing")
            if fl <= 0.0:
                break
            hi, step = lo, 2.0 * step
            lo = t0 - step
        else:
            raise InversionError("failed to bracket the inverse of a map component")
    t = t0
    for _ in range(max_iter):
        f = _poly(coeffs, t) - target
        if f == 0.0:
            return t, _poly_slope(coeffs, t)
        if f < 0.0:
            lo = t
        else:
            hi = t
        slope = _poly_slope(coeffs, t)
        t_new = t - f / slope if slope > 0.0 else 0.5 * (lo + hi)
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= tol or hi - lo <= tol:
            return _polish(coeffs, target, t_new)
        t = t_new
    raise InversionError("inverse iteration did not converge")
