"""Real spherical harmonics: evaluation, tangent-plane Jacobians, quadrature
projection and the closed-form Phong BRDF coefficients.

Coefficients are flattened as (l, m) = (0,0), (1,-1), (1,0), (1,1), ...,
i.e. index ``l*l + l + m``. The basis is real, orthonormal over the unit
sphere, and includes the Condon-Shortley phase.

Colour quantities (emission, radiosity, BRDF) are stored as arrays of shape
``(3, K)`` with ``K = (L+1)**2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_DEGREE = 9
LUMINANCE = np.array([0.2126, 0.7152, 0.0722])


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def degree_of(n_coeffs: int) -> int:
    degree = int(round(math.sqrt(n_coeffs))) - 1
    if num_coeffs(degree) != n_coeffs:
        raise ValueError(f"{n_coeffs} is not a valid SH coefficient count")
    return degree


@lru_cache(maxsize=None)
def _lm_tables(degree: int):
    ls = np.array([l for l in range(degree + 1) for _ in range(2 * l + 1)])
    ms = np.array([m for l in range(degree + 1) for m in range(-l, l + 1)])
    norm = np.empty(len(ls))
    for k, (l, m) in enumerate(zip(ls, ms)):
        am = abs(int(m))
        n = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
        norm[k] = n if m == 0 else math.sqrt(2.0) * n
    return ls, ms, norm


def _as_directions(dirs) -> np.ndarray:
    d = np.asarray(dirs, dtype=float)
    if d.shape[-1] != 3:
        raise ValueError("directions must have a trailing dimension of 3")
    if not np.all(np.isfinite(d)):
        raise ValueError("direction components must be finite")
    length = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(length == 0.0):
        raise ValueError("zero-length direction")
    return d / length


def _legendre_q(z: np.ndarray, degree: int) -> np.ndarray:
    """Q[l, m] = P_l^m(z) / sin^m(theta), a polynomial in z (CS phase included)."""
    q = np.zeros((degree + 2, degree + 2) + z.shape)
    for m in range(degree + 1):
        q[m, m] = (-1) ** m * _double_factorial(2 * m - 1)
        if m + 1 <= degree:
            q[m + 1, m] = z * (2 * m + 1) * q[m, m]
        for l in range(m + 2, degree + 1):
            q[l, m] = ((2 * l - 1) * z * q[l - 1, m] - (l + m - 1) * q[l - 2, m]) / (l - m)
    return q


def _double_factorial(n: int) -> float:
    out = 1.0
    while n > 1:
        out *= n
        n -= 2
    return out


def _azimuthal(x: np.ndarray, y: np.ndarray, degree: int):
    """Re/Im of (x + iy)^m for m = 0..degree."""
    c = np.zeros((degree + 1,) + x.shape)
    s = np.zeros((degree + 1,) + x.shape)
    c[0] = 1.0
    for m in range(1, degree + 1):
        c[m] = x * c[m - 1] - y * s[m - 1]
        s[m] = x * s[m - 1] + y * c[m - 1]
    return c, s


def eval_sh(dirs, degree: int) -> np.ndarray:
    """Evaluate Y(omega) for one direction ``(3,)`` or a batch ``(..., 3)``.

    Inputs are normalised first. Returns shape ``(..., K)``.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    d = _as_directions(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    q = _legendre_q(z, degree)
    c, s = _azimuthal(x, y, degree)
    ls, ms, norm = _lm_tables(degree)
    out = np.empty(d.shape[:-1] + (len(ls),))
    for k, (l, m) in enumerate(zip(ls, ms)):
        am = abs(int(m))
        trig = c[am] if m >= 0 else s[am]
        out[..., k] = norm[k] * q[l, am] * trig
    return out


def sh_jacobian(dirs, degree: int) -> np.ndarray:
    """Tangent-plane gradient of every basis function, shape ``(..., K, 3)``.

    The basis is extended off the sphere by normalising its argument, so each
    row is the ambient polynomial gradient projected onto the tangent plane.
    """
    d = _as_directions(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    q = _legendre_q(z, degree)
    c, s = _azimuthal(x, y, degree)
    ls, ms, norm = _lm_tables(degree)
    grad = np.zeros(d.shape[:-1] + (len(ls), 3))
    for k, (l, m) in enumerate(zip(ls, ms)):
        am = abs(int(m))
        if m >= 0:
            trig = c[am]
            dtx = am * c[am - 1] if am > 0 else 0.0 * x
            dty = -am * s[am - 1] if am > 0 else 0.0 * x
        else:
            trig = s[am]
            dtx = am * s[am - 1]
            dty = am * c[am - 1]
        # d/dz P_l^(m) = P_l^(m+1) and Q carries (-1)^m, hence the sign.
        dq = -q[l, am + 1]
        grad[..., k, 0] = norm[k] * q[l, am] * dtx
        grad[..., k, 1] = norm[k] * q[l, am] * dty
        grad[..., k, 2] = norm[k] * dq * trig
    radial = np.einsum("...kj,...j->...k", grad, d)
    return grad - radial[..., None] * d[..., None, :]


@dataclass(frozen=True)
class Quadrature:
    """Product Gauss-Legendre (cos theta) x uniform (phi) rule on the sphere."""

    n_theta: int = 64
    n_phi: int = 128

    def check(self, degree: int) -> None:
        # exact for products of two degree-L functions
        if self.n_theta < degree + 1 or self.n_phi < 2 * degree + 1:
            raise ValueError(
                f"quadrature {self.n_theta}x{self.n_phi} below floor "
                f"{degree + 1}x{2 * degree + 1} for degree {degree}"
            )

    def nodes(self):
        """Return unit directions ``(M, 3)`` and weights ``(M,)``."""
        return _quadrature_nodes(self.n_theta, self.n_phi)


@lru_cache(maxsize=8)
def _quadrature_nodes(n_theta: int, n_phi: int):
    mu, w_mu = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    sin_t = np.sqrt(1.0 - mu**2)
    dirs = np.stack(
        [
            np.outer(sin_t, np.cos(phi)),
            np.outer(sin_t, np.sin(phi)),
            np.repeat(mu[:, None], n_phi, axis=1),
        ],
        axis=-1,
    ).reshape(-1, 3)
    weights = np.repeat(w_mu * (2.0 * np.pi / n_phi), n_phi)
    dirs.setflags(write=False)
    weights.setflags(write=False)
    return dirs, weights


def project_function(h, degree: int, quadrature: Quadrature | None = None) -> np.ndarray:
    """Project a spherical function onto the basis by quadrature.

    ``h`` maps an ``(M, 3)`` array of unit directions to ``(M,)`` or
    ``(M, C)`` values; the result is ``(K,)`` or ``(C, K)``.
    """
    quadrature = quadrature or Quadrature()
    quadrature.check(degree)
    dirs, weights = quadrature.nodes()
    values = np.asarray(h(dirs), dtype=float)
    basis = eval_sh(dirs, degree) * weights[:, None]
    if values.ndim == 1:
        return values @ basis
    return values.T @ basis


@dataclass(frozen=True)
class Material:
    """Diffuse + Phong mixture: ``k*kd/pi + (1-k)*ks*(s+1)/(2pi)*cos^s``."""

    kd: tuple = (0.5, 0.5, 0.5)
    ks: tuple = (0.0, 0.0, 0.0)
    shininess: float = 1.0
    blend: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kd", tuple(float(v) for v in self.kd))
        object.__setattr__(self, "ks", tuple(float(v) for v in self.ks))
        if len(self.kd) != 3 or len(self.ks) != 3:
            raise ValueError("albedos must be RGB triples")
        if not self.shininess > 0:
            raise ValueError("shininess must be positive")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")


def max_shininess(degree: int) -> float:
    return num_coeffs(degree) / 5.0


def _phong_band_ratio(l: int, s: float) -> float:
    if l % 2:
        terms = (l + 1) // 2
        num = np.prod([s + 1 - 2 * k for k in range(terms)])
        den = np.prod([s + 2 + 2 * k for k in range(terms)])
    else:
        terms = l // 2
        num = np.prod([s - 2 * k for k in range(terms)])
        den = np.prod([s + 3 + 2 * k for k in range(terms)])
    return float(num / den)


def phong_band_ratios(shininess: float, degree: int) -> np.ndarray:
    """Per-band specular factors (band 0 is 1)."""
    return np.array([1.0] + [_phong_band_ratio(l, shininess) for l in range(1, degree + 1)])


def phong_band_ratio_derivs(shininess: float, degree: int) -> np.ndarray:
    """d/ds of :func:`phong_band_ratios`, via the product rule."""
    out = np.zeros(degree + 1)
    s = shininess
    for l in range(1, degree + 1):
        if l % 2:
            terms = (l + 1) // 2
            a = np.array([1.0 - 2 * k for k in range(terms)])
            b = np.array([2.0 + 2 * k for k in range(terms)])
        else:
            terms = l // 2
            a = np.array([-2.0 * k for k in range(terms)])
            b = np.array([3.0 + 2 * k for k in range(terms)])
        num = np.prod(s + a)
        den = np.prod(s + b)
        dnum = sum(np.prod(np.delete(s + a, n)) for n in range(terms))
        dden = sum(np.prod(np.delete(s + b, n)) for n in range(terms))
        out[l] = (dnum * den - num * dden) / den**2
    return out


def clamp_shininess(shininess: float, degree: int) -> float:
    limit = max_shininess(degree)
    if shininess > limit:
        warnings.warn(
            f"shininess {shininess:g} exceeds the degree-{degree} limit {limit:g}; clamped",
            RuntimeWarning,
            stacklevel=3,
        )
        return limit
    return float(shininess)


def phong_brdf_coeffs(material: Material, degree: int) -> np.ndarray:
    """Closed-form BRDF coefficient vector f^c, shape ``(3, K)``."""
    k = material.blend
    if k == 1.0 or not any(material.ks):
        # no specular lobe, so the shininess never reaches the coefficients
        s = min(float(material.shininess), max_shininess(degree))
    else:
        s = clamp_shininess(material.shininess, degree)
    kd = np.asarray(material.kd)
    ks = np.asarray(material.ks)
    ls, ms, _ = _lm_tables(degree)
    ratios = phong_band_ratios(s, degree)
    sign = np.where(ms % 2 == 0, 1.0, -1.0)
    out = (1.0 - k) * ks[:, None] * (sign * ratios[ls])[None, :]
    out[:, 0] = 4.0 * k * kd + (1.0 - k) * ks
    return out


def brdf_eval(f_coeffs, w_in, w_out) -> np.ndarray:
    """f(w_in, w_out) = sum_lm c_lm Y_lm(-w_in) Y_lm(w_out), per channel."""
    f_coeffs = np.asarray(f_coeffs, dtype=float)
    degree = degree_of(f_coeffs.shape[-1])
    y_in = eval_sh(-np.asarray(w_in, dtype=float), degree)
    y_out = eval_sh(w_out, degree)
    return np.sum(f_coeffs * (y_in * y_out), axis=-1)


def luminance(rgb) -> np.ndarray:
    return np.asarray(rgb) @ LUMINANCE


@lru_cache(maxsize=None)
def check_reciprocity(n_coeffs: int, n_dirs: int = 8, tol: float = 1e-12) -> None:
    """Assert f(w_in, w_out) = f(w_out, w_in) for a random SH-coded BRDF.

    Exact by parity of the basis; used as a guard before adjoint solves.
    """
    degree = degree_of(n_coeffs)
    rng = np.random.default_rng(1234)
    f = rng.standard_normal((3, n_coeffs))
    a = rng.standard_normal((n_dirs, 3))
    b = rng.standard_normal((n_dirs, 3))
    fwd = brdf_eval(f[:, None, :], a, b)
    bwd = brdf_eval(f[:, None, :], b, a)
    if np.max(np.abs(fwd - bwd)) > tol * max(1.0, float(np.max(np.abs(fwd)))):
        raise AssertionError("SH BRDF reciprocity violated")
