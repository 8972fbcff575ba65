"""Gaussian surfels, light kernels, footprint opacity and the scene file format.

Lights are kernels too. A point light is an infinitesimal emissive kernel with
zero scales and isotropic emission; a directional light stores its
propagation direction in ``center``. Lights never receive and never occlude.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .sh import Material, num_coeffs, phong_brdf_coeffs

OPACITY_SCALE = 0.03279
OPACITY_POWER = 3.4
FOOTPRINT_CUTOFF = 9.0  # (u^2 + v^2) beyond 3 sigma is ignored
ALPHA_MIN = 1e-4
FRAME_TOL = 1e-6
SQRT_4PI = 2.0 * math.sqrt(math.pi)

KINDS = ("surfel", "point", "directional")


class SceneError(ValueError):
    """Raised for invalid scene data; the message starts with the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True, eq=False)
class Surfel:
    center: np.ndarray
    tangent_u: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    tangent_v: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    scale: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    g: float = 1.0
    lam: float = 1.0
    material: Material = field(default_factory=Material)
    emission: Optional[np.ndarray] = None  # (3, K); surfels only, None means zero
    kind: str = "surfel"
    intensity: Optional[np.ndarray] = None  # RGB; lights only

    def __post_init__(self):
        for name in ("center", "tangent_u", "tangent_v", "scale"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if self.emission is not None:
            object.__setattr__(self, "emission", np.array(self.emission, dtype=float))
        if self.intensity is not None:
            object.__setattr__(self, "intensity", np.array(self.intensity, dtype=float))
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.tangent_u, self.tangent_v)

    @property
    def is_light(self) -> bool:
        return self.kind != "surfel" or (self.emission is not None and np.any(self.emission != 0.0))

    def emission_coeffs(self, n_coeffs: int) -> np.ndarray:
        out = np.zeros((3, n_coeffs))
        if self.kind != "surfel":
            if self.intensity is not None:
                out[:, 0] = SQRT_4PI * self.intensity
        elif self.emission is not None:
            m = min(n_coeffs, self.emission.shape[1])
            out[:, :m] = self.emission[:, :m]
        return out

    def __eq__(self, other):
        if not isinstance(other, Surfel):
            return NotImplemented
        same_emission = (self.emission is None and other.emission is None) or (
            self.emission is not None
            and other.emission is not None
            and np.array_equal(self.emission, other.emission)
        )
        return (
            self.kind == other.kind
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.tangent_u, other.tangent_u)
            and np.array_equal(self.tangent_v, other.tangent_v)
            and np.array_equal(self.scale, other.scale)
            and self.g == other.g
            and self.lam == other.lam
            and self.material == other.material
            and same_emission
            and _same_optional(self.intensity, other.intensity)
        )


def _same_optional(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def point_light(position, intensity, lam: float = 1.0) -> Surfel:
    """Isotropic point light; intensity I maps to c_00 = 2*sqrt(pi)*I."""
    return _light("point", position, intensity, lam)


def directional_light(direction, intensity, lam: float = 1.0) -> Surfel:
    """``direction`` is the direction of propagation (from the light into the scene)."""
    d = np.asarray(direction, dtype=float)
    return _light("directional", d / np.linalg.norm(d), intensity, lam)


def _light(kind, where, intensity, lam) -> Surfel:
    return Surfel(
        center=where,
        scale=[0.0, 0.0],
        g=0.0,
        lam=lam,
        material=Material(kd=(0, 0, 0), ks=(0, 0, 0), shininess=1.0, blend=1.0),
        kind=kind,
        intensity=intensity,
    )


@dataclass(frozen=True, eq=False)
class Scene:
    """Ordered kernels plus the SH degree.

    Treated as immutable: optimisation produces new scenes. Surfels are
    assumed not to overlap; this is not checked.
    """

    surfels: tuple
    sh_degree: int = 2

    def __post_init__(self):
        object.__setattr__(self, "surfels", tuple(self.surfels))

    def __len__(self):
        return len(self.surfels)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return self.sh_degree == other.sh_degree and self.surfels == other.surfels

    def replace_surfels(self, surfels) -> "Scene":
        return Scene(tuple(surfels), self.sh_degree)

    @property
    def n_coeffs(self) -> int:
        return num_coeffs(self.sh_degree)

    @cached_property
    def arrays(self) -> "SceneArrays":
        return SceneArrays.from_scene(self)

    @cached_property
    def light_indices(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.surfels) if s.is_light], dtype=int)

    def bounding_sphere(self):
        pts = [s.center for s in self.surfels if s.kind != "directional"]
        if not pts:
            return np.zeros(3), 1.0
        pts = np.array(pts)
        c = pts.mean(axis=0)
        r = float(np.max(np.linalg.norm(pts - c, axis=1)))
        return c, max(r, 1e-9)


@dataclass
class SceneArrays:
    """Vectorised per-kernel view used by the transport and render code."""

    centers: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    normals: np.ndarray
    scales: np.ndarray
    g: np.ndarray
    lam: np.ndarray
    kinds: np.ndarray  # 0 surfel, 1 point, 2 directional
    emission: np.ndarray  # (N, 3, K)
    brdf: np.ndarray  # (N, 3, K)
    occluder_mask: np.ndarray

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneArrays":
        n, k = len(scene), scene.n_coeffs
        emission = np.zeros((n, 3, k))
        brdf = np.zeros((n, 3, k))
        for i, s in enumerate(scene.surfels):
            emission[i] = s.emission_coeffs(k)
            if s.kind == "surfel":
                brdf[i] = phong_brdf_coeffs(s.material, scene.sh_degree)
        kinds = np.array([KINDS.index(s.kind) for s in scene.surfels], dtype=int)
        tu = np.array([s.tangent_u for s in scene.surfels]).reshape(n, 3)
        tv = np.array([s.tangent_v for s in scene.surfels]).reshape(n, 3)
        return cls(
            centers=np.array([s.center for s in scene.surfels]).reshape(n, 3),
            tangent_u=tu,
            tangent_v=tv,
            normals=np.cross(tu, tv),
            scales=np.array([s.scale for s in scene.surfels]).reshape(n, 2),
            g=np.array([s.g for s in scene.surfels], dtype=float),
            lam=np.array([s.lam for s in scene.surfels], dtype=float),
            kinds=kinds,
            emission=emission,
            brdf=brdf,
            occluder_mask=kinds == 0,
        )


# --- footprint -----------------------------------------------------------


def tangent_point(s: Surfel, u: float, v: float) -> np.ndarray:
    return s.center + s.scale[0] * s.tangent_u * u + s.scale[1] * s.tangent_v * v


def opacity_exponent(g, rho2):
    """h such that 1 - alpha = exp(-h); rho2 = u^2 + v^2."""
    g = np.asarray(g, dtype=float)
    return OPACITY_SCALE * np.power(g, OPACITY_POWER) * np.exp(-0.5 * OPACITY_POWER * np.asarray(rho2))


def opacity_at(s: Surfel, u: float, v: float) -> float:
    if s.g < 0:
        raise ValueError("geometry value must be non-negative")
    return float(-np.expm1(-opacity_exponent(s.g, u * u + v * v)))


def center_opacity(g):
    """alpha at the kernel centre, vectorised over g."""
    return -np.expm1(-OPACITY_SCALE * np.power(np.asarray(g, dtype=float), OPACITY_POWER))


def center_opacity_deriv(g):
    g = np.asarray(g, dtype=float)
    c = OPACITY_SCALE * np.power(g, OPACITY_POWER)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(g > 0, np.exp(-c) * OPACITY_POWER * c / np.where(g > 0, g, 1.0), 0.0)
    return out


_SERIES_SWITCH = 2.0


def expint_lower(c: float) -> float:
    """Ein(c) = integral_0^c (1 - e^-y)/y dy."""
    c = float(c)
    if not math.isfinite(c) or c < 0:
        raise ValueError("expint_lower requires finite c >= 0")
    if c == 0.0:
        return 0.0
    if c <= _SERIES_SWITCH:
        total, term, n = 0.0, 1.0, 1
        while n < 200:
            term *= c / n  # c^n / n!
            contrib = term / n
            total += contrib if n % 2 else -contrib
            if contrib < 1e-18 * total:
                break
            n += 1
        return total
    from scipy.special import exp1

    return float(exp1(c) + math.log(c) + np.euler_gamma)


def expint_lower_deriv(c: float) -> float:
    if c == 0.0:
        return 1.0
    return -math.expm1(-c) / c


def _alpha_integral_parts(g: float):
    c = OPACITY_SCALE * g**OPACITY_POWER
    return c, expint_lower(c)


def alpha_integral(s: Surfel) -> float:
    """Closed-form integral of the opacity over the surfel's tangent plane."""
    return alpha_integral_values(s.g, s.scale[0], s.scale[1])


def alpha_integral_values(g: float, su: float, sv: float) -> float:
    if g < 0:
        raise ValueError("geometry value must be non-negative")
    if g == 0.0:
        return 0.0
    _, ein = _alpha_integral_parts(g)
    return 2.0 * math.pi / OPACITY_POWER * su * sv * ein


def alpha_integral_grad(g: float, su: float, sv: float):
    """(d/dg, d/dsu, d/dsv) of :func:`alpha_integral_values`."""
    if g <= 0.0:
        return 0.0, 0.0, 0.0
    c, ein = _alpha_integral_parts(g)
    pref = 2.0 * math.pi / OPACITY_POWER
    dg = 2.0 * math.pi * su * sv * (-math.expm1(-c)) / g
    return dg, pref * sv * ein, pref * su * ein


# --- intersection --------------------------------------------------------


@dataclass(frozen=True)
class IntersectionRecord:
    index: int
    t: float
    point: np.ndarray
    u: float
    v: float
    alpha: float


def ray_intersect(s: Surfel, origin, direction, index: int = 0) -> Optional[IntersectionRecord]:
    if s.kind != "surfel":
        return None
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    n = s.normal
    denom = float(n @ direction)
    if abs(denom) < 1e-12:
        return None
    t = float(n @ (s.center - origin)) / denom
    if not t > 0.0:
        return None
    rel = origin + t * direction - s.center
    u = float(s.tangent_u @ rel) / s.scale[0]
    v = float(s.tangent_v @ rel) / s.scale[1]
    if u * u + v * v > FOOTPRINT_CUTOFF:
        return None
    alpha = opacity_at(s, u, v)
    if alpha <= ALPHA_MIN:
        return None
    return IntersectionRecord(index, t, tangent_point(s, u, v), u, v, alpha)


# --- file format ---------------------------------------------------------


def _vec(obj, path, n):
    if not isinstance(obj, list) or len(obj) != n:
        raise SceneError(path, f"expected a list of {n} numbers")
    out = []
    for k, v in enumerate(obj):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SceneError(f"{path}[{k}]", "expected a number")
        if not math.isfinite(v):
            raise SceneError(f"{path}[{k}]", "non-finite value")
        out.append(float(v))
    return np.array(out)


def _num(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise SceneError(path, "expected a number")
    if not math.isfinite(obj):
        raise SceneError(path, "non-finite value")
    return float(obj)


def _unit(v, path):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise SceneError(path, "zero-length vector")
    return v if abs(n - 1.0) <= 1e-12 else v / n


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def parse_scene(text: str) -> Scene:
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise SceneError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneError("$", "top level must be an object")
    degree = doc.get("sh_degree", 2)
    if isinstance(degree, bool) or not isinstance(degree, int) or not 0 <= degree <= 20:
        raise SceneError("sh_degree", "expected an integer in [0, 20]")
    k = num_coeffs(degree)
    surfels = []
    for i, sd in enumerate(doc.get("surfels", [])):
        p = f"surfels[{i}]"
        if not isinstance(sd, dict):
            raise SceneError(p, "expected an object")
        for key in ("center", "tangent_u", "tangent_v", "scale", "g"):
            if key not in sd:
                raise SceneError(f"{p}.{key}", "missing field")
        tu = _unit(_vec(sd["tangent_u"], f"{p}.tangent_u", 3), f"{p}.tangent_u")
        tv = _unit(_vec(sd["tangent_v"], f"{p}.tangent_v", 3), f"{p}.tangent_v")
        if abs(float(tu @ tv)) > FRAME_TOL:
            raise SceneError(f"{p}.tangent_v", "tangent frame is not orthogonal")
        scale = _vec(sd["scale"], f"{p}.scale", 2)
        if np.any(scale <= 0):
            raise SceneError(f"{p}.scale", "scales must be positive")
        g = _num(sd["g"], f"{p}.g")
        if g < 0:
            raise SceneError(f"{p}.g", "geometry value must be non-negative")
        lam = _num(sd.get("lambda", 1.0), f"{p}.lambda")
        if lam <= 0:
            raise SceneError(f"{p}.lambda", "compensation must be positive")
        md = sd.get("material", {})
        if not isinstance(md, dict):
            raise SceneError(f"{p}.material", "expected an object")
        try:
            material = Material(
                kd=tuple(_vec(md.get("kd", [0.5, 0.5, 0.5]), f"{p}.material.kd", 3)),
                ks=tuple(_vec(md.get("ks", [0.0, 0.0, 0.0]), f"{p}.material.ks", 3)),
                shininess=_num(md.get("shininess", 1.0), f"{p}.material.shininess"),
                blend=_num(md.get("blend", 1.0), f"{p}.material.blend"),
            )
        except SceneError:
            raise
        except ValueError as exc:
            raise SceneError(f"{p}.material", str(exc)) from exc
        emission = None
        if sd.get("emission_sh") is not None:
            emission = _vec(sd["emission_sh"], f"{p}.emission_sh", 3 * k).reshape(3, k)
        surfels.append(
            Surfel(
                center=_vec(sd["center"], f"{p}.center", 3),
                tangent_u=tu,
                tangent_v=tv,
                scale=scale,
                g=g,
                lam=lam,
                material=material,
                emission=emission,
            )
        )
    for i, ld in enumerate(doc.get("lights", [])):
        p = f"lights[{i}]"
        if not isinstance(ld, dict):
            raise SceneError(p, "expected an object")
        kind = ld.get("kind")
        if kind not in ("point", "directional"):
            raise SceneError(f"{p}.kind", "expected 'point' or 'directional'")
        intensity = _vec(ld.get("intensity"), f"{p}.intensity", 3)
        lam = _num(ld.get("lambda", 1.0), f"{p}.lambda")
        if lam <= 0:
            raise SceneError(f"{p}.lambda", "compensation must be positive")
        if kind == "point":
            pos = _vec(ld.get("position"), f"{p}.position", 3)
            surfels.append(point_light(pos, intensity, lam))
        else:
            d = _unit(_vec(ld.get("direction"), f"{p}.direction", 3), f"{p}.direction")
            surfels.append(_light("directional", d, intensity, lam))
    for key in doc:
        if key not in ("sh_degree", "surfels", "lights"):
            raise SceneError(key, "unknown top-level field")
    return Scene(tuple(surfels), degree)


def scene_to_dict(scene: Scene) -> dict:
    surfels, lights = [], []
    for s in scene.surfels:
        if s.kind == "surfel":
            d = {
                "center": s.center.tolist(),
                "tangent_u": s.tangent_u.tolist(),
                "tangent_v": s.tangent_v.tolist(),
                "scale": s.scale.tolist(),
                "g": float(s.g),
                "lambda": float(s.lam),
                "material": {
                    "kd": list(s.material.kd),
                    "ks": list(s.material.ks),
                    "shininess": s.material.shininess,
                    "blend": s.material.blend,
                },
            }
            if s.emission is not None and np.any(s.emission != 0):
                d["emission_sh"] = s.emission.reshape(-1).tolist()
            surfels.append(d)
        else:
            d = {"kind": s.kind, "intensity": s.intensity.tolist()}
            d["position" if s.kind == "point" else "direction"] = s.center.tolist()
            if s.lam != 1.0:
                d["lambda"] = float(s.lam)
            lights.append(d)
    return {"sh_degree": scene.sh_degree, "surfels": surfels, "lights": lights}


def serialize_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=2, sort_keys=True, allow_nan=False) + "\n"


def load_scene(path) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return parse_scene(fh.read())


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scene(scene))
