"""Small procedural and bundled scenes used by the tests, CLI and benchmarks."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .scene import Scene, Surfel, parse_scene, point_light
from .sh import Material, num_coeffs


def frame_facing(normal, rng=None):
    """Orthonormal (t_u, t_v) with t_u x t_v = normal, optionally randomly spun."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu)
    tv = np.cross(n, tu)
    if rng is not None:
        a = rng.uniform(0.0, 2.0 * np.pi)
        tu, tv = np.cos(a) * tu + np.sin(a) * tv, -np.sin(a) * tu + np.cos(a) * tv
    return tu, tv


def facing_surfel(center, normal, scale=(0.2, 0.2), g=3.0, material=None, emission=None, lam=1.0, rng=None):
    tu, tv = frame_facing(normal, rng)
    return Surfel(
        center=np.asarray(center, dtype=float),
        tangent_u=tu,
        tangent_v=tv,
        scale=np.asarray(scale, dtype=float),
        g=g,
        lam=lam,
        material=material or Material(),
        emission=emission,
    )


def random_scene(
    seed: int,
    n_surfels: int = 4,
    degree: int = 2,
    n_lights: int = 1,
    emissive: int = 0,
    specular: bool = True,
    albedo: tuple = (0.2, 0.8),
    radius: float = 1.0,
) -> Scene:
    """Surfels on a sphere facing inwards with point lights near the middle.

    Every surfel sees every other one, so the transport graph is dense.
    ``emissive`` surfels get a random positive DC emission.
    """
    rng = np.random.default_rng(seed)
    k = num_coeffs(degree)
    surfels = []
    for idx in range(n_surfels):
        p = rng.standard_normal(3)
        p *= radius / np.linalg.norm(p)
        normal = -p + 0.3 * radius * rng.standard_normal(3)
        kd = tuple(rng.uniform(*albedo, size=3))
        if specular:
            mat = Material(kd=kd, ks=tuple(rng.uniform(0.1, 0.6, size=3)), shininess=float(rng.uniform(1.0, 1.6)), blend=float(rng.uniform(0.3, 0.9)))
        else:
            mat = Material(kd=kd)
        emission = None
        if idx < emissive:
            emission = np.zeros((3, k))
            emission[:, 0] = rng.uniform(0.5, 2.0, size=3)
            if k > 1:
                emission[:, 1:] = 0.1 * rng.standard_normal((3, k - 1))
        surfels.append(
            facing_surfel(
                p,
                normal,
                scale=rng.uniform(0.15, 0.35, size=2) * radius,
                g=float(rng.uniform(1.0, 6.0)),
                material=mat,
                emission=emission,
                lam=float(rng.uniform(0.7, 1.3)),
                rng=rng,
            )
        )
    for _ in range(n_lights):
        pos = 0.3 * radius * rng.uniform(-1.0, 1.0, size=3)
        surfels.append(point_light(pos, rng.uniform(0.5, 1.5, size=3)))
    return Scene(tuple(surfels), degree)


def two_kernel_scene(degree: int = 2) -> Scene:
    """One point light above one diffuse surfel."""
    s = facing_surfel([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], material=Material(kd=(0.6, 0.5, 0.4)))
    return Scene((s, point_light([0.0, 0.0, 1.0], [1.0, 1.0, 1.0])), degree)


BUNDLED = ("two_kernel", "rand4", "direct_dominant", "box")


def bundled_scene(name: str) -> Scene:
    if name not in BUNDLED:
        raise ValueError(f"unknown bundled scene {name!r}; choose from {', '.join(BUNDLED)}")
    text = resources.files("surfelrad").joinpath("data", f"{name}.json").read_text()
    return parse_scene(text)


def bundled_path(name: str):
    return resources.files("surfelrad").joinpath("data", f"{name}.json")
