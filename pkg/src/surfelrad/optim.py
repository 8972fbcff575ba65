"""Desk-scale inverse rendering with Adam updates.

Each parameter family is packed into an unconstrained array: positive
quantities (g, lambda, surfel scales, shininess) live in log space, frames
are updated by axis-angle increments, albedos and blend are clipped to
their valid ranges after each step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import GradBuffer, adjoint_emission, grad_geometry, rotate_frame
from .render import Camera, ImageBuffer, image_loss_backward, render_image
from .scene import SQRT_4PI, Scene, point_light
from .scenes import facing_surfel
from .sh import Material, clamp_shininess, phong_band_ratio_derivs, phong_band_ratios, _lm_tables
from .solvers import solve_dense, solve_hybrid, solve_mc, solve_progressive
from .transport import build_system

FAMILIES = ("emission", "brdf", "centers", "scales", "frames", "g", "lambda", "light_positions")


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamSelection:
    emission: bool = False
    brdf: bool = False
    centers: bool = False
    scales: bool = False
    frames: bool = False
    g: bool = False
    lam: bool = False
    light_positions: bool = False

    @classmethod
    def of(cls, *names) -> "ParamSelection":
        flags = {("lam" if n == "lambda" else n): True for n in names}
        unknown = set(flags) - {f if f != "lambda" else "lam" for f in FAMILIES}
        if unknown:
            raise ValueError(f"unknown parameter families: {sorted(unknown)}")
        return cls(**flags)

    def enabled(self) -> list:
        return [f for f in FAMILIES if getattr(self, "lam" if f == "lambda" else f)]


@dataclass
class OptimConfig:
    iterations: int = 100
    step_sizes: dict = field(default_factory=dict)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    solver: str = "dense"
    T: int = 64
    loss: str = "L1"
    threads: int = 1

    DEFAULT_STEP = {
        "emission": 0.01,
        "brdf": 0.01,
        "centers": 0.005,
        "scales": 0.01,
        "frames": 0.01,
        "g": 0.01,
        "lambda": 0.01,
        "light_positions": 0.005,
    }

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name, lr in self.step_sizes.items():
            if name not in FAMILIES:
                raise ValueError(f"unknown parameter family {name!r}")
            if lr < 0:
                raise ValueError("step sizes must be non-negative")

    def step_size(self, family: str) -> float:
        return self.step_sizes.get(family, self.DEFAULT_STEP[family])


# ---------------------------------------------------------------------------
# packing


def _kinds(scene):
    return scene.arrays.kinds


def pack(scene: Scene, family: str) -> np.ndarray:
    ar = scene.arrays
    if family == "emission":
        return ar.emission.copy()
    if family == "brdf":
        rows = []
        for s in scene.surfels:
            m = s.material
            rows.append(list(m.kd) + list(m.ks) + [m.blend, math.log(m.shininess)])
        return np.array(rows)
    if family in ("centers", "light_positions"):
        return ar.centers.copy()
    if family == "scales":
        return np.log(np.where(ar.kinds[:, None] == 0, ar.scales, 1.0))
    if family == "frames":
        return np.zeros((len(scene), 3))
    if family == "g":
        return np.log(np.where(ar.kinds == 0, ar.g, 1.0))
    if family == "lambda":
        return np.log(ar.lam)
    raise ValueError(family)


def mask(scene: Scene, family: str) -> np.ndarray:
    """Which entries of the packed array are free parameters."""
    kinds = _kinds(scene)
    shape = pack(scene, family).shape
    if family == "emission":
        out = np.zeros(shape, dtype=bool)
        out[kinds == 0] = True
        out[kinds != 0, :, 0] = True
        return out
    if family in ("brdf", "scales", "frames", "g", "centers"):
        sel = kinds == 0
    elif family == "light_positions":
        sel = kinds == 1
    else:
        sel = np.ones(len(kinds), dtype=bool)
    return np.broadcast_to(sel.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def _material_grad(material: Material, d_f: np.ndarray, degree: int) -> np.ndarray:
    """Chain dL/df (3, K) to (kd, ks, blend, log shininess)."""
    ls, ms, _ = _lm_tables(degree)
    s = clamp_shininess(material.shininess, degree)
    clamped = s != material.shininess
    k = material.blend
    kd, ks = np.asarray(material.kd), np.asarray(material.ks)
    sign = np.where(ms % 2 == 0, 1.0, -1.0)
    lobe = sign * phong_band_ratios(s, degree)[ls]
    lobe[0] = 1.0
    d_kd = 4.0 * k * d_f[:, 0]
    d_ks = (1.0 - k) * (d_f @ lobe)
    d_blend = float(np.sum(4.0 * kd * d_f[:, 0]) - np.sum(ks * (d_f @ lobe)))
    dlobe = sign * phong_band_ratio_derivs(s, degree)[ls]
    dlobe[0] = 0.0
    d_s = 0.0 if clamped else float((1.0 - k) * np.sum(ks * (d_f @ dlobe)))
    return np.concatenate([d_kd, d_ks, [d_blend, d_s * s]])


def family_grad(scene: Scene, family: str, grads: GradBuffer) -> np.ndarray:
    """dL/d(packed values) for one family."""
    ar = scene.arrays
    if family == "emission":
        return grads.d_emission.copy()
    if family == "brdf":
        return np.array(
            [
                _material_grad(s.material, grads.d_brdf[i], scene.sh_degree) if ar.kinds[i] == 0 else np.zeros(8)
                for i, s in enumerate(scene.surfels)
            ]
        )
    if family in ("centers", "light_positions"):
        return grads.d_center.copy()
    if family == "scales":
        return grads.d_scales * ar.scales
    if family == "frames":
        return grads.d_frame.copy()
    if family == "g":
        return grads.d_g * ar.g
    if family == "lambda":
        return grads.d_lambda * ar.lam
    raise ValueError(family)


def _orthonormalize(tu, tv):
    tu = tu / np.linalg.norm(tu)
    tv = tv - (tu @ tv) * tu
    return tu, tv / np.linalg.norm(tv)


def unpack(scene: Scene, family: str, values: np.ndarray) -> Scene:
    surfels = list(scene.surfels)
    kinds = _kinds(scene)
    for i, s in enumerate(surfels):
        v = values[i]
        if family == "emission":
            if kinds[i] == 0:
                s = replace(s, emission=v.copy())
            else:
                s = replace(s, intensity=v[:, 0] / SQRT_4PI)
        elif family == "brdf":
            if kinds[i] != 0:
                continue
            mat = Material(
                kd=tuple(np.clip(v[0:3], 0.0, None)),
                ks=tuple(np.clip(v[3:6], 0.0, None)),
                blend=float(np.clip(v[6], 0.0, 1.0)),
                shininess=float(math.exp(v[7])),
            )
            s = replace(s, material=mat)
        elif family in ("centers", "light_positions"):
            if kinds[i] == 2:
                continue
            s = replace(s, center=v.copy())
        elif family == "scales":
            if kinds[i] == 0:
                s = replace(s, scale=np.exp(v))
        elif family == "frames":
            if kinds[i] == 0 and np.any(v):
                s = rotate_frame(s, v)
                tu, tv = _orthonormalize(s.tangent_u, s.tangent_v)
                s = replace(s, tangent_u=tu, tangent_v=tv)
        elif family == "g":
            if kinds[i] == 0:
                s = replace(s, g=float(math.exp(v)))
        elif family == "lambda":
            s = replace(s, lam=float(math.exp(v)))
        surfels[i] = s
    return scene.replace_surfels(surfels)


# ---------------------------------------------------------------------------
# update


@dataclass
class Moments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_update(values, grad, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam step; returns (new values, m, v). ``t`` counts from 1."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return values - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def step(scene: Scene, grads: dict, moments: Moments, config: OptimConfig):
    """Apply one Adam step to every family in ``grads`` (family -> packed gradient)."""
    moments.t += 1
    for family, g in grads.items():
        g = np.asarray(g, dtype=float)
        bad = np.argwhere(~np.isfinite(g))
        if len(bad):
            raise OptimizationError(f"non-finite gradient for {family}{bad[0].tolist()}")
        free = mask(scene, family)
        g = np.where(free, g, 0.0)
        values = pack(scene, family)
        m = moments.m.get(family, np.zeros_like(values))
        v = moments.v.get(family, np.zeros_like(values))
        new, moments.m[family], moments.v[family] = adam_update(
            values, g, m, v, moments.t, config.step_size(family), config.betas, config.eps
        )
        new = np.where(free, new, values)
        if np.array_equal(new, values):
            continue
        scene = unpack(scene, family, new)
    return scene, moments


# ---------------------------------------------------------------------------
# driver


def _solve(scene, config: OptimConfig, iteration: int):
    system = build_system(scene)
    if config.solver == "dense":
        return system, solve_dense(system)
    if config.solver == "progressive":
        return system, solve_progressive(system)
    seed = config.seed * 1_000_003 + iteration
    if config.solver == "mc":
        return system, solve_mc(system, config.T, seed, config.threads)
    if config.solver == "hybrid":
        return system, solve_hybrid(system, config.T, seed, config.threads)
    raise ValueError(f"unknown solver {config.solver!r}")


def loss_and_grads(scene: Scene, targets, config: OptimConfig, iteration: int = 0):
    """One forward solve shared by every target view, then the backward pass."""
    system, state = _solve(scene, config, iteration)
    total = 0.0
    d_b = np.zeros_like(state.radiosity)
    for camera, image in targets:
        rendered = render_image(scene, state, camera, "full", config.threads)
        value, grad = image_loss_backward(rendered, image, config.loss, len(scene))
        total += value
        d_b += grad
    seed = config.seed * 1_000_003 + iteration + 500_009
    d_e = adjoint_emission(scene, d_b, config.solver, config.T, seed, config.threads, system=system)
    grads = grad_geometry(scene, state, d_e, system.pair_cache, system)
    return total, grads


@dataclass
class OptimResult:
    scene: Scene
    trace: list  # dicts: iteration, loss, grad_<family>


def run_optimization(scene: Scene, targets, selection: ParamSelection, config: OptimConfig, callback=None) -> OptimResult:
    if not targets:
        raise ValueError("at least one target view is required")
    families = selection.enabled()
    if not families:
        raise ValueError("select at least one parameter family")
    moments = Moments()
    trace = []
    for it in range(config.iterations):
        loss, grads = loss_and_grads(scene, targets, config, it)
        packed = {f: np.where(mask(scene, f), family_grad(scene, f, grads), 0.0) for f in families}
        row = {"iteration": it, "loss": loss}
        row.update({f"grad_{f}": float(np.linalg.norm(g)) for f, g in packed.items()})
        trace.append(row)
        if callback is not None:
            callback(row)
        scene, moments = step(scene, packed, moments, config)
    return OptimResult(scene, trace)


def evaluate_loss(scene: Scene, targets, config: OptimConfig, iteration: int = 0) -> float:
    """Image loss of ``scene`` against ``targets`` (one forward solve, no gradients)."""
    _, state = _solve(scene, config, iteration)
    total = 0.0
    for camera, image in targets:
        rendered = render_image(scene, state, camera, "full", config.threads)
        total += image_loss_backward(rendered, image, config.loss, len(scene))[0]
    return total


def write_trace(trace, path) -> None:
    keys = []
    for row in trace:
        for key in row:
            if key not in keys:
                keys.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in trace:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# light-position recovery


def light_task_scene(light_position=(0.0, 0.0, 0.0), degree: int = 2) -> Scene:
    """Three glossy surfels forming an open corner around a point light."""
    mats = [
        Material(kd=(0.7, 0.3, 0.3), ks=(0.3, 0.3, 0.3), shininess=1.5, blend=0.6),
        Material(kd=(0.3, 0.7, 0.3), ks=(0.3, 0.3, 0.3), shininess=1.5, blend=0.6),
        Material(kd=(0.3, 0.3, 0.7), ks=(0.3, 0.3, 0.3), shininess=1.5, blend=0.6),
    ]
    surfels = (
        facing_surfel([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], (0.6, 0.6), 5.0, mats[0]),
        facing_surfel([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], (0.6, 0.6), 5.0, mats[1]),
        facing_surfel([0.0, -1.0, 0.0], [0.0, 1.0, 0.0], (0.6, 0.6), 5.0, mats[2]),
        point_light(light_position, [1.0, 1.0, 1.0]),
    )
    return Scene(surfels, degree)


def light_task_cameras(resolution: int = 24):
    return [
        Camera.look_at([1.6, 1.2, 1.0], [-0.4, -0.4, -0.4], fov=1.2, width=resolution, height=resolution),
        Camera.look_at([1.2, 1.6, 0.6], [-0.4, -0.4, -0.4], fov=1.2, width=resolution, height=resolution),
    ]


@dataclass
class LightTaskResult:
    initial_loss: float
    final_loss: float
    position_error: float  # fraction of the scene radius
    truth: np.ndarray
    recovered: np.ndarray
    trace: list


def light_position_task(
    iterations: int = 500,
    displacement: float = 0.2,
    seed: int = 0,
    step_size: float | None = None,
    resolution: int = 24,
    loss: str = "L1",
) -> LightTaskResult:
    """Recover a point light moved by ``displacement`` x scene radius."""
    truth = np.array([-0.3, -0.35, -0.25])
    gt_scene = light_task_scene(truth)
    radius = gt_scene.bounding_sphere()[1]
    cams = light_task_cameras(resolution)
    gt_state = solve_dense(gt_scene)
    targets = [(cam, ImageBuffer(cam.width, cam.height, render_image(gt_scene, gt_state, cam).pixels)) for cam in cams]
    rng = np.random.default_rng(seed)
    offset = rng.standard_normal(3)
    offset *= displacement * radius / np.linalg.norm(offset)
    start = light_task_scene(truth + offset)
    lr = step_size if step_size is not None else 0.01 * radius
    config = OptimConfig(iterations=iterations, step_sizes={"light_positions": lr}, seed=seed, loss=loss, betas=(0.9, 0.99))
    result = run_optimization(start, targets, ParamSelection.of("light_positions"), config)
    recovered = result.scene.surfels[3].center
    return LightTaskResult(
        initial_loss=result.trace[0]["loss"],
        final_loss=evaluate_loss(result.scene, targets, config, iterations),
        position_error=float(np.linalg.norm(recovered - truth) / radius),
        truth=truth,
        recovered=recovered,
        trace=result.trace,
    )
