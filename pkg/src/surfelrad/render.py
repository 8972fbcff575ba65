"""View-independent rendering from a solved state, image I/O and the image
loss backward pass.

Pixels are addressed row-major with row 0 at the top of the image; buffers
have shape ``(height, width, 3)`` and hold linear RGB.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import ALPHA_MIN, FOOTPRINT_CUTOFF, Scene, opacity_exponent
from .sh import eval_sh, max_shininess
from .solvers import SolveState, shoot_emitters

PASSES = ("full", "direct", "indirect", "albedo", "shininess")
CHUNK = 1024  # rays per work item; fixed so results do not depend on threads


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    fov: float  # vertical, radians
    width: int
    height: int

    def __post_init__(self):
        for name in ("position", "right", "up", "forward"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not 0.0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        frame = np.stack([self.right, self.up, self.forward])
        if not np.allclose(frame @ frame.T, np.eye(3), atol=1e-9):
            raise ValueError("camera frame must be orthonormal")

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), fov=np.pi / 3, width=32, height=32) -> "Camera":
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return cls(position, right, true_up, forward, float(fov), int(width), int(height))

    def rays(self):
        """Origins and unit directions, ``(H*W, 3)`` each, row-major from the top."""
        tan = np.tan(0.5 * self.fov)
        aspect = self.width / self.height
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * tan * aspect
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * tan
        gx, gy = np.meshgrid(xs, ys)
        d = self.forward + gx[..., None] * self.right + gy[..., None] * self.up
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.position, d.shape).copy(), d


@dataclass
class CompositeMap:
    """Frozen compositing of one render: which surfel feeds which pixel and how much."""

    ray: np.ndarray  # (E,)
    surfel: np.ndarray  # (E,)
    weight: np.ndarray  # (E,)
    active: np.ndarray  # (E, 3) bool, radiance evaluation not clamped
    basis: np.ndarray  # (R, K), Y(-dir)

    def apply(self, radiosity) -> np.ndarray:
        """Pixels (R, 3) for new coefficients with the same weights and clamp pattern."""
        vals = np.einsum("ek,eck->ec", self.basis[self.ray], np.asarray(radiosity)[self.surfel])
        contrib = self.weight[:, None] * np.where(self.active, vals, 0.0)
        out = np.zeros((len(self.basis), 3))
        np.add.at(out, self.ray, contrib)
        return out


@dataclass
class ImageBuffer:
    width: int
    height: int
    pixels: np.ndarray  # (H, W, 3) float64
    composite: CompositeMap | None = field(default=None, repr=False)
    pass_name: str = "full"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(self.height, self.width, 3)
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")


def _radiosity(state):
    return state.radiosity if isinstance(state, SolveState) else np.asarray(state, dtype=float)


def _composite_chunk(geom, coeffs, origins, dirs, values):
    """Composite one chunk of rays; returns pixels and sparse weight entries."""
    centers, tu, tv, normals, scales, g, ids = geom
    r = len(dirs)
    if len(ids) == 0:
        return np.zeros((r, 3)), (np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, 3), bool))
    denom = dirs @ normals.T
    ok = np.abs(denom) > 1e-12
    safe = np.where(ok, denom, 1.0)
    t = (np.sum(centers * normals, axis=1)[None, :] - origins @ normals.T) / safe
    ok &= t > 0.0
    hit = origins[:, None, :] + t[..., None] * dirs[:, None, :] - centers[None]
    u = np.einsum("rsj,sj->rs", hit, tu) / scales[None, :, 0]
    v = np.einsum("rsj,sj->rs", hit, tv) / scales[None, :, 1]
    rho2 = u * u + v * v
    ok &= rho2 <= FOOTPRINT_CUTOFF
    alpha = np.where(ok, -np.expm1(-opacity_exponent(g[None, :], np.where(ok, rho2, 0.0))), 0.0)
    ok &= alpha > ALPHA_MIN
    alpha = np.where(ok, alpha, 0.0)
    order = np.argsort(np.where(ok, t, np.inf), axis=1, kind="stable")
    rows = np.arange(r)[:, None]
    a_sorted = alpha[rows, order]
    trans = np.cumprod(1.0 - a_sorted, axis=1)
    prev = np.concatenate([np.ones((r, 1)), trans[:, :-1]], axis=1)
    weights = a_sorted * prev
    if values is None:
        basis = eval_sh(-dirs, _degree(coeffs))
        evals = np.einsum("rk,sck->rsc", basis, coeffs)[rows, order]
        active = evals > 0.0
        evals = np.where(active, evals, 0.0)
    else:
        evals = np.broadcast_to(values[order], (r, len(ids), 3))
        active = np.ones_like(evals, dtype=bool)
    pixels = np.sum(weights[..., None] * evals, axis=1)
    keep = weights > 0.0
    rr, cc = np.nonzero(keep)
    return pixels, (rr, ids[order[rr, cc]], weights[rr, cc], active[rr, cc])


def _degree(coeffs):
    return int(round(np.sqrt(coeffs.shape[-1]))) - 1


def render_rays(scene: Scene, radiosity, origins, dirs, values=None, threads: int = 1):
    """Composite every ray; returns (pixels (R, 3), CompositeMap or None)."""
    ar = scene.arrays
    ids = np.nonzero(ar.kinds == 0)[0]
    geom = (ar.centers[ids], ar.tangent_u[ids], ar.tangent_v[ids], ar.normals[ids], ar.scales[ids], ar.g[ids], ids)
    coeffs = None if values is not None else np.asarray(radiosity)[ids]
    vals = None if values is None else np.asarray(values, dtype=float)[ids]
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    starts = range(0, len(dirs), CHUNK)
    jobs = [(origins[s : s + CHUNK], dirs[s : s + CHUNK]) for s in starts]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: _composite_chunk(geom, coeffs, job[0], job[1], vals), jobs))
    else:
        results = [_composite_chunk(geom, coeffs, o, d, vals) for o, d in jobs]
    pixels = np.concatenate([res[0] for res in results]) if results else np.zeros((0, 3))
    if values is not None:
        return pixels, None
    offsets = np.cumsum([0] + [len(o) for o, _ in jobs])
    ray = np.concatenate([res[1][0] + off for res, off in zip(results, offsets)])
    comp = CompositeMap(
        ray=ray,
        surfel=np.concatenate([res[1][1] for res in results]),
        weight=np.concatenate([res[1][2] for res in results]),
        active=np.concatenate([res[1][3] for res in results]).reshape(-1, 3),
        basis=eval_sh(-dirs, scene.sh_degree),
    )
    return pixels, comp


def trace_pixel(scene: Scene, state, origin, direction) -> np.ndarray:
    """Radiance reaching ``origin`` from ``direction`` (a unit vector)."""
    pixels, _ = render_rays(scene, _radiosity(state), [origin], [direction])
    return pixels[0]


def _to_float32_grid(x):
    # keeps buffers exactly representable in PFM
    return x.astype(np.float32).astype(np.float64)


def render_image(scene: Scene, state, camera: Camera, pass_name: str = "full", threads: int = 1, direct_state=None) -> ImageBuffer:
    """Render one pass. ``direct`` and ``indirect`` perform one light-only solve
    unless ``direct_state`` is supplied."""
    if pass_name not in PASSES:
        raise ValueError(f"unknown pass {pass_name!r}; choose from {', '.join(PASSES)}")
    origins, dirs = camera.rays()
    w, h = camera.width, camera.height
    if pass_name in ("albedo", "shininess"):
        ar = scene.arrays
        if pass_name == "albedo":
            values = np.array([s.material.kd for s in scene.surfels])
        else:
            limit = max_shininess(scene.sh_degree)
            values = np.array([[min(s.material.shininess, limit) / limit] * 3 for s in scene.surfels])
        values = np.where(ar.kinds[:, None] == 0, values, 0.0)
        pixels, _ = render_rays(scene, None, origins, dirs, values=values, threads=threads)
        return ImageBuffer(w, h, _to_float32_grid(pixels), None, pass_name)
    if pass_name == "full":
        pixels, comp = render_rays(scene, _radiosity(state), origins, dirs, threads=threads)
        return ImageBuffer(w, h, _to_float32_grid(pixels), comp, "full")
    if direct_state is None:
        direct_state = shoot_emitters(scene)
    direct, comp_d = render_rays(scene, _radiosity(direct_state), origins, dirs, threads=threads)
    direct = _to_float32_grid(direct)
    if pass_name == "direct":
        return ImageBuffer(w, h, direct, comp_d, "direct")
    full, _ = render_rays(scene, _radiosity(state), origins, dirs, threads=threads)
    return ImageBuffer(w, h, _to_float32_grid(full) - direct, None, "indirect")


def render_passes(scene: Scene, state, camera: Camera, threads: int = 1) -> dict:
    """All passes with a single direct solve."""
    direct_state = shoot_emitters(scene)
    return {
        name: render_image(scene, state, camera, name, threads, direct_state=direct_state)
        for name in PASSES
    }


# ---------------------------------------------------------------------------
# losses


def image_loss_backward(rendered: ImageBuffer, target: ImageBuffer, loss: str = "L1", n_kernels: int | None = None):
    """Loss value and dL/dB through the frozen compositing of ``rendered``.

    L1 = sum |r - t| / P and L2 = sum (r - t)^2 / P with P the pixel count.
    """
    if (rendered.width, rendered.height) != (target.width, target.height):
        raise ValueError("rendered and target resolutions differ")
    if rendered.composite is None:
        raise ValueError("rendered buffer carries no compositing record")
    diff = (rendered.pixels - target.pixels).reshape(-1, 3)
    count = rendered.width * rendered.height
    if loss == "L1":
        value = float(np.sum(np.abs(diff)) / count)
        d_pix = np.sign(diff) / count
    elif loss == "L2":
        value = float(np.sum(diff * diff) / count)
        d_pix = 2.0 * diff / count
    else:
        raise ValueError(f"unknown loss {loss!r}")
    comp = rendered.composite
    k = comp.basis.shape[1]
    n = n_kernels if n_kernels is not None else (int(comp.surfel.max()) + 1 if len(comp.surfel) else 0)
    d_b = np.zeros((n, 3, k))
    coef = comp.weight[:, None] * np.where(comp.active, d_pix[comp.ray], 0.0)  # (E, 3)
    np.add.at(d_b, comp.surfel, coef[:, :, None] * comp.basis[comp.ray][:, None, :])
    return value, d_b


# ---------------------------------------------------------------------------
# image files


def write_image(buffer: ImageBuffer, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "pfm":
        data = buffer.pixels[::-1].astype("<f4").tobytes()
        header = f"PF\n{buffer.width} {buffer.height}\n-1.0\n".encode("ascii")
        path.write_bytes(header + data)
    elif fmt == "ppm":
        path.write_bytes(ppm_bytes(buffer))
    else:
        raise ValueError(f"unknown image format {fmt!r}")


def to_srgb8(linear) -> np.ndarray:
    x = np.clip(np.asarray(linear, dtype=float), 0.0, 1.0) ** (1.0 / 2.2)
    return np.floor(255.0 * x + 0.5).astype(np.uint8)


def ppm_bytes(buffer: ImageBuffer) -> bytes:
    header = f"P6\n{buffer.width} {buffer.height}\n255\n".encode("ascii")
    return header + to_srgb8(buffer.pixels).tobytes()


def _read_token(data: bytes, pos: int):
    while data[pos : pos + 1].isspace():
        pos += 1
    end = pos
    while not data[end : end + 1].isspace():
        end += 1
    return data[pos:end].decode("ascii"), end + 1


def read_image(path) -> ImageBuffer:
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    w, pos = _read_token(data, pos)
    h, pos = _read_token(data, pos)
    scale, pos = _read_token(data, pos)
    width, height = int(w), int(h)
    if magic == "PF":
        endian = "<" if float(scale) < 0 else ">"
        arr = np.frombuffer(data[pos : pos + 12 * width * height], dtype=f"{endian}f4")
        pixels = arr.reshape(height, width, 3)[::-1].astype(np.float64)
    elif magic == "P6":
        arr = np.frombuffer(data[pos : pos + 3 * width * height], dtype=np.uint8)
        pixels = (arr.reshape(height, width, 3) / 255.0) ** 2.2
    else:
        raise ValueError(f"unsupported image type {magic!r}")
    return ImageBuffer(width, height, pixels)


__all__ = [
    "Camera",
    "CompositeMap",
    "ImageBuffer",
    "PASSES",
    "image_loss_backward",
    "read_image",
    "render_image",
    "render_passes",
    "render_rays",
    "trace_pixel",
    "write_image",
]
