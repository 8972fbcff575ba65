"""Center-to-center light transport between kernels.

For an ordered pair (receiver i, source j) with unit direction w from p_j to
p_i the decay is

    V_ji = lam_j * A_j * T_ji * |n_i.w| * |n_j.w| / |p_i - p_j|^2

where A_j is the closed-form opacity integral and T_ji the transmittance.
Point lights drop A_j and the source cosine; directional lights also drop the
inverse-square falloff. A receiver only accepts light arriving on its front
face, and surfels only emit through their front face.

The receiver's response to source radiance B_j is

    alpha_i(p_i) * f_i x Y(-w) * (Y(w) . B_j) * V_ji

so everything downstream works with pair lists and per-receiver weights
``alpha_i * f_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .scene import (
    ALPHA_MIN,
    FOOTPRINT_CUTOFF,
    Scene,
    SceneArrays,
    alpha_integral_values,
    center_opacity,
    opacity_exponent,
)
from .sh import eval_sh

SEGMENT_EPS = 1e-4  # fraction of segment length excluded at both ends
RAY_EPS = 1e-4  # world units, for rays towards directional lights
POINT, DIRECTIONAL = 1, 2


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class Hits:
    """Occluders crossed by a segment or ray ``a + t*e``."""

    index: np.ndarray
    t: np.ndarray
    offset: np.ndarray  # hit point minus occluder centre, (H, 3)
    rho2: np.ndarray
    exponent: np.ndarray  # h with 1 - alpha = exp(-h)

    @property
    def alpha(self) -> np.ndarray:
        return -np.expm1(-self.exponent)

    @property
    def transmittance(self) -> float:
        return float(np.exp(-np.sum(self.exponent)))


def find_hits(ar: SceneArrays, a, e, exclude=(), t_lo=SEGMENT_EPS, t_hi=1.0 - SEGMENT_EPS) -> Hits:
    mask = ar.occluder_mask.copy()
    for k in exclude:
        mask[k] = False
    idx = np.nonzero(mask)[0]
    n = ar.normals[idx]
    denom = n @ e
    ok = np.abs(denom) > 1e-12
    safe = np.where(ok, denom, 1.0)
    t = np.einsum("ij,ij->i", n, ar.centers[idx] - a) / safe
    ok &= (t > t_lo) & (t < t_hi)
    offset = a + t[:, None] * e - ar.centers[idx]
    u = np.einsum("ij,ij->i", ar.tangent_u[idx], offset) / np.where(ok, ar.scales[idx, 0], 1.0)
    v = np.einsum("ij,ij->i", ar.tangent_v[idx], offset) / np.where(ok, ar.scales[idx, 1], 1.0)
    rho2 = u * u + v * v
    ok &= rho2 <= FOOTPRINT_CUTOFF
    h = np.where(ok, opacity_exponent(ar.g[idx], np.where(ok, rho2, 0.0)), 0.0)
    ok &= -np.expm1(-h) > ALPHA_MIN
    return Hits(idx[ok], t[ok], offset[ok], rho2[ok], h[ok])


def transmittance(scene: Scene, frm, to, exclude=()) -> float:
    """Product of (1 - alpha_k) over occluders strictly inside the segment."""
    frm = np.asarray(frm, dtype=float)
    to = np.asarray(to, dtype=float)
    if np.array_equal(frm, to):
        raise DegenerateGeometryError("transmittance needs distinct endpoints")
    return find_hits(scene.arrays, frm, to - frm, exclude).transmittance


@dataclass
class PairGeometry:
    """Everything the forward and backward passes need about one pair."""

    receiver: int
    source: int
    decay: float
    direction: np.ndarray
    distance: float
    cos_receiver: float
    cos_source: float  # 1 for lights
    area: float  # lam-free opacity integral of the source (1 for lights)
    hits: Hits
    ray_origin: np.ndarray
    ray_dir: np.ndarray
    directional: bool

    @property
    def importance(self) -> float:
        """Decay without transmittance, compensation and opacity integral."""
        if self.directional:
            return self.cos_receiver
        return self.cos_receiver * self.cos_source / self.distance**2


def pair_geometry(scene: Scene, j: int, i: int):
    """Decay and its ingredients for source j -> receiver i, or None if V = 0."""
    ar = scene.arrays
    if i == j:
        raise ValueError("a kernel does not illuminate itself")
    if ar.kinds[i] != 0:
        return None  # lights never receive
    kind = ar.kinds[j]
    if kind == DIRECTIONAL:
        w = ar.centers[j] / np.linalg.norm(ar.centers[j])
        r = 1.0
        origin, ray = ar.centers[i], -w
    else:
        d = ar.centers[i] - ar.centers[j]
        r = float(np.linalg.norm(d))
        if r == 0.0:
            raise DegenerateGeometryError(f"kernels {j} and {i} share a centre")
        w = d / r
        origin, ray = ar.centers[j], d
    cos_i = -float(ar.normals[i] @ w)
    if not cos_i > 0.0:
        return None
    if kind == 0:
        cos_j = float(ar.normals[j] @ w)
        if not cos_j > 0.0:
            return None
        area = alpha_integral_values(ar.g[j], ar.scales[j, 0], ar.scales[j, 1])
        if area == 0.0:
            return None
    else:
        cos_j, area = 1.0, 1.0
    if kind == DIRECTIONAL:
        hits = find_hits(ar, origin, ray, (i, j), RAY_EPS, np.inf)
    else:
        hits = find_hits(ar, origin, ray, (i, j))
    value = ar.lam[j] * area * hits.transmittance * cos_i * cos_j
    if kind != DIRECTIONAL:
        value /= r * r
    if not value > 0.0:
        return None
    return PairGeometry(i, j, value, w, r, cos_i, cos_j, area, hits, origin, ray, kind == DIRECTIONAL)


def decay(scene: Scene, j: int, i: int) -> float:
    """V_ji for source j and receiver i (0 when the pair is not connected)."""
    if scene.arrays.kinds[i] == DIRECTIONAL:
        raise ValueError("a directional light cannot receive")
    geo = pair_geometry(scene, j, i)
    return 0.0 if geo is None else geo.decay


@dataclass
class PairCache:
    """Ordered pairs (receiver, source) with positive decay."""

    pairs: list
    skipped: int = 0

    def __len__(self):
        return len(self.pairs)

    @property
    def receivers(self) -> np.ndarray:
        return np.array([p.receiver for p in self.pairs], dtype=int)

    @property
    def sources(self) -> np.ndarray:
        return np.array([p.source for p in self.pairs], dtype=int)

    @property
    def decays(self) -> np.ndarray:
        return np.array([p.decay for p in self.pairs], dtype=float)

    def occluders(self, p: int):
        """(index, alpha) of the occluders of pair p."""
        h = self.pairs[p].hits
        return list(zip(h.index.tolist(), h.alpha.tolist()))

    def lookup(self, i: int, j: int):
        for p in self.pairs:
            if p.receiver == i and p.source == j:
                return p
        return None


def build_pair_cache(scene: Scene) -> PairCache:
    pairs, skipped = [], 0
    n = len(scene)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            try:
                geo = pair_geometry(scene, j, i)
            except DegenerateGeometryError:
                skipped += 1
                continue
            if geo is not None:
                pairs.append(geo)
    return PairCache(pairs, skipped)


@dataclass
class TransportSystem:
    """Linear system x_i = e_i + sum_p w_i x y_rcv[p] (y_src[p] . x_src[p]) V[p].

    ``weight`` is zero for kernels that do not reflect. The adjoint system is
    the same structure with every pair reversed (see :meth:`reversed`).
    """

    n: int
    n_coeffs: int
    receivers: np.ndarray
    sources: np.ndarray
    decay: np.ndarray
    y_src: np.ndarray  # (P, K), Y(w)
    y_rcv: np.ndarray  # (P, K), Y(-w)
    importance: np.ndarray  # (P,)
    weight: np.ndarray  # (N, 3, K)
    emission: np.ndarray  # (N, 3, K)
    absorb: np.ndarray = field(default=None)  # (N,), alpha at the centre
    brdf: np.ndarray = field(default=None)  # (N, 3, K)
    pair_cache: PairCache = field(default=None, repr=False)
    centers: np.ndarray = field(default=None, repr=False)
    normals: np.ndarray = field(default=None, repr=False)
    kinds: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        order = np.lexsort((self.sources, self.receivers))
        if not np.array_equal(order, np.arange(len(order))):
            for name in ("receivers", "sources", "decay", "y_src", "y_rcv", "importance"):
                setattr(self, name, getattr(self, name)[order])
        counts = np.bincount(self.receivers, minlength=self.n) if len(self.receivers) else np.zeros(self.n, int)
        width = int(counts.max()) if self.n and len(self.receivers) else 0
        self.candidates = -np.ones((self.n, max(width, 1)), dtype=int)
        start = 0
        for i in range(self.n):
            c = counts[i]
            self.candidates[i, :c] = np.arange(start, start + c)
            start += c

    def with_emission(self, emission) -> "TransportSystem":
        return replace(self, emission=np.asarray(emission, dtype=float))

    def reversed(self, emission) -> "TransportSystem":
        """Dual system: every pair flipped, decay kept (V-bar_ij = V_ji)."""
        return replace(
            self,
            receivers=self.sources.copy(),
            sources=self.receivers.copy(),
            y_src=self.y_rcv,
            y_rcv=self.y_src,
            emission=np.asarray(emission, dtype=float),
            pair_cache=None,
        )

    def pair_radiance(self, x, pairs) -> np.ndarray:
        """(Y(w) . x_src) per channel for the given pair indices, shape (..., 3)."""
        return np.einsum("...k,...ck->...c", self.y_src[pairs], x[self.sources[pairs]])

    def pair_response(self, x, pairs) -> np.ndarray:
        """Unweighted response y_rcv (y_src . x_src) V, shape (P, 3, K)."""
        rad = self.pair_radiance(x, pairs) * self.decay[pairs][:, None]
        return rad[:, :, None] * self.y_rcv[pairs][:, None, :]

    def gather_raw(self, x) -> np.ndarray:
        """sum over pairs of the unweighted response, per receiver."""
        out = np.zeros((self.n, 3, self.n_coeffs))
        if len(self.receivers):
            np.add.at(out, self.receivers, self.pair_response(x, np.arange(len(self.receivers))))
        return out

    def apply(self, x) -> np.ndarray:
        """A x."""
        return self.weight * self.gather_raw(x)

    def pairs_from(self, j: int) -> np.ndarray:
        return np.nonzero(self.sources == j)[0]

    def pair_index(self, i: int, j: int):
        hit = np.nonzero((self.receivers == i) & (self.sources == j))[0]
        return int(hit[0]) if len(hit) else None


def build_system(scene: Scene, cache: PairCache | None = None, brdf=None, emission=None) -> TransportSystem:
    """Assemble the forward system; ``brdf``/``emission`` override the scene's."""
    cache = cache if cache is not None else build_pair_cache(scene)
    ar = scene.arrays
    degree = scene.sh_degree
    k = scene.n_coeffs
    if cache.pairs:
        dirs = np.array([p.direction for p in cache.pairs])
        y_src = eval_sh(dirs, degree)
        y_rcv = eval_sh(-dirs, degree)
    else:
        y_src = y_rcv = np.zeros((0, k))
    absorb = np.where(ar.kinds == 0, center_opacity(ar.g), 0.0)
    f = ar.brdf if brdf is None else np.asarray(brdf, dtype=float)
    e = ar.emission if emission is None else np.asarray(emission, dtype=float)
    return TransportSystem(
        n=len(scene),
        n_coeffs=k,
        receivers=cache.receivers,
        sources=cache.sources,
        decay=cache.decays,
        y_src=y_src,
        y_rcv=y_rcv,
        importance=np.array([p.importance for p in cache.pairs], dtype=float),
        weight=absorb[:, None, None] * f,
        emission=e,
        absorb=absorb,
        brdf=f,
        pair_cache=cache,
        centers=ar.centers,
        normals=np.where(ar.kinds[:, None] == 0, ar.normals, 0.0),
        kinds=ar.kinds,
    )


def gather_from(scene: Scene, i: int, j: int, radiance, system: TransportSystem | None = None) -> np.ndarray:
    """Contribution to receiver i of source j emitting ``radiance`` (3, K)."""
    system = system or build_system(scene)
    p = system.pair_index(i, j)
    out = np.zeros((3, system.n_coeffs))
    if p is None:
        return out
    x = np.zeros((system.n, 3, system.n_coeffs))
    x[j] = radiance
    return system.weight[i] * system.pair_response(x, np.array([p]))[0]


def gather_direct(scene: Scene, i: int, system: TransportSystem | None = None) -> np.ndarray:
    """Single-bounce radiance received by i from every light kernel."""
    system = system or build_system(scene)
    if scene.arrays.kinds[i] != 0:
        raise ValueError("gather_direct expects a surfel receiver")
    lights = set(scene.light_indices.tolist())
    out = np.zeros((3, system.n_coeffs))
    for p in np.nonzero(system.receivers == i)[0]:
        j = int(system.sources[p])
        if j in lights:
            x = system.emission
            out += system.weight[i] * system.pair_response(x, np.array([p]))[0]
    return out


@dataclass
class ShootState:
    """Progressive-refinement bookkeeping; ``gather`` is the unweighted sum."""

    radiosity: np.ndarray
    unshot: np.ndarray
    gather: np.ndarray

    @classmethod
    def initial(cls, system: TransportSystem) -> "ShootState":
        e = system.emission
        return cls(e.copy(), e.copy(), np.zeros_like(e))


def shoot(system: TransportSystem, i: int, state: ShootState) -> ShootState:
    """Distribute kernel i's unshot radiance to every receiver it reaches."""
    unshot = state.unshot[i].copy()
    state.unshot[i] = 0.0
    if not np.any(unshot):
        return state
    pairs = system.pairs_from(i)
    if len(pairs) == 0:
        return state
    x = np.zeros((system.n, 3, system.n_coeffs))
    x[i] = unshot
    raw = system.pair_response(x, pairs)
    recv = system.receivers[pairs]
    inc = system.weight[recv] * raw
    state.gather[recv] += raw
    state.radiosity[recv] += inc
    state.unshot[recv] += inc
    return state
