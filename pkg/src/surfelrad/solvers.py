"""Radiosity solvers: dense oracle, progressive refinement, Monte-Carlo and hybrid.

All solvers accept either a :class:`Scene` or a prebuilt :class:`TransportSystem`
and return a :class:`SolveState`. Besides the radiosity ``B`` every state keeps
the unweighted gather ``G`` with ``B - E = (alpha f) x G``; the BRDF gradient
uses it to avoid dividing by f.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .scene import Scene
from .sh import LUMINANCE, degree_of, eval_sh
from .transport import ShootState, TransportSystem, build_system, shoot

MAX_DENSE_UNKNOWNS = 4096
WARMUP_STEPS = 8
SCORE_FLOOR = 1e-6
GROUP_FLOOR = 1e-3
DEFAULT_STEPS = 64

_lock = threading.Lock()
_solve_count = 0


def solve_count() -> int:
    """Number of public solver invocations so far (for view-independence checks)."""
    return _solve_count


def _count_solve(enabled: bool = True):
    """Forward transport solves only; adjoint (dual) solves pass enabled=False."""
    global _solve_count
    if not enabled:
        return
    with _lock:
        _solve_count += 1


class NonConvergentSystemError(RuntimeError):
    pass


class SystemTooLargeError(ValueError):
    pass


@dataclass
class SolveState:
    radiosity: np.ndarray  # (N, 3, K)
    gather: np.ndarray  # (N, 3, K), unweighted
    unshot: np.ndarray
    sum_b: np.ndarray
    sum_b2: np.ndarray
    visits: np.ndarray  # (N,)
    variance: np.ndarray  # (N,)
    solver: str = ""
    steps: int = 0
    seed: int | None = None
    info: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, n: int, k: int, solver: str = "") -> "SolveState":
        z = np.zeros((n, 3, k))
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), np.zeros(n, dtype=int), np.zeros(n), solver)


def as_system(scene_or_system) -> TransportSystem:
    if isinstance(scene_or_system, TransportSystem):
        return scene_or_system
    if isinstance(scene_or_system, Scene):
        return build_system(scene_or_system)
    raise TypeError("expected a Scene or TransportSystem")


def _magnitude(x: np.ndarray, mode: str = "luminance") -> np.ndarray:
    """Scalar size of (..., 3, K) colour coefficients."""
    norms = np.linalg.norm(x, axis=-1)
    if mode == "luminance":
        return norms @ LUMINANCE
    return np.linalg.norm(norms, axis=-1)


def _clamp_radiance(rad: np.ndarray, mode: str) -> np.ndarray:
    """RGB (..., 3) radiance -> non-negative scalar used in the sampling weight."""
    if mode == "luminance":
        return np.abs(rad) @ LUMINANCE
    return np.linalg.norm(rad, axis=-1)


# ---------------------------------------------------------------------------
# dense oracle


def system_matrices(system: TransportSystem) -> np.ndarray:
    """Per-channel A as an array (3, N*K, N*K)."""
    n, k = system.n, system.n_coeffs
    raw = np.zeros((n, n, k, k))
    if len(system.receivers):
        block = system.decay[:, None, None] * system.y_rcv[:, :, None] * system.y_src[:, None, :]
        raw[system.receivers, system.sources] = block
    out = np.empty((3, n * k, n * k))
    for c in range(3):
        a = system.weight[:, c, None, :, None] * raw  # (i, j, k, l)
        out[c] = a.transpose(0, 2, 1, 3).reshape(n * k, n * k)
    return out


def _spectral_radius(a: np.ndarray) -> float:
    if a.shape[0] <= 512:
        return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0
    rng = np.random.default_rng(0)
    x = rng.standard_normal(a.shape[0])
    rho = 0.0
    for _ in range(200):
        y = a @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        rho, x = norm / np.linalg.norm(x), y / norm
    return float(rho)


def solve_dense(scene, max_unknowns: int = MAX_DENSE_UNKNOWNS, tol: float = 1e-10, count: bool = True) -> SolveState:
    """Direct solve of (I - A) b = e per channel."""
    _count_solve(count)
    system = as_system(scene)
    n, k = system.n, system.n_coeffs
    if n * k > max_unknowns:
        raise SystemTooLargeError(f"{n * k} unknowns per channel exceeds the dense limit {max_unknowns}")
    mats = system_matrices(system)
    b = np.empty((n, 3, k))
    for c in range(3):
        a = mats[c]
        if _spectral_radius(a) >= 1.0 - 1e-12:
            raise NonConvergentSystemError("transport operator has spectral radius >= 1")
        e = system.emission[:, c, :].reshape(-1)
        x = np.linalg.solve(np.eye(n * k) - a, e)
        resid = np.max(np.abs(x - e - a @ x), initial=0.0)
        if resid > tol * max(1.0, np.max(np.abs(x), initial=0.0)):
            raise NonConvergentSystemError(f"dense residual {resid:.3e} above tolerance")
        b[:, c, :] = x.reshape(n, k)
    state = SolveState.empty(n, k, "dense")
    state.gather = system.gather_raw(b)
    state.radiosity = system.emission + system.weight * state.gather
    state.info["residual"] = float(np.max(np.abs(state.radiosity - b), initial=0.0))
    return state


# ---------------------------------------------------------------------------
# progressive refinement


def solve_progressive(
    scene,
    max_sweeps: float | None = None,
    threshold: float = 1e-8,
    max_shots: int | None = None,
    mode: str = "luminance",
    count: bool = True,
) -> SolveState:
    """Shoot the kernel with the largest unshot radiance until termination.

    ``max_sweeps`` counts shots in units of N; ``threshold`` stops once every
    kernel's unshot magnitude is at or below it.
    """
    _count_solve(count)
    system = as_system(scene)
    shoot_state = ShootState.initial(system)
    limit = max_shots if max_shots is not None else 100_000 * max(system.n, 1)
    if max_sweeps is not None:
        limit = min(limit, int(round(max_sweeps * system.n)))
    shots = 0
    while shots < limit:
        mags = _magnitude(shoot_state.unshot, mode)
        i = int(np.argmax(mags))
        if mags[i] <= threshold:
            break
        shoot(system, i, shoot_state)
        shots += 1
    return _pr_state(system, shoot_state, shots)


def _pr_state(system, shoot_state, shots) -> SolveState:
    state = SolveState.empty(system.n, system.n_coeffs, "progressive")
    state.radiosity = shoot_state.radiosity
    state.gather = shoot_state.gather
    state.unshot = shoot_state.unshot
    state.steps = shots
    return state


def shoot_emitters(scene) -> SolveState:
    """One shot from every kernel with nonzero emission (direct lighting)."""
    _count_solve()
    system = as_system(scene)
    return _shoot_emitters(system)


def _shoot_emitters(system) -> SolveState:
    shoot_state = ShootState.initial(system)
    emitters = np.nonzero(np.any(system.emission != 0.0, axis=(1, 2)))[0]
    for j in emitters:
        shoot(system, int(j), shoot_state)
    return _pr_state(system, shoot_state, len(emitters))


# ---------------------------------------------------------------------------
# sampling


def reservoir_sample(weights, rng=None, uniforms=None):
    """Single-pass weighted reservoir sampling.

    Returns ``(index, probability)`` or None when no weight is positive.
    ``uniforms[k]`` (if given) is the random number used for item k.
    """
    if uniforms is None and rng is None:
        rng = np.random.default_rng()
    total = 0.0
    chosen = None
    chosen_w = 0.0
    for k, w in enumerate(weights):
        w = float(w)
        if w < 0.0 or not np.isfinite(w):
            raise ValueError("reservoir weights must be finite and non-negative")
        if w == 0.0:
            continue
        total += w
        u = uniforms[k] if uniforms is not None else rng.random()
        if u < w / total:
            chosen, chosen_w = k, w
    if chosen is None:
        return None
    return chosen, chosen_w / total


def _reservoir_rows(weights: np.ndarray, u: np.ndarray):
    """Row-wise reservoir sampling; same decisions as :func:`reservoir_sample`.

    Returns (column, probability) with column -1 where a row has no weight.
    """
    cums = np.cumsum(weights, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(weights > 0.0, weights / np.where(cums > 0.0, cums, 1.0), 0.0)
    accept = (u < ratio) & (weights > 0.0)
    width = weights.shape[1]
    last = width - 1 - np.argmax(accept[:, ::-1], axis=1)
    found = accept.any(axis=1)
    col = np.where(found, last, -1)
    total = cums[:, -1] if width else np.zeros(len(weights))
    rows = np.arange(len(weights))
    prob = np.where(found, weights[rows, np.maximum(col, 0)] / np.where(total > 0, total, 1.0), 0.0)
    return col, prob


@dataclass
class Grouping:
    labels: np.ndarray  # (N,)
    centers: np.ndarray  # (G, 3)
    normals: np.ndarray  # (G, 3), zero when undefined
    luminance: np.ndarray  # (G,)
    directional: np.ndarray  # (G,) bool; direction stored in centers

    @property
    def n_groups(self) -> int:
        return len(self.centers)

    def members(self, g: int) -> np.ndarray:
        return np.nonzero(self.labels == g)[0]


def _kmeans(features: np.ndarray, n_groups: int, iterations: int) -> np.ndarray:
    n = len(features)
    seeds = [0]
    dist = np.sum((features - features[0]) ** 2, axis=1)
    while len(seeds) < n_groups:
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.sum((features - features[nxt]) ** 2, axis=1))
    cent = features[seeds].copy()
    labels = np.zeros(n, dtype=int)
    for _ in range(iterations):
        d2 = np.sum((features[:, None, :] - cent[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        for g in range(n_groups):
            mask = labels == g
            if mask.any():
                cent[g] = features[mask].mean(axis=0)
            else:
                # re-seed at the point farthest from its centroid
                far = int(np.argmax(d2[np.arange(n), labels]))
                cent[g] = features[far]
                labels[far] = g
    return labels


def group_kernels(scene, state: SolveState | None, n_groups: int, iterations: int = 10) -> Grouping:
    """K-means over (centre, normal * radius/4); directional lights stay alone."""
    system = as_system(scene)
    n = system.n
    if not 1 <= n_groups <= n:
        raise ValueError("n_groups must lie in [1, N]")
    directional = system.kinds == 2
    pos_idx = np.nonzero(~directional)[0]
    dir_idx = np.nonzero(directional)[0]
    labels = np.empty(n, dtype=int)
    n_pos = max(min(n_groups - len(dir_idx), len(pos_idx)), 1 if len(pos_idx) else 0)
    if len(pos_idx):
        pts = system.centers[pos_idx]
        radius = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1), initial=0.0)) or 1.0
        features = np.concatenate([pts, system.normals[pos_idx] * (radius / 4.0)], axis=1)
        labels[pos_idx] = _kmeans(features, n_pos, iterations)
    labels[dir_idx] = n_pos + np.arange(len(dir_idx))
    radiosity = state.radiosity if state is not None else system.emission
    return _summarize(system, labels, radiosity)


def _summarize(system, labels, radiosity) -> Grouping:
    n_groups = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_groups).astype(float)
    centers = np.zeros((n_groups, 3))
    normals = np.zeros((n_groups, 3))
    np.add.at(centers, labels, system.centers)
    np.add.at(normals, labels, system.normals)
    centers /= counts[:, None]
    lengths = np.linalg.norm(normals, axis=1)
    normals = np.where(lengths[:, None] > 1e-12, normals / np.where(lengths > 1e-12, lengths, 1.0)[:, None], 0.0)
    lum = np.zeros(n_groups)
    np.add.at(lum, labels, radiosity[:, :, 0] @ LUMINANCE)
    directional = np.zeros(n_groups, dtype=bool)
    directional[labels[system.kinds == 2]] = True
    return Grouping(labels, centers, normals, lum, directional)


def _group_proxy(system: TransportSystem, grouping: Grouping, group_rad: np.ndarray, receivers: np.ndarray, mode):
    """Cheap per-(receiver, group) weights, shape (R, G)."""
    p_i = system.centers[receivers][:, None, :]
    n_i = system.normals[receivers][:, None, :]
    d = p_i - grouping.centers[None, :, :]
    r2 = np.sum(d * d, axis=2)
    w = np.where((r2 > 0)[..., None], d / np.sqrt(np.where(r2 > 0, r2, 1.0))[..., None], [0.0, 0.0, 1.0])
    w = np.where(grouping.directional[None, :, None], grouping.centers[None] / np.linalg.norm(grouping.centers, axis=1, keepdims=True).clip(1e-300)[None], w)
    cos_i = np.abs(np.sum(n_i * w, axis=2))
    has_n = np.linalg.norm(grouping.normals, axis=1) > 0
    cos_g = np.where(has_n[None, :], np.abs(np.sum(grouping.normals[None] * w, axis=2)), 1.0)
    falloff = np.where(grouping.directional[None, :], 1.0, 1.0 / np.where(r2 > 1e-12, r2, 1e-12))
    y = eval_sh(w, degree_of(system.n_coeffs))  # (R, G, K)
    rad = np.einsum("rgk,gck->rgc", y, group_rad)
    return _clamp_radiance(rad, mode) * cos_i * cos_g * falloff


# ---------------------------------------------------------------------------
# Monte-Carlo solver


def next_event(scene, mean: np.ndarray, i: int, rng=None, grouping: Grouping | None = None, mode="luminance"):
    """Sample a source for receiver i; returns (j, p_j) or None."""
    system = as_system(scene)
    rng = rng if rng is not None else np.random.default_rng()
    width = system.candidates.shape[1]
    u = rng.random((1, width + 1))
    res = _sample_sources(system, mean, np.array([i]), u, grouping, mode)
    col, prob = res
    if col[0] < 0:
        return None
    return int(system.sources[col[0]]), float(prob[0])


def _pair_weights(system, mean, pairs, mode):
    valid = pairs >= 0
    safe = np.where(valid, pairs, 0)
    rad = np.einsum("rwk,rwck->rwc", system.y_src[safe], mean[system.sources[safe]])
    w = np.where(valid, _clamp_radiance(rad, mode) * system.importance[safe], 0.0)
    return w


def _sample_sources(system, mean, rows, u, grouping, mode):
    """Pick one pair per receiver in ``rows``; returns (pair index or -1, prob)."""
    pairs = system.candidates[rows]
    weights = _pair_weights(system, mean, pairs, mode)
    if grouping is None:
        col, prob = _reservoir_rows(weights, u[:, : pairs.shape[1]])
        picked = np.where(col >= 0, pairs[np.arange(len(rows)), np.maximum(col, 0)], -1)
        return picked, prob
    # two-level: group by proxy (with additive floor), then member by exact weight
    n_groups = grouping.n_groups
    group_rad = np.zeros((n_groups, 3, system.n_coeffs))
    np.add.at(group_rad, grouping.labels, mean)
    proxy = _group_proxy(system, grouping, group_rad, rows, mode)
    safe = np.where(pairs >= 0, pairs, 0)
    src_group = np.where(pairs >= 0, grouping.labels[system.sources[safe]], -1)
    reachable = np.zeros((len(rows), n_groups), dtype=bool)
    for g in range(n_groups):
        reachable[:, g] = np.any(src_group == g, axis=1)
    proxy = np.where(reachable, proxy, 0.0)
    top = proxy.max(axis=1, keepdims=True)
    proxy = np.where(reachable, proxy + np.where(top > 0, GROUP_FLOOR * top, 1.0), 0.0)
    total = proxy.sum(axis=1)
    cdf = np.cumsum(proxy, axis=1) / np.where(total > 0, total, 1.0)[:, None]
    gsel = np.minimum((u[:, -1:] >= cdf).sum(axis=1), n_groups - 1)
    p_group = proxy[np.arange(len(rows)), gsel] / np.where(total > 0, total, 1.0)
    member_w = np.where(src_group == gsel[:, None], weights, 0.0)
    col, prob = _reservoir_rows(member_w, u[:, : pairs.shape[1]])
    ok = (col >= 0) & (total > 0)
    picked = np.where(ok, pairs[np.arange(len(rows)), np.maximum(col, 0)], -1)
    return picked, np.where(ok, prob * p_group, 0.0)


def _variance_score(state_sums, mode):
    s, s2, d = state_sums
    dd = np.maximum(d, 1)[:, None, None]
    var = np.maximum(s2 / dd - (s / dd) ** 2, 0.0)
    var = np.where((d > 0)[:, None, None], var, 0.0)
    per_channel = var.sum(axis=2)
    if mode == "luminance":
        return per_channel @ LUMINANCE
    return per_channel.sum(axis=1)


def _estimate_rows(system, mean, rows, u, grouping, mode):
    picked, prob = _sample_sources(system, mean, rows, u, grouping, mode)
    est = system.emission[rows].copy()
    raw = np.zeros_like(est)
    ok = picked >= 0
    if ok.any():
        p = picked[ok]
        rad = system.pair_radiance(mean, p) * (system.decay[p] / prob[ok])[:, None]
        raw[ok] = rad[:, :, None] * system.y_rcv[p][:, None, :]
        est[ok] += system.weight[rows[ok]] * raw[ok]
    return est, raw


def _run_mc(system, steps, seed, threads=1, n_groups=None, mode="luminance", regroup_every=None):
    if steps < 1:
        raise ValueError("T must be >= 1")
    n, k = system.n, system.n_coeffs
    s = np.zeros((n, 3, k))
    s2 = np.zeros((n, 3, k))
    sg = np.zeros((n, 3, k))
    d = np.zeros(n, dtype=int)
    width = system.candidates.shape[1]
    grouping = None
    # kernels that receive nothing have the deterministic estimate E, so their
    # mean is known before the first visit; everything else starts at zero
    fixed = (system.candidates[:, 0] < 0)[:, None, None]
    prior = np.where(fixed, system.emission, 0.0)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(steps):
            rng = np.random.default_rng([seed, t])
            mean = np.where((d > 0)[:, None, None], s / np.maximum(d, 1)[:, None, None], prior)
            if t < WARMUP_STEPS:
                rows = np.arange(n)
                rng.random(n)  # keep the stream layout fixed across steps
            else:
                score = _variance_score((s, s2, d), mode) / np.maximum(d, 1)
                score = score + SCORE_FLOOR * (score.mean() if score.mean() > 0 else 1.0)
                cdf = np.cumsum(score) / score.sum()
                rows = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), n - 1)
            u = rng.random((n, width + 1))
            if n_groups is not None and (grouping is None or (regroup_every and t % regroup_every == 0)):
                grouping = group_kernels(system, None, n_groups)
            chunks = _chunks(len(rows), threads)
            if pool is None:
                results = [_estimate_rows(system, mean, rows[a:b], u[a:b], grouping, mode) for a, b in chunks]
            else:
                futures = [pool.submit(_estimate_rows, system, mean, rows[a:b], u[a:b], grouping, mode) for a, b in chunks]
                results = [f.result() for f in futures]
            est = np.concatenate([r[0] for r in results])
            raw = np.concatenate([r[1] for r in results])
            np.add.at(s, rows, est)
            np.add.at(s2, rows, est * est)
            np.add.at(sg, rows, raw)
            np.add.at(d, rows, 1)
    finally:
        if pool is not None:
            pool.shutdown()
    state = SolveState.empty(n, k, "mc")
    visited = (d > 0)[:, None, None]
    dd = np.maximum(d, 1)[:, None, None]
    state.radiosity = np.where(visited, s / dd, 0.0)
    state.gather = np.where(visited, sg / dd, 0.0)
    state.sum_b, state.sum_b2, state.visits = s, s2, d
    state.variance = _variance_score((s, s2, d), mode)
    state.steps, state.seed = steps, seed
    return state


def _chunks(n, parts):
    parts = max(1, min(parts, n)) if n else 1
    edges = np.linspace(0, n, parts + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def solve_mc(scene, T: int = DEFAULT_STEPS, seed: int = 0, threads: int = 1, n_groups=None, mode="luminance", count=True) -> SolveState:
    """TD(0) Monte-Carlo solver; deterministic for a given (scene, T, seed)."""
    _count_solve(count)
    system = as_system(scene)
    return _run_mc(system, T, seed, threads, n_groups, mode)


def solve_hybrid(scene, T: int = DEFAULT_STEPS, seed: int = 0, threads: int = 1, n_groups=None, mode="luminance", count=True) -> SolveState:
    """Shoot every emitter once, then solve the residual system by Monte-Carlo."""
    _count_solve(count)
    system = as_system(scene)
    direct = _shoot_emitters(system)
    residual = _run_mc(system.with_emission(direct.unshot), T, seed, threads, n_groups, mode)
    state = residual
    state.radiosity = direct.radiosity + residual.radiosity - direct.unshot
    state.gather = direct.gather + residual.gather
    state.unshot = np.zeros_like(direct.unshot)
    state.solver = "hybrid"
    return state


SOLVERS = {
    "dense": lambda scene, **kw: solve_dense(scene),
    "progressive": lambda scene, **kw: solve_progressive(scene, threshold=kw.get("threshold", 1e-8)),
    "mc": lambda scene, **kw: solve_mc(scene, kw.get("T", DEFAULT_STEPS), kw.get("seed", 0), kw.get("threads", 1)),
    "hybrid": lambda scene, **kw: solve_hybrid(scene, kw.get("T", DEFAULT_STEPS), kw.get("seed", 0), kw.get("threads", 1)),
}


def solve(scene, solver: str = "dense", **kwargs) -> SolveState:
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    return SOLVERS[solver](scene, **kwargs)
