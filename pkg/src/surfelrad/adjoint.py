"""Backward pass: adjoint emission transport, BRDF and geometry gradients,
and a central finite-difference harness.

Notation: ``w = alpha * f`` is the per-receiver weight, ``G`` the unweighted
gather kept by every solver (``B - E = w x G``) and ``dE`` the adjoint
solution. For a loss L(B):

    dE   = (I - A)^-T dB
    dL/dw_i = dE_i x G_i
    dL/dV_p = sum_c (Y(-w) . (w_i x dE_i)_c) (Y(w) . B_j,c)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .scene import (
    OPACITY_POWER,
    Scene,
    Surfel,
    alpha_integral_grad,
    center_opacity_deriv,
)
from .sh import check_reciprocity, eval_sh, sh_jacobian
from .solvers import SolveState, solve_dense, solve_hybrid, solve_mc, solve_progressive
from .transport import DIRECTIONAL, PairCache, TransportSystem, build_pair_cache, build_system

CLOSED_FORM_MIN = 1e-12


@dataclass
class GradBuffer:
    d_emission: np.ndarray  # (N, 3, K)
    d_brdf: np.ndarray  # (N, 3, K)
    d_center: np.ndarray  # (N, 3)
    d_scales: np.ndarray  # (N, 2)
    d_frame: np.ndarray  # (N, 3), axis-angle
    d_g: np.ndarray  # (N,)
    d_lambda: np.ndarray  # (N,)
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int, k: int) -> "GradBuffer":
        return cls(
            np.zeros((n, 3, k)), np.zeros((n, 3, k)), np.zeros((n, 3)), np.zeros((n, 2)),
            np.zeros((n, 3)), np.zeros(n), np.zeros(n),
        )

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.d_emission, self.d_brdf, self.d_center, self.d_scales, self.d_frame, self.d_g, self.d_lambda)
        )


def _system(scene, system):
    if system is not None:
        return system
    return build_system(scene)


def adjoint_emission(scene, d_radiosity, solver: str = "dense", T: int = 64, seed: int = 0, threads: int = 1, system=None):
    """dL/dE for a loss gradient dL/dB, by solving the reversed system.

    With y = w x dE the dual unknowns satisfy y = w x dB + w x R^T y, which is
    the forward structure with every pair flipped; afterwards
    dE = dB + R^T y needs no division by f.
    """
    system = _system(scene, system)
    check_reciprocity(system.n_coeffs)
    d_b = np.asarray(d_radiosity, dtype=float)
    if not np.all(np.isfinite(d_b)):
        raise ValueError("loss gradient must be finite")
    dual = system.reversed(system.weight * d_b)
    if solver == "dense":
        state = solve_dense(dual, count=False)
    elif solver == "progressive":
        state = solve_progressive(dual, mode="norm", count=False)
    elif solver == "mc":
        state = solve_mc(dual, T, seed, threads, mode="norm", count=False)
    elif solver == "hybrid":
        state = solve_hybrid(dual, T, seed, threads, mode="norm", count=False)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return d_b + state.gather


def grad_weight(state: SolveState, d_emission) -> np.ndarray:
    """dL/dw with w = alpha * f (gather form)."""
    return np.asarray(d_emission) * state.gather


def grad_brdf(scene, state: SolveState, d_emission, system=None) -> np.ndarray:
    """dL/df: closed form dE (B - E)/f where |f| > 1e-12, gather form elsewhere."""
    system = _system(scene, system)
    d_e = np.asarray(d_emission, dtype=float)
    gather_form = d_e * system.absorb[:, None, None] * state.gather
    f = system.brdf
    big = np.abs(f) > CLOSED_FORM_MIN
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = d_e * (state.radiosity - system.emission) / np.where(big, f, 1.0)
    return np.where(big, closed, gather_form)


def grad_brdf_gather(scene, state: SolveState, d_emission, system=None) -> np.ndarray:
    system = _system(scene, system)
    return np.asarray(d_emission) * system.absorb[:, None, None] * state.gather


def _cross_sum(pairs):
    """Axis-angle gradient sum_x x cross dL/dx."""
    out = np.zeros(3)
    for x, gx in pairs:
        out += np.cross(x, gx)
    return out


def grad_geometry(scene: Scene, state: SolveState, d_emission, cache: PairCache | None = None, system=None) -> GradBuffer:
    """Gradients of L w.r.t. centres, scales, frames, g and lambda."""
    cache = cache if cache is not None else (system.pair_cache if system is not None and system.pair_cache else build_pair_cache(scene))
    system = system if system is not None else build_system(scene, cache)
    ar = scene.arrays
    n, k = system.n, system.n_coeffs
    degree = scene.sh_degree
    d_e = np.asarray(d_emission, dtype=float)
    out = GradBuffer.zeros(n, k)
    out.d_emission = d_e.copy()
    out.d_brdf = grad_brdf(scene, state, d_e, system)
    out.skipped = cache.skipped
    b = state.radiosity
    q_all = system.weight * d_e  # (N, 3, K)

    # receiver-side absorption alpha_i(p_i)
    d_alpha = np.sum(d_e * system.brdf * state.gather, axis=(1, 2))
    out.d_g += np.where(ar.kinds == 0, d_alpha * center_opacity_deriv(ar.g), 0.0)

    if not cache.pairs:
        return out
    dirs = np.array([p.direction for p in cache.pairs])
    y_s, y_r = eval_sh(dirs, degree), eval_sh(-dirs, degree)
    j_s, j_r = sh_jacobian(dirs, degree), sh_jacobian(-dirs, degree)
    d_frame_vec = {name: np.zeros((n, 3)) for name in ("tu", "tv", "n")}

    for p, geo in enumerate(cache.pairs):
        i, j = geo.receiver, geo.source
        q = q_all[i]
        src = b[j]
        rq = q @ y_r[p]  # (3,)
        sb = src @ y_s[p]  # (3,)
        s_val = float(rq @ sb)
        if s_val == 0.0 and not np.any(rq) and not np.any(sb):
            continue
        v = geo.decay
        phi = v * s_val
        w = geo.direction
        out.d_lambda[j] += phi / ar.lam[j]

        # opacity integral of a surfel source
        if ar.kinds[j] == 0:
            dg, dsu, dsv = alpha_integral_grad(ar.g[j], ar.scales[j, 0], ar.scales[j, 1])
            out.d_g[j] += phi * dg / geo.area
            out.d_scales[j, 0] += phi * dsu / geo.area
            out.d_scales[j, 1] += phi * dsv / geo.area

        # transmittance through occluders
        hits = geo.hits
        if len(hits.index):
            a, e = geo.ray_origin, geo.ray_dir
            for idx, t_hit, off, h in zip(hits.index, hits.t, hits.offset, hits.exponent):
                out.d_g[idx] -= phi * OPACITY_POWER * h / ar.g[idx]
                d_rho = phi * 0.5 * OPACITY_POWER * h  # dPhi/drho2
                tu, tv, nk = ar.tangent_u[idx], ar.tangent_v[idx], ar.normals[idx]
                su, sv = ar.scales[idx]
                pu, pv = tu @ off, tv @ off
                g_w = 2.0 * (pu / su**2 * tu + pv / sv**2 * tv)
                delta = nk @ e
                m_t_g = g_w - nk * (e @ g_w) / delta  # M^T g_w, M = I - e n^T / delta
                if geo.directional:
                    out.d_center[i] += d_rho * m_t_g
                else:
                    out.d_center[j] += d_rho * (1.0 - t_hit) * m_t_g
                    out.d_center[i] += d_rho * t_hit * m_t_g
                out.d_center[idx] -= d_rho * m_t_g
                d_frame_vec["tu"][idx] += d_rho * 2.0 * pu / su**2 * off
                d_frame_vec["tv"][idx] += d_rho * 2.0 * pv / sv**2 * off
                d_frame_vec["n"][idx] += d_rho * (-off * (e @ g_w) / delta)
                out.d_scales[idx, 0] += d_rho * (-2.0 * pu**2 / su**3)
                out.d_scales[idx, 1] += d_rho * (-2.0 * pv**2 / sv**3)

        n_i = ar.normals[i]
        c_i = geo.cos_receiver
        if geo.directional:
            d_frame_vec["n"][i] += phi / c_i * (-w)
            continue
        r = geo.distance
        c_j = geo.cos_source
        proj = np.eye(3) - np.outer(w, w)
        surfel_src = ar.kinds[j] == 0
        if surfel_src:
            n_j = ar.normals[j]
            dq = (c_j * (-proj @ n_i) + c_i * (proj @ n_j)) / r**3 - 2.0 * c_i * c_j * w / r**3
            qv = c_i * c_j / r**2
            d_frame_vec["n"][j] += phi / qv * (w * c_i / r**2)
        else:
            dq = (-proj @ n_i) / r**3 - 2.0 * c_i * w / r**3
            qv = c_i / r**2
        d_frame_vec["n"][i] += phi / qv * (-w * c_j / r**2)
        # directional effect of w on the SH responses
        ds_dw = np.zeros(3)
        for c in range(3):
            ds_dw += -(j_r[p].T @ q[c]) * sb[c] + rq[c] * (j_s[p].T @ src[c])
        d_d = phi / qv * dq + v * (proj @ ds_dw) / r
        out.d_center[i] += d_d
        out.d_center[j] -= d_d

    for idx in range(n):
        if ar.kinds[idx] != 0:
            continue
        out.d_frame[idx] = _cross_sum(
            [
                (ar.tangent_u[idx], d_frame_vec["tu"][idx]),
                (ar.tangent_v[idx], d_frame_vec["tv"][idx]),
                (ar.normals[idx], d_frame_vec["n"][idx]),
            ]
        )
    return out


# ---------------------------------------------------------------------------
# losses on radiosity


@dataclass
class KernelLoss:
    """Loss on kernel radiosity: ``linear`` (sum W x B) or ``l2`` (0.5 |B - target|^2)."""

    kind: str
    weights: np.ndarray | None = None
    target: np.ndarray | None = None

    @classmethod
    def random(cls, shape, seed: int = 0, kind: str = "linear") -> "KernelLoss":
        rng = np.random.default_rng(seed)
        if kind == "linear":
            return cls("linear", weights=rng.standard_normal(shape))
        return cls("l2", target=rng.uniform(0.0, 1.0, size=shape))

    def value(self, b) -> float:
        if self.kind == "linear":
            return float(np.sum(self.weights * b))
        return float(0.5 * np.sum((b - self.target) ** 2))

    def grad(self, b) -> np.ndarray:
        if self.kind == "linear":
            return np.array(self.weights, dtype=float)
        return b - self.target


# ---------------------------------------------------------------------------
# parameters


FAMILIES = ("emission", "brdf", "center", "scales", "frame", "g", "lambda")
GEOMETRY = ("center", "scales", "frame", "g", "lambda")


@dataclass
class Params:
    """Scene plus optional per-kernel overrides of the BRDF and emission."""

    scene: Scene
    brdf: np.ndarray | None = None
    emission: np.ndarray | None = None

    def system(self) -> TransportSystem:
        return build_system(self.scene, brdf=self.brdf, emission=self.emission)


def rotate_frame(s: Surfel, axis_angle) -> Surfel:
    """Apply exp([theta]x) to a surfel's tangent frame."""
    theta = np.asarray(axis_angle, dtype=float)
    angle = np.linalg.norm(theta)
    if angle == 0.0:
        return s
    kx = theta / angle
    km = np.array([[0, -kx[2], kx[1]], [kx[2], 0, -kx[0]], [-kx[1], kx[0], 0]])
    rot = np.eye(3) + np.sin(angle) * km + (1 - np.cos(angle)) * km @ km
    return replace(s, tangent_u=rot @ s.tangent_u, tangent_v=rot @ s.tangent_v)


def perturb(params: Params, family: str, index: int, component, h: float) -> Params:
    """Params with one scalar parameter moved by h."""
    if family == "light_pos":
        family = "center"
    scene = params.scene
    surfels = list(scene.surfels)
    s = surfels[index]
    brdf, emission = params.brdf, params.emission
    if family == "emission":
        base = emission if emission is not None else scene.arrays.emission
        emission = base.copy()
        emission[index][component] += h
    elif family == "brdf":
        base = brdf if brdf is not None else scene.arrays.brdf
        brdf = base.copy()
        brdf[index][component] += h
    elif family == "center":
        c = s.center.copy()
        c[component] += h
        surfels[index] = replace(s, center=c)
    elif family == "scales":
        sc = s.scale.copy()
        sc[component] += h
        surfels[index] = replace(s, scale=sc)
    elif family == "frame":
        theta = np.zeros(3)
        theta[component] = h
        surfels[index] = rotate_frame(s, theta)
    elif family == "g":
        surfels[index] = replace(s, g=s.g + h)
    elif family == "lambda":
        surfels[index] = replace(s, lam=s.lam + h)
    else:
        raise ValueError(f"unknown parameter family {family!r}")
    return Params(scene.replace_surfels(surfels), brdf, emission)


def _components(family: str, k: int):
    if family in ("emission", "brdf"):
        return [(c, m) for c in range(3) for m in range(k)]
    if family in ("center", "frame", "light_pos"):
        return [0, 1, 2]
    if family == "scales":
        return [0, 1]
    return [None]


def _family_applies(family: str, kind: int) -> bool:
    if family == "light_pos":
        return kind == 1
    if kind == 0:
        return True
    if kind == 1:
        return family in ("center", "lambda", "emission")
    return family in ("lambda", "emission")


def _scalar(family, s: Surfel, radius: float) -> float:
    if family in ("center", "light_pos"):
        return radius
    if family == "scales":
        return float(np.min(s.scale))
    if family == "g":
        return s.g
    if family == "lambda":
        return s.lam
    return 1.0


def analytic_gradients(params: Params, loss) -> tuple:
    """Dense forward solve + full backward pass; returns (loss, GradBuffer)."""
    system = params.system()
    state = solve_dense(system)
    d_b = loss.grad(state.radiosity)
    d_e = adjoint_emission(params.scene, d_b, "dense", system=system)
    grads = grad_geometry(params.scene, state, d_e, system.pair_cache, system)
    return loss.value(state.radiosity), grads


def _pick(grads: GradBuffer, family, index, component):
    table = {
        "light_pos": grads.d_center,
        "emission": grads.d_emission,
        "brdf": grads.d_brdf,
        "center": grads.d_center,
        "scales": grads.d_scales,
        "frame": grads.d_frame,
        "g": grads.d_g,
        "lambda": grads.d_lambda,
    }
    arr = table[family][index]
    return float(arr if component is None else arr[component])


@dataclass
class FDReport:
    rows: list = field(default_factory=list)  # dicts: param, analytic, fd, rel_error, eps
    tolerance: float = 1e-3

    @property
    def max_error(self) -> float:
        return max((r["rel_error"] for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_text(self) -> str:
        lines = [f"{'parameter':<28} {'analytic':>14} {'finite diff':>14} {'rel. error':>11}"]
        for r in self.rows:
            lines.append(f"{r['param']:<28} {r['analytic']:>14.6e} {r['fd']:>14.6e} {r['rel_error']:>11.3e}")
        lines.append(f"max rel. error {self.max_error:.3e} (tolerance {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {"tolerance": self.tolerance, "max_error": self.max_error, "passed": self.passed, "rows": self.rows},
            indent=2,
        )


EPS_SCHEDULE = (1e-3, 1e-4, 1e-5, 1e-6)


def finite_diff_check(
    scene: Scene,
    families=FAMILIES,
    loss=None,
    eps_schedule=EPS_SCHEDULE,
    kernels=None,
    tolerance: float = 1e-3,
    floor_ratio: float = 1e-6,
    max_coeffs: int | None = None,
) -> FDReport:
    """Compare analytic gradients with central differences (dense solver).

    The relative error of each parameter is
    ``|a - fd| / max(|a|, |fd|, floor)`` where ``floor`` is ``floor_ratio``
    times the largest analytic magnitude in the parameter's family; the eps
    in the schedule giving the smallest error is reported.
    """
    params = scene if isinstance(scene, Params) else Params(scene)
    base_scene = params.scene
    n, k = len(base_scene), base_scene.n_coeffs
    if loss is None:
        loss = KernelLoss.random((n, 3, k), seed=0)
    _, grads = analytic_gradients(params, loss)
    radius = base_scene.bounding_sphere()[1] or 1.0
    kinds = base_scene.arrays.kinds
    kernels = range(n) if kernels is None else kernels
    report = FDReport(tolerance=tolerance)
    for family in families:
        entries = []
        for idx in kernels:
            if not _family_applies(family, kinds[idx]):
                continue
            comps = _components(family, k)
            if max_coeffs is not None and family in ("emission", "brdf"):
                comps = comps[:max_coeffs]
            for comp in comps:
                entries.append((idx, comp, _pick(grads, family, idx, comp)))
        if not entries:
            continue
        floor = floor_ratio * max(abs(a) for _, _, a in entries)
        for idx, comp, a in entries:
            scale = _scalar(family, base_scene.surfels[idx], radius)
            best = None
            for eps in eps_schedule:
                h = eps * scale
                up = loss.value(solve_dense(perturb(params, family, idx, comp, h).system()).radiosity)
                dn = loss.value(solve_dense(perturb(params, family, idx, comp, -h).system()).radiosity)
                fd = (up - dn) / (2.0 * h)
                denom = max(abs(a), abs(fd), floor)
                err = 0.0 if denom == 0.0 else abs(a - fd) / denom
                if best is None or err < best[0]:
                    best = (err, fd, eps)
            label = f"{family}[{idx}]" + ("" if comp is None else f"[{','.join(map(str, np.atleast_1d(comp)))}]")
            report.rows.append({"param": label, "analytic": a, "fd": best[1], "rel_error": best[0], "eps": best[2]})
    return report
