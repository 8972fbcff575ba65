"""Command-line front end: ``surfelrad {solve,render,gradcheck,optimize,variance}``.

Exit status 0 on success, 1 on runtime failure, 2 on usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adjoint, optim, render, solvers
from .scene import SceneError, load_scene, save_scene
from .scenes import BUNDLED, bundled_scene

log = logging.getLogger("surfelrad")

SOLVER_NAMES = {"dense": "dense", "pr": "progressive", "progressive": "progressive", "mc": "mc", "hybrid": "hybrid"}
GRAD_PARAMS = {
    "light_pos": ("light_pos",),
    "emission": ("emission",),
    "brdf": ("brdf",),
    "geometry": adjoint.GEOMETRY,
    "center": ("center",),
    "scales": ("scales",),
    "frame": ("frame",),
    "g": ("g",),
    "lambda": ("lambda",),
}
LEARN_PARAMS = {
    "light_pos": "light_positions",
    "light_positions": "light_positions",
    "emission": "emission",
    "brdf": "brdf",
    "centers": "centers",
    "scales": "scales",
    "frames": "frames",
    "g": "g",
    "lambda": "lambda",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def load_scene_arg(value: str):
    path = Path(value)
    if path.exists():
        return load_scene(path)
    if value in BUNDLED:
        return bundled_scene(value)
    if path.suffix or path.parent != Path("."):
        raise FileNotFoundError(f"scene file {value!r} not found")
    raise UsageError(f"scene {value!r} is neither a file nor a bundled scene ({', '.join(BUNDLED)})")


def parse_camera(text: str, size: str) -> render.Camera:
    """``px,py,pz/lx,ly,lz/ux,uy,uz/fov`` (fov in radians) and ``WxH``."""
    try:
        parts = text.split("/")
        if len(parts) != 4:
            raise ValueError
        pos, look, up = (np.array([float(x) for x in p.split(",")]) for p in parts[:3])
        if not (len(pos) == len(look) == len(up) == 3):
            raise ValueError
        fov = float(parts[3])
        w, h = (int(x) for x in size.lower().split("x"))
    except ValueError:
        raise UsageError(f"cannot parse camera {text!r} / size {size!r}") from None
    try:
        return render.Camera.look_at(pos, look, up, fov, w, h)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _split_list(value: str, table: dict, what: str) -> list:
    out = []
    for name in value.split(","):
        name = name.strip()
        if name not in table:
            raise UsageError(f"unknown {what} {name!r}; choose from {', '.join(table)}")
        out.append(table[name])
    return out


def state_to_json(state: solvers.SolveState, scene) -> dict:
    n = len(scene)
    return {
        "solver": state.solver,
        "T": state.steps,
        "seed": state.seed,
        "sh_degree": scene.sh_degree,
        "n_kernels": n,
        "radiosity": state.radiosity.reshape(n, -1).tolist(),
        "gather": state.gather.reshape(n, -1).tolist(),
    }


def state_from_json(data: dict) -> solvers.SolveState:
    b = np.array(data["radiosity"], dtype=float)
    n = b.shape[0]
    k = b.shape[1] // 3
    state = solvers.SolveState.empty(n, k, data.get("solver", ""))
    state.radiosity = b.reshape(n, 3, k)
    if "gather" in data:
        state.gather = np.array(data["gather"], dtype=float).reshape(n, 3, k)
    state.steps = data.get("T", 0)
    state.seed = data.get("seed")
    return state


def _run_solver(scene, name, steps, seed, threads):
    solver = SOLVER_NAMES[name]
    if solver == "dense":
        return solvers.solve_dense(scene)
    if solver == "progressive":
        return solvers.solve_progressive(scene)
    if solver == "mc":
        return solvers.solve_mc(scene, steps, seed, threads)
    return solvers.solve_hybrid(scene, steps, seed, threads)


# ---------------------------------------------------------------------------
# verbs


def cmd_solve(args) -> int:
    scene = load_scene_arg(args.scene)
    log.info("seed: %d", args.seed)
    state = _run_solver(scene, args.solver, args.steps, args.seed, args.threads)
    if state.seed is None:
        state.seed = args.seed
    Path(args.out).write_text(json.dumps(state_to_json(state, scene)))
    log.info("wrote %s", args.out)
    return 0


def cmd_render(args) -> int:
    scene = load_scene_arg(args.scene)
    camera = parse_camera(args.camera, args.size)
    state = state_from_json(json.loads(Path(args.state).read_text()))
    if state.radiosity.shape != (len(scene), 3, scene.n_coeffs):
        raise RuntimeError("state does not match the scene")
    image = render.render_image(scene, state, camera, args.pass_name, args.threads)
    render.write_image(image, args.out)
    if args.tonemap:
        render.write_image(image, args.tonemap, "ppm")
    log.info("wrote %s", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    scene = load_scene_arg(args.scene)
    families = []
    for group in _split_list(args.params, GRAD_PARAMS, "parameter"):
        families.extend(f for f in group if f not in families)
    log.info("seed: %d", args.seed)
    loss = adjoint.KernelLoss.random((len(scene), 3, scene.n_coeffs), seed=args.seed, kind=args.loss)
    eps = (args.eps,) if args.eps else adjoint.EPS_SCHEDULE
    report = adjoint.finite_diff_check(scene, families, loss, eps, tolerance=args.tol)
    print(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_json())
    return 0 if report.passed else 1


def _load_targets(path: str):
    manifest = json.loads(Path(path).read_text())
    base = Path(path).parent
    targets = []
    for entry in manifest:
        camera_spec = entry["camera"]
        image = render.read_image(base / entry["image"])
        camera = parse_camera(camera_spec, f"{image.width}x{image.height}")
        targets.append((camera, image))
    if not targets:
        raise UsageError("targets manifest is empty")
    return targets


def cmd_optimize(args) -> int:
    scene = load_scene_arg(args.scene)
    families = _split_list(args.learn, LEARN_PARAMS, "parameter family")
    targets = _load_targets(args.targets)
    log.info("seed: %d", args.seed)
    config = optim.OptimConfig(
        iterations=args.iters,
        step_sizes={f: args.lr for f in families},
        seed=args.seed,
        solver=SOLVER_NAMES[args.solver],
        T=args.steps,
        loss=args.loss,
        threads=args.threads,
    )

    def report(row):
        if row["iteration"] % max(1, args.iters // 10) == 0:
            log.info("iter %d loss %.6g", row["iteration"], row["loss"])

    result = optim.run_optimization(scene, targets, optim.ParamSelection.of(*families), config, report)
    save_scene(result.scene, args.out)
    if args.trace:
        optim.write_trace(result.trace, args.trace)
    log.info("final loss %.6g", optim.evaluate_loss(result.scene, targets, config, args.iters))
    return 0


def cmd_variance(args) -> int:
    scene = load_scene_arg(args.scene)
    log.info("seed: %d", args.seed)
    if args.camera:
        camera = parse_camera(args.camera, args.size)
    else:
        center, radius = scene.bounding_sphere()
        camera = render.Camera.look_at(center + np.array([0.0, 0.0, 0.3 * radius]), center - np.array([0.0, 0.0, radius]), (0.0, 1.0, 0.0), 1.2, 32, 32)
    runs_b, runs_px = [], []
    for r in range(args.runs):
        state = _run_solver(scene, args.solver, args.steps, args.seed + r, args.threads)
        runs_b.append(state.radiosity)
        runs_px.append(render.render_image(scene, state, camera, "full", args.threads).pixels)
    runs_b = np.array(runs_b)
    runs_px = np.array(runs_px)
    kernel_var = runs_b.var(axis=0, ddof=1).sum(axis=(1, 2)) if args.runs > 1 else np.zeros(len(scene))
    pixel_var = runs_px.var(axis=0, ddof=1).mean(axis=2) if args.runs > 1 else np.zeros(runs_px.shape[1:3])
    out = {
        "solver": SOLVER_NAMES[args.solver],
        "runs": args.runs,
        "steps": args.steps,
        "seed": args.seed,
        "kernel_variance": kernel_var.tolist(),
        "mean_kernel_variance": float(kernel_var.mean()),
        "mean_pixel_variance": float(pixel_var.mean()),
        "pixel_variance": pixel_var.tolist(),
    }
    Path(args.out).write_text(json.dumps(out))
    if args.map:
        render.write_image(render.ImageBuffer(camera.width, camera.height, np.repeat(pixel_var[..., None], 3, axis=2)), args.map, "pfm")
    print(f"mean kernel variance {out['mean_kernel_variance']:.6e}  mean pixel variance {out['mean_pixel_variance']:.6e}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surfelrad", description="Gaussian-surfel radiosity: solve, render, differentiate, optimise.")
    parser.add_argument("--threads", type=int, default=1, help="worker cap (results do not depend on it)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve transport and write a state file")
    p.add_argument("--scene", required=True)
    p.add_argument("--solver", choices=sorted(SOLVER_NAMES), default="dense")
    p.add_argument("--steps", type=int, default=solvers.DEFAULT_STEPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("render", help="render a pass from a solved state")
    p.add_argument("--scene", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--camera", required=True, help='"px,py,pz/lx,ly,lz/ux,uy,uz/fov"')
    p.add_argument("--size", required=True, help="WxH")
    p.add_argument("--pass", dest="pass_name", choices=render.PASSES, default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--tonemap", help="also write an 8-bit PPM")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--scene", required=True)
    p.add_argument("--params", required=True, help="comma list of " + ",".join(GRAD_PARAMS))
    p.add_argument("--eps", type=float, default=None, help="single relative step (default: schedule 1e-3..1e-6)")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("linear", "l2"), default="linear")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("optimize", help="fit scene parameters to target images")
    p.add_argument("--scene", required=True)
    p.add_argument("--targets", required=True, help="JSON list of {camera, image}")
    p.add_argument("--learn", required=True, help="comma list of " + ",".join(LEARN_PARAMS))
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--solver", choices=sorted(SOLVER_NAMES), default="dense")
    p.add_argument("--steps", type=int, default=solvers.DEFAULT_STEPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("L1", "L2"), default="L1")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("variance", help="per-kernel and per-pixel variance over repeated solves")
    p.add_argument("--scene", required=True)
    p.add_argument("--solver", choices=("mc", "hybrid"), required=True)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--steps", type=int, default=solvers.DEFAULT_STEPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--camera")
    p.add_argument("--size", default="32x32")
    p.add_argument("--out", required=True)
    p.add_argument("--map", help="write the per-pixel variance map as PFM")
    p.set_defaults(func=cmd_variance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    for name in ("steps", "iters", "runs"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            parser.error(f"--{name} must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"surfelrad: error: {exc}", file=sys.stderr)
        return 2
    except (SceneError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"surfelrad: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
