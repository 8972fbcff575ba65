import numpy as np
import pytest

from surfelrad.scene import Scene, point_light
from surfelrad.scenes import facing_surfel, random_scene, two_kernel_scene
from surfelrad.sh import Material


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_dirs(n, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def occluded_scene(degree=2):
    """Surfels with a partial occluder, a point light and a directional light."""
    rng = np.random.default_rng(3)

    def mat():
        return Material(kd=tuple(rng.uniform(0.3, 0.8, 3)), ks=(0.3, 0.3, 0.3), shininess=1.3, blend=0.6)

    from surfelrad.scene import directional_light

    s0 = facing_surfel([0, 0, 0], [0.1, 0, 1], (0.3, 0.25), 3.0, mat(), rng=rng)
    s1 = facing_surfel([0.2, 0.1, 2], [0, 0.2, -1], (0.3, 0.3), 2.0, mat(), rng=rng)
    occ = facing_surfel([0.15, 0.05, 1.0], [0.3, 0.2, 1], (0.2, 0.15), 4.0, mat(), rng=rng)
    s3 = facing_surfel([1.0, 0, 1.0], [-1, 0, 0.1], (0.3, 0.3), 2.5, mat(), rng=rng)
    return Scene(
        (s0, s1, occ, s3, point_light([0.5, 0.3, 0.6], [1, 1, 1]), directional_light([0.3, 0.1, -1], [0.5, 0.5, 0.5])),
        degree,
    )


@pytest.fixture
def two_kernel():
    return two_kernel_scene()


@pytest.fixture
def rand_scene():
    return random_scene(1, 4, 2)


@pytest.fixture
def occluded():
    return occluded_scene()


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record one acceptance line; printed live and again in the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, title, ok, detail, elapsed, limit=None):
        within = limit is None or elapsed < limit
        status = "PASS" if ok and within else "FAIL"
        budget = f" (limit {limit:g} s)" if limit is not None else ""
        line = f"[{status}] criterion {number}: {title} | {detail} | {elapsed:.2f} s{budget}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok and within

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
