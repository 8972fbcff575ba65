import math

import numpy as np
import pytest

from surfelrad.scene import Scene, alpha_integral, directional_light, point_light
from surfelrad.scenes import facing_surfel, random_scene, two_kernel_scene
from surfelrad.sh import Material, eval_sh
from surfelrad.solvers import _magnitude, solve_dense
from surfelrad.transport import (
    DegenerateGeometryError,
    ShootState,
    build_pair_cache,
    build_system,
    decay,
    gather_direct,
    gather_from,
    shoot,
    transmittance,
)

# g giving a centre opacity of exactly 0.5
G_HALF = (math.log(2.0) / 0.03279) ** (1 / 3.4)


def _occluder(z, g=G_HALF):
    return facing_surfel([0, 0, z], [0, 0, 1], (0.5, 0.5), g=g)


def _endpoints_scene(*occluders):
    a = facing_surfel([0, 0, 0], [0, 0, 1], (0.2, 0.2))
    b = facing_surfel([0, 0, 2], [0, 0, -1], (0.2, 0.2))
    return Scene((a, b) + tuple(occluders), 2)


class TestTransmittance:
    def test_empty(self):
        scene = _endpoints_scene()
        assert transmittance(scene, [0, 0, 0], [0, 0, 2], (0, 1)) == 1.0

    def test_one_occluder(self):
        scene = _endpoints_scene(_occluder(1.0))
        assert transmittance(scene, [0, 0, 0], [0, 0, 2], (0, 1)) == pytest.approx(0.5, abs=1e-12)

    def test_two_occluders(self):
        scene = _endpoints_scene(_occluder(0.7), _occluder(1.3))
        assert transmittance(scene, [0, 0, 0], [0, 0, 2], (0, 1)) == pytest.approx(0.25, abs=1e-12)

    def test_endpoints_excluded(self):
        scene = _endpoints_scene(_occluder(1.0))
        # without exclusion the endpoint surfels sit at t = 0 and t = 1, outside (eps, 1 - eps)
        assert transmittance(scene, [0, 0, 0], [0, 0, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            transmittance(_endpoints_scene(), [0, 0, 1], [0, 0, 1])


class TestDecay:
    def test_facing_pair(self):
        scene = _endpoints_scene()
        a = alpha_integral(scene.surfels[0])
        assert decay(scene, 0, 1) == pytest.approx(a / 4.0, rel=1e-14)

    def test_perpendicular_receiver(self):
        a = facing_surfel([0, 0, 0], [0, 0, 1])
        b = facing_surfel([0, 0, 2], [1, 0, 0])
        assert decay(Scene((a, b), 2), 0, 1) == 0.0

    def test_occluded(self):
        free = _endpoints_scene()
        blocked = _endpoints_scene(_occluder(1.0))
        assert decay(blocked, 0, 1) == pytest.approx(0.5 * decay(free, 0, 1), rel=1e-12)

    def test_lambda_scales_source(self):
        a = facing_surfel([0, 0, 0], [0, 0, 1], lam=2.5)
        b = facing_surfel([0, 0, 2], [0, 0, -1])
        scene = Scene((a, b), 2)
        base = Scene((facing_surfel([0, 0, 0], [0, 0, 1]), b), 2)
        assert decay(scene, 0, 1) == pytest.approx(2.5 * decay(base, 0, 1))
        assert decay(scene, 1, 0) == pytest.approx(decay(base, 1, 0))

    def test_oblique_symbolic(self):
        a = facing_surfel([0, 0, 0], [0, 0.3, 1], (0.3, 0.2), g=2.0)
        b = facing_surfel([0.5, 0.2, 1.5], [-0.2, 0.1, -1], (0.25, 0.25))
        scene = Scene((a, b), 2)
        d = b.center - a.center
        r = np.linalg.norm(d)
        w = d / r
        expect = alpha_integral(a) * abs(b.normal @ w) * abs(a.normal @ w) / r**2
        assert decay(scene, 0, 1) == pytest.approx(expect, rel=1e-13)

    def test_point_light_drops_area(self):
        s = facing_surfel([0, 0, 0], [0, 0, 1])
        scene = Scene((s, point_light([0, 0, 2], [1, 1, 1])), 2)
        assert decay(scene, 1, 0) == pytest.approx(0.25)

    def test_back_face(self):
        s = facing_surfel([0, 0, 0], [0, 0, -1])
        scene = Scene((s, point_light([0, 0, 2], [1, 1, 1])), 2)
        assert decay(scene, 1, 0) == 0.0

    def test_coincident(self):
        a = facing_surfel([0, 0, 0], [0, 0, 1])
        b = facing_surfel([0, 0, 0], [0, 0, -1])
        with pytest.raises(DegenerateGeometryError):
            decay(Scene((a, b), 2), 0, 1)


class TestGatherDirect:
    def test_zero_light(self):
        s = facing_surfel([0, 0, 0], [0, 0, 1])
        scene = Scene((s, point_light([0, 0, 1], [0, 0, 0])), 2)
        np.testing.assert_array_equal(gather_direct(scene, 0), 0.0)

    def test_directional_no_falloff(self):
        s = facing_surfel([0, 0, 0], [0, 0, 1], material=Material(kd=(0.5, 0.5, 0.5)))
        light = directional_light([0.2, 0.1, -1.0], [1, 1, 1])
        near = Scene((s, light), 2)
        far_surfel = facing_surfel([0, 0, -5.0], [0, 0, 1], material=Material(kd=(0.5, 0.5, 0.5)))
        far = Scene((far_surfel, light), 2)
        np.testing.assert_allclose(gather_direct(near, 0), gather_direct(far, 0), rtol=1e-14)

    def test_point_light_symbolic(self):
        scene = two_kernel_scene(2)
        s = scene.surfels[0]
        alpha = -math.expm1(-0.03279 * s.g**3.4)
        w = np.array([0.0, 0.0, -1.0])  # from the light down to the surfel
        y_in = eval_sh(w, 2)
        e = 2 * math.sqrt(math.pi) * np.ones(3)
        radiance = e * y_in[0]  # Y(w)^T E, only the DC term is present
        v = 1.0  # cosine 1, distance 1, point light has no area factor
        f = np.zeros((3, 9))
        f[:, 0] = 4 * np.array(s.material.kd)
        expect = alpha * f * eval_sh(-w, 2)[None, :] * (radiance * v)[:, None]
        np.testing.assert_allclose(gather_direct(scene, 0), expect, atol=1e-15)

    def test_lights_behind(self):
        s = facing_surfel([0, 0, 0], [0, 0, 1])
        scene = Scene((s, point_light([0, 0, -1], [1, 1, 1]), directional_light([0, 0, 1], [1, 1, 1])), 2)
        np.testing.assert_array_equal(gather_direct(scene, 0), 0.0)


class TestGatherFrom:
    def test_zero(self, rand_scene):
        np.testing.assert_array_equal(gather_from(rand_scene, 0, 1, np.zeros((3, 9))), 0.0)

    def test_linear(self, rand_scene):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((3, 9))
        one = gather_from(rand_scene, 0, 1, b)
        assert np.any(one != 0)
        np.testing.assert_allclose(gather_from(rand_scene, 0, 1, 2 * b), 2 * one, rtol=1e-14)

    def test_first_neumann_term(self):
        # two facing surfels, one emitting: the dense solution's first bounce term
        rng = np.random.default_rng(2)
        e = np.zeros((3, 9))
        e[:, 0] = 1.0
        e[:, 1:] = 0.1 * rng.standard_normal((3, 8))
        a = facing_surfel([0, 0, 0], [0, 0, 1], (0.3, 0.3), 3.0, Material(kd=(0.5, 0.5, 0.5)), emission=e)
        b = facing_surfel([0, 0, 1], [0, 0, -1], (0.3, 0.3), 3.0, Material(kd=(0.0, 0.0, 0.0)))
        scene = Scene((a, b), 2)
        dense = solve_dense(scene, count=False).radiosity
        np.testing.assert_allclose(dense[1], gather_from(scene, 1, 0, e), atol=1e-14)


class TestShoot:
    def test_zero_unshot(self, rand_scene):
        system = build_system(rand_scene)
        state = ShootState.initial(system.with_emission(np.zeros_like(system.emission)))
        before = (state.radiosity.copy(), state.unshot.copy())
        shoot(system, 0, state)
        np.testing.assert_array_equal(state.radiosity, before[0])
        np.testing.assert_array_equal(state.unshot, before[1])

    def test_increment_equals_gather_from(self, rand_scene):
        system = build_system(rand_scene)
        state = ShootState.initial(system)
        light = int(rand_scene.light_indices[0])
        unshot = state.unshot[light].copy()
        before = state.radiosity.copy()
        shoot(system, light, state)
        for j in range(system.n):
            if j == light:
                continue
            np.testing.assert_array_equal(state.radiosity[j] - before[j], gather_from(rand_scene, j, light, unshot, system))
        np.testing.assert_array_equal(state.unshot[light], 0.0)

    def test_energy_decreases(self):
        scene = random_scene(4, 6, 2, emissive=2)
        system = build_system(scene)
        state = ShootState.initial(system)
        mags = _magnitude(state.unshot)
        total = mags.sum()
        shoot(system, int(np.argmax(mags)), state)
        assert _magnitude(state.unshot).sum() < total


class TestPairCache:
    def test_facing(self):
        a = facing_surfel([0, 0, 0], [0, 0, 1])
        b = facing_surfel([0, 0, 1], [0, 0, -1])
        assert len(build_pair_cache(Scene((a, b), 2))) == 2

    def test_back_face(self):
        a = facing_surfel([0, 0, 0], [0, 0, 1])
        b = facing_surfel([0, 0, 1], [0, 0, 1])  # a sees only b's back
        cache = build_pair_cache(Scene((a, b), 2))
        assert len(cache) == 0

    def test_matches_decay(self, occluded):
        cache = build_pair_cache(occluded)
        assert len(cache) > 0
        for p in cache.pairs:
            assert p.decay == decay(occluded, p.source, p.receiver)
            assert p.decay > 0
        n = len(occluded)
        stored = {(p.receiver, p.source) for p in cache.pairs}
        for i in range(n):
            for j in range(n):
                if i != j and occluded.arrays.kinds[i] != 2 and (i, j) not in stored:
                    assert decay(occluded, j, i) == 0.0

    def test_reversal_rule(self):
        scene = random_scene(8, 4, 2, n_lights=0)
        ar = scene.arrays
        for p in build_pair_cache(scene).pairs:
            i, j = p.receiver, p.source
            aj = ar.lam[j] * alpha_integral(scene.surfels[j])
            ai = ar.lam[i] * alpha_integral(scene.surfels[i])
            assert decay(scene, i, j) == pytest.approx(p.decay / aj * ai, rel=1e-12)

    def test_first_bounce_consistency(self, occluded):
        system = build_system(occluded)
        state = ShootState.initial(system)
        for j in occluded.light_indices:
            shoot(system, int(j), state)
        for i in range(len(occluded)):
            if occluded.arrays.kinds[i] == 0:
                np.testing.assert_allclose(state.radiosity[i] - system.emission[i], gather_direct(occluded, i, system), atol=1e-14)
