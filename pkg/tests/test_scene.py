import json
import math

import numpy as np
import pytest
from scipy import integrate

from surfelrad.scene import (
    ALPHA_MIN,
    Scene,
    SceneError,
    Surfel,
    alpha_integral,
    alpha_integral_grad,
    alpha_integral_values,
    directional_light,
    expint_lower,
    expint_lower_deriv,
    load_scene,
    opacity_at,
    parse_scene,
    point_light,
    ray_intersect,
    save_scene,
    serialize_scene,
    tangent_point,
)
from surfelrad.scenes import BUNDLED, bundled_scene, facing_surfel, random_scene
from surfelrad.sh import Material

from conftest import unit


def _surfel(g=3.0, scale=(1.0, 1.0), **kw):
    return Surfel(center=np.zeros(3), scale=np.asarray(scale, dtype=float), g=g, **kw)


def _ein_quad(c):
    val, _ = integrate.quad(lambda y: -math.expm1(-y) / y if y > 0 else 1.0, 0.0, c, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def _ein_series(c, terms=60):
    return sum((-1) ** (n + 1) * c**n / (n * math.factorial(n)) for n in range(1, terms))


MINIMAL = {
    "sh_degree": 1,
    "surfels": [
        {
            "center": [0, 0, 0],
            "tangent_u": [1, 0, 0],
            "tangent_v": [0, 1, 0],
            "scale": [0.5, 0.25],
            "g": 2.0,
            "material": {"kd": [0.5, 0.4, 0.3], "ks": [0.1, 0.1, 0.1], "shininess": 1.5, "blend": 0.7},
        }
    ],
    "lights": [{"kind": "point", "position": [0, 0, 1], "intensity": [1, 1, 1]}],
}


class TestTangentPoint:
    def test_center(self):
        s = _surfel()
        np.testing.assert_array_equal(tangent_point(s, 0.0, 0.0), s.center)

    def test_axis(self):
        s = _surfel(scale=(2.0, 1.0))
        np.testing.assert_array_equal(tangent_point(s, 1.0, 0.0), [2.0, 0.0, 0.0])

    def test_affine_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            s = facing_surfel(rng.standard_normal(3), rng.standard_normal(3), rng.uniform(0.1, 2, 2), rng=rng)
            u, v = rng.standard_normal(2)
            basis = np.column_stack([s.tangent_u * s.scale[0], s.tangent_v * s.scale[1]])
            np.testing.assert_allclose(tangent_point(s, u, v), s.center + basis @ [u, v], atol=1e-14)


class TestOpacity:
    def test_zero_g(self):
        s = _surfel(g=0.0)
        assert opacity_at(s, 0.0, 0.0) == 0.0
        assert opacity_at(s, 0.5, -1.0) == 0.0

    def test_unit_g_center(self):
        # direct evaluation of 1 - exp(-0.03279)
        assert opacity_at(_surfel(g=1.0), 0.0, 0.0) == pytest.approx(0.03225824, abs=1e-8)

    def test_beyond_cutoff_not_hit(self):
        s = _surfel(g=50.0)
        # u^2 + v^2 = 18 on the plane z = 0
        origin = np.array([3.0, 3.0, 1.0])
        assert ray_intersect(s, origin, [0, 0, -1.0]) is None
        assert opacity_at(s, 3.0, 3.0) > 0.0

    def test_maximal_at_center(self):
        s = _surfel(g=4.0)
        assert opacity_at(s, 0, 0) > opacity_at(s, 0.3, 0.1)


class TestExpint:
    def test_zero(self):
        assert expint_lower(0.0) == 0.0

    def test_small(self):
        # alternating series oracle; the true value is 0.09755453...
        assert expint_lower(0.1) == pytest.approx(_ein_series(0.1), abs=1e-12)
        assert expint_lower(0.1) == pytest.approx(0.0975545, abs=1e-7)

    def test_large(self):
        assert expint_lower(50.0) == pytest.approx(_ein_quad(50.0), rel=1e-8)
        assert expint_lower(50.0) == pytest.approx(math.log(50.0) + np.euler_gamma, rel=1e-8)

    def test_negative(self):
        with pytest.raises(ValueError):
            expint_lower(-1.0)

    def test_across_switch(self):
        for c in (0.5, 1.99, 2.0, 2.01, 5.0, 20.0, 100.0):
            assert expint_lower(c) == pytest.approx(_ein_quad(c), abs=1e-7)

    def test_derivative(self):
        for c in (0.3, 2.5, 10.0):
            h = 1e-6
            fd = (expint_lower(c + h) - expint_lower(c - h)) / (2 * h)
            assert expint_lower_deriv(c) == pytest.approx(fd, rel=1e-7)


class TestAlphaIntegral:
    def test_zero(self):
        assert alpha_integral(_surfel(g=0.0)) == 0.0

    @pytest.mark.parametrize("g", [0.5, 1.0, 3.0, 10.0])
    def test_quadrature(self, g):
        s = _surfel(g=g)
        # polar quadrature of the opacity over the whole plane
        val, _ = integrate.quad(lambda r: 2 * math.pi * r * opacity_at(s, r, 0.0), 0.0, 12.0, epsabs=1e-13, epsrel=1e-11, limit=200)
        assert alpha_integral(s) == pytest.approx(val, rel=1e-4)

    def test_cartesian_quadrature_g3(self):
        s = _surfel(g=3.0)
        val, _ = integrate.dblquad(lambda v, u: opacity_at(s, u, v), -8, 8, -8, 8, epsabs=1e-10, epsrel=1e-9)
        assert alpha_integral(s) == pytest.approx(val, rel=1e-4)

    def test_linear_in_scale(self):
        a = alpha_integral(_surfel(g=2.0, scale=(1.0, 0.7)))
        b = alpha_integral(_surfel(g=2.0, scale=(2.0, 0.7)))
        assert b == 2 * a

    def test_gradient(self):
        g, su, sv = 2.3, 0.4, 0.7
        grad = alpha_integral_grad(g, su, sv)
        h = 1e-6
        fds = [
            (alpha_integral_values(g + h, su, sv) - alpha_integral_values(g - h, su, sv)) / (2 * h),
            (alpha_integral_values(g, su + h, sv) - alpha_integral_values(g, su - h, sv)) / (2 * h),
            (alpha_integral_values(g, su, sv + h) - alpha_integral_values(g, su, sv - h)) / (2 * h),
        ]
        np.testing.assert_allclose(grad, fds, rtol=1e-6)


class TestRayIntersect:
    def test_perpendicular(self):
        s = _surfel(g=3.0)
        rec = ray_intersect(s, [0, 0, 2.5], [0, 0, -1.0])
        assert rec.t == pytest.approx(2.5)
        assert (rec.u, rec.v) == (0.0, 0.0)

    def test_parallel(self):
        assert ray_intersect(_surfel(), [0, 0, 1.0], [1.0, 0, 0]) is None

    def test_behind_origin(self):
        assert ray_intersect(_surfel(), [0, 0, 1.0], [0, 0, 1.0]) is None

    def test_oblique(self):
        rng = np.random.default_rng(4)
        s = facing_surfel([0.1, 0.2, 0.3], [0.2, 0.1, 1], (0.6, 0.4), g=5.0, rng=rng)
        origin = np.array([0.5, -0.3, 2.0])
        d = unit([-0.2, 0.35, -1.0])
        rec = ray_intersect(s, origin, d)
        # oracle: solve origin + t d = p + su tu u + sv tv v
        m = np.column_stack([d, -s.scale[0] * s.tangent_u, -s.scale[1] * s.tangent_v])
        t, u, v = np.linalg.solve(m, s.center - origin)
        assert rec.t == pytest.approx(t, abs=1e-12)
        assert rec.u == pytest.approx(u, abs=1e-12)
        assert rec.v == pytest.approx(v, abs=1e-12)
        np.testing.assert_array_equal(rec.point, tangent_point(s, rec.u, rec.v))

    def test_alpha_floor(self):
        s = _surfel(g=0.15)
        assert opacity_at(s, 0, 0) < ALPHA_MIN
        assert ray_intersect(s, [0, 0, 1.0], [0, 0, -1.0]) is None

    def test_lights_not_hit(self):
        assert ray_intersect(point_light([0, 0, 0], [1, 1, 1]), [0, 0, 1.0], [0, 0, -1.0]) is None


class TestSceneIO:
    def test_minimal_roundtrip(self):
        scene = parse_scene(json.dumps(MINIMAL))
        assert len(scene) == 2
        text = serialize_scene(scene)
        again = parse_scene(text)
        assert again == scene
        assert serialize_scene(again) == text

    def test_negative_scale(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["surfels"][0]["scale"] = [-1, 0.5]
        with pytest.raises(SceneError) as err:
            parse_scene(json.dumps(doc))
        assert "surfels[0].scale" in str(err.value)

    def test_lambda_default(self):
        scene = parse_scene(json.dumps(MINIMAL))
        assert scene.surfels[0].lam == 1.0

    def test_non_orthogonal(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["surfels"][0]["tangent_v"] = [0.1, 1, 0]
        with pytest.raises(SceneError, match="orthogonal"):
            parse_scene(json.dumps(doc))

    def test_nan_rejected(self):
        text = json.dumps(MINIMAL).replace('"g": 2.0', '"g": NaN')
        with pytest.raises(SceneError):
            parse_scene(text)

    def test_unknown_light_kind(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["lights"][0]["kind"] = "area"
        with pytest.raises(SceneError, match=r"lights\[0\].kind"):
            parse_scene(json.dumps(doc))

    def test_emission_length_checked(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["surfels"][0]["emission_sh"] = [1.0] * 5
        with pytest.raises(SceneError, match="emission_sh"):
            parse_scene(json.dumps(doc))

    def test_random_roundtrip(self, tmp_path):
        scene = random_scene(5, 5, 2, n_lights=1, emissive=2)
        scene = Scene(scene.surfels + (directional_light([0, 0, -1], [0.3, 0.2, 0.1]),), 2)
        path = tmp_path / "s.json"
        save_scene(scene, path)
        assert load_scene(path) == scene

    def test_bundled(self):
        for name in BUNDLED:
            scene = bundled_scene(name)
            assert len(scene.light_indices) >= 1


class TestLights:
    def test_point_light_dc(self):
        light = point_light([0, 0, 0], [0.5, 1.0, 2.0])
        e = light.emission_coeffs(4)
        np.testing.assert_allclose(e[:, 0], 2 * math.sqrt(math.pi) * np.array([0.5, 1.0, 2.0]))
        np.testing.assert_array_equal(e[:, 1:], 0.0)

    def test_non_light_zero_emission(self):
        s = facing_surfel([0, 0, 0], [0, 0, 1], material=Material())
        assert not s.is_light
        np.testing.assert_array_equal(s.emission_coeffs(9), 0.0)
