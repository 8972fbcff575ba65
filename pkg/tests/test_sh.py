import math
import warnings

import numpy as np
import pytest

from surfelrad.sh import (
    Material,
    Quadrature,
    brdf_eval,
    check_reciprocity,
    eval_sh,
    num_coeffs,
    phong_band_ratio_derivs,
    phong_band_ratios,
    phong_brdf_coeffs,
    project_function,
    sh_index,
    sh_jacobian,
)

from conftest import random_dirs


def _legendre_reference(l, m, d):
    """Real SH from scipy's associated Legendre (CS phase included)."""
    from scipy.special import lpmv

    theta = math.acos(d[2])
    phi = math.atan2(d[1], d[0])
    am = abs(m)
    norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
    p = lpmv(am, l, math.cos(theta))
    if m == 0:
        return norm * p
    if m > 0:
        return math.sqrt(2) * norm * p * math.cos(m * phi)
    return math.sqrt(2) * norm * p * math.sin(am * phi)


class TestEvalSH:
    def test_dc_constant(self):
        y = eval_sh(random_dirs(20), 3)
        np.testing.assert_allclose(y[:, 0], 0.28209479, atol=1e-8)

    def test_pole_l1(self):
        y = eval_sh([0.0, 0.0, 1.0], 2)
        assert y[sh_index(1, 0)] == pytest.approx(0.48860251, abs=1e-8)

    def test_l1_odd(self):
        d = random_dirs(10, 1)
        a, b = eval_sh(d, 1), eval_sh(-d, 1)
        np.testing.assert_array_equal(b[:, 1:4], -a[:, 1:4])

    def test_matches_scipy_legendre(self):
        for d in random_dirs(5, 2):
            y = eval_sh(d, 5)
            for l in range(6):
                for m in range(-l, l + 1):
                    assert y[sh_index(l, m)] == pytest.approx(_legendre_reference(l, m, d), abs=1e-12)

    def test_normalizes_input(self):
        np.testing.assert_allclose(eval_sh([0, 0, 7.0], 2), eval_sh([0, 0, 1.0], 2))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            eval_sh([np.nan, 0, 1], 2)
        with pytest.raises(ValueError):
            eval_sh([np.inf, 0, 1], 2)

    def test_parity_all_bands(self):
        d = random_dirs(10, 3)
        ls = np.array([l for l in range(10) for _ in range(2 * l + 1)])
        np.testing.assert_allclose(eval_sh(-d, 9), eval_sh(d, 9) * (-1.0) ** ls, atol=1e-12)


class TestJacobian:
    def test_dc_row_zero(self):
        j = sh_jacobian(random_dirs(5), 2)
        np.testing.assert_array_equal(j[:, 0], 0.0)

    def test_pole_row_zero(self):
        j = sh_jacobian([0, 0, 1.0], 2)
        np.testing.assert_allclose(j[sh_index(1, 0)], 0.0, atol=1e-15)

    def test_tangent(self):
        d = random_dirs(20, 4)
        j = sh_jacobian(d, 9)
        assert np.max(np.abs(np.einsum("nkj,nj->nk", j, d))) <= 1e-12

    def test_finite_differences(self):
        for d in random_dirs(5, 5):
            a = np.cross(d, [1.0, 0.0, 0.0])
            a /= np.linalg.norm(a)
            b = np.cross(d, a)
            jac = sh_jacobian(d, 4)
            for t in (a, b):
                h = 1e-6
                fd = (eval_sh(d + h * t, 4) - eval_sh(d - h * t, 4)) / (2 * h)
                an = jac @ t
                scale = np.maximum(np.abs(an), 1e-3)
                assert np.max(np.abs(fd - an) / scale) < 1e-5


class TestProjection:
    def test_constant(self):
        c = project_function(lambda d: np.ones(len(d)), 3)
        assert c[0] == pytest.approx(3.5449077, abs=1e-7)
        np.testing.assert_allclose(c[1:], 0.0, atol=1e-10)

    def test_basis_function(self):
        k = sh_index(2, 1)
        c = project_function(lambda d: eval_sh(d, 2)[:, k], 2)
        expect = np.zeros(9)
        expect[k] = 1.0
        np.testing.assert_allclose(c, expect, atol=1e-10)

    def test_roundtrip(self):
        rng = np.random.default_rng(7)
        c = rng.standard_normal(num_coeffs(6))
        back = project_function(lambda d: eval_sh(d, 6) @ c, 6)
        np.testing.assert_allclose(back, c, atol=1e-10)

    def test_floor(self):
        with pytest.raises(ValueError):
            project_function(lambda d: np.ones(len(d)), 4, Quadrature(4, 20))
        with pytest.raises(ValueError):
            project_function(lambda d: np.ones(len(d)), 4, Quadrature(10, 8))

    def test_phong_lobe_s4(self):
        c = project_function(lambda d: 5.0 / (2 * np.pi) * np.maximum(d[:, 2], 0.0) ** 4, 4)
        closed = phong_brdf_coeffs(Material(kd=(0, 0, 0), ks=(1, 1, 1), shininess=4.0, blend=0.0), 4)[0]
        for l in range(5):
            zonal = c[sh_index(l, 0)] * math.sqrt(4 * math.pi / (2 * l + 1))
            for m in range(-l, l + 1):
                assert closed[sh_index(l, m)] == pytest.approx((-1) ** m * zonal, abs=1e-3)


class TestPhong:
    def test_diffuse_only(self):
        f = phong_brdf_coeffs(Material(kd=(0.5, 0.5, 0.5), blend=1.0), 3)
        np.testing.assert_allclose(f[:, 0], 2.0)
        np.testing.assert_array_equal(f[:, 1:], 0.0)

    def test_odd_band(self):
        f = phong_brdf_coeffs(Material(kd=(0, 0, 0), ks=(1, 1, 1), shininess=1.0, blend=0.0), 2)
        assert f[0, sh_index(1, 0)] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_even_band_sign(self):
        f = phong_brdf_coeffs(Material(kd=(0, 0, 0), ks=(1, 1, 1), shininess=2.0, blend=0.0), 3)
        assert f[0, sh_index(2, 1)] == pytest.approx(-0.4, abs=1e-15)

    def test_clamp_warns(self):
        with pytest.warns(RuntimeWarning):
            f = phong_brdf_coeffs(Material(ks=(1, 1, 1), shininess=50.0, blend=0.0), 2)
        limit = phong_brdf_coeffs(Material(ks=(1, 1, 1), shininess=9 / 5, blend=0.0), 2)
        np.testing.assert_array_equal(f, limit)

    def test_no_warning_below_limit(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            phong_brdf_coeffs(Material(ks=(1, 1, 1), shininess=1.0, blend=0.0), 2)

    def test_ratio_derivative(self):
        for s in (1.0, 2.5, 7.0):
            h = 1e-6
            fd = (phong_band_ratios(s + h, 6) - phong_band_ratios(s - h, 6)) / (2 * h)
            np.testing.assert_allclose(phong_band_ratio_derivs(s, 6), fd, atol=1e-8)

    def test_material_validation(self):
        with pytest.raises(ValueError):
            Material(shininess=0.0)
        with pytest.raises(ValueError):
            Material(blend=1.5)


class TestBrdfEval:
    def test_diffuse_value(self):
        f = phong_brdf_coeffs(Material(kd=(0.6, 0.6, 0.6), blend=1.0), 3)
        d = random_dirs(2, 9)
        np.testing.assert_allclose(brdf_eval(f, d[0], d[1]), 0.6 / np.pi, rtol=1e-12)

    def test_reciprocity(self):
        rng = np.random.default_rng(10)
        f = rng.standard_normal((3, 16))
        a, b = random_dirs(2, 11)
        np.testing.assert_allclose(brdf_eval(f, a, b), brdf_eval(f, -b, -a), atol=1e-12)
        check_reciprocity(16)

    def test_mirror_peak(self):
        f = phong_brdf_coeffs(Material(kd=(0, 0, 0), ks=(1, 1, 1), shininess=10.0, blend=0.0), 9)
        w_in = np.array([0.3, -0.2, -0.9])
        w_in /= np.linalg.norm(w_in)
        w_out = w_in * np.array([1.0, 1.0, -1.0])
        value = brdf_eval(f, w_in, w_out)
        np.testing.assert_allclose(value, 11.0 / (2 * np.pi), rtol=0.05)

    def test_degree_mismatch(self):
        with pytest.raises(ValueError):
            brdf_eval(np.zeros((3, 7)), [0, 0, 1], [0, 0, 1])
