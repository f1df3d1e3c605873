import numpy as np
import pytest

from bcsoftmax.autodiff import (
    _dense_jacobians,
    check_gradients,
    jacobian_factors,
    jvp,
    vjp_a,
    vjp_b,
    vjp_x,
)

from conftest import assert_close, random_instance

FIG1_X = np.array([-1.5, 1.0, -0.5])
FIG1_B = np.array([1.0, 0.6, 0.5])


def _stable_instance(rng, k):
    """Recipe instance nudged until it sits clear of active-set boundaries."""
    while True:
        x, a, b = random_instance(rng, k)
        if not check_gradients(x, a, b).at_boundary:
            return x, a, b


class TestJacobianFactors:
    def test_unconstrained_case(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=5)
        f = jacobian_factors(x, np.zeros(5), np.ones(5))
        assert not f.lower_pinned.any()
        assert not f.upper_pinned.any()
        assert f.free_mass == pytest.approx(1.0)
        assert f.free_probs.sum() == pytest.approx(1.0)

    def test_fully_pinned_case(self):
        a = np.array([0.5, 0.25, 0.25])
        f = jacobian_factors(np.array([-4.0, 2.0, 1.0]), a, np.ones(3))
        assert f.free_mass == pytest.approx(0.0, abs=1e-15)
        assert np.all(f.free_probs == 0.0)

    def test_reference_instance(self):
        f = jacobian_factors(FIG1_X, np.zeros(3), FIG1_B)
        assert list(f.upper_pinned) == [False, True, False]
        assert f.free_mass == pytest.approx(0.4)
        assert_close(f.free_probs, [0.10757656854799805, 0.0, 0.29242343145200195])

    def test_free_probs_sum_to_free_mass(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.integers(2, 9))
            x, a, b = random_instance(rng, k)
            f = jacobian_factors(x, a, b)
            assert f.free_probs.sum() == pytest.approx(f.free_mass, abs=1e-9)


class TestProducts:
    def test_unconstrained_vjp_is_softmax_vjp(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=6)
        f = jacobian_factors(x, np.zeros(6), np.ones(6))
        v = rng.normal(size=6)
        p = f.free_probs
        assert_close(vjp_x(f, v), p * v - p * (p @ v))

    def test_row_sums_are_zero(self):
        rng = np.random.default_rng(3)
        ones = None
        for _ in range(50):
            k = int(rng.integers(2, 9))
            x, a, b = random_instance(rng, k)
            f = jacobian_factors(x, a, b)
            ones = np.ones(k)
            assert np.abs(vjp_x(f, ones)).max() < 1e-10

    def test_matches_dense_jacobians(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            k = int(rng.integers(2, 9))
            x, a, b = random_instance(rng, k)
            f = jacobian_factors(x, a, b)
            jx, ja, jb = _dense_jacobians(f)
            v = rng.normal(size=k)
            assert_close(vjp_x(f, v), v @ jx)
            assert_close(vjp_a(f, v), v @ ja)
            assert_close(vjp_b(f, v), v @ jb)
            dx, da, db = rng.normal(size=(3, k))
            assert_close(jvp(f, dx, da, db), jx @ dx + ja @ da + jb @ db)

    def test_vjp_at_pinned_unit_vector(self):
        # a unit cotangent at a lower-pinned index returns that unit vector
        rng = np.random.default_rng(5)
        for _ in range(50):
            x, a, b = random_instance(rng, 6)
            a = np.minimum(a * 3.0, b * 0.9)
            if a.sum() > 1.0:
                continue
            f = jacobian_factors(x, a, b)
            pinned = np.flatnonzero(f.lower_pinned)
            if pinned.size == 0:
                continue
            e = np.zeros(6)
            e[pinned[0]] = 1.0
            assert_close(vjp_a(f, e), e)

    def test_pinned_rows_insensitive_to_logits(self):
        f = jacobian_factors(FIG1_X, np.zeros(3), FIG1_B)
        jx, _, _ = _dense_jacobians(f)
        assert np.all(jx[1] == 0.0)  # the upper-pinned coordinate

    def test_x_block_jvp_equals_vjp(self):
        rng = np.random.default_rng(6)
        x, a, b = random_instance(rng, 7)
        f = jacobian_factors(x, a, b)
        v = rng.normal(size=7)
        zero = np.zeros(7)
        assert_close(jvp(f, v, zero, zero), vjp_x(f, v))

    def test_degenerate_free_mass(self):
        a = np.array([0.5, 0.25, 0.25])
        f = jacobian_factors(np.array([0.0, 1.0, -1.0]), a, np.ones(3))
        v = np.array([1.0, 2.0, 3.0])
        assert np.all(vjp_x(f, v) == 0.0)
        assert_close(vjp_a(f, v), np.where(f.lower_pinned, v, 0.0))
        da = np.array([0.1, 0.2, 0.3])
        zero = np.zeros(3)
        assert_close(jvp(f, v, da, zero), np.where(f.lower_pinned, da, 0.0))

    def test_all_zero_tangents(self):
        rng = np.random.default_rng(7)
        x, a, b = random_instance(rng, 5)
        f = jacobian_factors(x, a, b)
        zero = np.zeros(5)
        assert np.all(jvp(f, zero, zero, zero) == 0.0)


class TestCheckGradients:
    def test_unconstrained_instance(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=6)
        report = check_gradients(x, np.zeros(6), np.ones(6))
        assert not report.at_boundary
        assert report.max_dev_x < 1e-6
        assert report.passed

    def test_reference_instance(self):
        report = check_gradients(FIG1_X, np.zeros(3), FIG1_B)
        assert not report.at_boundary
        assert report.max_dev_x < 1e-6
        assert report.max_dev_b < 1e-5
        assert report.passed

    def test_random_instances(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            k = int(rng.integers(2, 8))
            x, a, b = _stable_instance(rng, k)
            report = check_gradients(x, a, b)
            assert report.passed, report

    def test_boundary_instance_is_flagged(self):
        # softmax(0, 0) = (0.5, 0.5) hits b_0 = 0.5 exactly
        report = check_gradients(np.zeros(2), np.zeros(2), np.array([0.5, 1.0]))
        assert report.at_boundary
        assert report.passed  # boundary reports are informative, not failures
