import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmilab.analysis import (compare_models, count_floored, elongation_ratio, jacobi_eigh, mahalanobis,
                             mean_scatter, project_means, unit_ball_volume, unit_sphere_area,
                             variance_volume_change)
from mmilab.gauss_hmm import ContractError


def closed_form_2x2(a, b, c):
    """Eigenvalues of [[a, b], [b, c]] from the quadratic formula."""
    m = 0.5 * (a + c)
    r = math.hypot(0.5 * (a - c), b)
    return m - r, m + r


def closed_form_3x3(A):
    """Eigenvalues of a symmetric 3x3 matrix by the trigonometric cubic solution."""
    p1 = A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2
    q = np.trace(A) / 3.0
    if p1 == 0.0:
        return np.sort(np.diag(A))
    p2 = (A[0, 0] - q) ** 2 + (A[1, 1] - q) ** 2 + (A[2, 2] - q) ** 2 + 2 * p1
    p = math.sqrt(p2 / 6.0)
    B = (A - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = math.acos(r) / 3.0
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    return np.sort([e1, 3 * q - e1 - e3, e3])


def sym(n):
    return arrays(np.float64, (n, n), elements=st.floats(-5, 5)).map(lambda a: 0.5 * (a + a.T))


class TestJacobi:
    @pytest.mark.parametrize("a,b,c", [(2.0, 1.0, 2.0), (1.0, 0.0, 3.0), (4.0, -2.5, -1.0), (1e-3, 5.0, 1e3)])
    def test_2x2_closed_form(self, a, b, c):
        w, _ = jacobi_eigh([[a, b], [b, c]])
        np.testing.assert_allclose(w, closed_form_2x2(a, b, c), rtol=0, atol=1e-10 * max(1, abs(c)))

    def test_3x3_closed_form(self, rng):
        for _ in range(20):
            a = rng.normal(size=(3, 3))
            A = a + a.T
            w, _ = jacobi_eigh(A)
            np.testing.assert_allclose(w, closed_form_3x3(A), atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(sym(4))
    def test_reconstruction_and_orthonormality(self, A):
        w, V = jacobi_eigh(A)
        np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-10)
        np.testing.assert_allclose(V @ np.diag(w) @ V.T, A, atol=1e-9)
        assert np.all(np.diff(w) >= 0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractError):
            jacobi_eigh([[1.0, 2.0], [0.0, 1.0]])

    def test_diagonal_is_immediate(self):
        w, V = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(w, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(np.abs(V), np.eye(3)[:, [1, 2, 0]])


class TestConstants:
    @pytest.mark.parametrize("d,v", [(1, 2.0), (2, math.pi), (3, 4 * math.pi / 3)])
    def test_ball(self, d, v):
        assert unit_ball_volume(d) == pytest.approx(v)

    @pytest.mark.parametrize("d,a", [(2, 2 * math.pi), (3, 4 * math.pi)])
    def test_sphere(self, d, a):
        assert unit_sphere_area(d) == pytest.approx(a)


class TestMahalanobis:
    def test_identity_is_euclidean(self):
        assert mahalanobis([3.0, 4.0], [0.0, 0.0], np.eye(2)) == pytest.approx(5.0)

    def test_diagonal(self):
        assert mahalanobis([2.0, 0.0], [0.0, 0.0], np.diag([4.0, 1.0])) == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-3, 3)))
    def test_invariant_under_rotation(self, x, y):
        Q, _ = np.linalg.qr(np.array([[1.0, 2.0, 0.5], [0.3, -1.0, 2.0], [1.5, 0.2, 1.0]]))
        S = np.diag([1.0, 2.0, 0.5])
        a = mahalanobis(x, y, S)
        b = mahalanobis(Q @ x, Q @ y, Q @ S @ Q.T)
        assert a == pytest.approx(b, abs=1e-9)

    def test_singular_rejected(self):
        with pytest.raises(ContractError):
            mahalanobis([1.0, 0.0], [0.0, 0.0], np.zeros((2, 2)))


class TestScatter:
    def test_two_means(self, small_task):
        m = small_task.true_model
        assert m.n_states % 2 == 0
        mu = np.zeros_like(m.means)
        half = m.n_states // 2
        mu[:half, 0] = 1.0
        mu[half:2 * half, 0] = -1.0
        r = mean_scatter(m.with_params(mu, m.variances))
        expect = np.zeros((m.dim, m.dim))
        expect[0, 0] = 1.0
        np.testing.assert_allclose(r.scatter, expect, atol=1e-12)
        assert r.degenerate and r.log_volume == -math.inf
        with pytest.raises(ContractError):
            elongation_ratio(r)

    def test_all_identical(self, small_task):
        m = small_task.true_model
        r = mean_scatter(m.with_params(np.ones_like(m.means), m.variances))
        assert r.log_volume == -math.inf and math.isnan(r.elongation)

    def test_uniform_scaling(self, small_task):
        m = small_task.true_model
        for s in (0.5, 2.0, 3.0):
            a = mean_scatter(m)
            b = mean_scatter(m.with_params(m.means * s, m.variances))
            assert b.log_volume - a.log_volume == pytest.approx(m.dim * math.log(s))
            assert b.elongation == pytest.approx(a.elongation)

    def test_volume_formula(self, small_task):
        m = small_task.true_model
        r = mean_scatter(m)
        want = math.log(unit_ball_volume(m.dim)) + 0.5 * np.log(np.linalg.eigvalsh(r.scatter)).sum()
        assert r.log_volume == pytest.approx(want, abs=1e-9)
        assert r.elongation == pytest.approx(math.sqrt(r.eigenvalues[-1] / r.eigenvalues[0]))

    def test_projection_captures_extreme_variance(self, small_task):
        """Projected coordinates have the eigenvalues as their mean squares."""
        m = small_task.true_model
        r = mean_scatter(m)
        pts = np.array(project_means(m, (r.eigenvectors[:, 0], r.eigenvectors[:, -1]), r.centroid))
        np.testing.assert_allclose((pts ** 2).mean(0), [r.eigenvalues[0], r.eigenvalues[-1]], rtol=1e-9)

    def test_projection_needs_orthonormal_basis(self, small_task):
        m = small_task.true_model
        with pytest.raises(ContractError):
            project_means(m, (np.ones(m.dim), np.ones(m.dim)), np.zeros(m.dim))


class TestVarianceVolume:
    def test_halved_standard_deviation(self, small_task):
        m = small_task.true_model
        after = m.with_params(m.means, m.variances / 4.0)
        r = variance_volume_change(m, after)
        np.testing.assert_allclose(r.per_state, m.dim * math.log(0.5))
        assert r.fraction_negative == 1.0

    def test_unchanged(self, small_task):
        m = small_task.true_model
        r = variance_volume_change(m, m)
        assert np.all(r.per_state == 0.0) and r.fraction_negative == 0.0

    def test_count_floored(self, small_task):
        m = small_task.true_model
        var = m.variances.copy()
        var[0, 1] = m.floor[1]
        var[2] = m.floor
        assert count_floored(m.with_params(m.means, var)) == 1 + m.dim


class TestCompare:
    def test_self_comparison(self, small_task):
        m = small_task.true_model
        c = compare_models(m, m)
        assert c.log_volume_ratio == 0.0
        assert np.all(c.volume.per_state == 0.0)
        assert c.n_components == m.variances.size

    def test_doubled_means(self, small_task):
        m = small_task.true_model
        c = compare_models(m, m.with_params(2 * m.means, m.variances))
        assert c.log_volume_ratio == pytest.approx(m.dim * math.log(2))
