import numpy as np
import pytest
import scipy.sparse as sp

from ttfill.numerics import (ComplexStepError, FactorizationError, complex_step,
                             make_rng, rng_gaussian, rng_uniform, spd_factor,
                             spd_refactor, spd_solve, thin_svd)


def random_spd(n, seed, sparse=False):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    M = A.T @ A + np.eye(n)
    return sp.csc_matrix(M) if sparse else M


class TestThinSvd:
    def test_identity(self):
        U, s, Vt = thin_svd(np.eye(3))
        assert np.allclose(s, 1.0)

    def test_rank_one(self):
        u = np.array([1.0, 2.0])
        v = np.array([3.0, 4.0, 0.0])
        U, s, Vt = thin_svd(np.outer(u, v))
        assert s[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))
        assert s[1] == pytest.approx(0.0, abs=1e-12)

    def test_reconstruction_and_orthogonality(self):
        rng = np.random.default_rng(1)
        G = rng.normal(size=(5, 4))
        U, s, Vt = thin_svd(G)
        assert np.linalg.norm(G - (U * s) @ Vt) <= 1e-10 * np.linalg.norm(G)
        assert np.allclose(U.T @ U, np.eye(4), atol=1e-10)
        assert np.all(np.diff(s) <= 1e-15)

    def test_permutation_invariant_singular_values(self):
        rng = np.random.default_rng(2)
        G = rng.normal(size=(6, 5))
        _, s1, _ = thin_svd(G)
        _, s2, _ = thin_svd(G[rng.permutation(6)][:, rng.permutation(5)])
        assert np.allclose(s1, s2, atol=1e-12)


class TestSpdSolve:
    def test_identity(self):
        F = spd_factor(sp.identity(4, format="csc"))
        rhs = np.arange(4.0)
        assert np.allclose(spd_solve(F, rhs), rhs)

    def test_diagonal(self):
        F = spd_factor(sp.diags([2.0, 4.0]).tocsc())
        assert np.allclose(spd_solve(F, np.array([2.0, 8.0])), [1.0, 2.0])

    def test_matches_dense_solve(self):
        A = random_spd(20, 3)
        rhs = np.random.default_rng(4).normal(size=20)
        x = spd_solve(spd_factor(sp.csc_matrix(A)), rhs)
        assert np.linalg.norm(x - np.linalg.solve(A, rhs)) <= 1e-10 * np.linalg.norm(rhs)

    def test_backward_error_on_random_instances(self):
        for seed in range(100):
            n = 5 + seed % 12
            A = sp.csc_matrix(random_spd(n, seed))
            F = spd_factor(A)
            rhs = np.random.default_rng(1000 + seed).normal(size=n)
            x = spd_solve(F, rhs)
            assert np.linalg.norm(A @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_non_spd_names_pivot(self):
        A = sp.csc_matrix(np.diag([1.0, -2.0, 3.0]))
        with pytest.raises(FactorizationError, match="pivot"):
            spd_factor(A)

    def test_refactor_reuses_symbolic(self):
        A = sp.csc_matrix(random_spd(15, 7))
        F = spd_factor(A)
        A2 = A + sp.identity(15, format="csc") * 0.0  # same pattern
        A2 = (A2 * 2.0).tocsc()
        F2 = spd_refactor(F, A2)
        assert F2.perm is F.perm or np.array_equal(F2.perm, F.perm)
        rhs = np.ones(15)
        assert np.allclose(A2 @ spd_solve(F2, rhs), rhs, atol=1e-9)

    def test_complex_symmetric_solve(self):
        A = sp.csc_matrix(random_spd(8, 9)).astype(complex)
        A = A + 1e-3j * sp.identity(8, format="csc")
        F = spd_factor(A.tocsc())
        rhs = np.random.default_rng(5).normal(size=8) + 0j
        x = spd_solve(F, rhs)
        assert np.linalg.norm(A @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)


class TestComplexStep:
    def test_square(self):
        assert complex_step(lambda x: x * x, 3.0) == pytest.approx(6.0, rel=1e-15)

    def test_exp(self):
        assert complex_step(np.exp, 0.0) == pytest.approx(1.0, rel=1e-15)

    def test_polynomial_exact(self):
        def f(x):
            return 2 * x ** 3 - 4 * x + 1
        for x in (0.3, -1.7, 2.0):
            want = 6 * x ** 2 - 4
            assert complex_step(f, x) == pytest.approx(want, rel=1e-14)

    def test_unsupported_function(self):
        def f(x):
            if isinstance(x, complex):
                raise TypeError("real only")
            return x
        with pytest.raises(ComplexStepError):
            complex_step(f, 1.0)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            complex_step(lambda x: x, 1.0, h=0.0)


class TestRng:
    def test_determinism(self):
        a = rng_uniform(make_rng(123), 0.0, 1.0, 10)
        b = rng_uniform(make_rng(123), 0.0, 1.0, 10)
        assert np.array_equal(a, b)

    def test_zero_std_returns_mean(self):
        assert rng_gaussian(make_rng(1), 5.0, 0.0) == 5.0

    def test_gaussian_sample_mean(self):
        n = 100_000
        draws = rng_gaussian(make_rng(77), 2.0, 3.0, n)
        assert abs(draws.mean() - 2.0) <= 4 * 3.0 / np.sqrt(n)

    def test_uniform_bounds(self):
        draws = rng_uniform(make_rng(8), -1.0, 2.0, 1000)
        assert draws.min() >= -1.0 and draws.max() <= 2.0
        with pytest.raises(ValueError):
            rng_uniform(make_rng(8), 2.0, 1.0)
