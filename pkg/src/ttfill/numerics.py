"""Shared numerical kernels: thin SVD, sparse SPD solves, complex-step, RNG.

All solver-facing linear algebra goes through here so the complex-step
derivative path can reuse the same solve code instantiated over complex
scalars.
"""

from __future__ import annotations

import contextlib

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def single_thread_blas():
    """Limit BLAS pools to one thread for the scope.

    The solvers issue long sequences of small factor updates and back-solves;
    multithreaded BLAS spin-waits dominate those at these sizes.
    """
    if threadpool_limits is None:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


class FactorizationError(RuntimeError):
    pass


class ComplexStepError(TypeError):
    pass


class SpdFactorization:
    """Factorization of a sparse symmetric positive-definite matrix.

    The fill-reducing permutation (reverse Cuthill-McKee) is the reusable
    symbolic stage; refactoring a matrix with the same sparsity pattern
    skips it.  The numeric stage is a SuperLU factorization of the permuted
    matrix with diagonal pivoting (symmetric mode), whose U-diagonal exposes
    the pivots for the positive-definiteness check.
    """

    def __init__(self, matrix, lu, perm):
        self.matrix = matrix
        self.lu = lu
        self.perm = perm
        self.n = matrix.shape[0]

    @property
    def dimension(self) -> int:
        return self.n


def spd_factor(A, perm=None) -> SpdFactorization:
    """Factor a sparse SPD matrix; raises FactorizationError on a bad pivot.

    ``perm`` is the reusable symbolic stage: None computes a fresh reverse
    Cuthill-McKee ordering, an index array reuses one, and "natural" factors
    the matrix as given (for callers that pre-permute).  Complex symmetric
    input (as arises from complex-step evaluation) is factored without the
    pivot sign check.
    """
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if isinstance(perm, str) and perm == "natural":
        perm = None
        Ap = A
    else:
        if perm is None:
            perm = reverse_cuthill_mckee(A, symmetric_mode=True)
        perm = np.asarray(perm, dtype=np.intc)
        Ap = A[perm, :][:, perm].tocsc()
    lu = splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    if not np.iscomplexobj(A.data):
        pivots = lu.U.diagonal()
        bad = np.flatnonzero(pivots.real <= 0)
        if bad.size:
            i = int(bad[0])
            raise FactorizationError(
                f"matrix is not positive definite: pivot {i} = {pivots[i]:.6g}")
    return SpdFactorization(A, lu, perm)


def spd_solve(F: SpdFactorization, rhs: np.ndarray) -> np.ndarray:
    """Solve F.matrix @ x = rhs, iteratively refined to ~1e-12 relative residual."""
    rhs = np.asarray(rhs)
    if rhs.shape != (F.n,):
        raise ValueError(f"rhs shape {rhs.shape} != ({F.n},)")

    if F.perm is None:
        def back_solve(v):
            return F.lu.solve(v)
    else:
        def back_solve(v):
            y = F.lu.solve(v[F.perm])
            out = np.empty_like(y)
            out[F.perm] = y
            return out

    x = back_solve(rhs)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm > 0:
        prev = np.inf
        for _ in range(3):
            r = rhs - F.matrix @ x
            r_norm = np.linalg.norm(r)
            if r_norm <= 1e-12 * rhs_norm or r_norm > 0.25 * prev:
                break  # converged, or stagnated at the conditioning floor
            x = x + back_solve(r)
            prev = r_norm
    return x


def spd_refactor(F: SpdFactorization, A) -> SpdFactorization:
    """Refactor a matrix with the same sparsity pattern, reusing the symbolic stage."""
    A = sp.csc_matrix(A)
    if A.shape != (F.n, F.n):
        raise ValueError(f"refactor shape {A.shape} != original {(F.n, F.n)}")
    return spd_factor(A, perm=F.perm)


def thin_svd(G: np.ndarray):
    """Thin SVD: G = U @ diag(s) @ Vt, singular values non-increasing."""
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise ValueError("SVD input must be finite")
    try:
        return np.linalg.svd(G, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails to converge; gesvd is slower but sturdier
        return scipy.linalg.svd(G, full_matrices=False, lapack_driver="gesvd")


def complex_step(f, x: float, h: float = 1e-20) -> float:
    """Cancellation-free derivative Im(f(x + i*h)) / h for analytic f."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    try:
        val = f(complex(x) + 1j * h)
    except TypeError as e:
        raise ComplexStepError(f"function not evaluable in complex arithmetic: {e}") from e
    return float(np.imag(val)) / h


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_uniform(rng: np.random.Generator, lo: float, hi: float, size=None):
    if lo > hi:
        raise ValueError(f"uniform bounds out of order: [{lo}, {hi}]")
    return rng.uniform(lo, hi, size)


def rng_gaussian(rng: np.random.Generator, mean: float, std: float, size=None):
    if std < 0:
        raise ValueError(f"standard deviation must be nonnegative, got {std}")
    return rng.normal(mean, std, size)


__all__ = [
    "FactorizationError", "ComplexStepError", "SpdFactorization",
    "spd_factor", "spd_solve", "spd_refactor", "thin_svd", "complex_step",
    "make_rng", "rng_uniform", "rng_gaussian",
]
