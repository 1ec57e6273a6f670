"""Sampling and smoothing operators on matricized residual data.

Vectorization convention: a matrix of shape (n_rows, n_cols) is flattened
column major (Fortran order), so the linear index of entry (i, j) is
``i + j * n_rows``.  All operators below act on that vectorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import DimensionError, MatricizedView, ReceiverGrid, SamplingMask
from .numerics import SpdFactorization, spd_factor, spd_refactor, spd_solve


def vec(X: np.ndarray) -> np.ndarray:
    return np.asarray(X).ravel(order="F")


def unvec(w: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return np.asarray(w).reshape(shape, order="F")


class SamplingOperator:
    """Entry selection operator for a fixed matricized layout.

    ``observed_indices`` are strictly increasing linear (column-major)
    matrix indices; apply/adjoint form the orthogonal projector onto the
    observed coordinates.
    """

    def __init__(self, observed_indices: np.ndarray, shape: tuple[int, int]):
        idx = np.asarray(observed_indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and np.any(np.diff(idx) <= 0)):
            raise ValueError("observed indices must be strictly increasing")
        if idx.size and (idx[0] < 0 or idx[-1] >= shape[0] * shape[1]):
            raise ValueError("observed index out of range")
        self.observed_indices = idx
        self.shape = tuple(shape)

    @classmethod
    def from_mask(cls, view: MatricizedView, mask: SamplingMask) -> "SamplingOperator":
        flags_mat = view.map_tensor(mask.flags)
        idx = np.flatnonzero(flags_mat.ravel(order="F"))
        return cls(idx, view.shape)

    @property
    def count(self) -> int:
        return self.observed_indices.size

    @property
    def n(self) -> int:
        return self.shape[0] * self.shape[1]

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.shape != self.shape:
            raise DimensionError(f"matrix shape {X.shape} != operator shape {self.shape}")
        return X.ravel(order="F")[self.observed_indices]

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if y.shape != (self.count,):
            raise DimensionError(f"vector length {y.shape} != observed count {self.count}")
        w = np.zeros(self.n, dtype=y.dtype)
        w[self.observed_indices] = y
        return w.reshape(self.shape, order="F")

    def gather(self, w: np.ndarray) -> np.ndarray:
        """Observed entries of a vectorized variable."""
        return np.asarray(w)[self.observed_indices]

    def scatter_vec(self, y: np.ndarray) -> np.ndarray:
        """Adjoint on the vectorized variable."""
        w = np.zeros(self.n, dtype=np.asarray(y).dtype)
        w[self.observed_indices] = y
        return w

    def diagonal(self) -> np.ndarray:
        """Diagonal of A^T A: ones at observed linear indices."""
        d = np.zeros(self.n)
        d[self.observed_indices] = 1.0
        return d


def apply_sampling(op: SamplingOperator, X: np.ndarray) -> np.ndarray:
    return op.apply(X)


def apply_sampling_adjoint(op: SamplingOperator, y: np.ndarray) -> np.ndarray:
    return op.apply_adjoint(y)


@dataclass(frozen=True)
class MaskedData:
    """Observed values b paired with the sampling operator that extracts them."""

    b: np.ndarray
    sampler: SamplingOperator

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        if b.shape != (self.sampler.count,):
            raise DimensionError(f"b length {b.shape} != observed count {self.sampler.count}")
        if self.sampler.count < 1:
            raise ValueError("solver input needs at least one observed entry")
        object.__setattr__(self, "b", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.sampler.shape


class SmoothingOperator:
    """Per-source 2D Laplacian stencil on the vectorized matricized variable.

    One row per gridpoint per source: -deg at the point and +1 at each of its
    existing N/S/E/W neighbors within the same source's receiver grid (Neumann
    style boundary, so per-source constants are in the kernel).
    """

    def __init__(self, rows: sp.spmatrix, edge_count: int):
        self.rows = rows.tocsr()
        self.edge_count = edge_count
        self._gram = None

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    def apply(self, w: np.ndarray) -> np.ndarray:
        return self.rows @ np.asarray(w)

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.rows.T @ np.asarray(y)

    def gram(self) -> sp.csc_matrix:
        """Cached L^T L."""
        if self._gram is None:
            self._gram = (self.rows.T @ self.rows).tocsc()
            self._gram.sort_indices()
        return self._gram


def build_laplacian(grid: ReceiverGrid, view: MatricizedView) -> SmoothingOperator:
    """Assemble the per-source Laplacian for the view's vectorized layout.

    The stencil follows the index map back to physical (p, q) neighbors, so
    in the block layout it never couples matrix-adjacent blocks.
    """
    nx, ny, n_s = view.tensor_shape
    if (nx, ny) != (grid.nx, grid.ny):
        raise DimensionError(f"view tensor shape {(nx, ny)} != grid {(grid.nx, grid.ny)}")
    n_rows_mat = view.shape[0]
    lin = view.rows + view.cols * n_rows_mat
    n = view.shape[0] * view.shape[1]

    ri, ci, vals = [], [], []
    deg = np.zeros((nx, ny, n_s), dtype=float)
    shifts = [((slice(0, nx - 1), slice(None)), (slice(1, nx), slice(None))),
              ((slice(1, nx), slice(None)), (slice(0, nx - 1), slice(None))),
              ((slice(None), slice(0, ny - 1)), (slice(None), slice(1, ny))),
              ((slice(None), slice(1, ny)), (slice(None), slice(0, ny - 1)))]
    for center_sl, neigh_sl in shifts:
        c = lin[center_sl + (slice(None),)]
        nb = lin[neigh_sl + (slice(None),)]
        ri.append(c.ravel())
        ci.append(nb.ravel())
        vals.append(np.ones(c.size))
        deg[center_sl + (slice(None),)] += 1.0
    ri.append(lin.ravel())
    ci.append(lin.ravel())
    vals.append(-deg.ravel())

    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))),
                        shape=(n, n)).tocsr()
    return SmoothingOperator(mat, edge_count=nx * ny * n_s)


class NormalSystem:
    """Sparse SPD system M(lam) = (1/gamma) L^T L + rho I + lam A^T A.

    The lambda-independent part is assembled once; the symbolic factorization
    stage is computed on first use and reused across lambda and rho changes.
    Without a smoothing operator the system is diagonal and solved entrywise.
    """

    def __init__(self, gram, a_diag: np.ndarray, gamma: float, rho: float, symbolic=None):
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if rho <= 0:
            raise ValueError(f"rho must be positive, got {rho}")
        self.gamma = float(gamma)
        self.rho = float(rho)
        self.a_diag = np.asarray(a_diag, dtype=float)
        self.n = self.a_diag.size
        self._gram = gram
        if gram is None:
            self._base = None
        else:
            base = (gram * (1.0 / gamma) + rho * sp.identity(self.n, format="csc")).tocsc()
            base.sort_indices()
            self._base = base
        self._a_mat = sp.diags(self.a_diag, format="csc")
        self._symbolic = symbolic  # fill-reducing permutation, shared across rho changes
        self._permuted = None  # (base in permuted order, its diagonal data positions, permuted a_diag)
        # root finding revisits lambda values (0, and the warm start between
        # outer iterations); keep a handful of numeric factorizations around
        self._facts: dict[float, SpdFactorization] = {}
        self._facts_cap = 6

    def _permuted_base(self):
        """Base matrix pre-permuted by the cached fill-reducing ordering, with
        the data positions of its diagonal entries (present for every index
        since rho > 0)."""
        if self._permuted is None:
            if self._symbolic is None:
                from scipy.sparse.csgraph import reverse_cuthill_mckee
                self._symbolic = np.asarray(reverse_cuthill_mckee(self._base, symmetric_mode=True))
            perm = self._symbolic
            base_p = self._base[perm, :][:, perm].tocsc()
            base_p.sort_indices()
            coo = base_p.tocoo()
            diag_pos = np.flatnonzero(coo.row == coo.col)
            self._permuted = (base_p, diag_pos, self.a_diag[perm])
        return self._permuted

    @property
    def is_diagonal(self) -> bool:
        return self._base is None

    def assemble(self, lam: float, dtype=float):
        """M(lam) as a sparse matrix (diagonal systems return a dia matrix)."""
        if (lam.real if np.iscomplexobj(lam) else lam) < 0:
            raise ValueError(f"lambda must be nonnegative, got {lam}")
        if self.is_diagonal:
            return sp.diags(self.rho + lam * self.a_diag.astype(dtype))
        M = self._base.astype(dtype) + lam * self._a_mat.astype(dtype)
        return M.tocsc()

    def _factor_permuted(self, lam, dtype=float) -> SpdFactorization:
        """Numeric factorization in the permuted order: only the diagonal data
        changes with lam, so assembly is a data copy plus a scatter-add."""
        base_p, diag_pos, adiag_p = self._permuted_base()
        data = base_p.data.astype(dtype, copy=True)
        data[diag_pos] = data[diag_pos] + lam * adiag_p
        M_p = sp.csc_matrix((data, base_p.indices, base_p.indptr), shape=base_p.shape)
        return spd_factor(M_p, perm="natural")

    def solve(self, lam, rhs: np.ndarray) -> np.ndarray:
        """Solve M(lam) w = rhs; lam may be complex for complex-step paths."""
        rhs = np.asarray(rhs)
        is_complex = np.iscomplexobj(lam) or np.iscomplexobj(rhs)
        if self.is_diagonal:
            return rhs / (self.rho + lam * self.a_diag)
        if is_complex:
            fact = self._factor_permuted(lam, dtype=complex)
        else:
            lam = float(lam)
            fact = self._facts.get(lam)
            if fact is None:
                fact = self._factor_permuted(lam)
                if len(self._facts) >= self._facts_cap:
                    for key in list(self._facts):
                        if key != 0.0:  # the lam = 0 factor is reused every W update
                            del self._facts[key]
                            break
                self._facts[lam] = fact
        perm = self._symbolic
        xp = spd_solve(fact, rhs[perm].astype(complex) if is_complex else rhs[perm])
        x = np.empty_like(xp)
        x[perm] = xp
        return x

    def with_rho(self, rho: float) -> "NormalSystem":
        """Same operators with a new coupling weight; reuses the symbolic stage."""
        return NormalSystem(self._gram, self.a_diag, self.gamma, rho, symbolic=self._symbolic)


def build_normal_system(smoother: SmoothingOperator | None, sampler: SamplingOperator,
                        gamma: float, rho: float) -> NormalSystem:
    gram = smoother.gram() if smoother is not None else None
    return NormalSystem(gram, sampler.diagonal(), gamma, rho)


def spectral_norm(apply_fn, n: int, iters: int = 2000, tol: float = 1e-10):
    """Power-iteration estimate of the largest eigenvalue of a symmetric PSD map.

    Deterministic (all-ones start).  Returns (estimate, converged); a False
    flag means the tolerance was not met within the iteration budget.
    """
    v = np.ones(n) / np.sqrt(n)
    est = 0.0
    for _ in range(iters):
        w = apply_fn(v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, True
        new_est = float(v @ w)  # Rayleigh quotient
        v = w / nw
        if abs(new_est - est) <= tol * max(abs(new_est), 1e-300):
            return new_est, True
        est = new_est
    return est, False


__all__ = [
    "vec", "unvec", "SamplingOperator", "apply_sampling", "apply_sampling_adjoint",
    "MaskedData", "SmoothingOperator", "build_laplacian", "NormalSystem",
    "build_normal_system", "spectral_norm",
]
