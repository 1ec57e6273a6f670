"""Comparison solvers: FISTA on the nuclear-norm penalized objective, L-BFGS
on the smooth factorized objective, and the misfit-constrained smoothing-only
solver."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .numerics import single_thread_blas, thin_svd
from .operators import (MaskedData, NormalSystem, SmoothingOperator, spectral_norm,
                        unvec, vec)
from .relaxation import (IterationRecord, FactorPair, SolveResult, init_factors,
                         root_find_lambda)

# power-iteration estimates converge from below; pad so 1/estimate stays a
# valid majorization step
_STEP_SAFETY = 1.0 + 1e-6


@dataclass
class FistaConfig:
    lambda_fit: float = 2.2222e-4
    gamma: float = 6.45e-7
    step: float = 0.0  # 0 = auto via the combined-operator spectral norm
    max_iters: int = 1500
    iterate_tol: float = 1e-10

    def validate(self) -> None:
        if self.lambda_fit <= 0:
            raise ValueError(f"lambda_fit must be positive, got {self.lambda_fit}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.step < 0:
            raise ValueError(f"step must be nonnegative, got {self.step}")
        if self.max_iters < 1 or self.iterate_tol <= 0:
            raise ValueError("iteration limit / tolerance out of range")


@dataclass
class LbfgsConfig:
    lambda_fit: float = 1.1111e-4
    gamma: float = 6.45e-7
    rank_k: int = 40
    memory: int = 10
    max_iters: int = 1500
    grad_tol: float = 1e-8
    iterate_tol: float = 1e-10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9

    def validate(self) -> None:
        if self.lambda_fit < 0:
            raise ValueError(f"lambda_fit must be nonnegative, got {self.lambda_fit}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.rank_k < 1 or self.memory < 1:
            raise ValueError("rank_k and memory must be >= 1")
        if not (0 < self.wolfe_c1 < self.wolfe_c2 < 1):
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.wolfe_c1}, c2={self.wolfe_c2}")
        if self.max_iters < 1 or self.grad_tol <= 0 or self.iterate_tol <= 0:
            raise ValueError("iteration limit / tolerances out of range")


def svt(G: np.ndarray, alpha: float) -> np.ndarray:
    """Singular value thresholding: prox of alpha * nuclear norm at G."""
    if alpha < 0:
        raise ValueError(f"threshold must be nonnegative, got {alpha}")
    U, s, Vt = thin_svd(G)
    s_thr = np.maximum(s - alpha, 0.0)
    return (U * s_thr) @ Vt


def laplacian_step_size(smoother: SmoothingOperator, iters: int = 5000,
                        tol: float = 1e-12) -> float:
    """The caption variant of the FISTA step: reciprocal of ||Lap||_2^2."""
    gram = smoother.gram()
    est, _ = spectral_norm(lambda v: gram @ v, smoother.n, iters=iters, tol=tol)
    return 1.0 / (est * _STEP_SAFETY)


def fista_solve(obs: MaskedData, config: FistaConfig,
                smoother: SmoothingOperator | None = None,
                check_majorization: bool = False) -> SolveResult:
    """Accelerated proximal gradient on

        lambda_fit/2 ||A(X) - b||^2 + 1/(2 gamma) ||Lap(X)||^2 + ||X||_*

    with momentum t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2 and no restarts.
    """
    config.validate()
    with single_thread_blas():
        return _fista_body(obs, config, smoother, check_majorization)


def _fista_body(obs, config, smoother, check_majorization) -> SolveResult:
    sampler = obs.sampler
    b = obs.b
    shape = sampler.shape
    lam_fit = config.lambda_fit
    inv_gamma = 1.0 / config.gamma if smoother is not None else 0.0
    gram = smoother.gram() if smoother is not None else None
    atb = sampler.scatter_vec(b)

    def smooth_grad(x: np.ndarray) -> np.ndarray:
        g = lam_fit * (sampler.scatter_vec(sampler.gather(x)) - atb)
        if gram is not None:
            g = g + inv_gamma * (gram @ x)
        return g

    def smooth_val(x: np.ndarray) -> float:
        r = sampler.gather(x) - b
        val = 0.5 * lam_fit * float(r @ r)
        if smoother is not None:
            lx = smoother.apply(x)
            val += 0.5 * inv_gamma * float(lx @ lx)
        return val

    if config.step > 0:
        alpha = config.step
    else:
        def op(v):
            out = lam_fit * sampler.scatter_vec(sampler.gather(v))
            if gram is not None:
                out = out + inv_gamma * (gram @ v)
            return out
        est, ok = spectral_norm(op, sampler.n, iters=5000, tol=1e-12)
        if not ok:
            warnings.warn("spectral norm estimate did not converge; step may be loose")
        alpha = 1.0 / (est * _STEP_SAFETY)

    X = sampler.apply_adjoint(b)
    X_prev = X.copy()
    t_prev, t = 1.0, 1.0
    history: list[IterationRecord] = []
    converged = False
    t0 = time.monotonic()

    for it in range(1, config.max_iters + 1):
        Y = X + ((t_prev - 1.0) / t) * (X - X_prev)
        y = vec(Y)
        g = smooth_grad(y)
        G = unvec(y - alpha * g, shape)
        U, s, Vt = thin_svd(G)
        s_thr = np.maximum(s - alpha, 0.0)
        X_next = (U * s_thr) @ Vt

        if check_majorization:
            x_next = vec(X_next)
            diff = x_next - y
            bound = smooth_val(y) + float(g @ diff) + 0.5 / alpha * float(diff @ diff)
            actual = smooth_val(x_next)
            if actual > bound + 1e-9 * max(1.0, abs(bound)):
                raise RuntimeError(
                    f"majorization violated at iteration {it}: {actual!r} > {bound!r}")

        misfit = float(np.linalg.norm(sampler.gather(vec(X_next)) - b))
        obj = smooth_val(vec(X_next)) + float(np.sum(s_thr))
        history.append(IterationRecord(it, obj, misfit, 0.0, time.monotonic() - t0))

        delta = float(np.linalg.norm(X_next - X))
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        X_prev, X = X, X_next
        t_prev, t = t, t_next
        if delta < config.iterate_tol:
            converged = True
            break

    terminal = history[-1].misfit  # penalized method: reported against sigma = 0
    return SolveResult(W=X, factors=None, history=history, terminal_feasibility=terminal,
                       iterations=len(history), converged=converged, sigma=0.0,
                       extras={"step": alpha})


def lbfgs_objective_grad(L: np.ndarray, R: np.ndarray, obs: MaskedData,
                         config: LbfgsConfig, smoother: SmoothingOperator | None = None):
    """Value and gradients of the smooth factorized objective

        lambda_fit/2 ||A(LR^T) - b||^2 + 1/(2 gamma) ||Lap(LR^T)||^2
            + 1/2 ||L||_F^2 + 1/2 ||R||_F^2.
    """
    sampler = obs.sampler
    X = L @ R.T
    x = vec(X)
    r = sampler.gather(x) - obs.b
    val = 0.5 * config.lambda_fit * float(r @ r)
    val += 0.5 * (float(np.sum(L * L)) + float(np.sum(R * R)))
    P = unvec(config.lambda_fit * sampler.scatter_vec(r), sampler.shape)
    if smoother is not None:
        gram = smoother.gram()
        sx = gram @ x
        val += 0.5 / config.gamma * float(x @ sx)
        P = P + unvec(sx / config.gamma, sampler.shape)
    grad_L = P @ R + L
    grad_R = P.T @ L + R
    return val, grad_L, grad_R


def lbfgs_solve(obs: MaskedData, config: LbfgsConfig,
                smoother: SmoothingOperator | None = None,
                iterate_hook=None) -> SolveResult:
    """Two-loop-recursion L-BFGS with strong Wolfe line search on the stacked
    variable [vec(L); vec(R)]; falls back to a damped gradient step when the
    line search fails."""
    config.validate()
    with single_thread_blas():
        return _lbfgs_body(obs, config, smoother, iterate_hook)


def _lbfgs_body(obs, config, smoother, iterate_hook) -> SolveResult:
    sampler = obs.sampler
    n_rows, n_cols = sampler.shape
    W0 = sampler.apply_adjoint(obs.b)
    L0, R0, _ = init_factors(W0, config.rank_k)
    k = L0.shape[1]
    nL = n_rows * k

    def split(x):
        return x[:nL].reshape(n_rows, k), x[nL:].reshape(n_cols, k)

    def fun(x):
        L, R = split(x)
        val, _, _ = lbfgs_objective_grad(L, R, obs, config, smoother)
        return val

    def grad(x):
        L, R = split(x)
        _, gL, gR = lbfgs_objective_grad(L, R, obs, config, smoother)
        return np.concatenate([gL.ravel(), gR.ravel()])

    x = np.concatenate([L0.ravel(), R0.ravel()])
    fval = fun(x)
    g = grad(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    history: list[IterationRecord] = []
    converged = False
    failed = False
    message = ""
    t0 = time.monotonic()

    for it in range(1, config.max_iters + 1):
        # two-loop recursion applied to -g gives the search direction directly
        q = -g
        alphas = []
        for s_i, y_i in zip(reversed(s_hist), reversed(y_hist)):
            a_i = float(s_i @ q) / float(y_i @ s_i)
            q = q - a_i * y_i
            alphas.append(a_i)
        if s_hist:
            gamma0 = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
            q = gamma0 * q
        for (s_i, y_i), a_i in zip(zip(s_hist, y_hist), reversed(alphas)):
            b_i = float(y_i @ q) / float(y_i @ s_i)
            q = q + (a_i - b_i) * s_i
        p = q
        if float(g @ p) >= 0:  # not a descent direction; reset
            p = -g

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ls = scipy.optimize.line_search(fun, grad, x, p, gfk=g, old_fval=fval,
                                            c1=config.wolfe_c1, c2=config.wolfe_c2,
                                            maxiter=40)
        alpha = ls[0]
        if alpha is None:
            warnings.warn(f"Wolfe line search failed at iteration {it}; "
                          "taking a backtracked gradient step")
            p = -g
            alpha = 1.0 / max(1.0, float(np.linalg.norm(g)))
            gg = float(g @ g)
            while alpha > 1e-16 and fun(x + alpha * p) > fval - config.wolfe_c1 * alpha * gg:
                alpha *= 0.5
            if alpha <= 1e-16:
                failed = True
                message = f"line search stalled at iteration {it}"
                break

        x_new = x + alpha * p
        g_new = grad(x_new)
        fval_new = fun(x_new)
        s_vec = x_new - x
        y_vec = g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > config.memory:
                s_hist.pop(0)
                y_hist.pop(0)

        x, g, fval = x_new, g_new, fval_new
        L, R = split(x)
        if iterate_hook is not None:
            iterate_hook(it, L, R)
        misfit = float(np.linalg.norm(sampler.gather(vec(L @ R.T)) - obs.b))
        history.append(IterationRecord(it, fval, misfit, 0.0, time.monotonic() - t0))
        if float(np.linalg.norm(g)) <= config.grad_tol:
            converged = True
            break
        if float(np.linalg.norm(s_vec)) < config.iterate_tol:
            converged = True
            break

    L, R = split(x)
    W = L @ R.T
    terminal = history[-1].misfit if history else float(np.linalg.norm(obs.b))
    return SolveResult(W=W, factors=FactorPair(L, R), history=history,
                       terminal_feasibility=terminal, iterations=len(history),
                       converged=converged, sigma=0.0, failed=failed, message=message)


def smoothing_only_solve(obs: MaskedData, sigma: float, smoother: SmoothingOperator,
                         newton_tol: float = 1e-9, newton_max: int = 100,
                         lambda_init: float = 1.0, deriv_mode: str = "analytic") -> SolveResult:
    """min ||Lap(W)||^2 s.t. ||A(W) - b|| <= sigma, via the same root finding
    as the relaxation W update with the coupling target at zero.

    Lap^T Lap is singular (constants); a 1e-10 ridge keeps the penalized
    system positive definite.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    sampler = obs.sampler
    with single_thread_blas():
        system = NormalSystem(smoother.gram(), sampler.diagonal(), gamma=1.0, rho=1e-10)
        d = np.zeros(sampler.n)
        t0 = time.monotonic()
        root = root_find_lambda(system, d, obs.b, sampler, sigma, lambda_init=lambda_init,
                                newton_tol=newton_tol, newton_max=newton_max,
                                deriv_mode=deriv_mode)
        W = unvec(root.w, sampler.shape)
        lw = smoother.apply(root.w)
        history = [IterationRecord(1, float(lw @ lw), root.misfit, 0.0,
                                   time.monotonic() - t0)]
    return SolveResult(W=W, factors=None, history=history,
                       terminal_feasibility=root.misfit - sigma, iterations=1,
                       converged=root.converged, sigma=sigma, failed=not root.converged,
                       message="" if root.converged else "root finding hit its iteration cap",
                       lambda_final=root.lam)


__all__ = [
    "FistaConfig", "LbfgsConfig", "svt", "laplacian_step_size", "fista_solve",
    "lbfgs_objective_grad", "lbfgs_solve", "smoothing_only_solve",
]
