"""Solvers for the diffusion system (I - alpha S) f = (1 - alpha) y.

Conjugate gradient is the workhorse; the fixed-point diffusion iteration (a Jacobi
sweep on the same system) and a dense Cholesky solve serve as reference methods.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .core import CapabilityError, InputError
from .graph import NormalizedGraph, SparseAffinity

METHODS = ("cg", "jacobi_iteration", "dense_direct")
DENSE_CAP = 2000


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 50
    rel_tol: float = 1e-6
    method: str = "cg"

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if not 0 < self.rel_tol < 1:
            raise InputError("rel_tol must lie in (0, 1)")
        if self.method not in METHODS:
            raise InputError(f"unknown solver method {self.method!r}; expected one of {METHODS}")


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations_used: int
    final_relative_residual: float
    converged: bool
    residual_history: list = field(default_factory=list, repr=False)
    elapsed_ms: float = 0.0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations_used,
            "residual": self.final_relative_residual,
            "converged": self.converged,
        }


def _as_dense_y(y, n: int) -> np.ndarray:
    if hasattr(y, "to_dense"):
        y = y.to_dense()
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise InputError(f"query vector has shape {y.shape}, expected ({n},)")
    if not np.all(np.isfinite(y)):
        raise InputError("query vector has non-finite entries")
    if (y < 0).any():
        raise InputError("query vector must be nonnegative")
    return y


def apply_system(g: NormalizedGraph, v: np.ndarray) -> np.ndarray:
    """(I - alpha S) v using only the sparse S."""
    return v - g.alpha * (g.s_matrix @ v)


def relative_residual(g: NormalizedGraph, f: np.ndarray, y) -> float:
    b = (1.0 - g.alpha) * _as_dense_y(y, g.n)
    nb = np.linalg.norm(b)
    if nb == 0:
        return float(np.linalg.norm(f))
    return float(np.linalg.norm(apply_system(g, f) - b) / nb)


def conjugate_gradient(matvec, b: np.ndarray, rel_tol: float, max_iters: int):
    """Plain CG from x0 = 0. Returns (x, iterations, rel_residual, converged, history)."""
    x = np.zeros_like(b)
    nb = np.linalg.norm(b)
    if nb == 0:
        return x, 0, 0.0, True, [0.0]
    r = b.copy()
    p = r.copy()
    rr = r @ r
    history = [1.0]
    for it in range(1, max_iters + 1):
        Ap = matvec(p)
        pAp = p @ Ap
        if not pAp > 0:
            # breakdown: impossible for a positive-definite system in exact arithmetic
            return x, it - 1, history[-1], False, history
        step = rr / pAp
        x += step * p
        r -= step * Ap
        rr_new = r @ r
        rel = float(np.sqrt(rr_new) / nb)
        history.append(rel)
        if rel <= rel_tol:
            return x, it, rel, True, history
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, max_iters, history[-1], False, history


def solve_cg(g: NormalizedGraph, y, opts: SolveOptions = SolveOptions()) -> SolveReport:
    y = _as_dense_y(y, g.n)
    t0 = time.perf_counter()
    b = (1.0 - g.alpha) * y
    f, iters, rel, ok, hist = conjugate_gradient(lambda v: apply_system(g, v), b, opts.rel_tol, opts.max_iters)
    return SolveReport(f, iters, rel, ok, hist, 1e3 * (time.perf_counter() - t0))


def solve_jacobi_iteration(g: NormalizedGraph, y, opts: SolveOptions = SolveOptions()) -> SolveReport:
    """f <- alpha S f + (1 - alpha) y from f = y, stopped on relative update size."""
    y = _as_dense_y(y, g.n)
    t0 = time.perf_counter()
    b = (1.0 - g.alpha) * y
    f = y.copy()
    history = []
    converged = not y.any()
    iters = 0
    while not converged and iters < opts.max_iters:
        iters += 1
        f_new = g.alpha * (g.s_matrix @ f) + b
        nf = np.linalg.norm(f_new)
        update = np.linalg.norm(f_new - f) / nf if nf > 0 else 0.0
        f = f_new
        history.append(float(update))
        converged = update <= opts.rel_tol
    if not y.any():
        f = np.zeros_like(y)
    rel = relative_residual(g, f, y)
    return SolveReport(f, iters, rel, converged, history, 1e3 * (time.perf_counter() - t0))


def solve_dense_direct(g: NormalizedGraph, y, cap: int = DENSE_CAP) -> np.ndarray:
    """Cholesky solve of the full system; reference solution for the iterative methods."""
    if g.n > cap:
        raise CapabilityError(f"dense solve refused for n={g.n} > cap {cap}; use the cg solver")
    y = _as_dense_y(y, g.n)
    L = np.eye(g.n) - g.alpha * g.s_matrix.toarray()
    return scipy.linalg.solve(L, (1.0 - g.alpha) * y, assume_a="pos")


def solve_dense_report(g: NormalizedGraph, y, cap: int = DENSE_CAP) -> SolveReport:
    t0 = time.perf_counter()
    f = solve_dense_direct(g, y, cap)
    return SolveReport(f, 1, relative_residual(g, f, y), True, [], 1e3 * (time.perf_counter() - t0))


def solve_unnormalized(a: SparseAffinity, alpha: float, y, opts: SolveOptions = SolveOptions()) -> SolveReport:
    """CG on (D - alpha A) g = (1 - alpha) D^1/2 y without scaling, then f = D^1/2 g.

    Gives the same f as solve_cg on the normalized graph; the normalized system is
    this one under diagonal (Jacobi) preconditioning.
    """
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie strictly in (0, 1), got {alpha}")
    y = _as_dense_y(y, a.n)
    t0 = time.perf_counter()
    deg = a.degrees()
    live = np.flatnonzero(deg > 0)
    f = (1.0 - alpha) * y
    A = a.matrix[live][:, live] if live.size < a.n else a.matrix
    d = deg[live]
    L = sp.diags(d) - alpha * A
    sqrt_d = np.sqrt(d)
    b = (1.0 - alpha) * sqrt_d * y[live]
    g, iters, rel, ok, hist = conjugate_gradient(lambda v: L @ v, b, opts.rel_tol, opts.max_iters)
    f[live] = sqrt_d * g
    return SolveReport(f, iters, rel, ok, hist, 1e3 * (time.perf_counter() - t0))


def solve(g: NormalizedGraph, y, opts: SolveOptions = SolveOptions(), dense_cap: int = DENSE_CAP) -> SolveReport:
    if opts.method == "cg":
        return solve_cg(g, y, opts)
    if opts.method == "jacobi_iteration":
        return solve_jacobi_iteration(g, y, opts)
    return solve_dense_report(g, y, dense_cap)
