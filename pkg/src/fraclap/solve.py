"""Iterative solvers: Jacobi-preconditioned CG, geometric multigrid V-cycles,
and implicit-Euler steps for the fractional heat equation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .mesh import prolongation_matrix


class SolverError(RuntimeError):
    pass


class LinearOperatorHandle:
    """apply: x -> A x plus exact diagonal (always a near-field quantity)."""

    def __init__(self, apply, diag, n=None):
        self.apply = apply
        self._diag = np.asarray(diag, float)
        self.n = len(self._diag) if n is None else n

    @classmethod
    def from_matrix(cls, A):
        if hasattr(A, "matvec"):
            return cls(A.matvec, A.diag())
        Ad = np.asarray(A.todense()) if hasattr(A, "todense") else np.asarray(A)
        return cls(lambda x: Ad @ x, np.diag(Ad).copy())

    def diag(self):
        return self._diag


@dataclass
class SolveReport:
    iterations: int
    residual: float
    seconds: float
    converged: bool = True
    lanczos_alpha: tuple = ()
    lanczos_beta: tuple = ()


def _as_handle(op):
    return op if isinstance(op, LinearOperatorHandle) else LinearOperatorHandle.from_matrix(op)


def pcg(op, b, precond="jacobi", tol=1e-8, max_iter=None, x0=None, record_lanczos=False):
    """Conjugate gradients with optional Jacobi (diagonal) preconditioning.

    Stops when the preconditioned residual norm falls below tol * initial.
    Returns (x, SolveReport).
    """
    op = _as_handle(op)
    b = np.asarray(b, float)
    n = len(b)
    if max_iter is None:
        max_iter = int(10 * np.sqrt(n) + 100)
    if precond in (None, "none"):
        Minv = np.ones(n)
    elif precond == "jacobi":
        d = op.diag()
        if np.any(d <= 0):
            raise SolverError("nonpositive diagonal; operator not SPD")
        Minv = 1.0 / d
    else:
        Minv = np.asarray(precond, float)
    t0 = time.perf_counter()
    x = np.zeros(n) if x0 is None else np.asarray(x0, float).copy()
    r = b - op.apply(x) if x0 is not None else b.copy()
    z = Minv * r
    p = z.copy()
    rz = r @ z
    norm0 = np.sqrt(abs(rz))
    alphas, betas = [], []
    if norm0 == 0:
        return x, SolveReport(0, 0.0, time.perf_counter() - t0)
    it = 0
    converged = False
    while it < max_iter:
        Ap = op.apply(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("p^T A p <= 0: operator not SPD")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = Minv * r
        rz_new = r @ z
        it += 1
        alphas.append(alpha)
        if np.sqrt(abs(rz_new)) <= tol * norm0:
            converged = True
            rz = rz_new
            break
        beta = rz_new / rz
        betas.append(beta)
        rz = rz_new
        p = z + beta * p
    rep = SolveReport(it, float(np.sqrt(abs(rz)) / norm0), time.perf_counter() - t0,
                      converged)
    if record_lanczos:
        rep.lanczos_alpha = tuple(alphas)
        rep.lanczos_beta = tuple(betas)
    return x, rep


def estimate_extreme_eigs(op, precond=None, iters=60, seed=0):
    """Lanczos estimates of the extreme eigenvalues of M^{-1}A via CG coefficients."""
    op = _as_handle(op)
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(op.n)
    _, rep = pcg(op, b, precond=precond, tol=1e-14, max_iter=iters, record_lanczos=True)
    a = np.asarray(rep.lanczos_alpha)
    bt = np.asarray(rep.lanczos_beta)
    if len(a) == 0:
        return 1.0, 1.0
    # CG -> Lanczos tridiagonal (Saad, Iterative Methods, sec. 6.7)
    diag = np.empty(len(a))
    diag[0] = 1.0 / a[0]
    for j in range(1, len(a)):
        diag[j] = 1.0 / a[j] + bt[j - 1] / a[j - 1]
    off = np.sqrt(bt[:len(a) - 1]) / a[:len(a) - 1]
    if len(a) == 1:
        return float(diag[0]), float(diag[0])
    w = eigh_tridiagonal(diag, off, eigvals_only=True)
    return float(w[0]), float(w[-1])


# ------------------------------------------------------------------ multigrid

class MultigridHierarchy:
    """Nested uniformly refined levels; operators are per-level, prolongation is
    P1 nodal interpolation restricted to the dof sets."""

    def __init__(self, levels):
        # levels: list of dicts {op, mesh, dofmap}, coarse to fine
        self.levels = levels
        self.P = []
        for k in range(1, len(levels)):
            coarse = levels[k - 1]
            fine = levels[k]
            if fine["mesh"].parent is not coarse["mesh"]:
                raise SolverError("hierarchy must be built from nested refinements")
            Pv = prolongation_matrix(coarse["mesh"], fine["mesh"])
            rows = fine["dofmap"].dofs
            cols = coarse["dofmap"].dofs
            self.P.append(Pv[rows][:, cols].tocsr())


def multigrid_vcycle(hierarchy: MultigridHierarchy, b, tol=1e-8, max_cycles=100,
                     nu1=2, nu2=2, damping=2.0 / 3.0, x0=None):
    """Damped-Jacobi V-cycles; dense solve on the coarsest level."""
    levels = hierarchy.levels
    L = len(levels)
    ops = [_as_handle(lv["op"]) for lv in levels]
    diags = [op.diag() for op in ops]
    coarse_dense = levels[0].get("dense")
    if coarse_dense is None:
        n0 = ops[0].n
        coarse_dense = np.empty((n0, n0))
        for j in range(n0):
            e = np.zeros(n0)
            e[j] = 1.0
            coarse_dense[:, j] = ops[0].apply(e)
        levels[0]["dense"] = coarse_dense

    def smooth(level, x, rhs, rounds):
        op, d = ops[level], diags[level]
        for _ in range(rounds):
            x = x + damping * (rhs - op.apply(x)) / d
        return x

    def vcycle(level, x, rhs):
        if level == 0:
            return np.linalg.solve(coarse_dense, rhs)
        x = smooth(level, x, rhs, nu1)
        r = rhs - ops[level].apply(x)
        rc = hierarchy.P[level - 1].T @ r
        ec = vcycle(level - 1, np.zeros(len(rc)), rc)
        x = x + hierarchy.P[level - 1] @ ec
        return smooth(level, x, rhs, nu2)

    t0 = time.perf_counter()
    b = np.asarray(b, float)
    x = np.zeros(len(b)) if x0 is None else np.asarray(x0, float).copy()
    norm0 = np.linalg.norm(b)
    if norm0 == 0:
        return x, SolveReport(0, 0.0, time.perf_counter() - t0)
    cycles = 0
    res = np.linalg.norm(b - ops[-1].apply(x)) / norm0
    while res > tol and cycles < max_cycles:
        x = vcycle(L - 1, x, b)
        cycles += 1
        res = np.linalg.norm(b - ops[-1].apply(x)) / norm0
    return x, SolveReport(cycles, float(res), time.perf_counter() - t0, res <= tol)


def heat_step(M, op, dt, u_prev, f_vec, tol=1e-8, max_iter=None):
    """One implicit Euler step: (M + dt A) u = M u_prev + dt f."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    op = _as_handle(op)
    Md = M.diagonal() if hasattr(M, "diagonal") else np.diag(M)
    rhs = M @ u_prev + dt * np.asarray(f_vec, float)
    handle = LinearOperatorHandle(lambda x: M @ x + dt * op.apply(x),
                                  Md + dt * op.diag())
    x, rep = pcg(handle, rhs, precond=1.0 / Md, tol=tol, max_iter=max_iter,
                 x0=np.asarray(u_prev, float))
    return x, rep
