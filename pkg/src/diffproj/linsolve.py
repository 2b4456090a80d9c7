"""Hand-rolled Krylov solvers and the preconditioners used by the adjoint.

All solvers take the operator as a callable (or any matrix-like object),
track the true relative residual per iteration, and return the solution
together with a SolveReport whose final entry is recomputed independently
of any internal recurrences.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class SolverConfig:
    method: str = "cg"              # cg | gmres | semi_implicit
    precond: str = "none"           # none | jacobi | sparse_inverse | woodbury
    tol: float = 1e-10
    max_iter: int = 2000
    gmres_restart: int = 50

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class SolveReport:
    residual_history: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    iterations: int = 0
    wall_time: float = 0.0


def as_apply(op):
    """Normalize matrices, SparseMat wrappers and callables to x -> Ax."""
    if callable(op) and not hasattr(op, "shape"):
        return op
    if hasattr(op, "to_scipy"):
        m = op.to_scipy()
        return lambda x: m @ x
    if sp.issparse(op):
        return lambda x: op @ x
    m = np.asarray(op, dtype=float)
    return lambda x: m @ x


def _identity(x):
    return x


def cg(op, rhs, precond=None, cfg=None):
    """Preconditioned conjugate gradients with true-residual tracking."""
    cfg = cfg or SolverConfig()
    apply_op = as_apply(op)
    apply_m = precond if precond is not None else _identity
    rhs = np.asarray(rhs, dtype=float).ravel()
    nb = np.linalg.norm(rhs)
    t0 = time.perf_counter()
    report = SolveReport()
    x = np.zeros_like(rhs)
    if nb == 0:
        report.residual_history.append(0.0)
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return x, report
    r = rhs.copy()
    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    for k in range(cfg.max_iter):
        relres = np.linalg.norm(rhs - apply_op(x)) / nb
        report.residual_history.append(relres)
        if relres <= cfg.tol:
            report.converged = True
            break
        ap = apply_op(p)
        pap = float(p @ ap)
        if pap <= 0:
            raise RuntimeError(
                f"cg breakdown: p^T A p = {pap:.3e}, operator not SPD")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = apply_m(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        relres = np.linalg.norm(rhs - apply_op(x)) / nb
        report.residual_history.append(relres)
        report.converged = relres <= cfg.tol
    report.iterations = len(report.residual_history) - 1
    report.wall_time = time.perf_counter() - t0
    return x, report


def gmres(op, rhs, precond=None, cfg=None):
    """Restarted GMRES with left preconditioning and Givens rotations.

    Stops early when a full restart cycle makes no progress (stagnation).
    """
    cfg = cfg or SolverConfig()
    apply_op = as_apply(op)
    apply_m = precond if precond is not None else _identity
    rhs = np.asarray(rhs, dtype=float).ravel()
    n = rhs.shape[0]
    m = min(cfg.gmres_restart, n)
    nb = np.linalg.norm(rhs)
    t0 = time.perf_counter()
    report = SolveReport()
    x = np.zeros_like(rhs)
    if nb == 0:
        report.residual_history.append(0.0)
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return x, report

    total = 0
    while total < cfg.max_iter:
        r = rhs - apply_op(x)
        relres = np.linalg.norm(r) / nb
        report.residual_history.append(relres)
        if relres <= cfg.tol:
            report.converged = True
            break
        cycle_start = relres
        z = apply_m(r)
        beta = np.linalg.norm(z)
        if beta == 0:
            break
        V = np.zeros((n, m + 1))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[:, 0] = z / beta
        j_used = 0
        for j in range(m):
            if total >= cfg.max_iter:
                break
            w = apply_m(apply_op(V[:, j]))
            for i in range(j + 1):
                H[i, j] = w @ V[:, i]
                w -= H[i, j] * V[:, i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 1e-300:
                V[:, j + 1] = w / H[j + 1, j]
            # apply stored Givens rotations, then a new one
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j] = H[j, j] / denom if denom else 1.0
            sn[j] = H[j + 1, j] / denom if denom else 0.0
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            j_used = j + 1
            total += 1
            est = abs(g[j + 1]) / (np.linalg.norm(apply_m(rhs)) or 1.0)
            report.residual_history.append(est)
            if est <= 0.1 * cfg.tol:
                break
        if j_used:
            y = sla.solve_triangular(H[:j_used, :j_used], g[:j_used])
            x = x + V[:, :j_used] @ y
        r = rhs - apply_op(x)
        relres = np.linalg.norm(r) / nb
        report.residual_history[-1] = relres
        if relres <= cfg.tol:
            report.converged = True
            break
        if relres >= cycle_start * (1.0 - 1e-12):
            break  # stagnation over a full restart cycle
    else:
        pass
    final = np.linalg.norm(rhs - apply_op(x)) / nb
    if report.residual_history[-1] != final:
        report.residual_history.append(final)
    report.converged = final <= cfg.tol
    report.iterations = len(report.residual_history) - 1
    report.wall_time = time.perf_counter() - t0
    return x, report


# ---------------------------------------------------------------------------
# preconditioners


class Precond:
    """Callable wrapper so preconditioners can carry a fallback flag."""

    def __init__(self, apply, fallback=False, name=""):
        self._apply = apply
        self.fallback = fallback
        self.name = name

    def __call__(self, x):
        return self._apply(x)


def jacobi_precond(op_diag):
    """Inverse-diagonal preconditioner.

    Negative entries are allowed (signed scaling works for GMRES; a
    symmetric operator feeding CG has a positive diagonal anyway), but a
    vanishing entry means the scaling is meaningless.
    """
    d = np.asarray(op_diag, dtype=float).ravel()
    if np.any(np.abs(d) < 1e-300):
        raise ValueError("jacobi preconditioner requires nonzero diagonal")
    dinv = 1.0 / d
    return Precond(lambda x: dinv * x, name="jacobi")


def sparse_inverse_precond(A):
    """Factored sparse approximate inverse on A's lower-triangular pattern.

    Builds a sparse lower-triangular S with S A S^T ~ I (one small dense
    solve per row over the row's pattern); the application x -> S^T (S x)
    costs two sparse matrix-vector products.  Falls back to Jacobi if a
    row system breaks down.
    """
    if hasattr(A, "to_scipy"):
        A = A.to_scipy()
    A = sp.csr_matrix(A)
    n = A.shape[0]
    dense = A.toarray() if n <= 2000 else None
    rows, cols, vals = [], [], []
    for i in range(n):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        pat = A.indices[lo:hi]
        pat = pat[pat <= i]
        if pat.size == 0 or pat[-1] != i:
            return Precond(jacobi_precond(A.diagonal()), fallback=True,
                           name="sparse_inverse->jacobi")
        sub = dense[np.ix_(pat, pat)] if dense is not None \
            else A[np.ix_(pat, pat)].toarray()
        e = np.zeros(pat.size)
        e[-1] = 1.0
        try:
            s = np.linalg.solve(sub, e)
        except np.linalg.LinAlgError:
            return Precond(jacobi_precond(A.diagonal()), fallback=True,
                           name="sparse_inverse->jacobi")
        if s[-1] <= 0:
            return Precond(jacobi_precond(A.diagonal()), fallback=True,
                           name="sparse_inverse->jacobi")
        s /= np.sqrt(s[-1])
        rows.extend([i] * pat.size)
        cols.extend(pat.tolist())
        vals.extend(s.tolist())
    S = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    St = sp.csr_matrix(S.T)
    return Precond(lambda x: St @ (S @ x), name="sparse_inverse")


def _block_diag_apply(K_blocks, y):
    out = np.empty_like(y)
    off = 0
    for K in K_blocks:
        K = np.atleast_2d(np.asarray(K, dtype=float))
        b = K.shape[0]
        out[off:off + b] = K @ y[off:off + b]
        off += b
    return out


def woodbury_precond(A_inv_apply, J, K_blocks, h):
    """Low-rank-update inverse (A + h^2 J^T K J)^{-1} via the Woodbury identity.

    Caches X = A^{-1} J^T and the Delassus matrix D = J X.  The inner
    contact-space system is solved with CG on K^{-1} + h^2 D when every K
    block is symmetric and well conditioned; otherwise it switches to an
    inverse-free LU form (I + h^2 K D) u = K t, which also covers singular
    blocks (rank-deficient frictionless K).
    """
    if sp.issparse(J) or hasattr(J, "to_scipy"):
        J = (J.to_scipy() if hasattr(J, "to_scipy") else J).toarray()
    J = np.atleast_2d(np.asarray(J, dtype=float))
    m = J.shape[0]
    if m == 0 or not K_blocks:
        return Precond(A_inv_apply, name="woodbury(empty)")
    X = np.column_stack([A_inv_apply(J[i]) for i in range(m)])
    D = J @ X
    h2 = h * h

    blocks = [np.atleast_2d(np.asarray(K, dtype=float)) for K in K_blocks]
    symmetric = all(np.allclose(K, K.T, atol=1e-12 * (np.abs(K).max() + 1))
                    for K in blocks)
    invertible = True
    for K in blocks:
        if np.linalg.cond(K) > 1e10 or np.linalg.det(K) <= 0:
            invertible = False
            break

    if symmetric and invertible:
        S = h2 * D
        off = 0
        for K in blocks:
            b = K.shape[0]
            S[off:off + b, off:off + b] += np.linalg.inv(K)
            off += b
        S = 0.5 * (S + S.T)
        inner_cfg = SolverConfig(tol=1e-12, max_iter=10 * m + 50)

        def solve_inner(t):
            u, rep = cg(S, t, cfg=inner_cfg)
            return u
    else:
        Kd = sla.block_diag(*blocks)
        lu = sla.lu_factor(np.eye(m) + h2 * Kd @ D)

        def solve_inner(t):
            return sla.lu_solve(lu, Kd @ t)

    def apply(x):
        y = A_inv_apply(x)
        u = solve_inner(J @ y)
        return y - h2 * (X @ u)

    return Precond(apply, name="woodbury")


def matfree_contact_apply(J, K_blocks, h, x):
    """h^2 J^T (K (J x)) without assembling h^2 J^T K J."""
    if sp.issparse(J):
        y = J @ x
        return h * h * (J.T @ _block_diag_apply(K_blocks, y))
    J = np.atleast_2d(np.asarray(J, dtype=float))
    y = J @ x
    return h * h * (J.T @ _block_diag_apply(K_blocks, y))


def semi_implicit(A_inv_apply, op, rhs, cfg=None):
    """Fixed-point baseline x <- x + A^{-1}(b - op x) with divergence flag.

    Divergence is a reported outcome (residual exceeding 1e6 times the
    initial one, or ten consecutive increases), not an error.
    """
    cfg = cfg or SolverConfig()
    apply_op = as_apply(op)
    rhs = np.asarray(rhs, dtype=float).ravel()
    nb = np.linalg.norm(rhs) or 1.0
    t0 = time.perf_counter()
    report = SolveReport()
    x = np.zeros_like(rhs)
    increases = 0
    prev = None
    for _ in range(cfg.max_iter):
        r = rhs - apply_op(x)
        relres = np.linalg.norm(r) / nb
        report.residual_history.append(relres)
        if relres <= cfg.tol:
            report.converged = True
            break
        if prev is not None and relres > prev:
            increases += 1
        else:
            increases = 0
        if relres > 1e6 * report.residual_history[0] or increases >= 10 \
                or not np.isfinite(relres):
            report.diverged = True
            break
        prev = relres
        x = x + A_inv_apply(r)
    report.iterations = len(report.residual_history) - 1
    report.wall_time = time.perf_counter() - t0
    return x, report


def direct_solve(A, rhs):
    """Sparse LU solve used by the forward Newton loop and as oracle."""
    if hasattr(A, "to_scipy"):
        A = A.to_scipy()
    if sp.issparse(A):
        return spla.spsolve(sp.csc_matrix(A), rhs)
    return np.linalg.solve(np.asarray(A, dtype=float), rhs)


def write_residual_csv(path, entries):
    """CSV rows (solve_id, iter, relres, wall_time) for plotting."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["solve_id", "iter", "relres", "wall_time"])
        for solve_id, report in entries:
            for i, r in enumerate(report.residual_history):
                wr.writerow([solve_id, i, f"{r:.16e}",
                             f"{report.wall_time:.6f}"])
