"""Implicit forward step: condensed Newton on positions.

Per Newton iteration the local element projections, binding multipliers
and contact multipliers are all eliminated in closed form as functions of
q, so the global linearization is exactly the operator the backward pass
differentiates:

    A_hat = A - DeltaA + K_b + K_c

with A = M + h^2 sum w G^T G, DeltaA the projection-Jacobian correction,
K_b the binding stiffness and K_c the contact block.  A barrier-aware line
search keeps every detected contact gap strictly positive, which the
smoothed complementarity solve requires.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import contact as ct
from . import core
from . import elasticity as el
from . import linsolve


@dataclass
class ForwardConfig:
    tol: float = 1e-9
    max_iter: int = 100
    max_line_search: int = 40
    pullback_margin: float = 1e-6


@dataclass
class ForwardReport:
    residual_history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    contacts: list = field(default_factory=list)
    projections: list = field(default_factory=list)
    contact_residuals: list = field(default_factory=list)


@dataclass
class StepCache:
    """Everything the backward pass needs from one converged step."""

    scene: object
    sysmat: object
    q_bar: np.ndarray
    v_bar: np.ndarray
    q_hat: np.ndarray
    q_new: np.ndarray
    elem_caches: list
    contacts: list
    fext: np.ndarray
    report: ForwardReport | None = None


def _pullback(scene, q, margin, q_bar=None):
    """Project penetrating vertices to a small positive gap.

    The target gap is warm-started from the previous position's gap when
    available, which spares the barrier Newton a crawl from an arbitrary
    margin down to the (often tiny) converged gap.
    """
    for v in range(scene.n_verts):
        x = q[3 * v:3 * v + 3]
        for col in scene.colliders:
            gap, n = col.gap_normal(x)
            if gap <= 0:
                target = margin
                if q_bar is not None:
                    gap_prev, _ = col.gap_normal(q_bar[3 * v:3 * v + 3])
                    if gap_prev > 0:
                        target = min(margin, gap_prev)
                target = max(target, 1e-12)
                x = x + (target - gap) * n
                q[3 * v:3 * v + 3] = x
    return q


def _any_penetration(scene, q):
    for v in range(scene.n_verts):
        x = q[3 * v:3 * v + 3]
        for col in scene.colliders:
            gap, _ = col.gap_normal(x)
            if gap <= 0:
                return True
    return False


def binding_multiplier(binding, q):
    """Closed-form lambda_b = -(J_b q - d_b)/E_b."""
    return -(q[binding.dofs()] - binding.target) / binding.compliance


def momentum_residual(scene, sysmat, q, q_bar, q_hat, elem_caches, contacts):
    """r = A q - b - h^2 (J_b^T lam_b + J_c^T lam_c) and the rhs b."""
    h2 = scene.h ** 2
    _, b = el.internal_force_and_rhs(scene, q, q_hat, elem_caches)
    r = core.spmv(sysmat.A, q) - b
    for bd in scene.bindings:
        r[bd.dofs()] -= h2 * binding_multiplier(bd, q)
    for cp in contacts:
        r = cp.scatter_Jt(-h2 * cp.lam, r)
    return r


def assemble_system_jacobian(scene, sysmat, elem_caches, contacts,
                             include_elastic_correction=True):
    """Sparse A_hat = A - DeltaA + K_b + K_c (also the adjoint operator)."""
    h2 = scene.h ** 2
    A = sysmat.A.to_scipy().copy()
    if include_elastic_correction and elem_caches:
        rows, cols, vals = [], [], []
        for c in elem_caches:
            e = c.elem
            block = h2 * e.w * (e.G.T @ c.jac.dP_dF @ e.G)
            r, cc = np.meshgrid(e.dofs, e.dofs, indexing="ij")
            rows.append(r.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())
        dA = sp.csr_matrix((np.concatenate(vals),
                            (np.concatenate(rows), np.concatenate(cols))),
                           shape=A.shape)
        A = A - dA
    if scene.bindings:
        rows, vals = [], []
        for bd in scene.bindings:
            rows.extend(bd.dofs().tolist())
            vals.extend([h2 / bd.compliance] * 3)
        A = A + sp.csr_matrix((vals, (rows, rows)), shape=A.shape)
    if contacts:
        rows, cols, vals = [], [], []
        for cp in contacts:
            blk = ct.contact_block(cp)
            gblock = h2 * (cp.frame.T @ blk.Kc_local @ cp.frame)
            r, cc = np.meshgrid(cp.dofs, cp.dofs, indexing="ij")
            rows.append(r.ravel())
            cols.append(cc.ravel())
            vals.append(gblock.ravel())
        A = A + sp.csr_matrix((np.concatenate(vals),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=A.shape)
    return sp.csr_matrix(A)


def assemble_system_jacobian_dense(scene, sysmat, elem_caches, contacts,
                                   A_dense=None):
    """Dense A_hat for desk-scale systems (avoids sparse rebuild costs)."""
    h2 = scene.h ** 2
    A = (sysmat.A.to_dense() if A_dense is None else A_dense).copy()
    for c in elem_caches:
        e = c.elem
        A[np.ix_(e.dofs, e.dofs)] -= h2 * e.w * (e.G.T @ c.jac.dP_dF @ e.G)
    for bd in scene.bindings:
        A[bd.dofs(), bd.dofs()] += h2 / bd.compliance
    for cp in contacts:
        blk = ct.contact_block(cp)
        A[np.ix_(cp.dofs, cp.dofs)] += h2 * (cp.frame.T @ blk.Kc_local
                                             @ cp.frame)
    return A


def _residual_scale(scene, q_hat):
    m = scene.mass_vector()
    return max(1.0, float(np.max(np.abs(m * q_hat))))


def forward_step(scene, state, sysmat, cfg=None):
    """One implicit step; returns the new state and a report with cache."""
    cfg = cfg or ForwardConfig()
    h = scene.h
    q_bar = state.q.copy()
    v_bar = state.v.copy()
    q_hat = core.predict(scene, state)
    q = _pullback(scene, q_hat.copy(), cfg.pullback_margin, q_bar)
    scale = _residual_scale(scene, q_hat)
    report = ForwardReport()
    elems = sysmat.elements

    def evaluate(qc, contacts, with_jacobian=True):
        caches = el.project_elements(elems, qc, with_jacobian=with_jacobian)
        for cp in contacts:
            ct.solve_multipliers(cp, qc, q_bar)
        r = momentum_residual(scene, sysmat, qc, q_bar, q_hat, caches,
                              contacts)
        return caches, r

    dense = scene.ndof <= 300
    A_dense = sysmat.A.to_dense() if dense else None
    contacts = []
    caches = []
    converged = False
    for it in range(cfg.max_iter):
        contacts = ct.detect_contacts(scene, q, q_bar)
        caches, r = evaluate(q, contacts)
        res = float(np.max(np.abs(r))) / scale
        report.residual_history.append(res)
        if res <= cfg.tol:
            converged = True
            break
        if dense:
            A_hat = assemble_system_jacobian_dense(scene, sysmat, caches,
                                                   contacts, A_dense)
            dq = np.linalg.solve(A_hat, -r)
        else:
            A_hat = assemble_system_jacobian(scene, sysmat, caches, contacts)
            dq = linsolve.direct_solve(A_hat, -r)
        t = 1.0
        accepted = False
        for _ls in range(cfg.max_line_search):
            q_try = q + t * dq
            if not _any_penetration(scene, q_try):
                try:
                    # trial evaluations only need the residual, not the
                    # projection Jacobians
                    caches_try, r_try = evaluate(q_try, contacts,
                                                 with_jacobian=False)
                except ValueError:
                    caches_try = None
                if caches_try is not None \
                        and np.max(np.abs(r_try)) < np.max(np.abs(r)):
                    q = q_try
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            # no feasible descent on this contact set; refresh and retry
            q = q + t * dq if not _any_penetration(scene, q + t * dq) else q
    report.iterations = len(report.residual_history)
    report.converged = converged
    report.contacts = contacts
    report.projections = [c.proj for c in caches]
    report.contact_residuals = [ct.contact_residual(cp, q, q_bar)
                                for cp in contacts]
    v_new = (q - q_bar) / h
    new_state = core.SimState(q, v_new, state.step_index + 1)
    cache = StepCache(scene=scene, sysmat=sysmat, q_bar=q_bar, v_bar=v_bar,
                      q_hat=q_hat, q_new=q.copy(), elem_caches=caches,
                      contacts=contacts, fext=scene.external_force(),
                      report=report)
    report.cache = cache
    return new_state, report


def rollout(scene, state0, n_steps, sysmat=None, cfg=None,
            raise_on_failure=True):
    """Run n_steps implicit steps, keeping per-step caches for the adjoint."""
    if sysmat is None:
        sysmat = core.assemble_system_matrix(scene)
    states = [state0.copy()]
    caches = []
    state = state0
    for k in range(n_steps):
        state, report = forward_step(scene, state, sysmat, cfg)
        if raise_on_failure and not report.converged:
            raise RuntimeError(
                f"forward step {k} did not converge "
                f"(residual {report.residual_history[-1]:.3e})")
        states.append(state)
        caches.append(report.cache)
    return states, caches
