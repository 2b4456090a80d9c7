"""Analytic backward pass: adjoint solves and parameter gradients.

For each converged step the residual r(q; inputs) = 0 is differentiated
implicitly.  One transposed linear solve

    A_hat^T z = (dL/dq + (1/h) dL/dv)^T

per step turns every input sensitivity into a cheap product z^T K_x.  The
operator A_hat = A - DeltaA + K_b + K_c is the same matrix the forward
Newton loop used, assembled from the cached projections and contacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import contact as ct
from . import elasticity as el
from . import forward as fw
from . import linsolve


@dataclass
class AdjointWorkspace:
    """Operator form of A_hat with explicit elastic part and matrix-free
    binding/contact parts."""

    scene: object
    A_elastic: object            # scipy CSR for A - DeltaA
    kb_diag: np.ndarray          # h^2 / E_b on bound dofs
    contacts: list
    contact_blocks: list         # ContactBlock per contact
    symmetric: bool
    z: np.ndarray | None = None

    def apply(self, x):
        y = self.A_elastic @ x + self.kb_diag * x
        h2 = self.scene.h ** 2
        for cp, blk in zip(self.contacts, self.contact_blocks):
            y[cp.dofs] += h2 * (cp.frame.T @ (blk.Kc_local @ (cp.frame @ x[cp.dofs])))
        return y

    def apply_transpose(self, x):
        y = self.A_elastic.T @ x + self.kb_diag * x
        h2 = self.scene.h ** 2
        for cp, blk in zip(self.contacts, self.contact_blocks):
            y[cp.dofs] += h2 * (cp.frame.T @ (blk.Kc_local.T @ (cp.frame @ x[cp.dofs])))
        return y

    def diagonal(self):
        d = np.asarray(self.A_elastic.diagonal()) + self.kb_diag
        h2 = self.scene.h ** 2
        for cp, blk in zip(self.contacts, self.contact_blocks):
            gb = h2 * (cp.frame.T @ blk.Kc_local @ cp.frame)
            d[cp.dofs] += np.diag(gb)
        return d

    def to_dense(self):
        n = self.A_elastic.shape[0]
        h2 = self.scene.h ** 2
        A = self.A_elastic.toarray() + np.diag(self.kb_diag)
        for cp, blk in zip(self.contacts, self.contact_blocks):
            A[np.ix_(cp.dofs, cp.dofs)] += h2 * (cp.frame.T @ blk.Kc_local
                                                 @ cp.frame)
        return A


@dataclass
class GradientReport:
    """Accumulated gradients; state gradients refer to the rollout start."""

    dL_dqbar: np.ndarray | None = None
    dL_dvbar: np.ndarray | None = None
    dL_dfext: list = field(default_factory=list)   # per step, h^2 z
    dL_dmu_friction: float = 0.0
    dL_dEb: np.ndarray | None = None
    dL_ddb: np.ndarray | None = None
    dL_dw: np.ndarray | None = None                # per element
    dL_dstiffness: float = 0.0                     # scene-level ARAP scalar
    dL_dE: float = 0.0
    dL_dnu: float = 0.0

    def ensure_shapes(self, n_bind, n_elem):
        if self.dL_dEb is None:
            self.dL_dEb = np.zeros(n_bind)
            self.dL_ddb = np.zeros((n_bind, 3))
        if self.dL_dw is None:
            self.dL_dw = np.zeros(n_elem)


def assemble_adjoint_operator(step_cache):
    """Build the A_hat operator for one converged step from its caches."""
    scene = step_cache.scene
    import scipy.sparse as sp

    h2 = scene.h ** 2
    A = step_cache.sysmat.A.to_scipy().copy()
    if step_cache.elem_caches:
        rows, cols, vals = [], [], []
        for c in step_cache.elem_caches:
            e = c.elem
            block = h2 * e.w * (e.G.T @ c.jac.dP_dF @ e.G)
            r, cc = np.meshgrid(e.dofs, e.dofs, indexing="ij")
            rows.append(r.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())
        dA = sp.csr_matrix((np.concatenate(vals),
                            (np.concatenate(rows), np.concatenate(cols))),
                           shape=A.shape)
        A = sp.csr_matrix(A - dA)
    kb = np.zeros(scene.ndof)
    for bd in scene.bindings:
        kb[bd.dofs()] += h2 / bd.compliance
    blocks = [ct.contact_block(cp) for cp in step_cache.contacts]
    symmetric = all(cp.mu == 0.0 for cp in step_cache.contacts)
    return AdjointWorkspace(scene=scene, A_elastic=A, kb_diag=kb,
                            contacts=step_cache.contacts,
                            contact_blocks=blocks, symmetric=symmetric)


def solve_adjoint(workspace, dL_dq, dL_dv, solver_cfg=None):
    """Solve A_hat^T z = dL/dq + (1/h) dL/dv; CG when symmetric, else GMRES."""
    cfg = solver_cfg or linsolve.SolverConfig(tol=1e-10, max_iter=2000)
    rhs = np.asarray(dL_dq, dtype=float) \
        + np.asarray(dL_dv, dtype=float) / workspace.scene.h
    precond = linsolve.jacobi_precond(workspace.diagonal())
    if workspace.symmetric:
        z, rep = linsolve.cg(workspace.apply, rhs, precond=precond, cfg=cfg)
    else:
        z, rep = linsolve.gmres(workspace.apply_transpose, rhs,
                                precond=precond, cfg=cfg)
    if not rep.converged:
        raise RuntimeError(
            "adjoint solve did not converge; residual history tail "
            f"{rep.residual_history[-3:]}")
    workspace.z = z
    return z


def _contact_qbar_term(scene, contacts, z):
    """z^T (h^2 J_c^T K_c P_f J_c): the tangential-datum part of K_qbar."""
    h2 = scene.h ** 2
    out = np.zeros(scene.ndof)
    pf = np.diag([0.0, 1.0, 1.0])
    for cp in contacts:
        blk = ct.contact_block(cp)
        zc = cp.frame @ z[cp.dofs]
        out[cp.dofs] += h2 * (cp.frame.T @ (pf.T @ (blk.Kc_local.T @ zc)))
    return out


def backprop_step(step_cache, z, dL_dq, dL_dv, grads=None):
    """Gradient products z^T K_x for one step.

    Returns (grads, dL_dqbar, dL_dvbar) where the state gradients feed the
    previous step of the reverse sweep; parameter gradients accumulate into
    grads.
    """
    scene = step_cache.scene
    h = scene.h
    h2 = h * h
    m = scene.mass_vector()
    if grads is None:
        grads = GradientReport()
    grads.ensure_shapes(len(scene.bindings),
                        len(step_cache.sysmat.elements))

    # state gradients for the previous step
    dL_dqbar = m * z + _contact_qbar_term(scene, step_cache.contacts, z) \
        - np.asarray(dL_dv, dtype=float) / h
    dL_dvbar = h * (m * z)

    # per-step control gradient
    grads.dL_dfext.append(h2 * z)

    # bindings: lambda_b = -(J_b q - d_b)/E_b
    q = step_cache.q_new
    for i, bd in enumerate(scene.bindings):
        lam_b = fw.binding_multiplier(bd, q)
        zb = z[bd.dofs()]
        grads.dL_dEb[i] += float(zb @ (-h2 * lam_b / bd.compliance))
        grads.dL_ddb[i] += h2 / bd.compliance * zb

    # friction coefficient: K_mu = -h^2 J_c^T k_mu
    for cp in step_cache.contacts:
        blk = ct.contact_block(cp)
        grads.dL_dmu_friction += float(-h2 * blk.k_mu
                                       @ (cp.frame @ z[cp.dofs]))

    # element weights and Lame parameters
    dmu_lame = 0.0
    dlam_lame = 0.0
    for c in step_cache.elem_caches:
        e = c.elem
        gz = e.G @ z[e.dofs]
        gq = e.G @ q[e.dofs]
        base = float(gz @ (c.p - gq))          # z^T h^-2 K_w without dp/dw
        if e.material.model == "arap":
            grads.dL_dw[e.index] += h2 * base
            grads.dL_dstiffness += h2 * base * e.vol
        else:
            mu_l, lam_l = el.lame_from_young(e.material.E, e.material.nu)
            dP_dmu, dP_dlam = el.dP_dlame(c.svd, c.proj, mu_l, lam_l)
            pmu = dP_dmu.ravel(order="F")
            plam = dP_dlam.ravel(order="F")
            dmu_lame += h2 * (2.0 * e.vol * base
                              + e.w * float(gz @ pmu))
            dlam_lame += h2 * e.w * float(gz @ plam)
    if dmu_lame or dlam_lame:
        first = next(c.elem.material for c in step_cache.elem_caches
                     if c.elem.material.model == "neohookean")
        Jl = el.lame_jacobian(first.E, first.nu)
        dE, dnu = Jl.T @ np.array([dmu_lame, dlam_lame])
        grads.dL_dE += float(dE)
        grads.dL_dnu += float(dnu)

    return grads, dL_dqbar, dL_dvbar


def loss_final_state(q_final, q_target):
    """L = |q_final - q_target|^2 and its gradient."""
    d = np.asarray(q_final, dtype=float) - np.asarray(q_target, dtype=float)
    return float(d @ d), 2.0 * d


def backprop_rollout(caches, loss_spec, solver_cfg=None):
    """Reverse sweep over cached steps.

    loss_spec is either a target position vector for a final-state squared
    loss, or a callable (step_index, q, v) -> (dL_dq, dL_dv) evaluated at
    every step (1-based index over the rollout).
    """
    if not caches:
        raise ValueError("empty rollout")
    scene = caches[0].scene
    n = scene.ndof
    T = len(caches)

    if callable(loss_spec):
        loss_fn = loss_spec
    else:
        target = np.asarray(loss_spec, dtype=float)

        def loss_fn(k, q, v):
            if k == T:
                _, g = loss_final_state(q, target)
                return g, np.zeros(n)
            return np.zeros(n), np.zeros(n)

    grads = GradientReport()
    grads.ensure_shapes(len(scene.bindings), len(caches[0].sysmat.elements))
    dL_dq = np.zeros(n)
    dL_dv = np.zeros(n)
    fext_grads = []
    for k in range(T, 0, -1):
        cache = caches[k - 1]
        v_k = (cache.q_new - cache.q_bar) / scene.h
        gq, gv = loss_fn(k, cache.q_new, v_k)
        dL_dq = dL_dq + gq
        dL_dv = dL_dv + gv
        ws = assemble_adjoint_operator(cache)
        z = solve_adjoint(ws, dL_dq, dL_dv, solver_cfg)
        grads.dL_dfext = []            # backprop_step appends; keep ordered
        grads, dL_dq, dL_dv = backprop_step(cache, z, dL_dq, dL_dv, grads)
        fext_grads.append(grads.dL_dfext[0])
    grads.dL_dfext = list(reversed(fext_grads))
    grads.dL_dqbar = dL_dq
    grads.dL_dvbar = dL_dv
    return grads
