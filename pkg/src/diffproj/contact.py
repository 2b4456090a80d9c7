"""Vertex-vs-collider contact with smoothed Fischer-Burmeister residuals.

A contact couples the normal gap delta_n with a normal multiplier lambda_n
and the tangential slip delta_f with a friction multiplier lambda_f through
a smoothed nonlinear complementarity system.  The smoothing replaces the
exact complementarity set x*y = 0 by the hyperbola x*y = eps^2 (positive
branch), which keeps every residual row differentiable; the scene stores
eps2 = 2*eps^2.

Multipliers live in the contact frame (n, t1, t2) and are condensed onto
positions in closed form: lambda_n = eps^2/delta_n and lambda_f =
-s*unit(delta_f) with s = mu*lambda_n - eps^2/|delta_f|, clamped at the
friction-cone boundary s >= -mu*lambda_n.  The per-contact Jacobian block
of the condensation is exactly the implicit-function derivative of the
smoothed system on its zero-level set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TAU_FALLBACK = 1e-9


def fb_smooth(x, y, eps2):
    """Smoothed Fischer-Burmeister value x + y - sqrt(x^2 + y^2 + eps2)."""
    if eps2 <= 0:
        raise ValueError("eps2 must be positive")
    return x + y - np.sqrt(x * x + y * y + eps2)


def fb_grad(x, y, eps2):
    """Partial derivatives of fb_smooth: (1 - x/root, 1 - y/root)."""
    if eps2 <= 0:
        raise ValueError("eps2 must be positive")
    root = np.sqrt(x * x + y * y + eps2)
    return 1.0 - x / root, 1.0 - y / root


@dataclass
class ContactFrameRot:
    """Orthogonal transform aligning the tangential pair with one axis."""

    R: np.ndarray


@dataclass
class ContactBlock:
    """Local 3x3 derivative block -d(lambda_c)/d(delta_c) and k_mu."""

    Kc_local: np.ndarray
    k_mu: np.ndarray


@dataclass
class ContactPoint:
    """One vertex-collider contact in its local frame (n, t1, t2).

    frame rows are (normal, tangent1, tangent2); J_n / J_f are those rows
    times the vertex dof selector.  lam and delta hold (normal, tangential
    pair) components in the frame.  d_n is the normal datum so that
    delta_n = n.x - d_n is the signed gap; the tangential datum d_f is
    zero, so delta_f measures slip relative to the previous position.
    """

    vertex: int
    frame: np.ndarray                # 3x3, rows n, t1, t2
    d_n: float
    mu: float
    eps2: float
    d_f: np.ndarray = field(default_factory=lambda: np.zeros(2))
    lam: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s_signed: float = 0.0
    cone_capped: bool = False

    @property
    def dofs(self):
        return np.arange(3 * self.vertex, 3 * self.vertex + 3)

    def gaps(self, q, q_bar):
        """(delta_n, delta_f) at positions q with previous positions q_bar."""
        i = 3 * self.vertex
        x = q[i:i + 3]
        dn = float(self.frame[0] @ x) - self.d_n
        df = self.frame[1:] @ (x - q_bar[i:i + 3]) - self.d_f
        return dn, df

    def apply_J(self, x):
        """J_c x: frame components of the vertex part of a global vector."""
        return self.frame @ x[self.dofs]

    def scatter_Jt(self, y, out):
        """out += J_c^T y for a frame-coordinate 3-vector y."""
        out[self.dofs] += self.frame.T @ y
        return out


def _tangent_basis(n):
    """Two unit tangents orthogonal to n (Gram-Schmidt from the axis least
    aligned with n, so the frame is deterministic)."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    t1 = axis - (axis @ n) * n
    t1 /= math.sqrt(t1 @ t1)
    t2 = np.array([n[1] * t1[2] - n[2] * t1[1],
                   n[2] * t1[0] - n[0] * t1[2],
                   n[0] * t1[1] - n[1] * t1[0]])
    return t1, t2


def detect_contacts(scene, q, q_bar):
    """Candidate contacts: vertices within activation distance of a collider.

    Deterministic order (vertex index, then collider index).  The normal
    datum d_n is chosen so the normal gap equals the collider's signed gap
    at q; the tangential datum is the previous position.
    """
    contacts = []
    if not scene.colliders:
        return contacts
    for v in range(scene.n_verts):
        x = q[3 * v:3 * v + 3]
        for col in scene.colliders:
            gap, n = col.gap_normal(x)
            if gap > scene.contact_activation:
                continue
            t1, t2 = _tangent_basis(n)
            frame = np.vstack([n, t1, t2])
            d_n = float(n @ x) - gap
            contacts.append(ContactPoint(vertex=v, frame=frame, d_n=d_n,
                                         mu=col.mu, eps2=scene.eps_fb))
    return contacts


def solve_multipliers(cp, q, q_bar, tau=TAU_FALLBACK):
    """Condensed multipliers on the smoothed zero-level set.

    lambda_n solves fb(delta_n, lambda_n) = 0 exactly (delta_n*lambda_n =
    eps^2 with delta_n > 0); lambda_f = -s*unit(delta_f) with the signed
    slip intensity s = mu*lambda_n - eps^2/|delta_f| clamped at the cone
    boundary s >= -mu*lambda_n.  Updates cp in place and returns it.
    """
    eps_sq = 0.5 * cp.eps2
    dn, df = cp.gaps(q, q_bar)
    if dn <= 0:
        raise ValueError("contact multiplier solve requires delta_n > 0")
    lam_n = eps_sq / dn
    nf = math.sqrt(df[0] * df[0] + df[1] * df[1])
    nf_g = max(nf, tau)
    s = cp.mu * lam_n - eps_sq / nf_g
    capped = False
    if s < -cp.mu * lam_n:
        s = -cp.mu * lam_n
        capped = True
    df_hat = df / nf_g
    lam_f = -s * df_hat
    cp.lam = np.array([lam_n, lam_f[0], lam_f[1]])
    cp.delta = np.array([dn, df[0], df[1]])
    cp.s_signed = s
    cp.cone_capped = capped
    return cp


def contact_residual(cp, q, q_bar):
    """Rows of the smoothed complementarity system at the cached lambda.

    [ fb(delta_n, lambda_n),
      fb(|delta_f|, mu*lambda_n - |lambda_f|),
      | |lambda_f|*delta_f + |delta_f|*lambda_f | ]  (alignment norm)
    """
    dn, df = cp.gaps(q, q_bar)
    lam_n = cp.lam[0]
    lam_f = cp.lam[1:]
    nf = float(np.linalg.norm(df))
    nl = float(np.linalg.norm(lam_f))
    phi_n = fb_smooth(dn, lam_n, cp.eps2)
    phi_f = fb_smooth(nf, cp.mu * lam_n - nl, cp.eps2)
    align = nl * df + nf * lam_f
    return np.array([phi_n, phi_f, float(np.linalg.norm(align))])


def build_R(delta_f, lambda_f, tau=TAU_FALLBACK):
    """Orthogonal R with R delta_c = (delta_n, |delta_f|, 0) and
    R lambda_c = (lambda_n, -|lambda_f|, 0).

    Prefers the slip direction; falls back to the (sign-flipped) friction
    direction, and to the identity when both norms are below tau.
    """
    delta_f = np.asarray(delta_f, dtype=float).ravel()
    lambda_f = np.asarray(lambda_f, dtype=float).ravel()
    nd = np.linalg.norm(delta_f)
    nl = np.linalg.norm(lambda_f)
    if nd > tau:
        a, b = delta_f / nd
        R = np.array([[1.0, 0.0, 0.0],
                      [0.0, a, b],
                      [0.0, -b, a]])
    elif nl > tau:
        a, b = lambda_f / nl
        R = np.array([[1.0, 0.0, 0.0],
                      [0.0, -a, -b],
                      [0.0, b, -a]])
    else:
        R = np.eye(3)
    return ContactFrameRot(R=R)


def contact_block(cp, rot=None, tau=TAU_FALLBACK):
    """Derivative block of the condensed multipliers: d lambda_c = -Kc d delta_c.

    In the rotated frame the block is
        [[ lam_n/d_n,            0,           0],
         [-mu lam_n/d_n, (mu lam_n - s)/|d_f|, 0],
         [      0,               0,      s/|d_f|]]
    with the signed slip intensity s in place of |lambda_f|.  On the
    friction-cone cap (s clamped to -mu lam_n) the first column of the
    middle row flips sign and the diagonal slip entry vanishes, which is
    the derivative of the clamped branch.  k_mu = R^T (0, lam_n, 0)^T is
    the friction-coefficient sensitivity (sign-flipped on the cap).
    """
    lam_n = cp.lam[0]
    dn = cp.delta[0]
    df = cp.delta[1:]
    nf = float(np.linalg.norm(df))
    s = cp.s_signed
    if rot is None:
        rot = build_R(df, cp.lam[1:], tau)
    R = rot.R
    sign = -1.0 if cp.cone_capped else 1.0
    if nf >= tau:
        a22 = 0.0 if cp.cone_capped else (cp.mu * lam_n - s) / nf
        B = np.array([[lam_n / dn, 0.0, 0.0],
                      [-sign * cp.mu * lam_n / dn, a22, 0.0],
                      [0.0, 0.0, s / nf]])
        k_mu = sign * (R.T @ np.array([0.0, lam_n, 0.0]))
    else:
        # guarded regime: the condensation is linear in delta_f with a
        # frozen denominator tau, so the block reflects that exactly
        ratio = nf / tau
        B = np.array([[lam_n / dn, 0.0, 0.0],
                      [-sign * cp.mu * lam_n / dn * ratio, s / tau, 0.0],
                      [0.0, 0.0, s / tau]])
        k_mu = sign * (R.T @ np.array([0.0, lam_n * ratio, 0.0]))
    return ContactBlock(Kc_local=R.T @ B @ R, k_mu=k_mu)
