"""Local projections for ARAP and Neo-Hookean elements and their derivatives.

Each element carries a linear map G from stacked positions to the
column-stacked deformation gradient vec(F).  The local projection replaces
the singular values sigma of F by model-dependent theta(sigma); its
derivative with respect to F is assembled in the shared singular basis with
degenerate (repeated singular value) limits handled explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# element kinematics


@dataclass
class Element:
    """Precomputed per-element kinematics: dofs, G, weight and volume."""

    index: int
    verts: np.ndarray          # vertex indices (4 tet / 3 triangle)
    dofs: np.ndarray           # global dof indices (12 or 9)
    G: np.ndarray              # (9,12) or (6,9): q_local -> vec(F)
    vol: float                 # rest volume (or area for triangles)
    w: float                   # constraint weight w_i
    material: object
    dim: int                   # 3 for tets, 2 for triangles

    @property
    def fsize(self):
        return 3 * self.dim if self.dim == 3 else 6

    def deformation(self, q):
        """vec(F) for the element, column-stacked."""
        return self.G @ q[self.dofs]

    def unvec(self, p):
        """Reshape a column-stacked vec back to the F/P matrix shape."""
        return p.reshape((3, self.dim) if self.dim == 2 else (3, 3), order="F")


def rest_measure(vertices, el):
    """Signed rest volume of a tet (det/6) or area of a triangle."""
    x = vertices[np.asarray(el)]
    if len(el) == 4:
        dm = np.column_stack([x[1] - x[0], x[2] - x[0], x[3] - x[0]])
        return float(np.linalg.det(dm)) / 6.0
    e1, e2 = x[1] - x[0], x[2] - x[0]
    return 0.5 * float(np.linalg.norm(np.cross(e1, e2)))


def _difference_selector(nv):
    """S with vec(Ds) = S q_local, Ds columns x_k - x_0."""
    k = nv - 1
    s = np.zeros((3 * k, 3 * nv))
    for c in range(k):
        s[3 * c:3 * c + 3, 0:3] = -np.eye(3)
        s[3 * c:3 * c + 3, 3 * (c + 1):3 * (c + 2)] = np.eye(3)
    return s


def element_weight(material, vol):
    if material.model == "neohookean":
        mu, _ = lame_from_young(material.E, material.nu)
        return 2.0 * mu * vol
    return material.stiffness * vol


def build_elements(scene):
    """Kinematic precomputation for every element; rejects degenerate ones."""
    elems = []
    for e, el in enumerate(scene.elements):
        el = np.asarray(el, dtype=int)
        x = scene.vertices[el]
        if el.shape[0] == 4:
            dm = np.column_stack([x[1] - x[0], x[2] - x[0], x[3] - x[0]])
            vol = float(np.linalg.det(dm)) / 6.0
            if vol <= 1e-14:
                raise ValueError(f"degenerate or inverted tet {e}")
            B = np.linalg.inv(dm)
            G = np.kron(B.T, np.eye(3)) @ _difference_selector(4)
            dim = 3
        elif el.shape[0] == 3:
            e1, e2 = x[1] - x[0], x[2] - x[0]
            n = np.cross(e1, e2)
            area = 0.5 * float(np.linalg.norm(n))
            if area <= 1e-14:
                raise ValueError(f"degenerate triangle {e}")
            t1 = e1 / np.linalg.norm(e1)
            t2v = e2 - (e2 @ t1) * t1
            t2 = t2v / np.linalg.norm(t2v)
            dm2 = np.array([[e1 @ t1, e2 @ t1], [0.0, e2 @ t2]])
            B = np.linalg.inv(dm2)
            G = np.kron(B.T, np.eye(3)) @ _difference_selector(3)
            vol = area
            dim = 2
        else:
            raise ValueError("elements must be tetrahedra or triangles")
        mat = scene.materials[e]
        dofs = np.concatenate([np.arange(3 * v, 3 * v + 3) for v in el])
        elems.append(Element(index=e, verts=el, dofs=dofs, G=G, vol=vol,
                             w=element_weight(mat, vol), material=mat, dim=dim))
    return elems


# ---------------------------------------------------------------------------
# SVD and projections


@dataclass
class SvdTriple:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


@dataclass
class Projection:
    theta: np.ndarray
    P: np.ndarray
    W: np.ndarray
    energy_density: float = 0.0   # zeta(theta) per unit volume


@dataclass
class ProjJacobian:
    dP_dF: np.ndarray          # (9,9) for tets, (6,6) for triangles
    M_mat: np.ndarray
    N_mat: np.ndarray


def svd_polar(F):
    """Rotation-variant SVD: det(U) = det(V) = +1, sigma descending > 0.

    3x3 input uses the full SVD; 3x2 input uses the thin SVD with U in
    R^{3x2} and V in R^{2x2}.  Inverted 3D elements (det F <= 0) are
    rejected; inversion recovery is out of scope.
    """
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("non-finite deformation gradient")
    if F.shape == (3, 3):
        if np.linalg.det(F) <= 0:
            raise ValueError("inverted element: det F <= 0")
        U, s, Vt = np.linalg.svd(F)
        V = Vt.T
        if np.linalg.det(U) < 0:
            U[:, 2] *= -1.0
            V[:, 2] *= -1.0
        return SvdTriple(U, s, V)
    if F.shape == (3, 2):
        U, s, Vt = np.linalg.svd(F, full_matrices=False)
        V = Vt.T
        if s[-1] <= 0:
            raise ValueError("rank-deficient surface element")
        if np.linalg.det(V) < 0:
            U[:, 1] *= -1.0
            V[:, 1] *= -1.0
        return SvdTriple(U, s, V)
    raise ValueError("F must be 3x3 or 3x2")


def project_arap(svd):
    """Rotation-only projection: theta = 1, P = U V^T, W = 0."""
    d = svd.sigma.shape[0]
    theta = np.ones(d)
    return Projection(theta=theta, P=svd.U @ svd.V.T, W=np.zeros((d, d)))


def _nh_energy(theta, mu, lam, dim):
    i1 = float(theta @ theta)
    logj = float(np.sum(np.log(theta)))
    return 0.5 * mu * (i1 - 2.0 * logj - dim) + 0.5 * lam * logj ** 2


def _nh_residual(theta, sigma, mu, lam):
    logj = np.sum(np.log(theta))
    return 2.0 * mu * (theta - sigma) + mu * (theta - 1.0 / theta) \
        + lam * logj / theta


def _nh_jacobian(theta, mu, lam):
    logj = np.sum(np.log(theta))
    inv2 = 1.0 / theta ** 2
    J = np.diag(3.0 * mu + (mu - lam * logj) * inv2)
    J += lam * np.outer(1.0 / theta, 1.0 / theta)
    return J


def project_neohookean(svd, mu_lame, lambda_lame, tol=1e-11, max_iter=50):
    """Projected singular values for Neo-Hookean (w = 2*mu) by damped Newton.

    Solves g(theta) = 2mu(theta-sigma) + mu(theta-1/theta)
    + lambda*log(J)/theta = 0 starting from theta = sigma, halving the step
    whenever the residual norm would grow or any component would leave the
    positive orthant.
    """
    sigma = svd.sigma
    if np.any(sigma <= 0):
        raise ValueError("neo-hookean projection requires positive sigma")
    theta = sigma.copy()
    r = _nh_residual(theta, sigma, mu_lame, lambda_lame)
    for _ in range(max_iter):
        rn = np.linalg.norm(r)
        if rn <= tol * max(1.0, mu_lame):
            break
        step = np.linalg.solve(_nh_jacobian(theta, mu_lame, lambda_lame), -r)
        t = 1.0
        for _ls in range(40):
            cand = theta + t * step
            if np.all(cand > 0):
                rc = _nh_residual(cand, sigma, mu_lame, lambda_lame)
                if np.linalg.norm(rc) < rn:
                    theta, r = cand, rc
                    break
            t *= 0.5
        else:
            raise RuntimeError(
                f"neo-hookean projection stalled, residual {rn:.3e}")
    else:
        rn = np.linalg.norm(r)
        if rn > tol * max(1.0, mu_lame):
            raise RuntimeError(
                f"neo-hookean projection did not converge, residual {rn:.3e}")

    # W = dtheta/dsigma by the implicit function theorem (Sherman-Morrison
    # form of the inverse of dg/dtheta).
    logj = np.sum(np.log(theta))
    dinv = 1.0 / (3.0 * mu_lame + (mu_lame - lambda_lame * logj) / theta ** 2)
    u = 1.0 / theta
    denom = 1.0 + lambda_lame * float(u @ (dinv * u))
    W = 2.0 * mu_lame * (np.diag(dinv)
                         - np.outer(dinv * u, dinv * u) * lambda_lame / denom)
    P = svd.U @ np.diag(theta) @ svd.V.T
    return Projection(theta=theta, P=P, W=W,
                      energy_density=_nh_energy(theta, mu_lame, lambda_lame,
                                                theta.shape[0]))


def _vec_D(d):
    """D with D x = vec(Diag(x)) in the column-stacked basis."""
    D = np.zeros((d * d, d))
    for i in range(d):
        D[i * d + i, i] = 1.0
    return D


def _vec_T(d):
    """Permutation T with T vec(X) = vec(X^T)."""
    T = np.zeros((d * d, d * d))
    for i in range(d):
        for j in range(d):
            T[j * d + i, i * d + j] = 1.0
    return T


def proj_jacobian(svd, projection, tau_sigma=None):
    """Jacobian of the projection map F -> P in the shared singular basis.

    Builds the off-diagonal coefficient matrices
      M_ij = (s_i t_i - s_j t_j)/(s_i^2 - s_j^2),
      N_ij = (s_j t_i - s_i t_j)/(s_i^2 - s_j^2),
    switching to the repeated-singular-value limits
      M_ij = (Wd - W_ij + t/s)/2,  N_ij = (Wd - W_ij - t/s)/2
    when |s_i - s_j| <= tau_sigma, and assembles
      dP/dF = (V (x) U)[D W D^T + Diag(vec M) + Diag(vec N) T](V^T (x) U^T).
    For thin (3x2) bases an out-of-plane term (V Theta Sigma^-1 V^T) (x)
    (u3 u3^T) is added for the left null direction u3 = u1 x u2.
    """
    s = svd.sigma
    t = projection.theta
    W = projection.W
    d = s.shape[0]
    if tau_sigma is None:
        tau_sigma = 1e-6 * float(np.max(np.abs(s)))
    M = np.zeros((d, d))
    N = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            if abs(s[i] - s[j]) > tau_sigma:
                den = s[i] ** 2 - s[j] ** 2
                M[i, j] = (s[i] * t[i] - s[j] * t[j]) / den
                N[i, j] = (s[j] * t[i] - s[i] * t[j]) / den
            else:
                wd = 0.5 * (W[i, i] + W[j, j])
                ts = (t[i] + t[j]) / (s[i] + s[j])
                M[i, j] = 0.5 * (wd - W[i, j] + ts)
                N[i, j] = 0.5 * (wd - W[i, j] - ts)
    D = _vec_D(d)
    T = _vec_T(d)
    inner = D @ W @ D.T + np.diag(M.ravel(order="F")) \
        + np.diag(N.ravel(order="F")) @ T
    VU = np.kron(svd.V, svd.U)
    dP_dF = VU @ inner @ VU.T
    if svd.U.shape == (3, 2):
        u3 = np.cross(svd.U[:, 0], svd.U[:, 1])
        oop = svd.V @ np.diag(t / s) @ svd.V.T
        dP_dF = dP_dF + np.kron(oop, np.outer(u3, u3))
    return ProjJacobian(dP_dF=dP_dF, M_mat=M, N_mat=N)


def dP_dlame(svd, projection, mu_lame, lambda_lame):
    """Sensitivity of the Neo-Hookean projection to the Lame parameters.

    dtheta/dx = -(dg/dtheta)^-1 dg/dx with dg/dmu = 3 theta - 2 sigma -
    1/theta and dg/dlambda = log(J)/theta; lifted as U Diag(dtheta/dx) V^T.
    """
    theta, sigma = projection.theta, svd.sigma
    logj = np.sum(np.log(theta))
    Jg = _nh_jacobian(theta, mu_lame, lambda_lame)
    dg_dmu = 3.0 * theta - 2.0 * sigma - 1.0 / theta
    dg_dlam = logj / theta
    dth_dmu = np.linalg.solve(Jg, -dg_dmu)
    dth_dlam = np.linalg.solve(Jg, -dg_dlam)
    dP_dmu = svd.U @ np.diag(dth_dmu) @ svd.V.T
    dP_dlam = svd.U @ np.diag(dth_dlam) @ svd.V.T
    return dP_dmu, dP_dlam


def lame_from_young(E, nu):
    """mu = E/(2(1+nu)), lambda = E nu/((1+nu)(1-2nu))."""
    if not (-1.0 < nu < 0.5):
        raise ValueError("nu must lie in (-1, 0.5)")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def lame_jacobian(E, nu):
    """2x2 Jacobian d(mu, lambda)/d(E, nu)."""
    if not (-1.0 < nu < 0.5):
        raise ValueError("nu must lie in (-1, 0.5)")
    dmu_dE = 1.0 / (2.0 * (1.0 + nu))
    dmu_dnu = -E / (2.0 * (1.0 + nu) ** 2)
    den = (1.0 + nu) * (1.0 - 2.0 * nu)
    dlam_dE = nu / den
    dden = (1.0 - 2.0 * nu) - 2.0 * (1.0 + nu)   # d den / d nu
    dlam_dnu = E * (den - nu * dden) / den ** 2
    return np.array([[dmu_dE, dmu_dnu], [dlam_dE, dlam_dnu]])


# ---------------------------------------------------------------------------
# batched projection and force assembly


@dataclass
class ElementCache:
    """Converged per-element projection state reused by the backward pass."""

    elem: Element
    F: np.ndarray
    svd: SvdTriple
    proj: Projection
    jac: ProjJacobian | None
    p: np.ndarray              # vec(P)


def project_element(elem, q, with_jacobian=True, tau_rel=1e-6):
    F = elem.unvec(elem.deformation(q))
    svd = svd_polar(F)
    mat = elem.material
    if mat.model == "neohookean":
        mu, lam = lame_from_young(mat.E, mat.nu)
        proj = project_neohookean(svd, mu, lam)
    else:
        proj = project_arap(svd)
    jac = None
    if with_jacobian:
        jac = proj_jacobian(svd, proj,
                            tau_sigma=tau_rel * float(np.max(svd.sigma)))
    return ElementCache(elem=elem, F=F, svd=svd, proj=proj, jac=jac,
                        p=proj.P.ravel(order="F"))


def project_elements(elems, q, with_jacobian=True, tau_rel=1e-6):
    return [project_element(e, q, with_jacobian, tau_rel) for e in elems]


def internal_force_and_rhs(scene, q, qhat, caches):
    """f_int = -sum w G^T (Gq - p) and b = M qhat + h^2 sum w G^T p."""
    f_int = np.zeros(scene.ndof)
    gp = np.zeros(scene.ndof)
    for c in caches:
        e = c.elem
        f_loc = e.w * (e.G.T @ (e.G @ q[e.dofs] - c.p))
        np.add.at(f_int, e.dofs, -f_loc)
        np.add.at(gp, e.dofs, e.w * (e.G.T @ c.p))
    b = scene.mass_vector() * qhat + scene.h ** 2 * gp
    return f_int, b


def elastic_energy(scene, q, caches=None):
    """Total projective energy sum_i w_i/2 |p_i - G_i q|^2 + zeta_i."""
    from . import core  # noqa: F401  (symmetry with other helpers)

    if caches is None:
        elems = build_elements(scene)
        caches = project_elements(elems, q, with_jacobian=False)
    total = 0.0
    for c in caches:
        e = c.elem
        diff = c.p - e.G @ q[e.dofs]
        total += 0.5 * e.w * float(diff @ diff) \
            + e.vol * c.proj.energy_density
    return total
