"""Gradient-descent identification, FD oracle, metrics, and test scenes.

Every identification target is self-generated: the reference trajectory is
produced by the same forward simulator at the target parameter value, so a
zero-loss solution exists and convergence is assertable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import adjoint as aj
from . import core
from . import forward as fw


# ---------------------------------------------------------------------------
# parameter registry


def _set_stiffness(scene, state0, x):
    for m in scene.materials:
        if m.model == "arap":
            m.stiffness = float(x)


def _set_E(scene, state0, x):
    for m in scene.materials:
        if m.model == "neohookean":
            m.E = float(x)


def _set_nu(scene, state0, x):
    for m in scene.materials:
        if m.model == "neohookean":
            m.nu = float(x)


def _set_mu(scene, state0, x):
    for c in scene.colliders:
        c.mu = float(x)


def _set_fext_axis(axis):
    def setter(scene, state0, x):
        f = np.zeros(scene.ndof)
        f[axis::3] = float(x) / scene.n_verts
        scene.fext = f
    return setter


def _set_v0_axis(axis):
    def setter(scene, state0, x):
        state0.v[axis::3] = float(x)
    return setter


def _set_Eb(scene, state0, x):
    for b in scene.bindings:
        b.compliance = float(x)


def _set_db_z(scene, state0, x):
    # vertical offset applied to every binding target (keeps face shapes)
    for b in scene.bindings:
        b.target[2] += float(x)


def _grad_fext_axis(axis):
    def extract(grads, scene):
        total = 0.0
        for g in grads.dL_dfext:
            total += float(np.sum(g[axis::3])) / scene.n_verts
        return total
    return extract


VARIABLES = {
    "stiffness": (_set_stiffness,
                  lambda g, s: g.dL_dstiffness),
    "E": (_set_E, lambda g, s: g.dL_dE),
    "nu": (_set_nu, lambda g, s: g.dL_dnu),
    "mu": (_set_mu, lambda g, s: g.dL_dmu_friction),
    "fext_x": (_set_fext_axis(0), _grad_fext_axis(0)),
    "fext_y": (_set_fext_axis(1), _grad_fext_axis(1)),
    "fext_z": (_set_fext_axis(2), _grad_fext_axis(2)),
    "v0_x": (_set_v0_axis(0),
             lambda g, s: float(np.sum(g.dL_dvbar[0::3]))),
    "v0_z": (_set_v0_axis(2),
             lambda g, s: float(np.sum(g.dL_dvbar[2::3]))),
    "Eb": (_set_Eb, lambda g, s: float(np.sum(g.dL_dEb))),
    "db_z": (_set_db_z, lambda g, s: float(np.sum(g.dL_ddb[:, 2]))),
}


@dataclass
class OptProblem:
    """One identification task.

    variable may name several parameters ("E,nu"); then init_value,
    target_value and every gradient are vectors over those names.
    """

    scene: core.Scene
    horizon: int
    variable: str
    init_value: float | np.ndarray
    learning_rate: float
    iterations: int
    target_state: np.ndarray | None = None
    target_value: float | np.ndarray | None = None
    log_space: bool = False
    fd_every: int = 0
    fd_eta: float = 1e-4
    initial_velocity: np.ndarray | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in self.names():
            if name not in VARIABLES:
                raise ValueError(f"unknown variable {name!r}; "
                                 f"known: {sorted(VARIABLES)}")

    def names(self):
        names = [v.strip() for v in str(self.variable).split(",")
                 if v.strip()]
        if not names:
            raise ValueError("empty variable list")
        return names

    @property
    def scalar(self):
        return len(self.names()) == 1


@dataclass
class OptTrace:
    losses: list = field(default_factory=list)
    params: list = field(default_factory=list)
    grads_ana: list = field(default_factory=list)
    grads_fd: list = field(default_factory=list)   # None where not computed
    diverged: bool = False


@dataclass
class MetricsReport:
    t50: float
    t90: float
    auc_e: float
    auc_m: float
    auc_l: float
    mre_e: float
    mre_m: float
    mre_l: float
    degenerate: bool = False


def _prepared(problem, x):
    scene = problem.scene.copy()
    state0 = scene.rest_state()
    if problem.initial_velocity is not None:
        state0.v[:] = problem.initial_velocity
    names = problem.names()
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    if xv.size != len(names):
        raise ValueError(f"expected {len(names)} parameter values, "
                         f"got {xv.size}")
    for name, xi in zip(names, xv):
        setter, _ = VARIABLES[name]
        setter(scene, state0, xi)
    return scene, state0


def resolve_target(problem):
    """Self-generate the target trajectory at target_value if needed."""
    if problem.target_state is None:
        if problem.target_value is None:
            raise ValueError("either target_state or target_value required")
        scene, state0 = _prepared(problem, problem.target_value)
        states, _ = fw.rollout(scene, state0, problem.horizon)
        problem.target_state = states[-1].q.copy()
    return problem.target_state


def rollout_loss(problem, x, with_grad=False):
    """L(x) = |q_T(x) - q_target|^2; optionally with the analytic gradient."""
    target = resolve_target(problem)
    scene, state0 = _prepared(problem, x)
    states, caches = fw.rollout(scene, state0, problem.horizon)
    L, _ = aj.loss_final_state(states[-1].q, target)
    if not with_grad:
        return L
    grads = aj.backprop_rollout(caches, target)
    g = np.array([VARIABLES[n][1](grads, scene) for n in problem.names()])
    return L, (float(g[0]) if problem.scalar else g)


def fd_gradient(problem, x, eta=None):
    """Central finite difference of the rollout loss, per component."""
    if eta is not None and eta <= 0:
        raise ValueError("eta must be positive")
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.empty(xv.size)
    for i in range(xv.size):
        ei = eta if eta is not None \
            else problem.fd_eta * max(abs(xv[i]), 1.0)
        d = np.zeros(xv.size)
        d[i] = ei
        lp = rollout_loss(problem, xv + d)
        lm = rollout_loss(problem, xv - d)
        g[i] = (lp - lm) / (2.0 * ei)
    return float(g[0]) if problem.scalar else g


def optimize(problem, use_fd=False):
    """Plain gradient descent (optionally in log-space); records a trace."""
    x = np.atleast_1d(np.asarray(problem.init_value, dtype=float)).copy()
    scalar = problem.scalar

    def unwrap(v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return float(v[0]) if scalar else v.copy()

    trace = OptTrace()
    for it in range(problem.iterations):
        try:
            if use_fd:
                L = rollout_loss(problem, x)
                g = fd_gradient(problem, x)
            else:
                L, g = rollout_loss(problem, x, with_grad=True)
            g_fd = None
            if problem.fd_every and it % problem.fd_every == 0:
                g_fd = fd_gradient(problem, x)
        except (RuntimeError, ValueError):
            # the forward solver blew up at this parameter: record the
            # divergence and keep the trace gathered so far
            trace.diverged = True
            break
        g = np.atleast_1d(np.asarray(g, dtype=float))
        trace.losses.append(L)
        trace.params.append(unwrap(x))
        trace.grads_ana.append(unwrap(g))
        trace.grads_fd.append(None if g_fd is None else unwrap(g_fd))
        if not np.isfinite(L) or not np.all(np.isfinite(g)):
            trace.diverged = True
            break
        if problem.log_space:
            u = np.log(x) - problem.learning_rate * g * x
            x = np.exp(u)
        else:
            x = x - problem.learning_rate * g
    return trace


# ---------------------------------------------------------------------------
# metrics


def metrics(trace, eps_g=1e-12):
    """Stage-wise convergence metrics over an optimization trace.

    t_p is the first iteration fraction at which p of the total loss
    reduction is achieved; AUC is the stage-mean normalized remaining
    loss; MRE the stage-mean relative gradient disagreement where an FD
    reference exists.
    """
    L = np.asarray(trace.losses, dtype=float)
    if L.size == 0:
        raise ValueError("empty trace")
    T = L.size - 1
    total = L[0] - L[-1]
    if T == 0 or total <= 0:
        return MetricsReport(t50=1.0, t90=1.0, auc_e=0.0, auc_m=0.0,
                             auc_l=0.0, mre_e=0.0, mre_m=0.0, mre_l=0.0,
                             degenerate=True)

    def first_hit(p):
        hits = np.nonzero(L[0] - L >= p * total)[0]
        return int(hits[0])

    i50 = first_hit(0.5)
    i90 = first_hit(0.9)
    stages = {
        "e": np.arange(0, max(i50, 1)),
        "m": np.arange(i50, max(i90, i50 + 1)),
        "l": np.arange(i90, T + 1),
    }

    def auc(idx):
        if idx.size == 0:
            return 0.0
        return float(np.mean((L[idx] - L[-1]) / total))

    def mre(idx):
        vals = []
        for i in idx:
            if i < len(trace.grads_fd) and trace.grads_fd[i] is not None:
                ga = np.atleast_1d(trace.grads_ana[i])
                gf = np.atleast_1d(trace.grads_fd[i])
                vals.append(np.linalg.norm(ga - gf)
                            / (np.linalg.norm(gf) + eps_g))
        return float(np.mean(vals)) if vals else 0.0

    return MetricsReport(
        t50=i50 / T, t90=i90 / T,
        auc_e=auc(stages["e"]), auc_m=auc(stages["m"]), auc_l=auc(stages["l"]),
        mre_e=mre(stages["e"]), mre_m=mre(stages["m"]), mre_l=mre(stages["l"]),
    )


# ---------------------------------------------------------------------------
# procedural scenes


def box_tet_mesh(nx, ny, nz, size=1.0, origin=(0.0, 0.0, 0.0)):
    """Regular grid of cubes, each split into six positively oriented tets."""
    dims = (nx + 1, ny + 1, nz + 1)
    verts = np.array([(origin[0] + i * size, origin[1] + j * size,
                       origin[2] + k * size)
                      for i in range(dims[0])
                      for j in range(dims[1])
                      for k in range(dims[2])])

    def vid(i, j, k):
        return (i * dims[1] + j) * dims[2] + k

    perms = list(itertools.permutations((0, 1, 2)))
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = np.array([i, j, k])
                for perm in perms:
                    path = [base.copy()]
                    cur = base.copy()
                    for ax in perm:
                        cur = cur.copy()
                        cur[ax] += 1
                        path.append(cur)
                    tet = [vid(*p) for p in path]
                    x = verts[tet]
                    dm = np.column_stack([x[1] - x[0], x[2] - x[0],
                                          x[3] - x[0]])
                    if np.linalg.det(dm) < 0:
                        tet[2], tet[3] = tet[3], tet[2]
                    tets.append(tet)
    return verts, np.asarray(tets, dtype=int)


def triangle_sheet(nx, nz, size=0.2, origin=(0.0, 0.0, 0.0)):
    """Vertical triangle-strip sheet in the x-z plane."""
    verts = np.array([(origin[0] + i * size, origin[1],
                       origin[2] - j * size)
                      for j in range(nz + 1) for i in range(nx + 1)])
    tris = []
    for j in range(nz):
        for i in range(nx):
            a = j * (nx + 1) + i
            b = a + 1
            c = a + (nx + 1)
            d = c + 1
            tris.append([a, b, c])
            tris.append([b, d, c])
    return verts, np.asarray(tris, dtype=int)


def _material_list(n, **kw):
    return [core.MaterialParams(**kw) for _ in range(n)]


def scene_library():
    """Deterministic desk-scale scenes for tests and benchmarks."""
    scenes = {}

    v, t = box_tet_mesh(2, 1, 1, size=0.5)
    pinned = [core.BindingSpec(i, v[i], compliance=1e-6)
              for i in np.nonzero(v[:, 0] == 0.0)[0]]   # clamp the x=0 face
    scenes["bar_arap"] = core.Scene(
        vertices=v, elements=t,
        masses=core.lumped_masses(v, t, density=1000.0),
        materials=_material_list(len(t), model="arap", stiffness=2e4),
        bindings=[core.BindingSpec(b.vertex, b.target.copy(), b.compliance)
                  for b in pinned],
        h=0.01)

    scenes["bar_neohookean"] = core.Scene(
        vertices=v.copy(), elements=t.copy(),
        masses=core.lumped_masses(v, t, density=1000.0),
        materials=_material_list(len(t), model="neohookean", E=5e4, nu=0.3),
        bindings=[core.BindingSpec(b.vertex, b.target.copy(), b.compliance)
                  for b in pinned],
        h=0.01)

    vs, ts = triangle_sheet(3, 3, size=0.2, origin=(0.0, 0.0, 1.0))
    pins = [core.BindingSpec(i, vs[i], compliance=1e-6)
            for i in range(4)]        # top row
    scenes["hanging_sheet"] = core.Scene(
        vertices=vs, elements=ts,
        masses=core.lumped_masses(vs, ts, density=0.3),
        materials=_material_list(len(ts), model="arap", stiffness=50.0),
        bindings=pins, h=0.01)

    vb, tb = box_tet_mesh(1, 1, 1, size=0.4, origin=(0.0, 0.0, 0.001))
    scenes["block_on_plane"] = core.Scene(
        vertices=vb, elements=tb,
        masses=core.lumped_masses(vb, tb, density=1000.0),
        materials=_material_list(len(tb), model="arap", stiffness=5e4),
        colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)],
        h=0.01)

    for tag, mu in (("high", 0.101), ("low", 0.099)):
        m_tot = 1000.0
        f = np.zeros(3)
        f[0] = 0.1 * m_tot * 9.8
        scenes[f"friction_{tag}"] = core.Scene(
            vertices=np.array([[0.0, 0.0, 1e-6]]),
            elements=np.zeros((0, 4), dtype=int),
            masses=np.array([m_tot]),
            materials=[],
            colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=mu)],
            eps_fb=1e-6,
            fext=f,
            h=0.01)

    # pushed block that slides for every mu in [0.1, 0.55]
    scenes["friction_ident"] = core.Scene(
        vertices=np.array([[0.0, 0.0, 1e-6]]),
        elements=np.zeros((0, 4), dtype=int),
        masses=np.array([1.0]),
        materials=[],
        colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.55)],
        eps_fb=2e-6,
        fext=np.array([6.0, 0.0, 0.0]),
        h=0.01)

    # vertical-control block; the wide smoothing gives the contact plateau
    # a usable gradient, and the activation radius keeps it always active
    scenes["block_lift"] = core.Scene(
        vertices=np.array([[0.0, 0.0, 1e-5]]),
        elements=np.zeros((0, 4), dtype=int),
        masses=np.array([1.0]),
        materials=[],
        colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)],
        eps_fb=2e-1,
        contact_activation=10.0,
        h=0.01)

    return scenes
