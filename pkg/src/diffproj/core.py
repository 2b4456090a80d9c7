"""State, scene description, sparse matrices and the global system matrix.

The system matrix A = M + h^2 sum_i w_i G_i^T G_i is assembled once per
scene into a frozen CSR pattern.  A precomputed slot map allows later
re-assemblies (e.g. after a stiffness update, or to add the -DeltaA
projection term in the backward pass) to touch values only, never the
pattern.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


# ---------------------------------------------------------------------------
# basic types


@dataclass
class SimState:
    """Flat positions/velocities of all vertices at one time step."""

    q: np.ndarray
    v: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.v = np.asarray(self.v, dtype=float).ravel()
        if self.q.shape != self.v.shape:
            raise ValueError("q and v must have the same length")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise ValueError("non-finite state")

    def copy(self):
        return SimState(self.q.copy(), self.v.copy(), self.step_index)


@dataclass
class MaterialParams:
    """Constitutive law of one element.

    model is "arap" or "neohookean".  For neohookean E (Young's modulus, Pa)
    and nu (Poisson's ratio) define the Lame parameters and the constraint
    weight w = 2*mu_shear*volume.  For arap the weight is
    w = stiffness*volume with a direct stiffness scalar.
    """

    model: str = "arap"
    E: float = 1e4
    nu: float = 0.3
    stiffness: float = 1e4

    def __post_init__(self):
        if self.model not in ("arap", "neohookean"):
            raise ValueError(f"unknown material model {self.model!r}")
        if self.model == "neohookean":
            if self.E <= 0:
                raise ValueError("E must be positive")
            if not (-1.0 < self.nu < 0.5):
                raise ValueError("nu must lie in (-1, 0.5)")
        elif self.stiffness < 0:
            raise ValueError("stiffness must be nonnegative")


@dataclass
class BindingSpec:
    """Soft point attachment: linear spring with compliance E_b.

    The residual is J_b q - d_b + E_b * lambda_b = 0 where J_b selects the
    three dofs of `vertex` and d_b is the world-space target.
    """

    vertex: int
    target: np.ndarray
    compliance: float = 1e-8

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).ravel()
        if self.target.shape != (3,):
            raise ValueError("binding target must be a 3-vector")
        if self.compliance <= 0:
            raise ValueError("binding compliance must be positive")

    def dofs(self):
        return np.arange(3 * self.vertex, 3 * self.vertex + 3)


class HalfSpace:
    """Analytic half-space collider: region n.x - offset >= 0 is free."""

    kind = "halfspace"

    def __init__(self, normal, offset=0.0, mu=0.0):
        self.normal = np.asarray(normal, dtype=float).ravel()
        n = np.linalg.norm(self.normal)
        if not np.isclose(n, 1.0, atol=1e-9):
            if n == 0:
                raise ValueError("half-space normal must be nonzero")
            self.normal = self.normal / n
        self.offset = float(offset)
        if mu < 0:
            raise ValueError("friction coefficient must be nonnegative")
        self.mu = float(mu)

    def gap_normal(self, x):
        """Signed gap and outward normal at point x."""
        return float(self.normal @ x - self.offset), self.normal

    def to_json(self):
        return {"type": "halfspace", "normal": self.normal.tolist(),
                "offset": self.offset, "mu": self.mu}


class Sphere:
    """Analytic solid sphere obstacle."""

    kind = "sphere"

    def __init__(self, center, radius, mu=0.0):
        self.center = np.asarray(center, dtype=float).ravel()
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        if mu < 0:
            raise ValueError("friction coefficient must be nonnegative")
        self.radius = float(radius)
        self.mu = float(mu)

    def gap_normal(self, x):
        d = x - self.center
        r = np.linalg.norm(d)
        if r < 1e-14:
            # degenerate: vertex at the center, pick an arbitrary normal
            return -self.radius, np.array([0.0, 0.0, 1.0])
        return float(r - self.radius), d / r

    def to_json(self):
        return {"type": "sphere", "center": self.center.tolist(),
                "radius": self.radius, "mu": self.mu}


@dataclass
class Scene:
    """Mesh topology, materials, mass, colliders, bindings and step setup.

    vertices: (n,3) rest positions.  elements: (m,4) tetrahedra or (m,3)
    surface triangles.  eps_fb stores 2*eps^2 of the smoothed
    Fischer-Burmeister function.
    """

    vertices: np.ndarray
    elements: np.ndarray
    masses: np.ndarray
    materials: list = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.8]))
    h: float = 0.01
    bindings: list = field(default_factory=list)
    colliders: list = field(default_factory=list)
    eps_fb: float = 1e-6          # = 2*eps^2
    fext: np.ndarray | None = None
    contact_activation: float = 1e-3

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.elements = np.asarray(self.elements, dtype=int)
        if self.elements.size == 0:
            self.elements = self.elements.reshape(0, 4)
        self.masses = np.asarray(self.masses, dtype=float).ravel()
        self.gravity = np.asarray(self.gravity, dtype=float).ravel()
        if self.fext is not None:
            self.fext = np.asarray(self.fext, dtype=float).ravel()
        self.validate()

    # -- derived quantities

    @property
    def n_verts(self):
        return self.vertices.shape[0]

    @property
    def ndof(self):
        return 3 * self.n_verts

    def mass_vector(self):
        """Lumped mass repeated per dof (length 3n)."""
        return np.repeat(self.masses, 3)

    def external_force(self):
        """Total per-dof external force: fext plus gravity on lumped mass."""
        f = np.zeros(self.ndof) if self.fext is None else self.fext.copy()
        f += self.mass_vector() * np.tile(self.gravity, self.n_verts)
        return f

    def validate(self):
        if self.h <= 0:
            raise ValueError("time step must be positive")
        if self.masses.shape[0] != self.n_verts:
            raise ValueError("masses length must match vertex count")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")
        if self.eps_fb <= 0:
            raise ValueError("eps_fb (2*eps^2) must be positive")
        if self.elements.size and (self.elements.min() < 0
                                   or self.elements.max() >= self.n_verts):
            raise ValueError("element index out of range")
        n_elem = self.elements.shape[0]
        if n_elem and len(self.materials) != n_elem:
            raise ValueError("one MaterialParams per element required")
        if self.fext is not None and self.fext.shape[0] != self.ndof:
            raise ValueError("fext length must be 3*n_verts")

    def rest_state(self):
        return SimState(self.vertices.ravel().copy(), np.zeros(self.ndof))

    def copy(self):
        return Scene(
            vertices=self.vertices.copy(),
            elements=self.elements.copy(),
            masses=self.masses.copy(),
            materials=[MaterialParams(m.model, m.E, m.nu, m.stiffness)
                       for m in self.materials],
            gravity=self.gravity.copy(),
            h=self.h,
            bindings=[BindingSpec(b.vertex, b.target.copy(), b.compliance)
                      for b in self.bindings],
            colliders=[_collider_from_json(c.to_json()) for c in self.colliders],
            eps_fb=self.eps_fb,
            fext=None if self.fext is None else self.fext.copy(),
            contact_activation=self.contact_activation,
        )


# ---------------------------------------------------------------------------
# sparse matrices


class SparseMat:
    """CSR matrix with a frozen pattern (sorted, unique column indices)."""

    def __init__(self, indptr, indices, data, shape):
        self._m = sp.csr_matrix((np.asarray(data, dtype=float),
                                 np.asarray(indices, dtype=np.int64),
                                 np.asarray(indptr, dtype=np.int64)),
                                shape=shape)
        self._m.sort_indices()

    @classmethod
    def from_scipy(cls, m):
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape)

    @property
    def indptr(self):
        return self._m.indptr

    @property
    def indices(self):
        return self._m.indices

    @property
    def data(self):
        return self._m.data

    @property
    def shape(self):
        return self._m.shape

    def to_scipy(self):
        return self._m

    def to_dense(self):
        return self._m.toarray()

    def diagonal(self):
        return self._m.diagonal()

    def copy(self):
        return SparseMat(self.indptr.copy(), self.indices.copy(),
                         self.data.copy(), self.shape)

    def pattern_hash(self):
        return hash((self.indptr.tobytes(), self.indices.tobytes(), self.shape))


def spmv(mat, x):
    """CSR matrix-vector product."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != mat.shape[1]:
        raise ValueError("spmv dimension mismatch")
    return mat.to_scipy() @ x


def spmv_transpose(mat, x):
    """CSR transposed matrix-vector product."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != mat.shape[0]:
        raise ValueError("spmv_transpose dimension mismatch")
    return mat.to_scipy().T @ x


# ---------------------------------------------------------------------------
# system matrix assembly


@dataclass
class SystemMatrix:
    """A = M + h^2 sum_i w_i G_i^T G_i plus the reusable scatter map.

    slot_map[e] maps element e's dense local block (flattened row-major over
    its dof list) to positions in the CSR data array.  diag_slots maps the
    per-dof mass diagonal.  elements carries the per-element kinematic data
    (G, weight, rest volume) so the forward/backward passes reuse one
    precomputation.
    """

    A: SparseMat
    slot_map: list
    diag_slots: np.ndarray
    elements: list

    def reassemble(self, scene, weights=None):
        """Refill values for new weights without touching the pattern."""
        fill_pattern(self, scene, weights=weights)
        return self


def _csr_slot(A, i, j):
    lo, hi = A.indptr[i], A.indptr[i + 1]
    k = lo + np.searchsorted(A.indices[lo:hi], j)
    return int(k)


def build_block_pattern(ndof, blocks):
    """CSR pattern covering the diagonal plus a list of dense dof blocks.

    Returns (SparseMat with zero data, slot_map per block, diag_slots).
    """
    rows = [np.arange(ndof)]
    cols = [np.arange(ndof)]
    for dofs in blocks:
        r, c = np.meshgrid(dofs, dofs, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    m = sp.csr_matrix((np.zeros(rows.size), (rows, cols)), shape=(ndof, ndof))
    m.sum_duplicates()
    m.sort_indices()
    A = SparseMat(m.indptr, m.indices, m.data, m.shape)
    slot_map = []
    for dofs in blocks:
        slots = np.empty((len(dofs), len(dofs)), dtype=np.int64)
        for a, i in enumerate(dofs):
            for b, j in enumerate(dofs):
                slots[a, b] = _csr_slot(A, i, j)
        slot_map.append(slots.ravel())
    diag_slots = np.array([_csr_slot(A, i, i) for i in range(ndof)])
    return A, slot_map, diag_slots


def fill_pattern(sysmat, scene, weights=None):
    """Write M + h^2 sum w G^T G into the existing CSR values."""
    A = sysmat.A
    A.data[:] = 0.0
    A.data[sysmat.diag_slots] += scene.mass_vector()
    h2 = scene.h ** 2
    for k, elem in enumerate(sysmat.elements):
        w = elem.w if weights is None else weights[k]
        block = h2 * w * (elem.G.T @ elem.G)
        np.add.at(A.data, sysmat.slot_map[k], block.ravel())


def assemble_system_matrix(scene) -> SystemMatrix:
    """Assemble A and the pattern/slot maps reused by every later pass."""
    from . import elasticity  # local import: elasticity imports core types

    elems = elasticity.build_elements(scene)
    A, slot_map, diag_slots = build_block_pattern(
        scene.ndof, [e.dofs for e in elems])
    sysmat = SystemMatrix(A=A, slot_map=slot_map, diag_slots=diag_slots,
                          elements=elems)
    fill_pattern(sysmat, scene)
    return sysmat


def predict(scene, state):
    """Inertial prediction q_hat = q + h v + h^2 M^-1 (fext + m g)."""
    if state.q.shape[0] != scene.ndof:
        raise ValueError("state does not match scene")
    minv = 1.0 / scene.mass_vector()
    return state.q + scene.h * state.v + scene.h ** 2 * minv * scene.external_force()


# ---------------------------------------------------------------------------
# scene file I/O


def _collider_from_json(d):
    kind = d["type"].lower()
    if kind == "halfspace":
        return HalfSpace(d["normal"], d.get("offset", 0.0), d.get("mu", 0.0))
    if kind == "sphere":
        return Sphere(d["center"], d["radius"], d.get("mu", 0.0))
    raise ValueError(f"unknown collider type {d['type']!r}")


def _material_from_json(d):
    model = d.get("model", "arap").lower()
    return MaterialParams(model=model,
                          E=float(d.get("E", 1e4)),
                          nu=float(d.get("nu", 0.3)),
                          stiffness=float(d.get("stiffness", 1e4)))


def scene_from_dict(doc):
    vertices = np.asarray(doc["vertices"], dtype=float)
    elements = np.asarray(doc.get("elements", []), dtype=int)
    if elements.size == 0:
        elements = elements.reshape(0, 4)
    n = vertices.shape[0]
    if "masses" in doc:
        masses = np.asarray(doc["masses"], dtype=float)
    else:
        density = float(doc.get("density", 1000.0))
        masses = lumped_masses(vertices, elements, density)
    mat = _material_from_json(doc.get("material", {}))
    materials = [mat] * elements.shape[0]
    bindings = [BindingSpec(int(b["vertex"]), b["target"],
                            float(b.get("compliance", 1e-8)))
                for b in doc.get("bindings", [])]
    colliders = [_collider_from_json(c) for c in doc.get("colliders", [])]
    fext = None
    if doc.get("fext") is not None:
        fext = np.asarray(doc["fext"], dtype=float).reshape(n, 3).ravel()
    return Scene(
        vertices=vertices,
        elements=elements,
        masses=masses,
        materials=materials,
        gravity=np.asarray(doc.get("gravity", [0.0, 0.0, -9.8]), dtype=float),
        h=float(doc.get("dt", 0.01)),
        bindings=bindings,
        colliders=colliders,
        eps_fb=float(doc.get("eps2", 1e-6)),
        fext=fext,
        contact_activation=float(doc.get("contact_activation", 1e-3)),
    )


def scene_to_dict(scene):
    mat = scene.materials[0] if scene.materials else MaterialParams()
    doc = {
        "vertices": scene.vertices.tolist(),
        "elements": scene.elements.tolist(),
        "masses": scene.masses.tolist(),
        "material": {"model": mat.model, "E": mat.E, "nu": mat.nu,
                     "stiffness": mat.stiffness},
        "gravity": scene.gravity.tolist(),
        "dt": scene.h,
        "eps2": scene.eps_fb,
        "bindings": [{"vertex": int(b.vertex), "target": b.target.tolist(),
                      "compliance": float(b.compliance)}
                     for b in scene.bindings],
        "colliders": [c.to_json() for c in scene.colliders],
        "contact_activation": scene.contact_activation,
    }
    if scene.fext is not None:
        doc["fext"] = scene.fext.reshape(-1, 3).tolist()
    return doc


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def save_scene(scene, path):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=1)


def lumped_masses(vertices, elements, density):
    """Distribute element rest volume (or area) mass equally to vertices."""
    from . import elasticity

    n = vertices.shape[0]
    masses = np.zeros(n)
    if elements.size == 0:
        return np.full(n, density)
    for el in elements:
        vol = elasticity.rest_measure(vertices, el)
        masses[el] += density * vol / len(el)
    # isolated vertices still need positive mass
    masses[masses == 0] = density * 1e-6
    return masses
