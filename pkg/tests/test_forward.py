"""Implicit forward stepping: convergence, constraints and contact behavior."""

import numpy as np
import pytest

from diffproj import contact as ct
from diffproj import core, forward as fw
from diffproj import elasticity as el

from conftest import single_tet_scene


def particle_scene(**kw):
    args = dict(vertices=np.array([[0.0, 0.0, 1.0]]),
                elements=np.zeros((0, 4), dtype=int),
                masses=np.array([2.0]), materials=[], h=0.01)
    args.update(kw)
    return core.Scene(**args)


class TestFreeMotion:
    def test_single_particle_matches_symplectic_euler(self):
        scene = particle_scene()
        states, _ = fw.rollout(scene, scene.rest_state(), 5)
        g = -9.8
        h = scene.h
        v = 0.0
        z = 1.0
        for k in range(1, 6):
            v += h * g
            z += h * v
            assert states[k].q[2] == pytest.approx(z, abs=1e-9)
            assert states[k].v[2] == pytest.approx(v, abs=1e-9)

    def test_rigid_free_fall_keeps_shape(self):
        scene = single_tet_scene()
        scene.bindings = []
        states, caches = fw.rollout(scene, scene.rest_state(), 10)
        d0 = scene.vertices[1] - scene.vertices[0]
        q = states[-1].q
        d = q[3:6] - q[0:3]
        assert np.allclose(d, d0, atol=1e-8)
        assert all(c.report.converged for c in caches)

    def test_residual_below_tolerance_at_convergence(self):
        scene = single_tet_scene()
        sysmat = core.assemble_system_matrix(scene)
        state, report = fw.forward_step(scene, scene.rest_state(), sysmat)
        assert report.converged
        assert report.residual_history[-1] <= 1e-9


class TestBindings:
    def test_stiff_binding_holds_vertex(self):
        scene = single_tet_scene()
        scene.bindings[0].compliance = 1e-10
        states, _ = fw.rollout(scene, scene.rest_state(), 20)
        moved = np.linalg.norm(states[-1].q[:3] - scene.vertices[0])
        assert moved < 1e-5

    def test_binding_multiplier_sign(self):
        # gravity pulls down; the binding on vertex 0 must pull up
        scene = single_tet_scene()
        sysmat = core.assemble_system_matrix(scene)
        state, report = fw.forward_step(scene, scene.rest_state(), sysmat)
        lam = fw.binding_multiplier(scene.bindings[0], state.q)
        assert lam[2] > 0

    def test_compliant_binding_stretches(self):
        scene = single_tet_scene()
        scene.bindings[0].compliance = 1e-2
        states, _ = fw.rollout(scene, scene.rest_state(), 30)
        assert states[-1].q[2] < scene.vertices[0, 2] - 1e-5


class TestContact:
    def test_particle_rests_on_plane(self):
        scene = particle_scene(
            vertices=np.array([[0.0, 0.0, 1e-4]]),
            colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)])
        states, caches = fw.rollout(scene, scene.rest_state(), 50)
        for st in states:
            assert st.q[2] > 0
        # settles near the smoothed rest gap eps^2/(m g)
        eps_sq = 0.5 * scene.eps_fb
        rest_gap = eps_sq / (scene.masses[0] * 9.8)
        assert states[-1].q[2] == pytest.approx(rest_gap, rel=1e-3)

    def test_drop_onto_plane_no_penetration(self):
        scene = particle_scene(
            vertices=np.array([[0.0, 0.0, 0.05]]),
            colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)])
        states, _ = fw.rollout(scene, scene.rest_state(), 100)
        assert min(st.q[2] for st in states) > 0

    def test_contact_residual_small_at_convergence(self):
        scene = particle_scene(
            vertices=np.array([[0.0, 0.0, 1e-4]]),
            colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.3)])
        sysmat = core.assemble_system_matrix(scene)
        state, report = fw.forward_step(scene, scene.rest_state(), sysmat)
        assert report.converged
        for res in report.contact_residuals:
            # normal row exact; the tangential row carries the smoothing
            # residue of the cone cap while sticking
            assert abs(res[0]) < 1e-12
            assert abs(res[1]) < 1e-6
            assert abs(res[2]) < 1e-12

    def test_friction_slows_tangential_motion(self):
        base = dict(vertices=np.array([[0.0, 0.0, 1e-5]]),
                    masses=np.array([1.0]),
                    elements=np.zeros((0, 4), dtype=int), materials=[],
                    fext=np.array([2.0, 0.0, 0.0]), h=0.01)
        free = core.Scene(colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)],
                          **base)
        rough = core.Scene(colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.15)],
                           **base)
        sf, _ = fw.rollout(free, free.rest_state(), 40)
        sr, _ = fw.rollout(rough, rough.rest_state(), 40)
        assert sr[-1].q[0] < sf[-1].q[0]
        assert sr[-1].q[0] > 0      # 2 N exceeds mu m g: it still slides

    def test_pullback_respects_previous_gap(self):
        scene = particle_scene(
            vertices=np.array([[0.0, 0.0, 1e-8]]),
            colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)])
        q_bar = scene.vertices.ravel().copy()
        q = q_bar.copy()
        q[2] = -1e-3
        out = fw._pullback(scene, q.copy(), margin=1e-6, q_bar=q_bar)
        # warm start: not pushed further out than the previous tiny gap
        assert 0 < out[2] <= 1e-8 + 1e-15

    def test_sphere_collider(self):
        scene = particle_scene(
            vertices=np.array([[0.0, 0.0, 1.05]]),
            colliders=[core.Sphere([0.0, 0.0, 0.0], 1.0, mu=0.0)])
        states, _ = fw.rollout(scene, scene.rest_state(), 50)
        for st in states:
            assert np.linalg.norm(st.q) > 1.0


class TestNewtonMatrix:
    def test_dense_and_sparse_assembly_agree(self):
        scene = single_tet_scene()
        scene.colliders = [core.HalfSpace([0, 0, 1], -0.5, mu=0.2)]
        scene.contact_activation = 10.0
        sysmat = core.assemble_system_matrix(scene)
        state, report = fw.forward_step(scene, scene.rest_state(), sysmat)
        cache = report.cache
        Ad = fw.assemble_system_jacobian_dense(scene, sysmat,
                                               cache.elem_caches,
                                               cache.contacts)
        As = fw.assemble_system_jacobian(scene, sysmat, cache.elem_caches,
                                         cache.contacts).toarray()
        assert np.allclose(Ad, As, atol=1e-10)

    def test_jacobian_matches_fd_of_residual(self):
        # the Newton matrix is the exact derivative of the momentum residual
        scene = single_tet_scene(model="neohookean")
        sysmat = core.assemble_system_matrix(scene)
        state = scene.rest_state()
        q_bar = state.q.copy()
        q_hat = core.predict(scene, state)
        q = q_hat + 1e-4 * np.sin(np.arange(scene.ndof))

        def residual(qv):
            caches = el.project_elements(sysmat.elements, qv)
            contacts = ct.detect_contacts(scene, qv, q_bar)
            for cp in contacts:
                ct.solve_multipliers(cp, qv, q_bar)
            return fw.momentum_residual(scene, sysmat, qv, q_bar, q_hat,
                                        caches, contacts)

        caches = el.project_elements(sysmat.elements, q)
        contacts = ct.detect_contacts(scene, q, q_bar)
        A = fw.assemble_system_jacobian_dense(scene, sysmat, caches, contacts)
        eta = 1e-6
        J_fd = np.zeros((scene.ndof, scene.ndof))
        for k in range(scene.ndof):
            d = np.zeros(scene.ndof)
            d[k] = eta
            J_fd[:, k] = (residual(q + d) - residual(q - d)) / (2 * eta)
        rel = np.linalg.norm(A - J_fd) / np.linalg.norm(J_fd)
        assert rel < 1e-5


class TestRollout:
    def test_raises_on_nonconvergence(self):
        scene = particle_scene(
            vertices=np.array([[0.0, 0.0, 1e-4]]),
            colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)])
        cfg = fw.ForwardConfig(tol=1e-30, max_iter=2)
        with pytest.raises(RuntimeError, match="did not converge"):
            fw.rollout(scene, scene.rest_state(), 1, cfg=cfg)

    def test_caches_chain_states(self, library):
        scene = library["bar_arap"].copy()
        states, caches = fw.rollout(scene, scene.rest_state(), 4)
        for k, c in enumerate(caches):
            assert np.allclose(c.q_bar, states[k].q)
            assert np.allclose(c.q_new, states[k + 1].q)

    def test_clamped_bar_sags_and_stays_bounded(self, library):
        scene = library["bar_arap"].copy()
        states, _ = fw.rollout(scene, scene.rest_state(), 150)
        tip = int(np.argmax(scene.vertices[:, 0]))
        rest_z = scene.vertices[tip, 2]
        sagged = min(st.q[3 * tip + 2] for st in states)
        assert sagged < rest_z - 1e-4
        span = max(np.abs(st.q).max() for st in states)
        assert span < 10.0 * np.abs(scene.vertices).max()
