"""Smoothed complementarity contact: multipliers, frames, derivative blocks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffproj import contact as ct
from diffproj import core


def make_contact(mu=0.3, eps2=1e-6, frame=None):
    frame = np.eye(3) if frame is None else frame
    return ct.ContactPoint(vertex=0, frame=frame, d_n=0.0, mu=mu, eps2=eps2)


def solve_state(dn, df, mu=0.3, eps2=1e-6):
    """Converged contact at gap dn and slip df, in the identity frame."""
    cp = make_contact(mu=mu, eps2=eps2)
    q_bar = np.zeros(3)
    q = np.array([dn, df[0], df[1]])
    ct.solve_multipliers(cp, q, q_bar)
    return cp


class TestFischerBurmeister:
    @given(st.floats(-10, 10), st.floats(-10, 10),
           st.floats(1e-12, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_bounded_by_exact_fb(self, x, y, eps2):
        # smoothing only lowers the value, and the gap vanishes with eps2
        exact = x + y - np.sqrt(x * x + y * y)
        val = ct.fb_smooth(x, y, eps2)
        assert val <= exact + 1e-15
        assert exact - val <= np.sqrt(eps2)

    @given(st.floats(1e-6, 10), st.floats(1e-12, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_zero_set_is_hyperbola(self, x, eps2):
        # fb(x, y) = 0 exactly when x y = eps2 / 2 ... no: x y = eps^2
        # with eps2 = 2 eps^2, so x y = eps2 / 2
        y = 0.5 * eps2 / x
        assert ct.fb_smooth(x, y, eps2) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        eps2 = 1e-4
        for _ in range(20):
            x, y = rng.standard_normal(2)
            gx, gy = ct.fb_grad(x, y, eps2)
            eta = 1e-6
            assert gx == pytest.approx(
                (ct.fb_smooth(x + eta, y, eps2)
                 - ct.fb_smooth(x - eta, y, eps2)) / (2 * eta), rel=1e-5)
            assert gy == pytest.approx(
                (ct.fb_smooth(x, y + eta, eps2)
                 - ct.fb_smooth(x, y - eta, eps2)) / (2 * eta), rel=1e-5)

    def test_requires_positive_eps2(self):
        with pytest.raises(ValueError):
            ct.fb_smooth(1.0, 1.0, 0.0)


class TestMultipliers:
    def test_normal_complementarity_exact(self):
        cp = solve_state(1e-3, np.array([0.0, 0.0]))
        assert cp.lam[0] * cp.delta[0] == pytest.approx(0.5 * cp.eps2)
        res = ct.contact_residual(cp, np.array([1e-3, 0.0, 0.0]),
                                  np.zeros(3))
        assert abs(res[0]) < 1e-15

    def test_friction_opposes_slip(self):
        cp = solve_state(1e-4, np.array([2e-3, 1e-3]))
        lam_f = cp.lam[1:]
        df = cp.delta[1:]
        assert lam_f @ df < 0
        # aligned: lam_f is a negative multiple of df
        cosang = (lam_f @ df) / (np.linalg.norm(lam_f) * np.linalg.norm(df))
        assert cosang == pytest.approx(-1.0, abs=1e-12)

    def test_cone_bound_holds(self, rng):
        for _ in range(200):
            dn = 10.0 ** rng.uniform(-6, -1)
            df = 10.0 ** rng.uniform(-8, -1) * rng.standard_normal(2)
            mu = rng.uniform(0.05, 1.0)
            cp = solve_state(dn, df, mu=mu)
            assert np.linalg.norm(cp.lam[1:]) <= mu * cp.lam[0] * (1 + 1e-12)

    def test_sliding_residual_zero(self):
        # fast slip: the tangential FB row is satisfied on the cone surface
        cp = solve_state(1e-3, np.array([5e-2, 0.0]))
        res = ct.contact_residual(cp, np.array([1e-3, 5e-2, 0.0]),
                                  np.zeros(3))
        assert np.all(np.abs(res) < 1e-12)

    def test_rejects_penetration(self):
        cp = make_contact()
        with pytest.raises(ValueError):
            ct.solve_multipliers(cp, np.array([-1e-5, 0.0, 0.0]), np.zeros(3))

    def test_capped_flag(self):
        slow = solve_state(1e-3, np.array([1e-8, 0.0]))
        fast = solve_state(1e-3, np.array([1e-1, 0.0]))
        assert slow.cone_capped
        assert not fast.cone_capped


class TestDetection:
    def test_deterministic_and_filtered(self, rng):
        v = rng.uniform(-1, 1, size=(8, 3))
        v[:, 2] = np.abs(v[:, 2]) + 1e-5
        v[0, 2] = 0.5       # far above activation
        scene = core.Scene(vertices=v,
                           elements=np.zeros((0, 4), dtype=int),
                           masses=np.ones(8), materials=[],
                           colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.2)],
                           contact_activation=1e-2, h=0.01)
        q = v.ravel()
        cons = ct.detect_contacts(scene, q, q)
        ids = [c.vertex for c in cons]
        assert ids == sorted(ids)
        assert 0 not in ids
        assert all(v[i, 2] <= 1e-2 for i in ids)
        again = ct.detect_contacts(scene, q, q)
        assert [c.vertex for c in again] == ids

    def test_frame_is_orthonormal(self):
        n = np.array([0.3, -0.4, 0.8660254])
        n /= np.linalg.norm(n)
        t1, t2 = ct._tangent_basis(n)
        B = np.vstack([n, t1, t2])
        assert np.allclose(B @ B.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(B) == pytest.approx(1.0, abs=1e-10)

    def test_gap_datum(self):
        scene = core.Scene(vertices=np.array([[0.0, 0.0, 5e-4]]),
                           elements=np.zeros((0, 4), dtype=int),
                           masses=np.ones(1), materials=[],
                           colliders=[core.HalfSpace([0, 0, 1], 0.0, mu=0.0)],
                           h=0.01)
        q = scene.vertices.ravel()
        (cp,) = ct.detect_contacts(scene, q, q)
        dn, df = cp.gaps(q, q)
        assert dn == pytest.approx(5e-4)
        assert np.allclose(df, 0.0)


class TestRotationR:
    def test_maps_slip_to_axis(self, rng):
        for _ in range(50):
            df = rng.standard_normal(2)
            lam_f = -rng.uniform(0.1, 2.0) * df
            rot = ct.build_R(df, lam_f)
            R = rot.R
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
            dd = R @ np.array([1.0, df[0], df[1]])
            ll = R @ np.array([2.0, lam_f[0], lam_f[1]])
            assert dd[1] == pytest.approx(np.linalg.norm(df))
            assert dd[2] == pytest.approx(0.0, abs=1e-12)
            assert ll[1] == pytest.approx(-np.linalg.norm(lam_f))
            assert ll[2] == pytest.approx(0.0, abs=1e-12)

    def test_friction_fallback_and_identity(self):
        lam_f = np.array([0.3, -0.4])
        rot = ct.build_R(np.zeros(2), lam_f)
        ll = rot.R @ np.array([0.0, lam_f[0], lam_f[1]])
        assert ll[1] == pytest.approx(-0.5)
        assert np.allclose(ct.build_R(np.zeros(2), np.zeros(2)).R, np.eye(3))


def block_fd(cp_template, q0, eta=1e-9):
    """FD of lambda_c w.r.t. delta_c through the condensed solve."""
    K = np.zeros((3, 3))
    for k in range(3):
        d = np.zeros(3)
        d[k] = eta
        cp_p = make_contact(mu=cp_template.mu, eps2=cp_template.eps2)
        cp_m = make_contact(mu=cp_template.mu, eps2=cp_template.eps2)
        lp = ct.solve_multipliers(cp_p, q0 + d, np.zeros(3)).lam
        lm = ct.solve_multipliers(cp_m, q0 - d, np.zeros(3)).lam
        K[:, k] = -(lp - lm) / (2.0 * eta)
    return K


class TestContactBlock:
    def _check(self, dn, df, mu, eps2=1e-6, tol=1e-4, eta=None):
        cp = solve_state(dn, df, mu=mu, eps2=eps2)
        blk = ct.contact_block(cp)
        if eta is None:
            eta = 1e-7 * max(dn, np.linalg.norm(df), 1e-4)
        K_fd = block_fd(cp, np.array([dn, df[0], df[1]]), eta=eta)
        rel = np.linalg.norm(blk.Kc_local - K_fd) / np.linalg.norm(K_fd)
        assert rel < tol, (dn, df, mu, rel)

    def test_sliding_block_matches_fd(self, rng):
        for _ in range(60):
            dn = 10.0 ** rng.uniform(-5, -2)
            df = 10.0 ** rng.uniform(-3, -1) * rng.standard_normal(2)
            self._check(dn, df, mu=rng.uniform(0.1, 0.9))

    def test_sticking_block_matches_fd(self, rng):
        # slip small enough that the cone clamp engages
        for _ in range(40):
            dn = 10.0 ** rng.uniform(-4, -2)
            df = 10.0 ** rng.uniform(-8, -7) * rng.standard_normal(2)
            self._check(dn, df, mu=rng.uniform(0.2, 0.9),
                        eta=1e-3 * np.linalg.norm(df))

    def test_near_separation_matches_fd(self, rng):
        for _ in range(20):
            dn = 10.0 ** rng.uniform(-2, -1)   # large gap, tiny force
            df = 10.0 ** rng.uniform(-4, -2) * rng.standard_normal(2)
            self._check(dn, df, mu=rng.uniform(0.1, 0.9))

    def test_frictionless_block_is_normal_only(self):
        cp = solve_state(1e-3, np.array([1e-3, 0.0]), mu=0.0)
        blk = ct.contact_block(cp)
        K = blk.Kc_local
        assert K[0, 0] == pytest.approx(cp.lam[0] / cp.delta[0])
        assert np.allclose(K[0, 1:], 0.0)
        assert np.allclose(blk.k_mu[0], 0.0)

    def test_mu_sensitivity_matches_fd(self, rng):
        for df0 in (5e-2, 1e-8):
            dn = 1e-3
            mu = 0.4
            df = np.array([df0, 0.0])
            cp = solve_state(dn, df, mu=mu)
            blk = ct.contact_block(cp)
            eta = 1e-7
            lp = solve_state(dn, df, mu=mu + eta).lam
            lm = solve_state(dn, df, mu=mu - eta).lam
            dlam_fd = (lp - lm) / (2.0 * eta)
            # dlam/dmu = -k_mu
            assert np.allclose(-blk.k_mu, dlam_fd, rtol=1e-5, atol=1e-10)
