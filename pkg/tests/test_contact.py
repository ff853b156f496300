import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffcontact.contact import (DEFAULT_K_STEPS, ActiveContact, ActiveContactSet, ContactInertia,
                                 ContactOptions, apply_impulses, contact_inertia, contact_jacobian,
                                 contact_step, resolve_contacts, solve_compression,
                                 solve_restitution, tangent_basis, target_velocity)
from diffcontact.core import PhysParams, Xoshiro256, State
from diffcontact.dynamics import Model, VectorField, equality_jacobian, rk4_arrays
from diffcontact.systems import (build_bouncing_disks, build_bouncing_points,
                                 build_chained_pendulum, detect_contacts, load_preset,
                                 sample_initial_condition)

from conftest import random_spd


def ground_point(y=0.05, radius=0.1, mu=0.0, e=1.0, mass=1.0):
    spec = build_bouncing_points([radius], box=(0.0, 1.0))
    params = PhysParams(masses=[mass], mu=[0.0, mu], e_p=[1.0, e])
    x = np.array([0.5, y])
    return spec, params, x


def pendulum(mu=0.5, e=0.5, ground=-1.05):
    spec = build_chained_pendulum([1.0], [0.1], ground)
    params = PhysParams(masses=[1.0], mu=[mu], e_p=[e], potential_constants=[9.8])
    return spec, params, np.array([0.0, -1.0])


def kinetic(model, v):
    return 0.5 * v @ model.M @ v


class TestTangentBasis:
    def test_2d_rotation(self):
        assert np.array_equal(tangent_basis([0.0, 1.0]), [[-1.0, 0.0]])

    def test_3d_tie_break_prefers_x(self):
        T = tangent_basis([0.0, 0.0, 1.0])
        assert np.allclose(T[0], [1.0, 0.0, 0.0])

    @given(st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda n: np.linalg.norm(n) > 0.1))
    def test_3d_orthonormal_frame(self, n):
        n = np.asarray(n) / np.linalg.norm(n)
        F = np.vstack([n, tangent_basis(n)])
        assert np.allclose(F @ F.T, np.eye(3), atol=1e-12)


class TestJacobian:
    def test_point_above_ground(self):
        spec, _, x = ground_point()
        cs = detect_contacts(spec, x)
        assert len(cs) == 1
        J = contact_jacobian(spec, x, cs)
        # tangent is the +90 degree rotation of the normal
        assert np.allclose(J, [[0.0, 1.0], [-1.0, 0.0]])

    def test_two_points_relative_velocity(self):
        spec = build_bouncing_points([0.1, 0.1], box=(0.0, 1.0))
        x = np.array([0.4, 0.5, 0.55, 0.5])
        cs = detect_contacts(spec, x)
        assert len(cs) == 1
        J = contact_jacobian(spec, x, cs)
        n = cs.contacts[0].normal
        assert np.allclose(J[0, :2], n) and np.allclose(J[0, 2:], -n)
        v = np.array([1.0, 0.0, -1.0, 0.0])
        assert J[0] @ v == pytest.approx(n @ (v[:2] - v[2:]))

    def test_disk_rim_matches_rigid_kinematics(self, rng):
        spec = build_bouncing_disks([0.2], box=(0.0, 1.0))
        for _ in range(10):
            ang = rng.uniform(0, 2 * np.pi)
            R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            c = np.array([0.5, 0.15])
            P = np.array([c, c + R[:, 0], c + R[:, 1]])
            vc, om = rng.normal(size=2), rng.normal()
            perp = lambda r: om * np.array([-r[1], r[0]])
            V = np.array([vc, vc + perp(R[:, 0]), vc + perp(R[:, 1])])
            x, v = P.ravel(), V.ravel()
            cs = detect_contacts(spec, x)
            assert len(cs) == 1
            J = contact_jacobian(spec, x, cs)
            rim = c - 0.2 * np.array([0.0, 1.0])
            v_rim = vc + perp(rim - c)
            frame = np.array([[0.0, 1.0], [-1.0, 0.0]])
            assert np.allclose(J @ v, frame @ v_rim, rtol=1e-8, atol=1e-12)


class TestInertia:
    def test_free_unit_mass(self):
        inr = contact_inertia(np.eye(2), np.zeros((0, 2)), np.array([[0.0, 1.0], [-1.0, 0.0]]))
        assert np.allclose(inr.A, np.eye(2))

    def test_free_heavy_mass(self):
        inr = contact_inertia(2 * np.eye(2), np.zeros((0, 2)), np.eye(2))
        assert np.allclose(inr.A, 0.5 * np.eye(2))

    def test_pendulum_rod_absorbs_normal(self):
        spec, params, x = pendulum()
        J_E = equality_jacobian(spec, x)
        inr = contact_inertia(np.eye(2), J_E, np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.allclose(inr.A, np.diag([0.0, 1.0]), atol=1e-14)

    def test_factor_reproduces_matrix(self, rng):
        for _ in range(20):
            D, E, C = 6, int(rng.integers(0, 4)), int(rng.integers(1, 7))
            M = random_spd(rng, D, 0.5)
            J_E = rng.normal(size=(E, D))
            J_C = rng.normal(size=(C, D))
            inr = contact_inertia(M, J_E, J_C)
            Minv = np.linalg.inv(M)
            Mhat = Minv
            if E:
                Mhat = Minv - Minv @ J_E.T @ np.linalg.solve(J_E @ Minv @ J_E.T, J_E @ Minv)
            A_ref = J_C @ Mhat @ J_C.T
            assert np.allclose(inr.A, A_ref, atol=1e-9 * np.abs(A_ref).max())
            assert np.allclose(inr.A_factor.T @ inr.A_factor, inr.A, atol=1e-9 * np.abs(inr.A).max())
            assert np.allclose(inr.Mhat_inv_JCt, Mhat @ J_C.T, atol=1e-9)


class TestCompressionAndRestitution:
    @pytest.mark.parametrize("mu, expected", [(0.0, [1.0, 0.0]), (3.0, [1.0, -2.0]),
                                              (0.3, [1.46789, -0.44037])])
    def test_compression_examples(self, mu, expected):
        sol = solve_compression(ContactInertia.from_matrix(np.eye(2)), [-1.0, 2.0], [mu])
        assert np.allclose(sol.f, expected, atol=1e-5)

    def test_elastic_bounce(self):
        inr = ContactInertia.from_matrix(np.eye(2))
        sol = solve_restitution(inr, [0.0, 2.0], [1.0, 0.0], 1.0, [0.0])
        assert np.allclose(sol.f, [1.0, 0.0], atol=1e-9)
        assert 0.0 + sol.f[0] == pytest.approx(1.0)

    def test_inelastic_no_penetration(self):
        inr = ContactInertia.from_matrix(np.eye(2))
        sol = solve_restitution(inr, [0.0, 0.0], [1.0, 0.0], 0.0, [0.5])
        assert np.allclose(sol.f, 0.0)

    def test_inelastic_push_out(self):
        inr = ContactInertia.from_matrix(np.eye(2))
        sol = solve_restitution(inr, [0.0, 0.0], [1.0, 0.0], 0.0, [0.5], v_C_star=[2.0, 0.0])
        assert np.allclose(sol.f, [2.0, 0.0], atol=1e-9)

    def test_regularised_is_smaller(self):
        inr = ContactInertia.from_matrix(np.eye(2))
        f0 = solve_compression(inr, [-1.0, 0.0], [0.5]).f
        f1 = solve_compression(inr, [-1.0, 0.0], [0.5], epsilon=0.1).f
        assert f1[0] == pytest.approx(1.0 / 1.1, rel=1e-8) and f0[0] == pytest.approx(1.0)

    def test_random_feasibility_and_dissipation(self, rng):
        for _ in range(30):
            D, n_c = 4, int(rng.integers(1, 3))
            M = random_spd(rng, D, 0.5)
            J_C = rng.normal(size=(2 * n_c, D))
            inr = contact_inertia(M, np.zeros((0, D)), J_C)
            v = rng.normal(size=D)
            mu = rng.uniform(0, 2, n_c)
            comp = solve_compression(inr, J_C @ v, mu, accept_tol=1e-6)
            f = comp.f.reshape(n_c, 2)
            assert np.all(f[:, 0] >= -1e-8)
            assert np.all(mu * f[:, 0] >= np.abs(f[:, 1]) - 1e-8)
            v_plus = apply_impulses(inr, v, comp.f)
            assert 0.5 * v_plus @ M @ v_plus <= 0.5 * v @ M @ v + 1e-10


class TestTargetVelocity:
    def test_unconstrained_equals_desired(self):
        spec, _, x = ground_point(y=0.06)
        cs = detect_contacts(spec, x)
        J = contact_jacobian(spec, x, cs)
        vs = target_velocity(spec, x, np.zeros((0, 2)), J, cs, dt=0.01, k_steps=4)
        assert np.allclose(vs, [0.04 / 0.04, 0.0])

    def test_zero_penetration(self):
        spec, _, x = ground_point()
        c = detect_contacts(spec, x).contacts[0]
        cs = ActiveContactSet([ActiveContact(c.candidate, c.class_id, 2, 0.0, c.normal,
                                             c.tangents, c.weights)])
        J = contact_jacobian(spec, x, cs)
        assert np.array_equal(target_velocity(spec, x, np.zeros((0, 2)), J, cs, 0.01), np.zeros(2))

    def test_pendulum_rod_blocks_escape(self):
        spec, params, x = pendulum()
        cs = detect_contacts(spec, x)
        assert len(cs) == 1 and cs.max_penetration == pytest.approx(0.05)
        J = contact_jacobian(spec, x, cs)
        vs = target_velocity(spec, x, equality_jacobian(spec, x), J, cs, 0.01)
        assert vs[0] == pytest.approx(0.0, abs=1e-14)


class TestApplyAndStep:
    def test_zero_impulse(self):
        inr = contact_inertia(np.eye(2), np.zeros((0, 2)), np.eye(2))
        assert np.array_equal(apply_impulses(inr, [1.0, 2.0], [0.0, 0.0]), [1.0, 2.0])

    def test_free_mass_impulse(self):
        inr = contact_inertia(3 * np.eye(2), np.zeros((0, 2)), np.array([[0.0, 1.0], [-1.0, 0.0]]))
        assert np.allclose(apply_impulses(inr, [0.0, 0.0], [1.5, 0.0]), [0.0, 0.5])

    def test_pendulum_constraint_preserved(self, rng):
        spec, params, x = pendulum()
        J_E = equality_jacobian(spec, x)
        J_C = np.array([[0.0, 1.0], [-1.0, 0.0]])
        inr = contact_inertia(np.eye(2), J_E, J_C)
        v = np.array([0.7, 0.0])
        for _ in range(10):
            n = rng.uniform(0, 3)
            f = np.array([n, rng.uniform(-0.5, 0.5) * n])
            assert np.max(np.abs(J_E @ apply_impulses(inr, v, f))) <= 1e-8

    @pytest.mark.parametrize("drift", [1e-5, -0.2])
    def test_resolve_removes_constraint_drift(self, drift):
        # v- carries a velocity along the rod; after the impulse J_E v+ = 0
        spec, params, _ = pendulum(ground=-0.95)
        x = np.array([0.0, -1.0])
        v = np.array([0.4, drift])
        m = Model(spec, params)
        cs = detect_contacts(spec, x)
        assert cs
        out = resolve_contacts(m, x, v, cs, dt=0.01).v
        assert np.max(np.abs(equality_jacobian(spec, x) @ out)) <= 1e-8
        assert kinetic(m, out) <= kinetic(m, v) + 1e-12

    def test_elastic_point_reflects(self):
        spec, params, x = ground_point(y=0.1 - 1e-12)
        st = State(x, np.array([0.3, -1.0]))
        cs = detect_contacts(spec, x)
        out = contact_step(spec, params, st, cs)
        assert np.allclose(out.v, [0.3, 1.0], atol=1e-8)
        assert np.array_equal(out.x, st.x)
        m = Model(spec, params)
        assert m.energy(out.x, out.v) == pytest.approx(m.energy(st.x, st.v), rel=1e-8)

    def test_inelastic_sticking_oblique(self):
        spec, params, x = ground_point(y=0.1 - 1e-12, mu=5.0, e=0.0)
        st = State(x, np.array([0.8, -1.0]))
        cs = detect_contacts(spec, x)
        out = contact_step(spec, params, st, cs)
        J = contact_jacobian(spec, x, cs)
        assert np.allclose(J @ out.v, 0.0, atol=1e-6)

    def test_energy_audit_frictionless_elastic(self, rng):
        spec = build_bouncing_disks([0.2], box=(0.0, 1.0))
        params = PhysParams(masses=[1.0], mu=[0.0, 0.0], e_p=[1.0, 1.0])
        m = Model(spec, params)
        for _ in range(10):
            ang = rng.uniform(0, 2 * np.pi)
            R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            c = np.array([0.5, 0.2 - 1e-12])
            P = np.array([c, c + R[:, 0], c + R[:, 1]])
            vc, om = np.array([rng.normal(), -abs(rng.normal())]), rng.normal()
            V = np.array([vc, vc + om * np.array([-R[1, 0], R[0, 0]]),
                          vc + om * np.array([-R[1, 1], R[0, 1]])])
            st = State(P.ravel(), V.ravel())
            cs = detect_contacts(spec, st.x)
            out = contact_step(spec, params, st, cs, model=m)
            e0, e1 = m.energy(st.x, st.v), m.energy(out.x, out.v)
            assert abs(e1 - e0) <= 1e-8 * e0

    def test_gyroscope_wall_hit_never_gains_energy(self):
        preset = load_preset("Gyro-e")
        spec, params = preset.spec, preset.truth
        m = Model(spec, params)
        field = VectorField(spec, params, "lagrangian")
        rng = Xoshiro256(7)
        hits = 0
        for _ in range(40):
            s = sample_initial_condition(spec, rng, preset)
            x, v = s.x[None], s.v[None]
            for _ in range(400):
                x, v = rk4_arrays(field, x, v, spec.dt)
                cs = detect_contacts(spec, x[0])
                if cs:
                    st = State(x[0], v[0])
                    out = contact_step(spec, params, st, cs, model=m)
                    assert m.energy(out.x, out.v) <= m.energy(st.x, st.v) + 1e-8
                    hits += 1
                    break
            if hits >= 5:
                break
        assert hits >= 1

    def test_default_k_steps(self):
        assert DEFAULT_K_STEPS == 4
        spec, params, x = ground_point(y=0.06)
        m = Model(spec, params)
        cs = detect_contacts(spec, x)
        r1 = resolve_contacts(m, x, np.zeros(2), cs, ContactOptions(k_steps=1), dt=0.01)
        r4 = resolve_contacts(m, x, np.zeros(2), cs, dt=0.01)
        assert r4.v_C_star[0] == pytest.approx(1.0)
        assert np.allclose(r1.v_C_star, r4.v_C_star * 4)
