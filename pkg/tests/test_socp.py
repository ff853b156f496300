import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffcontact.core import DegenerateActiveSet, cholesky_spd
from diffcontact.socp import Cone, ConeQP, project_cone, project_cone_exact, sensitivity, solve

from oracles import cone_qp_oracle, soc_projection_2d
from conftest import random_spd


def qp_from(A, b, cones):
    L = cholesky_spd(np.asarray(A, float))
    return ConeQP(L.T, b, cones)


finite = st.floats(-10, 10, allow_nan=False)


class TestProjection:
    def test_interior_point_unchanged(self):
        y = np.array([2.0, 0.5])
        assert np.array_equal(project_cone(y, 1.0), y)

    def test_boundary_example(self):
        assert np.allclose(project_cone([0.0, 3.0], 1.0), [1.5, 1.5], atol=1e-12)

    def test_apex(self):
        assert np.allclose(project_cone([-3.0, 0.0], 1.0), [0.0, 0.0], atol=1e-12)

    def test_frictionless_degenerates(self):
        assert np.array_equal(project_cone([-1.0, 4.0, 2.0], 0.0, 0.5), [0.5, 0.0, 0.0])
        assert np.array_equal(project_cone([2.0], 0.7), [2.0])

    @given(st.tuples(finite, finite), st.floats(0.01, 3))
    def test_matches_closed_form(self, y, mu):
        assert np.allclose(project_cone(y, mu), soc_projection_2d(y, mu), atol=1e-12)

    @given(st.tuples(finite, finite, finite), st.floats(0, 3), st.floats(0, 3))
    def test_idempotent(self, y, mu, lb):
        p = project_cone(y, mu, lb)
        assert np.allclose(project_cone(p, mu, lb), p, atol=1e-12)

    @given(st.tuples(finite, finite, finite), st.floats(0, 3), st.floats(0, 3))
    def test_feasible(self, y, mu, lb):
        p = project_cone(y, mu, lb)
        assert p[0] >= lb - 1e-10
        assert mu * p[0] >= np.linalg.norm(p[1:]) - 1e-10

    @given(st.tuples(finite, finite, finite), st.floats(0, 3), st.floats(0, 3))
    def test_dykstra_agrees_with_exact(self, y, mu, lb):
        assert np.allclose(project_cone(y, mu, lb), project_cone_exact(y, mu, lb), atol=1e-9)

    def test_optimality_against_random_feasible_points(self, rng):
        for _ in range(20):
            mu, lb = rng.uniform(0, 3), rng.uniform(0, 2)
            y = rng.normal(0, 3, 3)
            p = project_cone(y, mu, lb)
            n = lb + rng.exponential(2.0, 1000)
            ang = rng.uniform(0, 2 * np.pi, 1000)
            r = mu * n * np.sqrt(rng.uniform(0, 1, 1000))
            z = np.stack([n, r * np.cos(ang), r * np.sin(ang)], axis=1)
            assert np.all(np.linalg.norm(y - p) <= np.linalg.norm(y - z, axis=1) + 1e-12)


class TestSolve:
    @pytest.mark.parametrize("mu, expected", [
        (0.0, [1.0, 0.0]),
        (3.0, [1.0, -2.0]),
        (0.3, [1.46789, -0.44037]),
    ])
    def test_compression_examples(self, mu, expected):
        sol = solve(qp_from(np.eye(2), [-1.0, 2.0], [Cone(2, mu)]))
        assert sol.converged
        assert np.allclose(sol.f, expected, atol=1e-5)

    def test_boundary_example_matches_oracle(self):
        sol = solve(qp_from(np.eye(2), [-1.0, 2.0], [Cone(2, 0.3)]))
        ref = cone_qp_oracle(np.eye(2), [-1.0, 2.0], [(2, 0.3, 0.0)])
        assert np.allclose(sol.f, ref, atol=1e-6)

    def test_zero_linear_term(self):
        sol = solve(qp_from(np.eye(3), np.zeros(3), [Cone(3, 0.5)]))
        assert sol.converged and sol.iterations == 0
        assert np.array_equal(sol.f, np.zeros(3))

    def test_objective_uses_factor(self, rng):
        A = random_spd(rng, 3, 0.1)
        qp = qp_from(A, rng.normal(size=3), [Cone(3, 0.4)])
        f = rng.normal(size=3)
        assert qp.objective(f) == pytest.approx(0.5 * f @ A @ f + qp.linear @ f, rel=1e-12)

    def test_single_contact_oracle(self, rng):
        for _ in range(15):
            d = int(rng.integers(2, 4))
            A = random_spd(rng, d, 0.2)
            b = rng.normal(size=d)
            mu = rng.uniform(0, 3)
            sol = solve(qp_from(A, b, [Cone(d, mu)]))
            ref = cone_qp_oracle(A, b, [(d, mu, 0.0)])
            assert sol.converged
            assert np.allclose(sol.f, ref, atol=1e-4)

    def test_corner_hit_two_contacts(self):
        # free unit mass touching a floor and a wall; contact frames share the point
        J = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        A = J @ J.T + 1e-3 * np.eye(4)
        v = np.array([-1.0, -0.4])
        b = J @ v
        qp = qp_from(A, b, [Cone(2, 0.5), Cone(2, 0.5)])
        sol = solve(qp)
        ref = cone_qp_oracle(A, b, [(2, 0.5, 0.0), (2, 0.5, 0.0)])
        # the split between the two contacts is nearly free; velocity change is not
        assert np.allclose(J.T @ sol.f, J.T @ ref, atol=1e-4)
        assert qp.objective(sol.f) <= qp.objective(ref) + 1e-8

    def test_lower_bound_respected(self):
        sol = solve(qp_from(np.eye(2), [0.0, 2.0], [Cone(2, 0.0, 1.0)]))
        assert np.allclose(sol.f, [1.0, 0.0], atol=1e-10)

    def test_singular_quadratic(self):
        # rank-one A: the rod-blocked pendulum contact, sliding along the ground
        qp = ConeQP(np.array([[0.0, 1.0]]), [0.0, 0.5], [Cone(2, 1.0)])
        sol = solve(qp)
        assert sol.converged
        assert sol.f[1] == pytest.approx(-0.5, abs=1e-8)
        assert qp.objective(sol.f) == pytest.approx(-0.125, abs=1e-10)

    def test_monotone_history(self, rng):
        A = random_spd(rng, 6, 0.01)
        qp = qp_from(A, rng.normal(size=6), [Cone(3, 0.3), Cone(2, 0.8), Cone(1, 0.0)])
        sol = solve(qp, record=True)
        assert sol.history.size > 1
        assert np.all(np.diff(sol.history) <= 1e-15)

    def test_epsilon_invariance(self, rng):
        for _ in range(10):
            A = random_spd(rng, 3, 0.5)
            b = rng.normal(size=3)
            f0 = solve(qp_from(A, b, [Cone(3, 0.6)])).f
            f1 = solve(qp_from(A + 1e-8 * np.eye(3), b, [Cone(3, 0.6)])).f
            assert np.allclose(f0, f1, atol=1e-6)

    def test_deterministic(self, rng):
        A = random_spd(rng, 4, 0.1)
        qp = qp_from(A, rng.normal(size=4), [Cone(2, 0.3), Cone(2, 1.2)])
        assert np.array_equal(solve(qp).f, solve(qp).f)

    def test_iteration_cap_reports_instead_of_raising(self, rng):
        A = random_spd(rng, 6, 1e-4)
        qp = qp_from(A, -np.ones(6), [Cone(3, 0.3), Cone(3, 0.3)])
        sol = solve(qp, tol=1e-16, max_iter=3)
        assert not sol.converged and sol.primal_residual > 0

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ConeQP(np.eye(2), [1.0, 2.0, 3.0], [Cone(2, 0.1)])


class TestSensitivity:
    def test_stick_regime_is_inverse(self, rng):
        A = random_spd(rng, 2, 1.0)
        b = np.array([-1.0, 0.1])
        qp = qp_from(A, b, [Cone(2, 100.0)])
        sol = solve(qp, tol=1e-13)
        S = sensitivity(qp, sol)
        assert np.allclose(S, -np.linalg.inv(A), atol=1e-5)

    def test_frictionless_piecewise(self):
        A = np.array([[2.0]])
        qp = qp_from(A, [-1.0], [Cone(1, 0.0)])
        sol = solve(qp, tol=1e-13)
        assert sensitivity(qp, sol)[0, 0] == pytest.approx(-0.5, rel=1e-6)
        qp = qp_from(A, [1.0], [Cone(1, 0.0)])
        assert sensitivity(qp, solve(qp, tol=1e-13))[0, 0] == pytest.approx(0.0, abs=1e-8)

    @pytest.mark.parametrize("wrt", ["linear", "mu"])
    def test_sliding_kkt_matches_fd(self, wrt):
        qp = qp_from(np.eye(2), [-1.0, 2.0], [Cone(2, 0.3)])
        sol = solve(qp, tol=1e-13)
        fd = sensitivity(qp, sol, wrt, method="fd")
        kkt = sensitivity(qp, sol, wrt, method="kkt")
        assert np.allclose(kkt, fd, rtol=1e-4, atol=1e-6)

    def test_mu_derivative_closed_form(self):
        # on the boundary f_n = (1 + 2 mu) / (1 + mu^2) for this instance
        qp = qp_from(np.eye(2), [-1.0, 2.0], [Cone(2, 0.3)])
        sol = solve(qp, tol=1e-13)
        mu = 0.3
        dfn = (2 * (1 + mu * mu) - (1 + 2 * mu) * 2 * mu) / (1 + mu * mu) ** 2
        assert sensitivity(qp, sol, "mu", method="kkt")[0, 0] == pytest.approx(dfn, rel=1e-6)

    def test_lower_bound_kkt_matches_fd(self):
        qp = qp_from(np.eye(2), [0.5, 0.1], [Cone(2, 0.5, 1.0)])
        sol = solve(qp, tol=1e-13)
        fd = sensitivity(qp, sol, "lower_bound")
        kkt = sensitivity(qp, sol, "lower_bound", method="kkt")
        assert np.allclose(kkt, fd, rtol=1e-4, atol=1e-6)

    def test_apex_weakly_active_raises(self):
        qp = qp_from(np.eye(2), [0.0, 0.0], [Cone(2, 0.5)])
        with pytest.raises(DegenerateActiveSet):
            sensitivity(qp, solve(qp), method="kkt")

    def test_unconverged_rejected(self, rng):
        A = random_spd(rng, 6, 1e-4)
        qp = qp_from(A, -np.ones(6), [Cone(3, 0.3), Cone(3, 0.3)])
        with pytest.raises(ValueError):
            sensitivity(qp, solve(qp, tol=1e-16, max_iter=3))

    def test_unknown_input_rejected(self):
        qp = qp_from(np.eye(1), [-1.0], [Cone(1, 0.0)])
        with pytest.raises(ValueError):
            sensitivity(qp, solve(qp), "mass")
