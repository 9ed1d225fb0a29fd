import numpy as np
import pytest

from leastcontrol.controllers import (
    DynamicInversion,
    EnergyBased,
    LinearFeedback,
    OutputController,
)
from leastcontrol.network import (
    EquilibriumNetwork,
    LossSpec,
    build_feedforward,
    build_recurrent,
    free_dynamics,
)
from leastcontrol.numerics import Activation, NonFiniteError, Rng
from leastcontrol.solver import (
    SolveConfig,
    integrate_noisy,
    solve_controlled,
    solve_controlled_parallel,
    solve_free,
)

TIGHT = SolveConfig(max_steps=100000, epsilon=1e-24, dt=0.5)


def scalar_net(w, u, b=0.0, activation=Activation.TANH):
    return EquilibriumNetwork(
        W=np.array([[w]]), U=np.array([[u]]), b=np.array([b]),
        activation=activation, output_dim=1,
    )


class TestSolveFree:
    def test_zero_recurrence_one_step(self):
        rng = Rng(0)
        net = EquilibriumNetwork(
            W=np.zeros((3, 3)), U=rng.normal((3, 2)), b=rng.normal((3,)),
            activation=Activation.TANH, output_dim=1,
        )
        x = rng.normal((2,))
        phi, report = solve_free(net, x, SolveConfig(max_steps=10, epsilon=1e-30))
        assert np.allclose(phi, net.U @ x + net.b, atol=1e-15)
        assert report.iterations <= 2  # one productive sweep plus the confirming one

    def test_scalar_against_bisection_oracle(self):
        # phi = 0.5 tanh(phi) + 1, root of g(phi) = phi - 0.5 tanh(phi) - 1
        def g(v):
            return v - 0.5 * np.tanh(v) - 1.0

        lo, hi = 0.0, 3.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if g(mid) > 0:
                hi = mid
            else:
                lo = mid
        root = 0.5 * (lo + hi)
        assert root == pytest.approx(1.43376, abs=1e-5)

        net = scalar_net(w=0.5, u=1.0)
        phi, report = solve_free(net, np.array([1.0]), SolveConfig(100000, 1e-26))
        assert report.converged
        assert abs(phi[0] - root) < 1e-10

    def test_feedforward_converges_in_depth_sweeps(self):
        rng = Rng(1)
        sizes = [3, 5, 4, 2]
        net = build_feedforward(sizes, rng=rng)
        x = rng.normal((3,))
        depth = len(sizes) - 1
        phi = np.zeros(net.n)
        for _ in range(depth):
            phi = net.W @ np.tanh(phi) + net.U @ x + net.b
        phi_solver, report = solve_free(net, x, SolveConfig(100, 1e-28))
        assert np.allclose(phi_solver, phi, atol=1e-14)
        assert report.iterations <= depth + 1

    def test_divergence_raises(self):
        net = scalar_net(w=2.0, u=1.0, activation=Activation.IDENTITY)
        with pytest.raises(NonFiniteError):
            solve_free(net, np.array([1.0]), SolveConfig(10000, 1e-10))

    def test_zero_dynamics_converges_immediately(self):
        # 0/0 relative change counts as converged
        net = scalar_net(w=0.5, u=1.0)
        phi, report = solve_free(net, np.array([0.0]), SolveConfig(10, 1e-12))
        assert report.converged
        assert phi[0] == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolveConfig(max_steps=0)
        with pytest.raises(ValueError):
            SolveConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            SolveConfig(dt=1.5)


class TestSolveControlled:
    def test_target_at_free_equilibrium_needs_no_control(self):
        rng = Rng(2)
        net = build_recurrent(6, 2, 2, rng=rng)
        x = rng.normal((2,))
        phi_free, _ = solve_free(net, x, TIGHT)
        target = net.output(phi_free)
        st, report = solve_controlled(
            net, x, target,
            DynamicInversion(output=OutputController(alpha=0.1, tau_u=4.0)),
            LossSpec("mse"), TIGHT,
        )
        assert report.converged
        assert np.max(np.abs(st.u)) < 1e-9
        assert np.max(np.abs(st.psi)) < 1e-9
        assert np.allclose(st.phi, phi_free, atol=1e-9)

    def test_scalar_di_against_newton_oracle(self):
        # joint root of the three scalar fixed-point equations, alpha=0.1, w=0.3
        w, u_in, alpha, x, t = 0.3, 1.0, 0.1, 0.7, 0.2
        net = scalar_net(w=w, u=u_in)

        def equations(z):
            phi, psi, u = z
            sp = 1.0 - np.tanh(phi) ** 2
            return np.array([
                -phi + w * np.tanh(phi) + u_in * x + psi,
                -psi + sp * w * psi + u,
                -alpha * u - (phi - t),
            ])

        z = np.zeros(3)
        for _ in range(200):
            h = 1e-8
            jac = np.zeros((3, 3))
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                jac[:, j] = (equations(z + e) - equations(z - e)) / (2 * h)
            step = np.linalg.solve(jac, -equations(z))
            z = z + 0.8 * step
        assert np.max(np.abs(equations(z))) < 1e-12

        st, report = solve_controlled(
            net, np.array([x]), np.array([t]),
            DynamicInversion(output=OutputController(alpha=alpha, tau_u=8.0)),
            LossSpec("mse"), SolveConfig(200000, 1e-26, 0.5),
        )
        assert report.converged
        phi_n, psi_n, u_n = z
        assert abs(st.phi[0] - phi_n) < 1e-8
        assert abs(st.psi[0] - psi_n) < 1e-8
        assert abs(st.u[0] - u_n) < 1e-8
        # closed-form controller identities at the fixed point
        sp = 1.0 - np.tanh(st.phi[0]) ** 2
        assert st.u[0] == pytest.approx(-(st.phi[0] - t) / alpha, abs=1e-8)
        assert st.psi[0] == pytest.approx(st.u[0] / (1.0 - sp * w), abs=1e-8)

    def test_alpha_one_softmax_hard_targets_converges(self):
        rng = Rng(3)
        net = build_recurrent(8, 3, 3, rng=rng, spectral_limit=0.6)
        x = rng.normal((3,))
        loss = LossSpec("softmax_ce")
        target = loss.target_distribution([1], 3)[:, 0]
        st, report = solve_controlled(
            net, x, target,
            DynamicInversion(output=OutputController(alpha=1.0)),
            loss, SolveConfig(20000, 1e-16),
        )
        assert report.converged

    def test_di_defining_equations_residual(self):
        rng = Rng(4)
        net = build_recurrent(10, 3, 2, rng=rng)
        x = rng.normal((3,))
        t = 0.2 * rng.normal((2,))
        eps = 1e-16
        ctl = DynamicInversion(output=OutputController(alpha=0.1, tau_u=4.0))
        st, report = solve_controlled(net, x, t, ctl, LossSpec("mse"), SolveConfig(100000, eps, 0.5))
        assert report.converged
        from leastcontrol.numerics import activation_deriv

        sp = activation_deriv(net.activation, st.phi)
        r1 = np.max(np.abs(free_dynamics(net, st.phi, x) + st.psi))
        r2 = np.max(np.abs(-st.psi + sp * (net.W.T @ st.psi) + net.lift_output(st.u)))
        r3 = np.max(np.abs(-0.1 * st.u - (st.phi[-2:] - t)))
        assert max(r1, r2, r3) <= 10 * np.sqrt(eps)

    def test_batch_columns_equal_individual_solves(self):
        rng = Rng(5)
        net = build_recurrent(7, 3, 2, rng=rng)
        x = rng.normal((3, 4))
        t = 0.3 * rng.normal((2, 4))
        cfg = SolveConfig(50000, 1e-18, 0.5)
        ctl = DynamicInversion(output=OutputController(alpha=0.2, tau_u=4.0))
        batch_state, _ = solve_controlled(net, x, t, ctl, LossSpec("mse"), cfg)
        # BLAS kernels differ across batch shapes, so agreement is to
        # round-off accumulation rather than bitwise
        for j in range(4):
            single, _ = solve_controlled(net, x[:, j], t[:, j], ctl, LossSpec("mse"), cfg)
            assert np.allclose(batch_state.phi[:, j], single.phi, atol=1e-10)
            assert np.allclose(batch_state.u[:, j], single.u, atol=1e-10)

    def test_parallel_workers_bit_identical(self):
        rng = Rng(6)
        net = build_recurrent(7, 3, 2, rng=rng)
        x = rng.normal((3, 8))
        t = 0.3 * rng.normal((2, 8))
        cfg = SolveConfig(50000, 1e-16, 0.5)
        ctl = DynamicInversion(output=OutputController(alpha=0.2, tau_u=4.0))
        s1, r1 = solve_controlled_parallel(net, x, t, ctl, LossSpec("mse"), cfg, workers=1)
        s3, r3 = solve_controlled_parallel(net, x, t, ctl, LossSpec("mse"), cfg, workers=3)
        # worker count only re-chunks columns; agreement within 1e-9
        assert np.allclose(s1.phi, s3.phi, atol=1e-9)
        assert np.allclose(s1.psi, s3.psi, atol=1e-9)
        assert np.allclose(s1.u, s3.u, atol=1e-9)

    def test_lf_and_ebd_states_expose_effective_control(self):
        rng = Rng(7)
        net = build_recurrent(6, 2, 2, rng=rng)
        x = rng.normal((2,))
        t = 0.2 * rng.normal((2,))
        q = rng.normal((6, 2)) * 0.3
        lf_state, _ = solve_controlled(
            net, x, t, LinearFeedback(Q=q, output=OutputController(alpha=0.5)),
            LossSpec("mse"), SolveConfig(50000, 1e-18, 0.5),
        )
        assert np.allclose(lf_state.psi, q @ lf_state.u)
        assert lf_state.controller_kind == "lf"
        ebd_state, _ = solve_controlled(
            net, x, t, EnergyBased(output=OutputController(alpha=0.5, mode="proportional")),
            LossSpec("mse"), SolveConfig(100000, 1e-22),
        )
        assert np.allclose(
            ebd_state.psi, -free_dynamics(net, ebd_state.phi, x), atol=1e-12
        )


class TestIntegrateNoisy:
    def _setup(self):
        rng = Rng(8)
        net = build_recurrent(5, 2, 2, rng=rng, spectral_limit=0.6)
        x = rng.normal((2,))
        t = 0.2 * rng.normal((2,))
        q = 0.3 * rng.normal((5, 2))
        out = OutputController(alpha=0.5)
        st, _ = solve_controlled(
            net, x, t, LinearFeedback(Q=q, output=out), LossSpec("mse"),
            SolveConfig(50000, 1e-20, 0.5),
        )
        return net, x, t, q, out, st

    def test_zero_noise_stays_at_fixed_point(self):
        net, x, t, q, out, st = self._setup()
        for phi, u, eps in integrate_noisy(
            net, x, q, out, LossSpec("mse"), t, 0.0, 0.2, 50, Rng(1),
            init_phi=st.phi, init_u=st.u,
        ):
            pass
        assert np.max(np.abs(phi - st.phi)) < 1e-8
        assert np.max(np.abs(u - st.u)) < 1e-8

    def test_seed_determinism(self):
        net, x, t, q, out, st = self._setup()

        def run(seed):
            return [
                (phi.copy(), u.copy(), eps.copy())
                for phi, u, eps in integrate_noisy(
                    net, x, q, out, LossSpec("mse"), t, 0.02, 0.2, 30, Rng(seed),
                    init_phi=st.phi, init_u=st.u,
                )
            ]

        for (p1, u1, e1), (p2, u2, e2) in zip(run(42), run(42)):
            assert np.array_equal(p1, p2) and np.array_equal(u1, u2) and np.array_equal(e1, e2)

    def test_variance_scales_with_noise_squared(self):
        net, x, t, q, out, st = self._setup()

        def empirical_var(s, seed):
            vals = []
            for phi, u, eps in integrate_noisy(
                net, x, q, out, LossSpec("mse"), t, s, 0.2, 4000, Rng(seed),
                init_phi=st.phi, init_u=st.u,
            ):
                vals.append(phi - st.phi)
            tail = np.array(vals[500:])
            return float(np.mean(tail**2))

        v1 = empirical_var(0.01, 3)
        v2 = empirical_var(0.02, 3)
        assert v2 / v1 == pytest.approx(4.0, rel=0.2)
