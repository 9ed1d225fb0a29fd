import numpy as np
import pytest

from leastcontrol.controllers import DynamicInversion, EnergyBased, OutputController
from leastcontrol.network import (
    EquilibriumNetwork,
    LossSpec,
    build_feedforward,
    build_recurrent,
)
from leastcontrol.numerics import Activation, Rng, cosine
from leastcontrol.oracles import (
    fd_lcp_gradient,
    feedforward_loss,
    free_equilibrium_loss,
    implicit_gradient_direct,
    layered_backprop,
    rbp_gradient,
)
from leastcontrol.solver import SolveConfig, solve_controlled
from leastcontrol.updates import lcp_delta


def flat(delta):
    return np.concatenate([delta.dW.ravel(), delta.dU.ravel(), delta.db.ravel()])


def grad_diff(a, b):
    return float(
        max(
            np.max(np.abs(a.dW - b.dW)),
            np.max(np.abs(a.dU - b.dU)),
            np.max(np.abs(a.db - b.db)),
        )
    )


class TestRbp:
    def test_zero_output_error_zero_gradient(self):
        rng = Rng(0)
        net = build_recurrent(6, 2, 2, rng=rng)
        x = rng.normal((2,))
        from leastcontrol.solver import solve_free

        phi, _ = solve_free(net, x, SolveConfig(100000, 1e-26))
        report = rbp_gradient(net, x, net.output(phi), LossSpec("mse"))
        assert np.max(np.abs(flat(report.gradient))) < 1e-10

    def test_matches_direct_solve_on_recurrent_net(self):
        rng = Rng(1)
        net = build_recurrent(12, 3, 2, rng=rng)
        x = rng.normal((3, 2))
        t = 0.4 * rng.normal((2, 2))
        a = rbp_gradient(net, x, t, LossSpec("mse")).gradient
        b = implicit_gradient_direct(net, x, t, LossSpec("mse")).gradient
        assert grad_diff(a, b) < 1e-8

    def test_matches_layered_backprop_on_feedforward(self):
        rng = Rng(2)
        net = build_feedforward([3, 4, 2], rng=rng)
        x = rng.normal((3, 3))
        loss = LossSpec("softmax_ce")
        t = loss.target_distribution([0, 1, 0], 2)
        a = rbp_gradient(net, x, t, loss).gradient
        b = layered_backprop(net, x, t, loss).gradient
        assert grad_diff(a, b) < 1e-9


class TestImplicitDirect:
    def test_scalar_chain_rule_closed_form(self):
        # identity activation, scalar: phi* = ux/(1-w), L = (phi*-t)^2/2
        w, u, x, t = 0.4, 1.3, 0.7, 0.1
        net = EquilibriumNetwork(
            W=np.array([[w]]), U=np.array([[u]]), b=np.zeros(1),
            activation=Activation.IDENTITY, output_dim=1,
        )
        report = implicit_gradient_direct(net, np.array([x]), np.array([t]), LossSpec("mse"))
        phi_star = u * x / (1 - w)
        err = phi_star - t
        dw_expected = err * phi_star / (1 - w)  # d phi*/dw = phi*/(1-w)
        du_expected = err * x / (1 - w)
        db_expected = err / (1 - w)
        assert report.gradient.dW[0, 0] == pytest.approx(dw_expected, abs=1e-12)
        assert report.gradient.dU[0, 0] == pytest.approx(du_expected, abs=1e-12)
        assert report.gradient.db[0] == pytest.approx(db_expected, abs=1e-12)

    def test_zero_error_zero(self):
        rng = Rng(3)
        net = build_recurrent(5, 2, 1, rng=rng)
        x = rng.normal((2,))
        from leastcontrol.solver import solve_free

        phi, _ = solve_free(net, x, SolveConfig(100000, 1e-26))
        report = implicit_gradient_direct(net, x, net.output(phi), LossSpec("mse"))
        assert np.max(np.abs(flat(report.gradient))) < 1e-11


class TestLayeredBackprop:
    def test_linear_single_layer_closed_form(self):
        rng = Rng(4)
        net = build_feedforward([3, 2], activation=Activation.IDENTITY, rng=rng)
        x = rng.normal((3,))
        t = rng.normal((2,))
        report = layered_backprop(net, x, t, LossSpec("mse"))
        y = net.U @ x + net.b
        assert np.allclose(report.gradient.dU, np.outer(y - t, x), atol=1e-14)
        assert np.allclose(report.gradient.db, y - t, atol=1e-14)

    def test_matches_fd_of_loss(self):
        rng = Rng(5)
        net = build_feedforward([2, 2, 1], rng=rng)
        x = rng.normal((2, 3))
        t = 0.3 * rng.normal((1, 3))
        loss = LossSpec("mse")
        grad = layered_backprop(net, x, t, loss).gradient
        h = 1e-6
        for arr, g, mask in (
            (net.W, grad.dW, net.w_mask),
            (net.U, grad.dU, net.u_mask),
            (net.b, grad.db, None),
        ):
            it = np.ndindex(arr.shape)
            for idx in it:
                if mask is not None and mask[idx] == 0.0:
                    continue
                orig = arr[idx]
                arr[idx] = orig + h
                lp = feedforward_loss(net, x, t, loss)
                arr[idx] = orig - h
                lm = feedforward_loss(net, x, t, loss)
                arr[idx] = orig
                assert (lp - lm) / (2 * h) == pytest.approx(g[idx], abs=1e-7)

    def test_rejects_recurrent_nets(self):
        net = build_recurrent(4, 2, 1, rng=Rng(6))
        with pytest.raises(ValueError):
            layered_backprop(net, np.zeros(2), np.zeros(1), LossSpec("mse"))


class TestOracleTriangle:
    @pytest.mark.parametrize("sizes", [(2, 2, 1), (3, 4, 5, 3)])
    def test_pairwise_agreement(self, sizes):
        rng = Rng(7)
        net = build_feedforward(list(sizes), rng=rng)
        x = rng.normal((sizes[0], 4))
        t = 0.4 * rng.normal((sizes[-1], 4))
        loss = LossSpec("mse")
        bp = layered_backprop(net, x, t, loss).gradient
        rbp = rbp_gradient(net, x, t, loss).gradient
        imp = implicit_gradient_direct(net, x, t, loss).gradient
        assert grad_diff(bp, rbp) < 1e-8
        assert grad_diff(rbp, imp) < 1e-8
        assert grad_diff(bp, imp) < 1e-8


class TestFdLcpGradient:
    def _instance(self):
        rng = Rng(8)
        net = build_recurrent(6, 2, 2, rng=rng)
        x = rng.normal((2, 2))
        t = 0.3 * rng.normal((2, 2))
        ctl = DynamicInversion(output=OutputController(alpha=1e-6, tau_u=8.0))
        return net, x, t, ctl

    def test_zero_control_region_gives_zero(self):
        rng = Rng(9)
        net = build_recurrent(5, 2, 2, rng=rng)
        x = rng.normal((2,))
        from leastcontrol.solver import solve_free

        phi, _ = solve_free(net, x, SolveConfig(100000, 1e-26))
        ctl = DynamicInversion(output=OutputController(alpha=0.1, tau_u=8.0))
        fd = fd_lcp_gradient(
            net, x, net.output(phi), ctl, LossSpec("mse"), h=1e-5,
            cfg=SolveConfig(100000, 1e-18, 0.5),
            entries=[("W", 0, 0), ("U", 1, 0), ("b", 2)],
        )
        assert np.max(np.abs(flat(fd.gradient))) < 1e-6

    def test_richardson_consistency_across_step_sizes(self):
        net, x, t, ctl = self._instance()
        cfg = SolveConfig(400000, 1e-16, 0.5)
        entries = [("W", 0, 1), ("W", 3, 2), ("U", 1, 0), ("b", 4)]
        g1 = fd_lcp_gradient(net, x, t, ctl, LossSpec("mse"), h=1e-4, cfg=cfg, entries=entries)
        g2 = fd_lcp_gradient(net, x, t, ctl, LossSpec("mse"), h=1e-5, cfg=cfg, entries=entries)
        v1, v2 = flat(g1.gradient), flat(g2.gradient)
        keep = np.abs(v1) > 1e-12
        assert np.max(np.abs((v1[keep] - v2[keep]) / v1[keep])) < 1e-3

    def test_entry_spot_check_against_update(self):
        # three weight entries: the descent delta matches -FD within 1e-3
        net, x, t, ctl = self._instance()
        solve_cfg = SolveConfig(400000, 1e-20, 0.5)
        state, rep = solve_controlled(net, x, t, ctl, LossSpec("mse"), solve_cfg)
        assert rep.converged
        delta = lcp_delta(net, state, x)
        entries = [("W", 0, 1), ("W", 4, 3), ("W", 2, 5)]
        fd = fd_lcp_gradient(
            net, x, t, ctl, LossSpec("mse"), h=1e-4, cfg=SolveConfig(400000, 1e-16, 0.5),
            entries=entries,
        )
        for name, i, j in entries:
            assert -fd.gradient.dW[i, j] == pytest.approx(delta.dW[i, j], rel=1e-3)

    def test_full_fd_restricted_to_small_nets(self):
        rng = Rng(10)
        net = build_recurrent(16, 2, 2, rng=rng)
        with pytest.raises(ValueError):
            fd_lcp_gradient(net, rng.normal((2,)), rng.normal((2,)),
                            DynamicInversion(output=OutputController()), LossSpec("mse"))


class TestWeakNudgingLimit:
    def test_scaled_update_approaches_implicit_gradient(self):
        # strong leak alpha = 1/beta with beta -> 0 recovers the loss
        # gradient direction at the free equilibrium
        rng = Rng(11)
        loss = LossSpec("mse")
        for seed in (20, 21, 22):
            r = Rng(seed)
            net = build_recurrent(8, 3, 2, rng=r)
            x = r.normal((3,))
            t = 0.3 * r.normal((2,))
            alpha = 1e3
            ebd = EnergyBased(output=OutputController(alpha=alpha, mode="proportional"))
            st, rep = solve_controlled(net, x, t, ebd, loss, SolveConfig(400000, 1e-26))
            assert rep.converged
            delta = lcp_delta(net, st, x).scaled(alpha)
            imp = implicit_gradient_direct(net, x, t, loss).gradient
            assert cosine(flat(delta), -flat(imp)) > 0.99


def test_free_equilibrium_loss_classification():
    rng = Rng(12)
    net = build_feedforward([3, 4, 2], rng=rng)
    from leastcontrol.data import Dataset

    loss = LossSpec("softmax_ce")
    x = rng.normal((3, 5))
    t = loss.target_distribution([0, 1, 1, 0, 1], 2)
    value, acc, report = free_equilibrium_loss(net, x, t, loss, SolveConfig(100, 1e-20))
    assert np.isfinite(value)
    assert 0.0 <= acc <= 1.0
