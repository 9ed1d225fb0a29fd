import os

import numpy as np
import pytest

from leastcontrol.network import (
    EquilibriumNetwork,
    LossSpec,
    absorb_decoder,
    build_feedforward,
    build_recurrent,
    free_dynamics,
    jacobian_matrix,
    jacobian_transpose_vec,
    layer_slices,
    load_checkpoint,
    loss_value,
    output_error,
    save_checkpoint,
)
from leastcontrol.numerics import Activation, DimensionMismatch, Rng
from leastcontrol.solver import SolveConfig, solve_free


def scalar_net(w, u, b=0.0, activation=Activation.TANH):
    return EquilibriumNetwork(
        W=np.array([[w]]), U=np.array([[u]]), b=np.array([b]),
        activation=activation, output_dim=1,
    )


class TestFreeDynamics:
    def test_pure_leak(self):
        net = EquilibriumNetwork(
            W=np.zeros((2, 2)), U=np.zeros((2, 1)), b=np.zeros(2),
            activation=Activation.TANH, output_dim=1,
        )
        out = free_dynamics(net, np.array([1.0, -2.0]), np.zeros(1))
        assert out.tolist() == [-1.0, 2.0]

    def test_scalar_hand_evaluation(self):
        net = scalar_net(w=0.5, u=1.0)
        out = free_dynamics(net, np.array([0.9]), np.array([1.0]))
        assert out[0] == pytest.approx(-0.9 + 0.5 * np.tanh(0.9) + 1.0, abs=1e-15)

    def test_vanishes_at_equilibrium(self):
        net = build_recurrent(6, 2, 2, rng=Rng(0))
        x = Rng(1).normal((2,))
        phi, report = solve_free(net, x, SolveConfig(max_steps=20000, epsilon=1e-24))
        assert report.converged
        assert np.max(np.abs(free_dynamics(net, phi, x))) < 1e-11

    def test_dimension_mismatch(self):
        net = scalar_net(0.2, 1.0)
        with pytest.raises(DimensionMismatch):
            free_dynamics(net, np.zeros(2), np.zeros(1))


class TestJacobian:
    def test_zero_weights_gives_negation(self):
        net = EquilibriumNetwork(
            W=np.zeros((3, 3)), U=np.zeros((3, 1)), b=np.zeros(3),
            activation=Activation.TANH, output_dim=1,
        )
        v = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(jacobian_transpose_vec(net, np.zeros(3), v), -v)

    def test_scalar_hand_case(self):
        # w=2, phi=0 so sigma'=1, v=3: -3 + 2*3 = 3
        net = scalar_net(w=2.0, u=0.0)
        out = jacobian_transpose_vec(net, np.zeros(1), np.array([3.0]))
        assert out[0] == pytest.approx(3.0)

    def test_matches_fd_directional(self):
        rng = Rng(4)
        net = build_recurrent(8, 3, 2, rng=rng)
        phi, v = rng.normal((8,)), rng.normal((8,))
        x = rng.normal((3,))
        h = 1e-7
        jac = np.zeros((8, 8))
        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            jac[:, j] = (free_dynamics(net, phi + e, x) - free_dynamics(net, phi - e, x)) / (2 * h)
        assert np.max(np.abs(jac.T @ v - jacobian_transpose_vec(net, phi, v))) < 1e-7

    def test_dense_jacobian_matches_fd_columns(self):
        rng = Rng(5)
        net = build_recurrent(12, 2, 2, rng=rng)
        phi = rng.normal((12,))
        x = rng.normal((2,))
        h = 1e-6
        jac = jacobian_matrix(net, phi)
        for j in range(12):
            e = np.zeros(12)
            e[j] = h
            col = (free_dynamics(net, phi + e, x) - free_dynamics(net, phi - e, x)) / (2 * h)
            assert np.max(np.abs(col - jac[:, j])) < 1e-6


class TestFeedforward:
    def test_two_sweeps_equal_sequential_pass(self):
        rng = Rng(6)
        sizes = [3, 4, 2]
        net = build_feedforward(sizes, rng=rng)
        x = rng.normal((3,))
        phi = np.zeros(net.n)
        for _ in range(2):
            phi = net.W @ np.tanh(phi) + net.U @ x + net.b
        s1, s2 = layer_slices(sizes)
        h1 = net.U[s1] @ x + net.b[s1]
        y = net.W[s2, s1] @ np.tanh(h1) + net.b[s2]
        assert np.allclose(phi[s2], y, atol=1e-14)
        assert np.allclose(phi[s1], h1, atol=1e-14)

    def test_single_layer_is_linear_readout(self):
        rng = Rng(7)
        net = build_feedforward([3, 2], rng=rng)
        x = rng.normal((3,))
        phi, report = solve_free(net, x, SolveConfig(max_steps=10, epsilon=1e-30))
        assert np.allclose(phi, net.U @ x + net.b, atol=1e-15)

    def test_masked_entries_stay_zero_after_updates(self):
        from leastcontrol.updates import OptimizerState, ParamDelta, apply

        rng = Rng(8)
        net = build_feedforward([3, 4, 2], rng=rng)
        opt = OptimizerState(kind="sgd", lr=0.1)
        for k in range(100):
            delta = ParamDelta(
                dW=rng.normal((net.n, net.n)),
                dU=rng.normal((net.n, net.d)),
                db=rng.normal((net.n,)),
            )
            apply(opt, net, delta)
        assert np.all(net.W[net.w_mask == 0.0] == 0.0)
        assert np.all(net.U[net.u_mask == 0.0] == 0.0)

    def test_rejects_degenerate_layer_lists(self):
        with pytest.raises(ValueError):
            build_feedforward([4])
        with pytest.raises(ValueError):
            build_feedforward([4, 0, 2])


class TestAbsorbDecoder:
    def test_identity_decoder_outputs_sigma_of_selected_units(self):
        rng = Rng(9)
        base = build_recurrent(5, 2, 2, rng=rng)
        aug = absorb_decoder(base, np.eye(5)[-2:], np.zeros(2))
        x = rng.normal((2,))
        cfg = SolveConfig(max_steps=50000, epsilon=1e-26)
        phi_base, _ = solve_free(base, x, cfg)
        phi_aug, _ = solve_free(aug, x, cfg)
        assert np.allclose(aug.output(phi_aug), np.tanh(phi_base)[-2:], atol=1e-10)

    def test_equilibrium_matches_decoder_of_base_equilibrium(self):
        rng = Rng(10)
        base = build_recurrent(6, 3, 2, rng=rng)
        dec = 0.5 * rng.normal((3, 6))
        bdec = 0.1 * rng.normal((3,))
        aug = absorb_decoder(base, dec, bdec)
        x = rng.normal((3,))
        cfg = SolveConfig(max_steps=50000, epsilon=1e-26)
        phi_base, _ = solve_free(base, x, cfg)
        phi_aug, _ = solve_free(aug, x, cfg)
        assert np.allclose(aug.output(phi_aug), dec @ np.tanh(phi_base) + bdec, atol=1e-10)

    def test_preserves_base_dynamics_block_exactly(self):
        rng = Rng(11)
        base = build_recurrent(4, 2, 1, rng=rng)
        aug = absorb_decoder(base, rng.normal((2, 4)), np.zeros(2))
        x = rng.normal((2,))
        phi = rng.normal((4,))
        phi_aug = np.concatenate([phi, rng.normal((2,))])
        assert np.array_equal(free_dynamics(aug, phi_aug, x)[:4], free_dynamics(base, phi, x))

    def test_rejects_zero_width_decoder(self):
        base = build_recurrent(4, 2, 1, rng=Rng(12))
        with pytest.raises(ValueError):
            absorb_decoder(base, np.zeros((0, 4)), np.zeros(0))

    def test_rejects_double_augmentation(self):
        base = build_recurrent(4, 2, 1, rng=Rng(13))
        aug = absorb_decoder(base, np.zeros((2, 4)), np.zeros(2))
        with pytest.raises(ValueError):
            absorb_decoder(aug, np.zeros((2, 6)), np.zeros(2))

    def test_augmented_block_structure(self):
        base = build_recurrent(4, 2, 1, rng=Rng(14))
        dec = np.ones((2, 4))
        aug = absorb_decoder(base, dec, np.zeros(2))
        assert np.array_equal(aug.W[:4, :4], base.W)
        assert np.array_equal(aug.W[4:, :4], dec)
        assert np.all(aug.W[:, 4:] == 0.0)
        assert np.all(aug.U[4:, :] == 0.0)


class TestLosses:
    def test_mse_zero_at_target(self):
        loss = LossSpec("mse")
        y = np.array([0.3, -0.2])
        assert np.array_equal(output_error(loss, y, y), np.zeros(2))

    def test_softmax_ce_uniform_logits_closed_form(self):
        loss = LossSpec("softmax_ce")
        target = loss.target_distribution([0], 2)[:, 0]
        err = output_error(loss, np.zeros(2), target)
        assert np.allclose(err, [-0.5, 0.5], atol=1e-15)

    def test_soft_targets_mass(self):
        loss = LossSpec("softmax_ce", soft_target_epsilon=0.01)
        t = loss.target_distribution([3], 10)[:, 0]
        assert t[3] == pytest.approx(0.99)
        off = np.delete(t, 3)
        assert np.allclose(off, 0.01 / 9)
        assert t.sum() == pytest.approx(1.0)

    def test_rejects_non_distribution_targets(self):
        loss = LossSpec("softmax_ce")
        with pytest.raises(ValueError):
            output_error(loss, np.zeros(2), np.array([0.4, 0.3]))

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            LossSpec("softmax_ce", soft_target_epsilon=0.6)
        with pytest.raises(ValueError):
            LossSpec("huber")

    def test_loss_value_cross_entropy_matches_manual(self):
        loss = LossSpec("softmax_ce")
        y = np.array([1.0, -1.0])
        t = loss.target_distribution([0], 2)[:, 0]
        p = np.exp(y) / np.sum(np.exp(y))
        assert loss_value(loss, y, t) == pytest.approx(-np.log(p[0]))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = Rng(15)
        net = absorb_decoder(
            build_recurrent(5, 3, 2, rng=rng), rng.normal((2, 5)), rng.normal((2,))
        )
        path = os.path.join(tmp_path, "net.lcpnet")
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.W, net.W)
        assert np.array_equal(loaded.U, net.U)
        assert np.array_equal(loaded.b, net.b)
        assert np.array_equal(loaded.w_mask, net.w_mask)
        assert loaded.activation is net.activation
        assert loaded.decoder_units == net.decoder_units
        assert loaded.c == net.c

    def test_feedforward_roundtrip_keeps_layout(self, tmp_path):
        net = build_feedforward([4, 3, 2], rng=Rng(16))
        path = os.path.join(tmp_path, "ff.lcpnet")
        save_checkpoint(net, path)
        assert load_checkpoint(path).layer_sizes == (4, 3, 2)

    def test_bad_magic_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "junk.lcpnet")
        with open(path, "wb") as fh:
            fh.write(b"NOTANET0" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)
