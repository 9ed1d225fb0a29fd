"""Control-derived parameter updates and the optimizers that apply them.

At a converged controlled state the descent update on the control
objective is a local outer product: every weight moves by postsynaptic
control times presynaptic activity,

    dW = psi* sigma(phi*)^T,   dU = psi* x^T,   db = psi*.

All deltas returned here are descent directions (apply as
``theta += lr * delta``) and are averaged over the sample batch.
Structural masks are re-applied after every change so masked entries
stay exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from leastcontrol.network import EquilibriumNetwork, free_dynamics
from leastcontrol.numerics import NonFiniteError, activation_apply, activation_deriv
from leastcontrol.solver import ControlledState


@dataclass
class ParamDelta:
    """Per-parameter update, shape-matched to the owning network.

    For decoder-augmented networks the trained decoder lives inside
    ``W``/``b``; :meth:`decoder_rows` exposes that block.
    """

    dW: np.ndarray
    dU: np.ndarray
    db: np.ndarray
    converged: bool = True

    def decoder_rows(self, net: EquilibriumNetwork):
        """(d_decoder, d_decoder_bias) of an augmented network."""
        if not net.decoder_units:
            raise ValueError("network carries no absorbed decoder")
        c = net.decoder_units
        return self.dW[-c:, : net.n - c], self.db[-c:]

    def scaled(self, factor: float) -> "ParamDelta":
        return ParamDelta(self.dW * factor, self.dU * factor, self.db * factor, self.converged)

    def global_norm(self) -> float:
        return float(
            np.sqrt(
                np.sum(self.dW**2) + np.sum(self.dU**2) + np.sum(self.db**2)
            )
        )


def _columns(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def _outer_delta(net, psi_cols, phi_cols, x_cols, converged) -> ParamDelta:
    n_cols = psi_cols.shape[1]
    sig = activation_apply(net.activation, phi_cols)
    dW = psi_cols @ sig.T / n_cols
    dU = psi_cols @ x_cols.T / n_cols
    db = np.mean(psi_cols, axis=1)
    if net.w_mask is not None:
        dW *= net.w_mask
    if net.u_mask is not None:
        dU *= net.u_mask
    return ParamDelta(dW=dW, dU=dU, db=db, converged=converged)


def lcp_delta(net: EquilibriumNetwork, state: ControlledState, x) -> ParamDelta:
    """Descent update from the controlled state: dW = psi sigma(phi)^T etc.

    An unconverged solve still yields a usable delta (its error is
    bounded by the distance to the true controlled state); the
    ``converged`` flag carries the warning.
    """
    return _outer_delta(
        net, _columns(state.psi), _columns(state.phi), _columns(x), state.converged
    )


def residual_delta(net: EquilibriumNetwork, phi, x, converged: bool = True) -> ParamDelta:
    """Same update computed from the dynamics residual, psi replaced by -f(phi).

    At any controlled fixed point ``f + psi = 0`` makes this identical to
    :func:`lcp_delta`; comparing the two is a cheap consistency check.
    """
    phi_cols, x_cols = _columns(phi), _columns(x)
    return _outer_delta(net, -free_dynamics(net, phi_cols, x_cols), phi_cols, x_cols, converged)


def lcp_delta_heuristic(net: EquilibriumNetwork, state: ControlledState, x) -> ParamDelta:
    """Linear-feedback variant gating the control by the local slope.

    Replaces ``psi`` with ``sigma'(phi*) * (Q u*)`` so saturated units
    stop updating; only meaningful for the linear-feedback circuit where
    the broadcast control is approximate.
    """
    if state.controller_kind != "lf":
        raise ValueError("heuristic update is defined for the linear-feedback controller only")
    phi_cols = _columns(state.phi)
    psi_cols = activation_deriv(net.activation, phi_cols) * _columns(state.psi)
    return _outer_delta(net, psi_cols, phi_cols, _columns(x), state.converged)


def kolen_pollack_step(
    net: EquilibriumNetwork, S: np.ndarray, state: ControlledState, x, gamma: float
):
    """Transposed update plus decay driving feedback weights toward W^T.

        dW = psi sigma(phi)^T - gamma W,   dS = sigma(phi) psi^T - gamma S

    The decay is part of the rule, not of the loss; trainers that use an
    adaptive optimizer should request ``gamma=0`` here and apply the
    decay multiplicatively after the optimizer step (see
    :func:`apply_decoupled_decay`).
    """
    delta = lcp_delta(net, state, x)
    phi_cols, psi_cols = _columns(state.phi), _columns(state.psi)
    sig = activation_apply(net.activation, phi_cols)
    dS = sig @ psi_cols.T / psi_cols.shape[1]
    if net.w_mask is not None:
        dS *= net.w_mask.T
    if gamma:
        delta = ParamDelta(
            delta.dW - gamma * net.W, delta.dU, delta.db, delta.converged
        )
        dS = dS - gamma * S
    return delta, dS


def apply_decoupled_decay(net: EquilibriumNetwork, S: np.ndarray | None, gamma: float):
    """Multiplicative weight decay applied outside the optimizer."""
    net.W *= 1.0 - gamma
    net.apply_masks()
    if S is not None:
        S *= 1.0 - gamma
    return net, S


def clip_global_norm(delta: ParamDelta, max_norm: float = 10.0) -> ParamDelta:
    norm = delta.global_norm()
    if norm > max_norm:
        return delta.scaled(max_norm / norm)
    return delta


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """SGD or Adam with an optional cosine learning-rate schedule.

    One instance owns all parameter groups of a training run; moment
    buffers are created lazily per named slot.  ``apply`` counts one
    schedule step per call.
    """

    kind: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    final_lr: float = 0.0
    total_steps: int = 0
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.total_steps < 1:
            raise ValueError("cosine schedule needs total_steps >= 1")

    def current_lr(self) -> float:
        if self.schedule == "constant":
            return self.lr
        t = min(self.step_count, self.total_steps)
        frac = 0.5 * (1.0 + np.cos(np.pi * t / self.total_steps))
        return self.final_lr + (self.lr - self.final_lr) * frac

    def _direction(self, name: str, d: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return d
        m, v, t = self.slots.get(name, (np.zeros_like(d), np.zeros_like(d), 0))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * d
        v = self.beta2 * v + (1.0 - self.beta2) * d * d
        self.slots[name] = (m, v, t)
        mhat = m / (1.0 - self.beta1**t)
        vhat = v / (1.0 - self.beta2**t)
        return mhat / (np.sqrt(vhat) + self.eps)


def apply(opt: OptimizerState, net: EquilibriumNetwork, delta: ParamDelta, extras: dict | None = None):
    """Move the network parameters along a descent delta; one schedule step.

    ``extras`` maps slot names to ``(matrix, d_matrix)`` pairs for
    auxiliary parameters (feedback weights S, broadcast weights Q) that
    must share this round's learning rate.  Non-finite deltas are
    rejected before anything is touched.
    """
    arrays = [delta.dW, delta.dU, delta.db] + [d for _, d in (extras or {}).values()]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("optimizer received a non-finite update")
    lr = opt.current_lr()
    opt.step_count += 1
    net.W += lr * opt._direction("W", delta.dW)
    net.U += lr * opt._direction("U", delta.dU)
    net.b += lr * opt._direction("b", delta.db)
    net.apply_masks()
    if extras:
        for name, (mat, d_mat) in extras.items():
            mat += lr * opt._direction(name, d_mat)
    return net
