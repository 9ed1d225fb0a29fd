"""Feedback controllers that steer the network to a loss-minimizing state.

Three circuit families compute the control signal ``psi`` entering the
state update, all driven by a low-dimensional output controller ``u``:

* ``LinearFeedback``: broadcast ``psi = Q u`` through a fixed or learned
  matrix; the cheapest circuit, exact only when ``Q`` spans the right
  column space.
* ``DynamicInversion``: give ``psi`` its own relaxation
  ``psi <- sigma'(phi) S psi + D^T u`` which at the fixed point applies
  the inverse transposed Jacobian without ever forming a matrix inverse.
* ``EnergyBased``: descend the augmented energy
  ``F = 1/2 ||f||^2 + beta L``; the control is implicit,
  ``psi = -f(phi)``, and shares its fixed points with dynamic inversion
  when ``S = W^T``.

The output controller integrates the output error with leak ``alpha``
(or applies it proportionally with gain ``beta = 1/alpha``, which has the
same steady states).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from leastcontrol.network import (
    EquilibriumNetwork,
    LossSpec,
    output_error,
)
from leastcontrol.numerics import (
    DimensionMismatch,
    NonFiniteError,
    Rng,
    activation_apply,
    activation_deriv,
)


@dataclass
class OutputController:
    """Leaky integral controller on the output units, or its proportional twin.

    Steady state in both modes: ``alpha u* + dL/dy = 0`` (proportional
    gain ``beta`` corresponds to ``alpha = 1/beta``).
    """

    alpha: float = 0.1
    mode: str = "leaky_integral"
    beta: float | None = None
    tau_u: float = 1.0

    def __post_init__(self):
        if self.mode not in ("leaky_integral", "proportional"):
            raise ValueError(f"unknown output controller mode {self.mode!r}")
        if self.alpha < 0.0:
            raise ValueError("leak rate must be >= 0")
        if self.tau_u <= 0.0:
            raise ValueError("tau_u must be positive")
        if self.mode == "proportional":
            if self.beta is None:
                if self.alpha == 0.0:
                    raise ValueError("proportional control needs beta or alpha > 0")
                self.beta = 1.0 / self.alpha
            elif self.alpha == 0.0:
                self.alpha = 1.0 / self.beta

    def step_u(self, u: np.ndarray, err: np.ndarray, dt: float = 1.0) -> np.ndarray:
        """Advance the output controller one step against output error ``err``.

        ``tau_u > 1`` integrates slower than the state sweep; it changes
        no fixed point but stabilizes high-gain loops (strong recurrence
        with unbounded-error losses).
        """
        if self.mode == "proportional":
            return -self.beta * err
        return u + (dt / self.tau_u) * (-self.alpha * u - err)


@dataclass
class FeedbackLearnCfg:
    """Noise-driven plasticity settings for linear feedback weights.

    The base time constant ``tau_prime`` fixes the simulation grid of the
    stochastic dynamics: dt = tau_prime^2, neural and noise time
    constants tau = tau_prime^2, tau_eps = tau_prime, and tau_u = 1.
    """

    s: float = 0.01
    tau_prime: float = 0.2
    tau_q: float = 1.0
    gamma_q: float = 1e-2
    sde_steps: int = 500
    form: str = "simple"  # "simple" (noise-only presynapse) or "multicompartment"

    def __post_init__(self):
        if self.s < 0.0:
            raise ValueError("noise std must be >= 0")
        if min(self.tau_prime, self.tau_q, self.gamma_q) <= 0.0 or self.sde_steps <= 0:
            raise ValueError("feedback learning constants must be positive")
        if self.form not in ("simple", "multicompartment"):
            raise ValueError(f"unknown feedback rule form {self.form!r}")


@dataclass
class LinearFeedback:
    Q: np.ndarray
    learn: FeedbackLearnCfg | None = None
    output: OutputController = field(default_factory=OutputController)


@dataclass
class DynamicInversion:
    S: np.ndarray | None = None  # None ties S = W^T
    output: OutputController = field(default_factory=OutputController)


@dataclass
class EnergyBased:
    S: np.ndarray | None = None
    inner_step: float | None = None  # None: 0.5 / (4 + beta), beta = 1/alpha
    inner_adam: bool = False
    output: OutputController = field(default_factory=OutputController)

    def step_size(self) -> float:
        """Descent step; the default backs off as the nudging strength grows."""
        if self.inner_step is not None:
            return self.inner_step
        beta = self.output.beta if self.output.beta else 1.0 / max(self.output.alpha, 1e-12)
        return 0.5 / (4.0 + beta)


ControllerSpec = LinearFeedback | DynamicInversion | EnergyBased


def feedback_matrix(controller, net: EquilibriumNetwork) -> np.ndarray:
    """Resolve the feedback weights S, tying them to W^T when unset."""
    s = getattr(controller, "S", None)
    if s is None:
        return net.W.T
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (net.n, net.n):
        raise DimensionMismatch(f"feedback weights {s.shape} do not match n={net.n}")
    return s


def _recurrent_drive(net, phi, x):
    sig = activation_apply(net.activation, phi)
    bias = net.b if phi.ndim == 1 else net.b[:, None]
    return net.W @ sig + net.U @ x + bias


def lf_update_map(net, phi, u, Q, x, target, loss: LossSpec, out: OutputController, dt: float = 1.0):
    """One sweep of the linear-feedback circuit: state gets W sigma(phi)+Ux+Qu.

    ``dt=1`` is the plain fixed-point sweep; smaller values damp it.
    """
    if Q.shape != (net.n, net.c):
        raise DimensionMismatch(f"Q must be ({net.n}, {net.c}), got {Q.shape}")
    err = output_error(loss, net.output(phi), target)
    phi_next = phi + dt * (_recurrent_drive(net, phi, x) + Q @ u - phi)
    u_next = out.step_u(u, err, dt)
    return phi_next, u_next


def di_update_map(net, phi, psi, u, S, x, target, loss: LossSpec, out: OutputController, dt: float = 1.0):
    """One sweep of the dynamic-inversion circuit.

    psi relaxes to ``(Id - sigma'(phi) S)^{-1} D^T u`` without an explicit
    inverse; with ``S = W^T`` that applies the inverse transposed state
    Jacobian to the output control.
    """
    err = output_error(loss, net.output(phi), target)
    sp = activation_deriv(net.activation, phi)
    phi_next = phi + dt * (_recurrent_drive(net, phi, x) + psi - phi)
    psi_next = psi + dt * (sp * (S @ psi) + net.lift_output(u) - psi)
    u_next = out.step_u(u, err, dt)
    return phi_next, psi_next, u_next


def ebd_residual_control(net, phi, x):
    """Instantaneous control of the energy circuit: psi = phi - W sigma(phi) - Ux - b = -f."""
    return phi - _recurrent_drive(net, phi, x)


def ebd_update_map(net, phi, u, S, eta, x, target, loss: LossSpec, out: OutputController):
    """One energy-descent step of size ``eta``.

    With ``S = W^T`` and a proportional output controller this is exact
    gradient descent on the augmented energy
    ``F(phi) = 1/2 ||f(phi)||^2 + beta L(D phi)``.
    """
    err = output_error(loss, net.output(phi), target)
    u_next = out.step_u(u, err, eta if out.mode == "leaky_integral" else 1.0)
    psi = ebd_residual_control(net, phi, x)
    sp = activation_deriv(net.activation, phi)
    phi_next = phi + eta * (-psi + sp * (S @ psi) + net.lift_output(u_next))
    return phi_next, u_next


def augmented_energy(net, phi, x, target, loss: LossSpec, beta: float) -> float:
    """F(phi, theta, beta) = 1/2 ||f(phi)||^2 + beta L(D phi)."""
    from leastcontrol.network import free_dynamics, loss_value

    f = free_dynamics(net, phi, x)
    return float(0.5 * np.sum(f * f) + beta * np.sum(loss_value(loss, net.output(phi), target)))


# ---------------------------------------------------------------------------
# feedback weight learning for the linear circuit


def learn_feedback_Q(
    net: EquilibriumNetwork,
    x: np.ndarray,
    target: np.ndarray,
    Q: np.ndarray,
    cfg: FeedbackLearnCfg,
    rng: Rng,
    out: OutputController | None = None,
    loss: LossSpec | None = None,
    solve_cfg=None,
):
    """Accumulated anti-Hebbian update for the feedback weights Q.

    Runs the noisy circuit from its noiseless fixed point and correlates
    presynaptic noise with the high-pass output control ``u - u*``:

        dQ = -(1 / (tau_q s^2)) sum_m pre[m] (u[m] - u*)^T
             - (gamma_q / tau_q) Q

    with ``pre = s eps`` for the default "simple" rule (this is the form
    whose stationary point provably spans the optimal feedback space for
    a fixed input) or ``pre = Q u + s eps`` for the "multicompartment"
    variant, where the whole feedback-compartment activity is the
    presynaptic factor.  Batched inputs (columns of ``x``/``target``)
    average the update.
    """
    from leastcontrol.solver import SolveConfig, integrate_noisy, solve_controlled

    out = out or OutputController()
    loss = loss or LossSpec("mse")
    solve_cfg = solve_cfg or SolveConfig(max_steps=2000, epsilon=1e-10)
    controller = LinearFeedback(Q=Q, output=out)
    state, report = solve_controlled(net, x, target, controller, loss, solve_cfg)
    batched = x.ndim == 2
    n_cols = x.shape[1] if batched else 1
    u_star = state.u
    hebb = np.zeros_like(Q)
    if cfg.s > 0.0:
        multi = cfg.form == "multicompartment"
        for phi_m, u_m, eps_m in integrate_noisy(
            net, x, Q, out, loss, target, cfg.s, cfg.tau_prime, cfg.sde_steps, rng,
            init_phi=state.phi, init_u=state.u,
        ):
            pre = Q @ u_m + cfg.s * eps_m if multi else cfg.s * eps_m
            post = u_m - u_star
            if batched:
                hebb += pre @ post.T
            else:
                hebb += np.outer(pre, post)
        hebb /= cfg.s**2 * n_cols
    dq = -hebb / cfg.tau_q - (cfg.gamma_q / cfg.tau_q) * Q
    if not np.all(np.isfinite(dq)):
        raise NonFiniteError("feedback learning produced non-finite updates")
    return dq


class SingularJacobianError(np.linalg.LinAlgError):
    """The state Jacobian could not be inverted at the given equilibrium."""


def _orthonormal_basis(m: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(m)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
    return q[:, keep]


def check_column_space(net: EquilibriumNetwork, phi_star: np.ndarray, q_eff: np.ndarray) -> float:
    """Alignment in [0, 1] between col(Q_eff) and the optimal feedback space.

    The reference space is row[D (Id - W sigma'(phi*))^{-1}], the column
    space any feedback mapping must span for the controlled steady state
    to carry an optimal control.  Returns the mean principal-angle
    cosine computed from orthonormal bases.
    """
    sp = activation_deriv(net.activation, phi_star)
    m = np.eye(net.n) - net.W * sp[None, :]
    d_sel = np.zeros((net.c, net.n))
    d_sel[:, net.n - net.c :] = np.eye(net.c)
    try:
        target_t = np.linalg.solve(m.T, d_sel.T)  # rows of D M^{-1}, transposed
    except np.linalg.LinAlgError as err:
        raise SingularJacobianError(f"Id - W sigma' is singular: {err}") from err
    qa = _orthonormal_basis(target_t)
    qb = _orthonormal_basis(np.asarray(q_eff, dtype=np.float64))
    if qa.shape[1] == 0 or qb.shape[1] == 0:
        return 0.0
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    k = min(qa.shape[1], qb.shape[1])
    return float(np.clip(np.sum(sv[:k]) / k, 0.0, 1.0))


def di_effective_feedback(net: EquilibriumNetwork, phi_star: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Q_eff = (Id - sigma'(phi*) S)^{-1} D^T of the inversion circuit.

    Verification helper only; the training path never inverts matrices.
    """
    sp = activation_deriv(net.activation, phi_star)
    m = np.eye(net.n) - sp[:, None] * S
    d_sel_t = np.zeros((net.n, net.c))
    d_sel_t[net.n - net.c :, :] = np.eye(net.c)
    try:
        return np.linalg.solve(m, d_sel_t)
    except np.linalg.LinAlgError as err:
        raise SingularJacobianError(f"Id - sigma' S is singular: {err}") from err
