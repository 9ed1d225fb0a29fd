"""Independent gradient computations used as baselines and cross-checks.

Four routes to a gradient, none of which share code with the control
path they verify:

* :func:`rbp_gradient` relaxes the adjoint state after the free phase
  (two-phase recurrent backpropagation),
* :func:`implicit_gradient_direct` solves the adjoint system with a
  dense LU factorization,
* :func:`fd_lcp_gradient` differentiates the control objective
  ``H = 1/2 ||psi*||^2`` by central finite differences, re-solving the
  controlled equilibrium for every probe, and
* :func:`layered_backprop` is plain reverse accumulation through the
  layered forward pass of a feedforward-masked network.

All oracles return the gradient of their objective (not a descent
delta) averaged over the sample batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from leastcontrol.network import (
    EquilibriumNetwork,
    LossSpec,
    free_dynamics,
    jacobian_matrix,
    jacobian_transpose_vec,
    layer_slices,
    loss_value,
    output_error,
)
from leastcontrol.numerics import (
    NonFiniteError,
    activation_apply,
    activation_deriv,
    lu_solve,
)
from leastcontrol.solver import SolveConfig, _as_columns, _relative_change, solve_controlled, solve_free
from leastcontrol.updates import ParamDelta

FD_FULL_LIMIT = 12  # full finite differencing only for tiny state spaces


@dataclass
class OracleReport:
    gradient: ParamDelta
    method: str
    iterations: int = 0
    residual: float = 0.0


def _grad_from_adjoint(net, delta_cols, phi_cols, x_cols) -> ParamDelta:
    """Map an adjoint solution to parameter space: grad = -delta^T d_theta f."""
    n_cols = delta_cols.shape[1]
    sig = activation_apply(net.activation, phi_cols)
    dW = -delta_cols @ sig.T / n_cols
    dU = -delta_cols @ x_cols.T / n_cols
    db = -np.mean(delta_cols, axis=1)
    if net.w_mask is not None:
        dW *= net.w_mask
    if net.u_mask is not None:
        dU *= net.u_mask
    return ParamDelta(dW=dW, dU=dU, db=db)


def rbp_gradient(
    net: EquilibriumNetwork, x, target, loss: LossSpec, cfg: SolveConfig | None = None
) -> OracleReport:
    """Loss gradient at the free equilibrium via recurrent backpropagation.

    Phase one relaxes the free state; phase two relaxes the adjoint
    delta_next = delta + d_phi f^T delta - D^T dL/dy using the same
    stopping machinery as the forward solver.
    """
    cfg = cfg or SolveConfig(max_steps=2000, epsilon=1e-12)
    x_cols, _ = _as_columns(x)
    t_cols, _ = _as_columns(target)
    phi_star, free_report = solve_free(net, x_cols, cfg)
    err = output_error(loss, net.output(phi_star), t_cols)
    g0 = net.lift_output(err)
    delta = np.zeros_like(phi_star)
    iters, residual = 0, np.inf
    for _ in range(cfg.max_steps):
        delta_next = delta + jacobian_transpose_vec(net, phi_star, delta) - g0
        if not np.all(np.isfinite(delta_next)):
            raise NonFiniteError("adjoint relaxation diverged in rbp_gradient")
        rel = _relative_change(delta, delta_next)
        delta = delta_next
        iters += 1
        residual = float(np.max(rel))
        if residual <= cfg.epsilon:
            break
    grad = _grad_from_adjoint(net, delta, phi_star, x_cols)
    return OracleReport(
        gradient=grad,
        method="rbp",
        iterations=free_report.iterations + iters,
        residual=residual,
    )


def implicit_gradient_direct(
    net: EquilibriumNetwork, x, target, loss: LossSpec, cfg: SolveConfig | None = None
) -> OracleReport:
    """Exact implicit gradient by one dense adjoint solve per sample.

    grad = -d_theta f^T (d_phi f)^{-T} D^T dL/dy at the free equilibrium;
    raises on a singular state Jacobian.
    """
    cfg = cfg or SolveConfig(max_steps=5000, epsilon=1e-13)
    x_cols, _ = _as_columns(x)
    t_cols, _ = _as_columns(target)
    phi_star, report = solve_free(net, x_cols, cfg)
    err = output_error(loss, net.output(phi_star), t_cols)
    g0 = net.lift_output(err)
    delta = np.zeros_like(phi_star)
    for j in range(x_cols.shape[1]):
        jac = jacobian_matrix(net, phi_star[:, j])
        delta[:, j] = lu_solve(jac.T, g0[:, j])
    grad = _grad_from_adjoint(net, delta, phi_star, x_cols)
    return OracleReport(gradient=grad, method="implicit_direct", iterations=report.iterations)


def control_objective(
    net: EquilibriumNetwork, x, target, controller, loss: LossSpec, cfg: SolveConfig
) -> float:
    """H(theta): batch-mean of 1/2 ||psi*||^2 at the controlled equilibrium."""
    state, _ = solve_controlled(net, x, target, controller, loss, cfg)
    return float(np.mean(np.atleast_1d(state.control_energy())))


def fd_lcp_gradient(
    net: EquilibriumNetwork,
    x,
    target,
    controller,
    loss: LossSpec,
    h: float = 1e-5,
    cfg: SolveConfig | None = None,
    entries: list | None = None,
) -> OracleReport:
    """Central finite differences of the control objective H(theta).

    Every probe re-solves the controlled equilibrium at the solver
    tolerance in ``cfg`` (tight by default).  ``entries`` optionally
    restricts differencing to a subset of ``[("W", i, j), ("U", i, j),
    ("b", i)]``; the full parameter set is only allowed for tiny nets.
    The report's ``residual`` is the fraction of probes whose numerator
    fell below the round-off floor 1e3 * eps_machine * |H|.
    """
    cfg = cfg or SolveConfig(max_steps=20000, epsilon=1e-10)
    if entries is None:
        if net.n > FD_FULL_LIMIT:
            raise ValueError(
                f"full finite differencing is restricted to n <= {FD_FULL_LIMIT}"
            )
        entries = [("W", i, j) for i in range(net.n) for j in range(net.n)]
        entries += [("U", i, j) for i in range(net.n) for j in range(net.d)]
        entries += [("b", i) for i in range(net.n)]
    work = net.copy()
    grad = ParamDelta(
        dW=np.zeros_like(net.W), dU=np.zeros_like(net.U), db=np.zeros_like(net.b)
    )
    h_base = control_objective(work, x, target, controller, loss, cfg)
    floor = 1e3 * np.finfo(np.float64).eps * max(abs(h_base), 1.0e-30)
    noisy = 0
    for entry in entries:
        name, idx = entry[0], entry[1:]
        arr = {"W": work.W, "U": work.U, "b": work.b}[name]
        mask = {"W": work.w_mask, "U": work.u_mask, "b": None}[name]
        if mask is not None and mask[idx] == 0.0:
            continue
        original = arr[idx]
        arr[idx] = original + h
        h_plus = control_objective(work, x, target, controller, loss, cfg)
        arr[idx] = original - h
        h_minus = control_objective(work, x, target, controller, loss, cfg)
        arr[idx] = original
        if abs(h_plus - h_minus) < floor:
            noisy += 1
        out = {"W": grad.dW, "U": grad.dU, "b": grad.db}[name]
        out[idx] = (h_plus - h_minus) / (2.0 * h)
    return OracleReport(
        gradient=grad,
        method="fd_lcp",
        iterations=2 * len(entries),
        residual=noisy / max(len(entries), 1),
    )


def layered_backprop(
    net: EquilibriumNetwork, x, target, loss: LossSpec
) -> OracleReport:
    """Exact loss gradient of a feedforward-masked network.

    Runs the layered forward pass ``phi_l = W_l sigma(phi_{l-1}) + b_l``
    (input enters linearly) and reverse-accumulates through it; refuses
    recurrent networks.
    """
    if net.layer_sizes is None:
        raise ValueError("layered_backprop requires a feedforward-masked network")
    x_cols, _ = _as_columns(x)
    t_cols, _ = _as_columns(target)
    n_cols = x_cols.shape[1]
    slices = layer_slices(net.layer_sizes)
    n_layers = len(slices)

    pre = []  # pre-activations phi_l, in state coordinates
    prev_sig = x_cols
    for l, sl in enumerate(slices):
        if l == 0:
            z = net.U[sl, :] @ x_cols + net.b[sl, None]
        else:
            z = net.W[sl, slices[l - 1]] @ prev_sig + net.b[sl, None]
        pre.append(z)
        prev_sig = activation_apply(net.activation, z)

    grad = ParamDelta(
        dW=np.zeros_like(net.W), dU=np.zeros_like(net.U), db=np.zeros_like(net.b)
    )
    delta = output_error(loss, pre[-1], t_cols)
    for l in range(n_layers - 1, -1, -1):
        sl = slices[l]
        grad.db[sl] = np.mean(delta, axis=1)
        if l == 0:
            grad.dU[sl, :] = delta @ x_cols.T / n_cols
        else:
            below = slices[l - 1]
            sig_below = activation_apply(net.activation, pre[l - 1])
            grad.dW[sl, below] = delta @ sig_below.T / n_cols
            delta = activation_deriv(net.activation, pre[l - 1]) * (
                net.W[sl, below].T @ delta
            )
    return OracleReport(gradient=grad, method="layered_backprop")


def feedforward_loss(net: EquilibriumNetwork, x, target, loss: LossSpec) -> float:
    """Batch-mean loss of the layered forward pass (FD probes in tests)."""
    if net.layer_sizes is None:
        raise ValueError("feedforward_loss requires a feedforward-masked network")
    x_cols, _ = _as_columns(x)
    t_cols, _ = _as_columns(target)
    slices = layer_slices(net.layer_sizes)
    prev_sig = x_cols
    z = None
    for l, sl in enumerate(slices):
        if l == 0:
            z = net.U[sl, :] @ x_cols + net.b[sl, None]
        else:
            z = net.W[sl, slices[l - 1]] @ prev_sig + net.b[sl, None]
        prev_sig = activation_apply(net.activation, z)
    return float(np.mean(loss_value(loss, z, t_cols)))


def free_equilibrium_loss(
    net: EquilibriumNetwork, x, target, loss: LossSpec, cfg: SolveConfig | None = None
):
    """(mean loss, mean accuracy-or-nan) of the free equilibrium outputs."""
    cfg = cfg or SolveConfig()
    x_cols, _ = _as_columns(x)
    t_cols, _ = _as_columns(target)
    phi_star, report = solve_free(net, x_cols, cfg)
    y = net.output(phi_star)
    values = np.atleast_1d(loss_value(loss, y, t_cols))
    if loss.kind == "softmax_ce":
        acc = float(np.mean(np.argmax(y, axis=0) == np.argmax(t_cols, axis=0)))
    else:
        acc = float("nan")
    return float(np.mean(values)), acc, report
