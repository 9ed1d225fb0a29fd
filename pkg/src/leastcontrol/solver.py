"""Fixed-point solvers for free and controlled equilibrium dynamics.

Sweeping the update map once per step equals forward-Euler integration
with the step equal to the time constant; ``dt < 1`` damps the sweep for
stiff instances.  Iteration stops per sample when the squared change of
the concatenated dynamic state, scaled by the product of consecutive
norms, drops below ``epsilon``:

    ||S_t - S_{t+1}||^2 / (||S_t|| ||S_{t+1}||) <= epsilon

with the all-zero case counting as converged.  Batches are solved
column-wise; each column freezes the moment its own criterion fires, so
results are identical whether samples are solved jointly or one by one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from leastcontrol.controllers import (
    DynamicInversion,
    EnergyBased,
    LinearFeedback,
    di_update_map,
    ebd_residual_control,
    ebd_update_map,
    feedback_matrix,
    lf_update_map,
)
from leastcontrol.network import EquilibriumNetwork, LossSpec, free_dynamics, output_error
from leastcontrol.numerics import NonFiniteError, Rng, activation_apply

DIVERGENCE_NORM = 1e6
ZERO_NORM = 1e-12


@dataclass
class SolveConfig:
    max_steps: int = 500
    epsilon: float = 1e-8
    dt: float = 1.0
    track: bool = False

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.dt <= 1.0):
            raise ValueError("dt must lie in (0, 1]")


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    residual_trace: list | None = None
    per_sample_iterations: np.ndarray | None = None


@dataclass
class ControlledState:
    """Joint fixed point of one controlled solve (column batch or single)."""

    phi: np.ndarray
    psi: np.ndarray
    u: np.ndarray
    report: SolveReport
    controller_kind: str = "di"

    @property
    def converged(self) -> bool:
        return self.report.converged

    def control_energy(self) -> np.ndarray:
        """Per-sample least-control objective value, 1/2 ||psi||^2."""
        return 0.5 * np.sum(self.psi * self.psi, axis=0)


def _as_columns(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[:, None], False) if x.ndim == 1 else (x, True)


def _relative_change(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Per-column stopping statistic; 0 when both states are numerically zero."""
    diff2 = np.sum((prev - nxt) ** 2, axis=0)
    n_prev = np.sqrt(np.sum(prev * prev, axis=0))
    n_next = np.sqrt(np.sum(nxt * nxt, axis=0))
    denom = n_prev * n_next
    both_zero = (n_prev < ZERO_NORM) & (n_next < ZERO_NORM)
    safe = np.where(denom > 0.0, denom, 1.0)
    rel = diff2 / safe
    rel[both_zero] = 0.0
    rel[(~both_zero) & (denom == 0.0)] = np.inf
    return rel


def _guard_finite(arrs, context: str):
    for a in arrs:
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > DIVERGENCE_NORM):
            raise NonFiniteError(f"divergence detected during {context}")


def _run_fixed_point(step_fn, states: list[np.ndarray], cfg: SolveConfig, context: str):
    """Generic per-column fixed-point driver.

    ``step_fn(state_list, idx)`` returns the next values of every state
    array restricted to the active columns ``idx``.
    """
    n_cols = states[0].shape[1]
    active = np.ones(n_cols, dtype=bool)
    iters = np.zeros(n_cols, dtype=np.int64)
    last_rel = np.full(n_cols, np.inf)
    trace = [] if cfg.track else None
    for _ in range(cfg.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        current = [s[:, idx] for s in states]
        nxt = step_fn(states, idx)
        _guard_finite(nxt, context)
        prev_cat = np.concatenate(current, axis=0)
        next_cat = np.concatenate(nxt, axis=0)
        rel = _relative_change(prev_cat, next_cat)
        for s, new in zip(states, nxt):
            s[:, idx] = new
        iters[idx] += 1
        last_rel[idx] = rel
        if trace is not None:
            trace.append(float(np.max(rel)))
        active[idx[rel <= cfg.epsilon]] = False
    report = SolveReport(
        iterations=int(np.max(iters)) if n_cols else 0,
        final_residual=float(np.max(last_rel)) if n_cols else 0.0,
        converged=bool(not active.any()),
        residual_trace=trace,
        per_sample_iterations=iters,
    )
    return report


def solve_free(net: EquilibriumNetwork, x, cfg: SolveConfig | None = None):
    """Relax the free dynamics from phi = 0 to the fixed point phi*."""
    cfg = cfg or SolveConfig()
    x_cols, batched = _as_columns(x)
    phi = np.zeros((net.n, x_cols.shape[1]))

    def step(states, idx):
        (phi_a,) = (states[0][:, idx],)
        drive = (
            net.W @ activation_apply(net.activation, phi_a)
            + net.U @ x_cols[:, idx]
            + net.b[:, None]
        )
        return [phi_a + cfg.dt * (drive - phi_a)]

    report = _run_fixed_point(step, [phi], cfg, "solve_free")
    return (phi if batched else phi[:, 0]), report


def solve_controlled(
    net: EquilibriumNetwork,
    x,
    target,
    controller,
    loss: LossSpec,
    cfg: SolveConfig | None = None,
):
    """Relax the controlled dynamics to the joint fixed point of (phi, psi, u).

    All dynamic states start at zero.  The effective control ``psi`` is
    returned for every circuit: the linear-feedback circuit reports
    ``Q u*`` and the energy circuit the residual ``-f(phi*)``.
    """
    cfg = cfg or SolveConfig()
    x_cols, batched = _as_columns(x)
    t_cols, _ = _as_columns(target)
    n_cols = x_cols.shape[1]
    out = controller.output
    phi = np.zeros((net.n, n_cols))
    u = np.zeros((net.c, n_cols))
    kind = {LinearFeedback: "lf", DynamicInversion: "di", EnergyBased: "ebd"}.get(
        type(controller)
    )

    if isinstance(controller, LinearFeedback):
        Q = np.asarray(controller.Q, dtype=np.float64)

        def step(states, idx):
            phi_a, u_a = states[0][:, idx], states[1][:, idx]
            return list(
                lf_update_map(
                    net, phi_a, u_a, Q, x_cols[:, idx], t_cols[:, idx], loss, out, cfg.dt
                )
            )

        report = _run_fixed_point(step, [phi, u], cfg, "solve_controlled[lf]")
        psi = Q @ u

    elif isinstance(controller, DynamicInversion):
        S = feedback_matrix(controller, net)
        psi = np.zeros((net.n, n_cols))

        def step(states, idx):
            phi_a, psi_a, u_a = (s[:, idx] for s in states)
            return list(
                di_update_map(
                    net, phi_a, psi_a, u_a, S, x_cols[:, idx], t_cols[:, idx], loss, out, cfg.dt
                )
            )

        report = _run_fixed_point(step, [phi, psi, u], cfg, "solve_controlled[di]")

    elif isinstance(controller, EnergyBased):
        S = feedback_matrix(controller, net)
        eta = controller.step_size()
        adam_m = np.zeros_like(phi)
        adam_v = np.zeros_like(phi)
        adam_t = np.zeros(n_cols)

        def step(states, idx):
            phi_a, u_a = states[0][:, idx], states[1][:, idx]
            if not controller.inner_adam:
                return list(
                    ebd_update_map(
                        net, phi_a, u_a, S, eta, x_cols[:, idx], t_cols[:, idx], loss, out
                    )
                )
            # adaptive option: Adam preconditioning of the same descent direction
            phi_plain, u_next = ebd_update_map(
                net, phi_a, u_a, S, 1.0, x_cols[:, idx], t_cols[:, idx], loss, out
            )
            grad = phi_plain - phi_a
            adam_t[idx] += 1
            adam_m[:, idx] = 0.9 * adam_m[:, idx] + 0.1 * grad
            adam_v[:, idx] = 0.999 * adam_v[:, idx] + 0.001 * grad * grad
            mhat = adam_m[:, idx] / (1.0 - 0.9 ** adam_t[idx])
            vhat = adam_v[:, idx] / (1.0 - 0.999 ** adam_t[idx])
            return [phi_a + eta * mhat / (np.sqrt(vhat) + 1e-8), u_next]

        report = _run_fixed_point(step, [phi, u], cfg, "solve_controlled[ebd]")
        psi = ebd_residual_control(net, phi, x_cols)

    else:
        raise TypeError(f"unknown controller spec {type(controller).__name__}")

    if not batched:
        phi, psi, u = phi[:, 0], psi[:, 0], u[:, 0]
    state = ControlledState(phi=phi, psi=psi, u=u, report=report, controller_kind=kind)
    return state, report


def solve_controlled_parallel(
    net: EquilibriumNetwork,
    x,
    target,
    controller,
    loss: LossSpec,
    cfg: SolveConfig | None = None,
    workers: int = 1,
):
    """Column-chunked controlled solve over a thread pool.

    Per-sample convergence makes every column's trajectory independent of
    its chunk, so any worker count returns bit-identical states; only
    wall time changes.  Reports are merged by sample index.
    """
    cfg = cfg or SolveConfig()
    x_cols, batched = _as_columns(x)
    n_cols = x_cols.shape[1]
    if workers <= 1 or not batched or n_cols < 2 * workers:
        return solve_controlled(net, x, target, controller, loss, cfg)
    from concurrent.futures import ThreadPoolExecutor

    t_cols, _ = _as_columns(target)
    bounds = np.linspace(0, n_cols, workers + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i] < bounds[i + 1]]

    def solve_chunk(lo_hi):
        lo, hi = lo_hi
        return solve_controlled(net, x_cols[:, lo:hi], t_cols[:, lo:hi], controller, loss, cfg)

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        results = list(pool.map(solve_chunk, chunks))
    phi = np.concatenate([st.phi for st, _ in results], axis=1)
    psi = np.concatenate([st.psi for st, _ in results], axis=1)
    u = np.concatenate([st.u for st, _ in results], axis=1)
    per_sample = np.concatenate(
        [rep.per_sample_iterations for _, rep in results]
    )
    report = SolveReport(
        iterations=int(max(rep.iterations for _, rep in results)),
        final_residual=float(max(rep.final_residual for _, rep in results)),
        converged=all(rep.converged for _, rep in results),
        per_sample_iterations=per_sample,
    )
    state = ControlledState(
        phi=phi, psi=psi, u=u, report=report,
        controller_kind=results[0][0].controller_kind,
    )
    return state, report


def integrate_noisy(
    net: EquilibriumNetwork,
    x,
    Q: np.ndarray,
    out,
    loss: LossSpec,
    target,
    s: float,
    tau_prime: float,
    steps: int,
    rng: Rng,
    init_phi=None,
    init_u=None,
):
    """Euler-Maruyama simulation of the noisy linear-feedback circuit.

    Time constants follow the simulation grid dt = tau_prime^2,
    tau = tau_prime^2, tau_eps = tau_prime, tau_u = 1; the state starts
    from the supplied noiseless fixed point.  Yields ``(phi, u, eps)``
    after every step.
    """
    if tau_prime <= 0.0 or steps <= 0:
        raise ValueError("integrate_noisy needs tau_prime > 0 and steps >= 1")
    x_cols, batched = _as_columns(x)
    t_cols, _ = _as_columns(target)
    n_cols = x_cols.shape[1]
    dt = tau_prime**2
    tau_eps = tau_prime
    phi = np.zeros((net.n, n_cols)) if init_phi is None else np.array(init_phi, ndmin=2, dtype=np.float64)
    u = np.zeros((net.c, n_cols)) if init_u is None else np.array(init_u, ndmin=2, dtype=np.float64)
    if phi.shape != (net.n, n_cols):
        phi = phi.reshape(net.n, n_cols)
    if u.shape != (net.c, n_cols):
        u = u.reshape(net.c, n_cols)
    phi, u = phi.copy(), u.copy()
    eps = np.zeros((net.n, n_cols))
    alpha = out.alpha
    for _ in range(steps):
        dxi = rng.normal((net.n, n_cols))
        err = output_error(loss, net.output(phi), t_cols)
        eps_next = eps + (dt / tau_eps) * (-eps + dxi / np.sqrt(dt))
        drive = (
            net.W @ activation_apply(net.activation, phi)
            + net.U @ x_cols
            + net.b[:, None]
        )
        phi_next = phi + (drive + Q @ u + s * eps - phi)  # dt/tau = 1
        u_next = u + dt * (-err - alpha * u)  # tau_u = 1
        _guard_finite([phi_next, u_next, eps_next], "integrate_noisy")
        phi, u, eps = phi_next, u_next, eps_next
        if batched:
            yield phi, u, eps
        else:
            yield phi[:, 0], u[:, 0], eps[:, 0]
