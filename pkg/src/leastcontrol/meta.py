"""Complex-synapse meta-learning with control-derived meta updates.

Fast weights ``phi`` adapt to each task by descending a task loss plus a
quadratic pull ``lambda/2 ||phi - omega||^2`` toward consolidated slow
weights ``omega``.  Meta-learning improves ``omega`` (and optionally the
per-synapse attraction ``lambda``).  The control route runs the inner
descent with an additional output controller ``u`` driven by the
held-out evaluation loss; at the joint fixed point the meta updates are
purely local:

    d_omega = lambda * u*,      d_lambda = -(phi* - omega) * u*.

Baselines (T1-T2, Reptile) and an exact implicit-gradient oracle share
the same task interface.  All deltas are descent directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from leastcontrol.numerics import NonFiniteError, Rng, lu_solve

DIVERGENCE_NORM = 1e8


@dataclass
class MetaSystem:
    """Slow weights, attraction strengths and inner-dynamics constants."""

    omega: np.ndarray
    lam: np.ndarray
    eta: float = 0.03
    alpha: float = 0.1
    inner_steps: int = 100

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.lam = np.broadcast_to(
            np.asarray(self.lam, dtype=np.float64), self.omega.shape
        ).copy()
        if np.any(self.lam <= 0.0):
            raise ValueError("attraction strengths must be elementwise positive")
        if self.eta <= 0.0 or self.alpha < 0.0 or self.inner_steps < 1:
            raise ValueError("bad inner-dynamics constants")

    @property
    def dim(self) -> int:
        return self.omega.shape[0]


# ---------------------------------------------------------------------------
# tasks


@dataclass
class QuadraticTask:
    """Pair of quadratic losses with exactly solvable inner problems.

    learn loss 1/2 (phi-a)^T A (phi-a), eval loss likewise with primed
    quantities; both Hessians are symmetric PSD by construction.
    """

    A: np.ndarray
    a: np.ndarray
    A_eval: np.ndarray
    a_eval: np.ndarray

    def learn_value(self, phi):
        r = phi - self.a
        return 0.5 * float(r @ (self.A @ r))

    def learn_grad(self, phi):
        return self.A @ (phi - self.a)

    def learn_hessian(self, phi):
        return self.A

    def eval_value(self, phi):
        r = phi - self.a_eval
        return 0.5 * float(r @ (self.A_eval @ r))

    def eval_grad(self, phi):
        return self.A_eval @ (phi - self.a_eval)

    def eval_hessian(self, phi):
        return self.A_eval


class SinusoidTask:
    """Regress one sinusoid with a tiny 1-16-1 tanh network.

    The fast weights pack [w1, b1, w2, b2] of the network; learn and
    eval losses are mean squared errors on disjoint sample sets.
    """

    HIDDEN = 16

    def __init__(self, amplitude, phase, x_learn, y_learn, x_eval, y_eval):
        self.amplitude = float(amplitude)
        self.phase = float(phase)
        self.x_learn = np.asarray(x_learn, dtype=np.float64)
        self.y_learn = np.asarray(y_learn, dtype=np.float64)
        self.x_eval = np.asarray(x_eval, dtype=np.float64)
        self.y_eval = np.asarray(y_eval, dtype=np.float64)

    @classmethod
    def dim(cls) -> int:
        return 3 * cls.HIDDEN + 1

    @staticmethod
    def _unpack(phi):
        h = SinusoidTask.HIDDEN
        return phi[:h], phi[h : 2 * h], phi[2 * h : 3 * h], phi[3 * h]

    def _forward(self, phi, x):
        w1, b1, w2, b2 = self._unpack(phi)
        z = np.outer(w1, x) + b1[:, None]  # (h, K)
        hid = np.tanh(z)
        return z, hid, w2 @ hid + b2

    def _value(self, phi, x, y):
        _, _, pred = self._forward(phi, x)
        return 0.5 * float(np.mean((pred - y) ** 2))

    def _grad(self, phi, x, y):
        z, hid, pred = self._forward(phi, x)
        w1, b1, w2, b2 = self._unpack(phi)
        k = x.shape[0]
        err = (pred - y) / k  # (K,)
        g_w2 = hid @ err
        g_b2 = np.sum(err)
        back = np.outer(w2, err) * (1.0 - hid * hid)  # (h, K)
        g_w1 = back @ x
        g_b1 = np.sum(back, axis=1)
        return np.concatenate([g_w1, g_b1, g_w2, [g_b2]])

    def learn_value(self, phi):
        return self._value(phi, self.x_learn, self.y_learn)

    def learn_grad(self, phi):
        return self._grad(phi, self.x_learn, self.y_learn)

    def learn_hessian(self, phi, h: float = 1e-5):
        """Dense Hessian by central differences of the gradient (oracle use)."""
        p = phi.shape[0]
        hess = np.zeros((p, p))
        probe = phi.astype(np.float64).copy()
        for i in range(p):
            probe[i] = phi[i] + h
            gp = self.learn_grad(probe)
            probe[i] = phi[i] - h
            gm = self.learn_grad(probe)
            probe[i] = phi[i]
            hess[:, i] = (gp - gm) / (2.0 * h)
        return 0.5 * (hess + hess.T)

    def eval_value(self, phi):
        return self._value(phi, self.x_eval, self.y_eval)

    def eval_grad(self, phi):
        return self._grad(phi, self.x_eval, self.y_eval)


# ---------------------------------------------------------------------------
# inner dynamics


@dataclass
class InnerReport:
    steps: int
    learn_residual: float
    eval_residual: float


def inner_solve(sys: MetaSystem, task, steps: int | None = None):
    """Run the controlled inner dynamics to their joint fixed point.

    phi descends the regularized learn loss plus control u; u integrates
    the eval-loss gradient with leak alpha.  Returns (phi*, u*, report)
    where the report carries the residuals of both stationarity
    equations.
    """
    steps = steps or sys.inner_steps
    phi = sys.omega.copy()
    u = np.zeros_like(phi)
    for _ in range(steps):
        g_learn = task.learn_grad(phi)
        f_val = -g_learn - sys.lam * (phi - sys.omega) + u
        u_next = u + sys.eta * (-sys.alpha * u - task.eval_grad(phi))
        phi = phi + sys.eta * f_val
        u = u_next
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(u))) or (
            np.max(np.abs(phi)) > DIVERGENCE_NORM
        ):
            raise NonFiniteError("inner controlled dynamics diverged")
    r_learn = float(
        np.max(np.abs(-task.learn_grad(phi) - sys.lam * (phi - sys.omega) + u))
    )
    r_eval = float(np.max(np.abs(sys.alpha * u + task.eval_grad(phi))))
    return phi, u, InnerReport(steps, r_learn, r_eval)


def inner_solve_free(sys: MetaSystem, task, steps: int | None = None):
    """Uncontrolled adaptation: descend the regularized learn loss only."""
    steps = steps or sys.inner_steps
    phi = sys.omega.copy()
    for _ in range(steps):
        phi = phi + sys.eta * (-task.learn_grad(phi) - sys.lam * (phi - sys.omega))
        if not np.all(np.isfinite(phi)) or np.max(np.abs(phi)) > DIVERGENCE_NORM:
            raise NonFiniteError("inner free dynamics diverged")
    return phi


def quadratic_controlled_exact(sys: MetaSystem, task: QuadraticTask):
    """Dense solve of the linear joint fixed point (quadratic tasks only)."""
    p = sys.dim
    lam = np.diag(sys.lam)
    block = np.zeros((2 * p, 2 * p))
    block[:p, :p] = task.A + lam
    block[:p, p:] = -np.eye(p)
    block[p:, :p] = task.A_eval
    block[p:, p:] = sys.alpha * np.eye(p)
    rhs = np.concatenate([task.A @ task.a + sys.lam * sys.omega, task.A_eval @ task.a_eval])
    sol = lu_solve(block, rhs)
    return sol[:p], sol[p:]


def quadratic_free_exact(sys: MetaSystem, task: QuadraticTask):
    """Closed-form uncontrolled inner solution of a quadratic task."""
    lhs = task.A + np.diag(sys.lam)
    return lu_solve(lhs, task.A @ task.a + sys.lam * sys.omega)


# ---------------------------------------------------------------------------
# meta updates (descent deltas)


def lcp_meta_delta(sys: MetaSystem, phi_star, u_star):
    """Local control-derived meta updates: d_omega = lam*u, d_lambda = -(phi-omega)*u."""
    d_omega = sys.lam * u_star
    d_lam = -(phi_star - sys.omega) * u_star
    return d_omega, d_lam


def t1t2_delta(sys: MetaSystem, task, phi_star):
    """First-order approximation: drop the inverse regularized Hessian."""
    g = task.eval_grad(phi_star)
    return -sys.lam * g, (phi_star - sys.omega) * g


def reptile_delta(sys: MetaSystem, phi_star):
    """Heuristic move of the slow weights toward the adapted weights."""
    return phi_star - sys.omega


def implicit_meta_oracle(sys: MetaSystem, task, phi_star):
    """Exact implicit meta-gradient via one dense regularized-Hessian solve.

    Solves (d^2 L_learn(phi*) + diag lam) delta = grad L_eval(phi*) and
    returns the descent updates d_omega = -lam*delta,
    d_lambda = (phi*-omega)*delta.
    """
    hess = task.learn_hessian(phi_star) + np.diag(sys.lam)
    delta = lu_solve(hess, task.eval_grad(phi_star))
    return -sys.lam * delta, (phi_star - sys.omega) * delta


# ---------------------------------------------------------------------------
# task families and the meta-training loop


@dataclass
class QuadraticFamily:
    """SPD quadratic tasks whose centers scatter around a family center."""

    dim: int = 8
    center_scale: float = 1.0
    spread: float = 0.3
    curvature: float = 1.0
    rng: Rng = field(default_factory=lambda: Rng(0))

    def __post_init__(self):
        self.center = self.center_scale * self.rng.normal((self.dim,))

    def _spd(self):
        m = self.rng.normal((self.dim, self.dim)) / np.sqrt(self.dim)
        return self.curvature * (m @ m.T + 0.5 * np.eye(self.dim))

    def sample(self) -> QuadraticTask:
        a = self.center + self.spread * self.rng.normal((self.dim,))
        a_eval = self.center + self.spread * self.rng.normal((self.dim,))
        return QuadraticTask(A=self._spd(), a=a, A_eval=self._spd(), a_eval=a_eval)


@dataclass
class SinusoidFamily:
    """Sinusoid regression tasks y = A sin(x + phase) on [-5, 5]."""

    samples: int = 10
    amplitude_range: tuple = (0.5, 2.0)
    phase_range: tuple = (0.0, np.pi)
    rng: Rng = field(default_factory=lambda: Rng(0))

    def sample(self) -> SinusoidTask:
        amp = self.rng.uniform(*self.amplitude_range)
        phase = self.rng.uniform(*self.phase_range)
        x = self.rng.uniform(-5.0, 5.0, (2 * self.samples,))
        y = amp * np.sin(x + phase)
        k = self.samples
        return SinusoidTask(amp, phase, x[:k], y[:k], x[k:], y[k:])


META_METHODS = ("lcp", "t1t2", "reptile")


def meta_step_delta(sys: MetaSystem, task, method: str):
    """One task's descent update for the requested method."""
    if method == "lcp":
        phi, u, _ = inner_solve(sys, task)
        d_omega, d_lam = lcp_meta_delta(sys, phi, u)
        return d_omega, d_lam, phi, u
    phi = inner_solve_free(sys, task)
    if method == "t1t2":
        d_omega, d_lam = t1t2_delta(sys, task, phi)
    elif method == "reptile":
        d_omega, d_lam = reptile_delta(sys, phi), np.zeros_like(sys.lam)
    else:
        raise ValueError(f"unknown meta method {method!r}")
    return d_omega, d_lam, phi, None


def post_adaptation_eval(sys: MetaSystem, tasks) -> float:
    """Mean eval loss after plain (uncontrolled) adaptation on each task."""
    return float(np.mean([t.eval_value(inner_solve_free(sys, t)) for t in tasks]))


def meta_train(
    sys: MetaSystem,
    family,
    method: str = "lcp",
    meta_steps: int = 500,
    meta_batch: int = 4,
    outer_lr: float = 1e-2,
    learn_lambda: bool = False,
    oracle_cosine: bool = False,
    metrics_every: int = 1,
    val_tasks=None,
):
    """Adam meta-training loop; yields one metrics dict per logged step."""
    from leastcontrol.numerics import cosine

    m_w = np.zeros_like(sys.omega)
    v_w = np.zeros_like(sys.omega)
    m_l = np.zeros_like(sys.lam)
    v_l = np.zeros_like(sys.lam)
    t = 0
    for step in range(meta_steps):
        tasks = [family.sample() for _ in range(meta_batch)]
        d_omega = np.zeros_like(sys.omega)
        d_lam = np.zeros_like(sys.lam)
        u_sq = []
        pre_losses = []
        oracle_cos = float("nan")
        for task in tasks:
            dw, dl, phi, u = meta_step_delta(sys, task, method)
            d_omega += dw / meta_batch
            d_lam += dl / meta_batch
            pre_losses.append(task.eval_value(sys.omega))
            if u is not None:
                u_sq.append(float(u @ u))
        if oracle_cosine and isinstance(tasks[0], QuadraticTask):
            ref = np.zeros_like(sys.omega)
            for task in tasks:
                phi_free = quadratic_free_exact(sys, task)
                ref += implicit_meta_oracle(sys, task, phi_free)[0] / meta_batch
            oracle_cos = cosine(d_omega, ref)
        t += 1
        m_w = 0.9 * m_w + 0.1 * d_omega
        v_w = 0.999 * v_w + 0.001 * d_omega**2
        sys.omega += outer_lr * (m_w / (1 - 0.9**t)) / (
            np.sqrt(v_w / (1 - 0.999**t)) + 1e-8
        )
        if learn_lambda:
            m_l = 0.9 * m_l + 0.1 * d_lam
            v_l = 0.999 * v_l + 0.001 * d_lam**2
            sys.lam += outer_lr * (m_l / (1 - 0.9**t)) / (
                np.sqrt(v_l / (1 - 0.999**t)) + 1e-8
            )
            np.clip(sys.lam, 1e-6, None, out=sys.lam)
        if step % metrics_every == 0 or step == meta_steps - 1:
            eval_tasks = val_tasks if val_tasks is not None else tasks
            yield {
                "step": step,
                "pre_eval_loss": float(np.mean(pre_losses)),
                "post_eval_loss": post_adaptation_eval(sys, eval_tasks),
                "mean_u_sq": float(np.mean(u_sq)) if u_sq else float("nan"),
                "oracle_cosine": oracle_cos,
            }
