"""Experiment runner: train, sweep, meta-train, verify, inspect-checkpoint.

Configs are INI files with [model], [method], [solver], [optimizer],
[data], [meta] and [run] sections; every run writes its fully-resolved
config next to the metrics for provenance.  Metrics CSVs contain only
deterministic columns (two runs with the same config and seed are
byte-identical with ``--workers 1``); wall-clock timings go to a
separate ``timing.csv``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from leastcontrol import data as data_mod
from leastcontrol.controllers import (
    DynamicInversion,
    EnergyBased,
    FeedbackLearnCfg,
    LinearFeedback,
    OutputController,
)
from leastcontrol.network import (
    LossSpec,
    absorb_decoder,
    build_feedforward,
    build_recurrent,
    load_checkpoint,
    save_checkpoint,
)
from leastcontrol.numerics import Activation, NonFiniteError, Rng
from leastcontrol.oracles import layered_backprop, rbp_gradient
from leastcontrol.solver import SolveConfig, solve_controlled_parallel, solve_free
from leastcontrol.updates import (
    OptimizerState,
    apply,
    apply_decoupled_decay,
    clip_global_norm,
    kolen_pollack_step,
    lcp_delta,
    lcp_delta_heuristic,
)

METHODS = ("bp", "rbp", "lcp-lf", "lcp-di", "lcp-di-kp", "lcp-ebd")
METRICS_HEADER = "epoch,train_loss,train_acc,test_loss,test_acc,mean_psi_norm,mean_solve_iters"

EXIT_CONFIG = 2
EXIT_NONFINITE = 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    structure: str = "ff"
    widths: tuple = (256, 256)
    sigma: str = "tanh"
    decoder: bool = True
    # method
    method: str = "lcp-di"
    # solver
    max_steps: int = 400
    epsilon: float = 1e-8
    alpha: float = 0.1
    dt: float = 1.0
    tau_u: float = 1.0
    ebd_inner_lr: float = 0.0  # 0 = auto step
    ebd_inner_adam: bool = False
    # optimizer
    optimizer: str = "adam"
    lr: float = 1e-3
    schedule: str = "cosine"
    final_lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 64
    grad_clip: float = 10.0  # applied to the rbp baseline only
    kp_gamma: float = 1e-3
    # linear feedback
    lf_learn_q: bool = True
    lf_heuristic: bool = True
    lf_s: float = 0.05
    lf_tau_prime: float = 0.2
    lf_tau_q: float = 3000.0
    lf_gamma_q: float = 30.0
    lf_sde_steps: int = 200
    # data
    dataset: str = "mnist"
    subset: int = 5000
    test_subset: int = 0
    soft_target_epsilon: float = 0.0
    ts_samples: int = 200
    ts_test_samples: int = 200
    ts_dim: int = 10
    ts_teacher_width: int = 16
    ts_output_dim: int = 4
    # run
    seed: int = 0
    workers: int = 1

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.structure not in ("ff", "rnn"):
            raise ConfigError(f"structure must be ff or rnn, got {self.structure!r}")
        if self.method == "bp" and self.structure != "ff":
            raise ConfigError("method bp requires a feedforward structure")
        if self.structure == "rnn" and len(self.widths) != 1:
            raise ConfigError("rnn structure takes a single width")
        if not self.widths:
            raise ConfigError("widths must be non-empty")
        if self.dataset not in ("mnist", "digits", "teacher-student"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.method == "lcp-di-kp" and self.kp_gamma <= 0.0:
            raise ConfigError("lcp-di-kp requires kp_gamma > 0")
        if self.method == "lcp-ebd" and self.alpha <= 0.0:
            raise ConfigError("lcp-ebd requires alpha > 0")
        if self.sigma not in ("tanh", "relu", "identity"):
            raise ConfigError(f"unknown activation {self.sigma!r}")
        return self


_SECTION_FIELDS = {
    "model": ("structure", "widths", "sigma", "decoder"),
    "method": ("method",),
    "solver": (
        "max_steps", "epsilon", "alpha", "dt", "tau_u", "ebd_inner_lr", "ebd_inner_adam",
    ),
    "optimizer": (
        "optimizer", "lr", "schedule", "final_lr", "epochs", "batch_size",
        "grad_clip", "kp_gamma",
    ),
    "feedback": (
        "lf_learn_q", "lf_heuristic", "lf_s", "lf_tau_prime", "lf_tau_q",
        "lf_gamma_q", "lf_sde_steps",
    ),
    "data": (
        "dataset", "subset", "test_subset", "soft_target_epsilon", "ts_samples",
        "ts_test_samples", "ts_dim", "ts_teacher_width", "ts_output_dim",
    ),
    "run": ("seed", "workers"),
}
_FIELD_SECTION = {f: s for s, fields in _SECTION_FIELDS.items() for f in fields}
_ALIASES = {"name": "method", "kind": "optimizer", "eps": "epsilon"}


def _parse_value(field_name: str, raw: str):
    kind = ExperimentConfig.__dataclass_fields__[field_name].type
    raw = raw.strip()
    if field_name == "widths":
        return tuple(int(w) for w in raw.replace(" ", "").split(",") if w)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{field_name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_experiment_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                name = _ALIASES.get(key, key)
                if name not in ExperimentConfig.__dataclass_fields__:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                setattr(cfg, name, _parse_value(name, raw))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"unknown override {key}")
        setattr(cfg, key, _parse_value(key, str(value)) if isinstance(value, str) else value)
    return cfg.validate()


def write_resolved_config(cfg: ExperimentConfig, path: str) -> None:
    parser = configparser.ConfigParser()
    for section, fields in _SECTION_FIELDS.items():
        parser[section] = {}
        for f in fields:
            value = getattr(cfg, f)
            if f == "widths":
                value = ",".join(str(w) for w in value)
            parser[section][f] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# training engine


def _activation(cfg) -> Activation:
    return {"tanh": Activation.TANH, "relu": Activation.RELU, "identity": Activation.IDENTITY}[cfg.sigma]


def load_datasets(cfg: ExperimentConfig):
    if cfg.dataset == "mnist":
        found = data_mod.find_mnist()
        if found is None:
            raise ConfigError(
                "MNIST IDX files not found; set LCP_DATA_DIR to a directory with "
                "train-images-idx3-ubyte etc., or use dataset=digits"
            )
        train, test = found
    elif cfg.dataset == "digits":
        train, test = data_mod.load_digits_dataset()
    else:
        full = data_mod.make_teacher_student(
            cfg.ts_samples + cfg.ts_test_samples,
            cfg.ts_dim,
            cfg.ts_teacher_width,
            cfg.seed,
            output_dim=cfg.ts_output_dim,
        )
        train = full.take(np.arange(cfg.ts_samples))
        test = full.take(np.arange(cfg.ts_samples, len(full)))
        train.meta.update(full.meta)
        return train, test
    if cfg.subset and cfg.subset < len(train):
        train = data_mod.subset(train, cfg.subset, cfg.seed)
    if cfg.test_subset and cfg.test_subset < len(test):
        test = data_mod.subset(test, cfg.test_subset, cfg.seed + 1)
    return train, test


def build_model(cfg: ExperimentConfig, input_dim: int, output_dim: int, rng: Rng):
    act = _activation(cfg)
    if cfg.structure == "ff":
        return build_feedforward([input_dim, *cfg.widths, output_dim], act, rng)
    width = cfg.widths[0]
    if cfg.decoder:
        base = build_recurrent(width, input_dim, min(width, output_dim), act, rng)
        bound = 1.0 / np.sqrt(width)
        dec = rng.split(2).uniform(-bound, bound, (output_dim, width))
        return absorb_decoder(base, dec, np.zeros(output_dim))
    if width < output_dim:
        raise ConfigError("rnn width must be >= number of outputs without a decoder")
    return build_recurrent(width, input_dim, output_dim, act, rng)


def build_controller(cfg: ExperimentConfig, net, rng: Rng):
    out = OutputController(alpha=cfg.alpha, tau_u=cfg.tau_u)
    if cfg.method == "lcp-lf":
        bound = 1.0 / np.sqrt(net.c)
        q = rng.split(3).uniform(-bound, bound, (net.n, net.c))
        learn = FeedbackLearnCfg(
            s=cfg.lf_s, tau_prime=cfg.lf_tau_prime, tau_q=cfg.lf_tau_q,
            gamma_q=cfg.lf_gamma_q, sde_steps=cfg.lf_sde_steps,
        ) if cfg.lf_learn_q else None
        return LinearFeedback(Q=q, learn=learn, output=out)
    if cfg.method == "lcp-di":
        return DynamicInversion(output=out)
    if cfg.method == "lcp-di-kp":
        bound = 1.0 / np.sqrt(net.n)
        s = rng.split(4).uniform(-bound, bound, (net.n, net.n))
        if net.w_mask is not None:
            s *= net.w_mask.T
        return DynamicInversion(S=s, output=out)
    if cfg.method == "lcp-ebd":
        return EnergyBased(
            inner_step=cfg.ebd_inner_lr or None,
            inner_adam=cfg.ebd_inner_adam,
            output=OutputController(alpha=cfg.alpha, mode="proportional"),
        )
    return None  # bp / rbp have no controller


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "nan"
    return f"{value:.12g}"


def evaluate_free(net, dataset, loss: LossSpec, scfg: SolveConfig, chunk: int = 1024):
    """Mean loss / accuracy of the free equilibrium over a dataset."""
    total_loss, correct, count = 0.0, 0, 0
    from leastcontrol.network import loss_value

    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        x = dataset.inputs[idx].T
        phi, _ = solve_free(net, x, scfg)
        y = net.output(phi)
        if dataset.labels is not None:
            t = loss.target_distribution(dataset.labels[idx], dataset.num_classes)
            total_loss += float(np.sum(loss_value(loss, y, t)))
            correct += int(np.sum(np.argmax(y, axis=0) == dataset.labels[idx]))
        else:
            t = dataset.targets[idx].T
            total_loss += float(np.sum(loss_value(loss, y, t)))
        count += idx.size
    acc = correct / count if dataset.labels is not None else float("nan")
    return total_loss / count, acc


def _lf_feedback_update(net, controller, state, x, target, loss, rng):
    """Accumulate the anti-Hebbian Q update reusing an existing solve."""
    from leastcontrol.solver import integrate_noisy

    learn = controller.learn
    q = controller.Q
    hebb = np.zeros_like(q)
    n_cols = x.shape[1]
    if learn.s > 0.0:
        multi = learn.form == "multicompartment"
        for _, u_m, eps_m in integrate_noisy(
            net, x, q, controller.output, loss, target, learn.s, learn.tau_prime,
            learn.sde_steps, rng, init_phi=state.phi, init_u=state.u,
        ):
            pre = q @ u_m + learn.s * eps_m if multi else learn.s * eps_m
            hebb += pre @ (u_m - state.u).T
        hebb /= learn.s**2 * n_cols
    return -hebb / learn.tau_q - (learn.gamma_q / learn.tau_q) * q


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


class TrainingRun:
    """One configured training run with incremental metric flushing.

    Keeps a sticky damping factor: whenever a controlled solve fails to
    converge within budget the sweep step is halved and retried, and the
    smaller step is kept for later batches (same fixed points, tamer
    iteration).
    """

    def __init__(self, cfg: ExperimentConfig, out_dir: str):
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        write_resolved_config(cfg, os.path.join(out_dir, "config.ini"))
        self.rows = []
        self.timings = []
        self.dt = cfg.dt

    def solve_cfg(self) -> SolveConfig:
        return SolveConfig(
            max_steps=self.cfg.max_steps, epsilon=self.cfg.epsilon, dt=self.dt
        )

    def _solve_with_fallback(self, net, x, target, controller, loss):
        last_err = None
        for attempt in range(4):
            try:
                state, rep = solve_controlled_parallel(
                    net, x, target, controller, loss, self.solve_cfg(), self.cfg.workers
                )
            except NonFiniteError as err:
                last_err = err
                if self.dt <= 0.06:
                    raise
                self.dt = max(0.5 * self.dt, 0.05)
                continue
            if rep.converged or attempt == 3 or self.dt <= 0.06:
                return state, rep
            self.dt = max(0.5 * self.dt, 0.05)
        if last_err is not None:
            raise last_err
        return state, rep

    def flush(self):
        with open(os.path.join(self.out_dir, "metrics.csv"), "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        with open(os.path.join(self.out_dir, "timing.csv"), "w") as fh:
            fh.write("epoch,wall_ms\n")
            for epoch, ms in self.timings:
                fh.write(f"{epoch},{ms:.3f}\n")

    def execute(self):
        cfg = self.cfg
        rng = Rng(cfg.seed)
        train, test = load_datasets(cfg)
        classification = train.labels is not None
        loss = (
            LossSpec("softmax_ce", soft_target_epsilon=cfg.soft_target_epsilon)
            if classification
            else LossSpec("mse")
        )
        out_dim = train.num_classes if classification else train.targets.shape[1]
        net = build_model(cfg, train.dim, out_dim, rng.split(1))
        controller = build_controller(cfg, net, rng)
        n_batches = (len(train) + cfg.batch_size - 1) // cfg.batch_size
        opt = OptimizerState(
            kind=cfg.optimizer, lr=cfg.lr, schedule=cfg.schedule,
            final_lr=cfg.final_lr, total_steps=max(cfg.epochs * n_batches, 1),
        )
        iterator = data_mod.BatchIterator(train, cfg.batch_size, cfg.seed)
        kp_s = controller.S if cfg.method == "lcp-di-kp" else None
        summary = {"method": cfg.method, "converged": True}
        try:
            for epoch in range(cfg.epochs):
                t0 = time.perf_counter()
                psi_norms, iteration_means = [], []
                for batch_i, (x, y, _) in enumerate(iterator.epoch_batches()):
                    target = (
                        loss.target_distribution(y, out_dim) if classification else y
                    )
                    extras = {}
                    if cfg.method == "bp":
                        delta = layered_backprop(net, x, target, loss).gradient.scaled(-1.0)
                    elif cfg.method == "rbp":
                        report = rbp_gradient(net, x, target, loss, self.solve_cfg())
                        delta = clip_global_norm(report.gradient.scaled(-1.0), cfg.grad_clip)
                        iteration_means.append(report.iterations)
                    else:
                        state, rep = self._solve_with_fallback(
                            net, x, target, controller, loss
                        )
                        psi_cols = state.psi if state.psi.ndim == 2 else state.psi[:, None]
                        psi_norms.append(float(np.mean(np.linalg.norm(psi_cols, axis=0))))
                        iteration_means.append(float(np.mean(rep.per_sample_iterations)))
                        if cfg.method == "lcp-lf":
                            delta = (
                                lcp_delta_heuristic(net, state, x)
                                if cfg.lf_heuristic
                                else lcp_delta(net, state, x)
                            )
                            if controller.learn is not None:
                                dq = _lf_feedback_update(
                                    net, controller, state, x, target, loss,
                                    rng.split(epoch * n_batches + batch_i),
                                )
                                extras["Q"] = (controller.Q, dq)
                        elif cfg.method == "lcp-di-kp":
                            delta, ds = kolen_pollack_step(net, kp_s, state, x, gamma=0.0)
                            extras["S"] = (kp_s, ds)
                        else:
                            delta = lcp_delta(net, state, x)
                    apply(opt, net, delta, extras)
                    if cfg.method == "lcp-di-kp":
                        apply_decoupled_decay(net, kp_s, cfg.kp_gamma)
                train_loss, train_acc = evaluate_free(net, train, loss, self.solve_cfg())
                test_loss, test_acc = evaluate_free(net, test, loss, self.solve_cfg())
                self.rows.append(
                    (
                        epoch,
                        train_loss,
                        train_acc,
                        test_loss,
                        test_acc,
                        float(np.mean(psi_norms)) if psi_norms else float("nan"),
                        float(np.mean(iteration_means)) if iteration_means else float("nan"),
                    )
                )
                self.timings.append((epoch, 1000.0 * (time.perf_counter() - t0)))
                self.flush()
        except NonFiniteError as err:
            self.flush()
            summary["converged"] = False
            summary["error"] = str(err)
            with open(os.path.join(self.out_dir, "summary.json"), "w") as fh:
                json.dump(_json_safe(summary), fh, indent=2)
            raise
        save_checkpoint(net, os.path.join(self.out_dir, "checkpoint.lcpnet"))
        last = self.rows[-1]
        summary.update(
            {
                "epochs": cfg.epochs,
                "train_loss": last[1],
                "train_acc": last[2],
                "test_loss": last[3],
                "test_acc": last[4],
                "mean_psi_norm": last[5],
                "checkpoint": "checkpoint.lcpnet",
            }
        )
        with open(os.path.join(self.out_dir, "summary.json"), "w") as fh:
            json.dump(_json_safe(summary), fh, indent=2)
        return summary


def run_training(cfg: ExperimentConfig, out_dir: str):
    return TrainingRun(cfg, out_dir).execute()


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    try:
        cfg = load_experiment_config(args.config, _cli_overrides(args))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_training(cfg, args.out)
    except NonFiniteError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_NONFINITE
    print(json.dumps(_json_safe(summary), indent=2))
    return 0


def cmd_sweep(args) -> int:
    try:
        cfg = load_experiment_config(args.config, _cli_overrides(args))
        values = [v for v in args.values.split(",") if v]
        if not values:
            raise ConfigError("sweep needs at least one value")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for raw in values:
        point = replace(cfg)
        if args.axis == "width":
            width = int(raw)
            if cfg.dataset == "teacher-student" or cfg.structure == "rnn":
                point.widths = (width,)
            else:
                point.widths = tuple(width for _ in cfg.widths)
        elif args.axis == "alpha":
            point.alpha = float(raw)
        else:
            print(f"unknown sweep axis {args.axis}", file=sys.stderr)
            return EXIT_CONFIG
        sub = os.path.join(args.out, f"{args.axis}_{raw}")
        try:
            summary = run_training(point.validate(), sub)
        except NonFiniteError as err:
            print(f"sweep point {raw} diverged: {err}", file=sys.stderr)
            return EXIT_NONFINITE
        rows.append(
            (
                raw,
                summary["train_loss"],
                summary["mean_psi_norm"],
                summary["test_loss"],
                summary["test_acc"],
            )
        )
    with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
        fh.write(f"{args.axis},train_loss,mean_psi_norm,test_loss,test_acc\n")
        for row in rows:
            fh.write(row[0] + "," + ",".join(_fmt(v) for v in row[1:]) + "\n")
    print(f"wrote {os.path.join(args.out, 'sweep.csv')}")
    return 0


META_COLUMNS = "step,method,pre_eval_loss,post_eval_loss,mean_u_sq,oracle_cosine"


def cmd_meta_train(args) -> int:
    from leastcontrol import meta as meta_mod

    parser = configparser.ConfigParser()
    settings = {
        "family": "quadratic", "dim": "8", "method": "lcp", "meta_steps": "500",
        "meta_batch": "4", "inner_eta": "0.03", "inner_alpha": "0.01",
        "inner_steps": "100", "lam": "1.0", "outer_lr": "0.01",
        "oracle_cosine": "false", "metrics_every": "10", "seed": "0",
        "learn_lambda": "false", "val_tasks": "16",
    }
    if args.config:
        if not parser.read(args.config):
            print(f"config error: file not found {args.config}", file=sys.stderr)
            return EXIT_CONFIG
        if parser.has_section("meta"):
            settings.update(dict(parser.items("meta")))
        if parser.has_section("run") and parser.has_option("run", "seed"):
            settings["seed"] = parser.get("run", "seed")
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    seed = int(settings["seed"])
    methods = (
        list(meta_mod.META_METHODS)
        if settings["method"] == "compare"
        else [settings["method"]]
    )
    for m in methods:
        if m not in meta_mod.META_METHODS:
            print(f"config error: unknown meta method {m}", file=sys.stderr)
            return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    rows = []
    summary = {}
    for method in methods:
        rng = Rng(seed)
        if settings["family"] == "quadratic":
            dim = int(settings["dim"])
            family = meta_mod.QuadraticFamily(dim=dim, rng=rng.split(10))
        elif settings["family"] == "sinusoid":
            dim = meta_mod.SinusoidTask.dim()
            family = meta_mod.SinusoidFamily(rng=rng.split(10))
        else:
            print(f"config error: unknown family {settings['family']}", file=sys.stderr)
            return EXIT_CONFIG
        val_tasks = [family.sample() for _ in range(int(settings["val_tasks"]))]
        sys_state = meta_mod.MetaSystem(
            omega=0.1 * rng.split(11).normal((dim,)),
            lam=np.full(dim, float(settings["lam"])),
            eta=float(settings["inner_eta"]),
            alpha=float(settings["inner_alpha"]),
            inner_steps=int(settings["inner_steps"]),
        )
        first_post, last_post = None, None
        try:
            for rec in meta_mod.meta_train(
                sys_state,
                family,
                method=method,
                meta_steps=int(settings["meta_steps"]),
                meta_batch=int(settings["meta_batch"]),
                outer_lr=float(settings["outer_lr"]),
                learn_lambda=settings["learn_lambda"].lower() in ("1", "true", "yes"),
                oracle_cosine=settings["oracle_cosine"].lower() in ("1", "true", "yes"),
                metrics_every=int(settings["metrics_every"]),
                val_tasks=val_tasks,
            ):
                rows.append(
                    (
                        rec["step"], method, rec["pre_eval_loss"], rec["post_eval_loss"],
                        rec["mean_u_sq"], rec["oracle_cosine"],
                    )
                )
                if first_post is None:
                    first_post = rec["post_eval_loss"]
                last_post = rec["post_eval_loss"]
        except NonFiniteError as err:
            print(f"meta-training diverged ({method}): {err}", file=sys.stderr)
            return EXIT_NONFINITE
        summary[method] = {"first_post_eval": first_post, "final_post_eval": last_post}
    with open(os.path.join(args.out, "meta_metrics.csv"), "w") as fh:
        fh.write(META_COLUMNS + "\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]}," + ",".join(_fmt(v) for v in row[2:]) + "\n")
    with open(os.path.join(args.out, "meta_summary.json"), "w") as fh:
        json.dump(_json_safe(summary), fh, indent=2)
    print(json.dumps(_json_safe(summary), indent=2))
    return 0


def cmd_verify(args) -> int:
    from leastcontrol.verification import report_dict, run_checks

    records, ok = run_checks(args.level)
    report = report_dict(records, args.level)
    text = json.dumps(report, indent=2)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    for rec in records:
        mark = "PASS" if rec.passed else "FAIL"
        print(f"{mark} {rec.name}: value={rec.value:.6g} {rec.comparison} {rec.tolerance:.6g} ({rec.seconds:.2f}s)")
    print("all checks passed" if ok else "FAILURES present", file=sys.stderr)
    return 0 if ok else 1


def cmd_inspect_checkpoint(args) -> int:
    net = load_checkpoint(args.path)
    info = {
        "units": net.n,
        "input_dim": net.d,
        "output_dim": net.c,
        "activation": net.activation.value,
        "masked": net.w_mask is not None,
        "layer_sizes": list(net.layer_sizes) if net.layer_sizes else None,
        "decoder_units": net.decoder_units,
        "w_norm": float(np.linalg.norm(net.W)),
        "u_norm": float(np.linalg.norm(net.U)),
        "b_norm": float(np.linalg.norm(net.b)),
    }
    print(json.dumps(info, indent=2))
    return 0


def _cli_overrides(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().split(".")[-1]] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leastcontrol",
        description="Train equilibrium networks with control-derived local updates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training configuration")
    train.add_argument("--config", help="INI config file")
    train.add_argument("--seed", type=int)
    train.add_argument("--workers", type=int)
    train.add_argument("--out", default="runs/train")
    train.add_argument("--set", action="append", metavar="KEY=VALUE")
    train.set_defaults(fn=cmd_train)

    sweep = sub.add_parser("sweep", help="sweep width or controller leak")
    sweep.add_argument("--config", help="INI config file")
    sweep.add_argument("--axis", choices=("width", "alpha"), required=True)
    sweep.add_argument("--values", required=True, help="comma-separated sweep values")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--out", default="runs/sweep")
    sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep.set_defaults(fn=cmd_sweep)

    meta = sub.add_parser("meta-train", help="meta-learn complex synapses")
    meta.add_argument("--config", help="INI config file with a [meta] section")
    meta.add_argument("--seed", type=int)
    meta.add_argument("--out", default="runs/meta")
    meta.set_defaults(fn=cmd_meta_train)

    verify = sub.add_parser("verify", help="run the oracle/invariant suite")
    verify.add_argument("--level", choices=("fast", "full"), default="fast")
    verify.add_argument("--out", help="write the JSON report here")
    verify.set_defaults(fn=cmd_verify)

    inspect = sub.add_parser("inspect-checkpoint", help="print checkpoint header")
    inspect.add_argument("path")
    inspect.set_defaults(fn=cmd_inspect_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
