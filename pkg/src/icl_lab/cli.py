"""Experiment runner: figure presets, oracle subcommands, deterministic CSV.

Every run is a pure function of (subcommand, effective config); sweep points
draw their seeds from SHA-256-derived streams keyed by the record coordinates,
so re-running any preset with the same master seed yields byte-identical CSV.
Sweep points may execute in a process pool (ICL_LAB_WORKERS); rows are always
written in sweep order.

Config files are flat key = value text with [run], [train] and [sweep]
sections (see README); command-line flags override file values and unknown
keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .designs import DesignSpec, Independent, Rag, TaskFeature
from .numerics import RngStream
from .theory import (
    MOMENT_KINDS,
    SpectrumPair,
    check_strong_convexity,
    lora_bound,
    lora_frozen_adapted_risk,
    low_rank_risk,
    mc_moment_oracle,
    moment_identity,
    optimal_independent,
    rag_exact,
    task_feature_exact,
)
from .training import (
    TrainConfig,
    evaluate_position_risks,
    train,
    train_lora,
    worker_count,
)

CSV_FIELDS = (
    "experiment", "model", "d", "n", "alpha", "sigma", "rank", "seed",
    "risk", "risk_stderr", "theory_risk", "normalized_risk",
)


@dataclass
class RunRecord:
    experiment: str
    model: str
    d: int
    n: int
    seed: int
    sigma: float = 0.0
    alpha: float | None = None
    rank: int | None = None
    risk: float | None = None
    risk_stderr: float | None = None
    theory_risk: float | None = None

    def row(self) -> dict:
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, (int, np.integer)):
                return str(int(x))
            return repr(float(x))

        normalized = None if self.risk is None else self.risk / self.d
        return {
            "experiment": self.experiment,
            "model": self.model,
            "d": fmt(self.d),
            "n": fmt(self.n),
            "alpha": fmt(self.alpha),
            "sigma": fmt(self.sigma),
            "rank": fmt(self.rank),
            "seed": fmt(self.seed),
            "risk": fmt(self.risk),
            "risk_stderr": fmt(self.risk_stderr),
            "theory_risk": fmt(self.theory_risk),
            "normalized_risk": fmt(normalized),
        }


def write_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())


def parse_int_list(text: str) -> list[int]:
    """Accept "4,8,16" and inclusive ranges "1..80"."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def record_seed(master_seed: int, *coords) -> int:
    """Documented per-record seed: SHA-256 stream derivation of the coordinates."""
    return RngStream(master_seed).derive(*coords).stream_id


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------

CONFIG_KEYS = {
    "run": {"d", "n", "n_max", "sigma", "seed", "output", "alpha", "gamma_sq",
            "design", "kind", "samples", "probes", "task_cov"},
    "train": {"iterations", "batch_size", "learning_rate", "restarts",
              "init_scale", "eval_trials", "loss_mode"},
    "sweep": {"n", "alpha", "rank"},
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            out[f"{section}.{key}"] = value
    return out


def effective(args, config: dict, key: str, default, cast):
    """Flag > config-file value > default."""
    flag = getattr(args, key.split(".")[-1].replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    return default


def train_config_from(args, config: dict, seed: int,
                      loss_mode: str = "last_position") -> TrainConfig:
    full = bool(getattr(args, "full_scale", False))
    return TrainConfig(
        iterations=effective(args, config, "train.iterations",
                             10_000 if full else 2_000, int),
        batch_size=effective(args, config, "train.batch_size", 128, int),
        learning_rate=effective(args, config, "train.learning_rate", 1e-3, float),
        restarts=effective(args, config, "train.restarts",
                           20 if full else 5, int),
        init_scale=effective(args, config, "train.init_scale", 0.02, float),
        eval_trials=effective(args, config, "train.eval_trials", 10_000, int),
        loss_mode=loss_mode,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Sweep task execution (top level so a process pool can pickle them)
# ---------------------------------------------------------------------------

def _run_train_task(task: dict) -> list[RunRecord]:
    spec = DesignSpec.from_config(task["spec"])
    cfg = TrainConfig(**task["train"])
    kind = task.get("train_kind", task["model"])
    if task.get("lora_rank") is not None:
        base_spec = DesignSpec.from_config(task["base_spec"])
        base_cfg = TrainConfig(**task["base_train"])
        base = train("attn", base_spec, base_cfg).params
        model = train_lora(base, spec, cfg, rank=task["lora_rank"])
    else:
        model = train(kind, spec, cfg, rank=task.get("rank"))
    recs = []
    common = dict(
        experiment=task["experiment"], d=spec.d, sigma=spec.noise_std,
        alpha=task.get("alpha"), rank=task.get("rank", task.get("lora_rank")),
        seed=task["train"]["seed"],
    )
    if task.get("positions"):
        eval_rng = RngStream(task["train"]["seed"]).derive("positions")
        ests = evaluate_position_risks(model.params, spec, task["positions"],
                                       cfg.eval_trials, eval_rng)
        for t, est in zip(task["positions"], ests):
            theory = task.get("position_theory", {}).get(t)
            recs.append(RunRecord(model=task["model"], n=t - 1, risk=est.mean,
                                  risk_stderr=est.stderr, theory_risk=theory,
                                  **common))
    else:
        recs.append(RunRecord(model=task["model"], n=spec.n,
                              risk=model.final_test_risk,
                              risk_stderr=model.final_test_stderr,
                              theory_risk=task.get("theory"), **common))
    return recs


def _run_tasks(tasks: list[dict]) -> list[RunRecord]:
    workers = worker_count()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_train_task, tasks))
    else:
        chunks = [_run_train_task(t) for t in tasks]
    return [rec for chunk in chunks for rec in chunk]


# ---------------------------------------------------------------------------
# Figure presets
# ---------------------------------------------------------------------------

def _iso_spec_cfg(d: int, n: int, sigma: float, task_cov: str = "isotropic") -> dict:
    spec = {"design": "independent", "d": str(d), "n": str(n),
            "sigma": repr(sigma), "sigma_x": "isotropic",
            "sigma_beta": task_cov}
    return spec


def _task_cov_matrix(kind: str, d: int) -> np.ndarray:
    if kind == "isotropic":
        return np.eye(d)
    if kind.startswith("ones_mix:"):
        g = float(kind.split(":", 1)[1])
        return g * np.ones((d, d)) + (1 - g) * np.eye(d)
    if kind == "inv_index":
        lam = 1.0 / np.arange(1, d + 1)
        return np.diag(lam * d / lam.sum())
    if kind == "pow2":
        lam = 2.0 ** -np.arange(1, d + 1)
        return np.diag(lam * d / lam.sum())
    raise ConfigError(f"unknown task_cov: {kind!r}")


def _encode_cov(kind: str, d: int) -> str:
    m = _task_cov_matrix(kind, d)
    if np.array_equal(m, np.eye(d)):
        return "isotropic"
    if np.array_equal(m, np.diag(np.diag(m))):
        return "diag:" + ",".join(repr(float(x)) for x in np.diag(m))
    return ";".join(",".join(repr(float(x)) for x in row) for row in m)


def cmd_fig_iid(args, config) -> list[RunRecord]:
    d = effective(args, config, "run.d", 20 if args.full_scale else 8, int)
    sigma = effective(args, config, "run.sigma", 0.0, float)
    task_cov = effective(args, config, "run.task_cov", "isotropic", str)
    n_list = effective(args, config, "sweep.n", [4, 8, 16, 32], parse_int_list)
    seed = effective(args, config, "run.seed", 0, int)
    cov = _task_cov_matrix(task_cov, d)
    tasks = []
    for model in ("attn", "h3"):
        for n in n_list:
            theory = optimal_independent(np.eye(d), cov, sigma, n).risk
            task_seed = record_seed(seed, "fig-iid", model, f"n={n}")
            tasks.append({
                "experiment": "fig-iid", "model": model,
                "spec": _iso_spec_cfg(d, n, sigma, _encode_cov(task_cov, d)),
                "train": vars(train_config_from(args, config, task_seed)),
                "theory": theory,
            })
    return _run_tasks(tasks)


def _fig_correlated(args, config, experiment: str) -> list[RunRecord]:
    d = effective(args, config, "run.d", 20 if args.full_scale else 8, int)
    n_list = effective(args, config, "sweep.n", [4, 8, 16, 32], parse_int_list)
    alphas = effective(args, config, "sweep.alpha", [0.0, 0.2, 0.4, 0.6],
                       parse_float_list)
    sigma = effective(args, config, "run.sigma", 0.0, float)
    seed = effective(args, config, "run.seed", 0, int)
    design = "rag" if experiment == "fig-rag" else "task_feature"
    exact = rag_exact if design == "rag" else task_feature_exact
    tasks = []
    for alpha in alphas:
        for n in n_list:
            theory = exact(alpha, sigma, d, n).risk
            task_seed = record_seed(seed, experiment, "attn", f"n={n}",
                                    f"alpha={alpha}")
            tasks.append({
                "experiment": experiment, "model": "attn", "alpha": alpha,
                "spec": {"design": design, "d": str(d), "n": str(n),
                         "alpha": repr(alpha), "sigma": repr(sigma)},
                "train": vars(train_config_from(args, config, task_seed)),
                "theory": theory,
            })
    return _run_tasks(tasks)


def cmd_fig_rag(args, config) -> list[RunRecord]:
    return _fig_correlated(args, config, "fig-rag")


def cmd_fig_task(args, config) -> list[RunRecord]:
    return _fig_correlated(args, config, "fig-task")


def cmd_fig_lowrank(args, config) -> list[RunRecord]:
    d = effective(args, config, "run.d", 20 if args.full_scale else 8, int)
    n = effective(args, config, "run.n", 16, int)
    ranks = effective(args, config, "sweep.rank",
                      [1, 5, 10, 20] if args.full_scale else [1, 2, 4, 8],
                      parse_int_list)
    seed = effective(args, config, "run.seed", 0, int)
    cov = _task_cov_matrix("inv_index", d)
    tasks = []
    for r in ranks:
        theory = low_rank_risk(np.eye(d), cov, 0.0, n, r)[0].risk
        task_seed = record_seed(seed, "fig-lowrank", "attn", f"n={n}", f"r={r}")
        tasks.append({
            "experiment": "fig-lowrank", "model": "low_rank",
            "train_kind": "attn", "rank": r,
            "spec": _iso_spec_cfg(d, n, 0.0, _encode_cov("inv_index", d)),
            "train": vars(train_config_from(args, config, task_seed)),
            "theory": theory,
        })
    return _run_tasks(tasks)


def cmd_fig_lora(args, config) -> list[RunRecord]:
    d = effective(args, config, "run.d", 20 if args.full_scale else 8, int)
    n = effective(args, config, "run.n", 16, int)
    ranks = effective(args, config, "sweep.rank", [1, 2, 4], parse_int_list)
    seed = effective(args, config, "run.seed", 0, int)
    lam_new = np.diag(_task_cov_matrix("pow2", d))
    pair = SpectrumPair.create(np.ones(d), lam_new, float(d), n)
    base_diag = np.full(d, 1.0 / (n + d + 1))
    base_seed = record_seed(seed, "fig-lora", "pretrain")
    base_train = vars(train_config_from(args, config, base_seed))
    tasks = []
    records = []
    for r in ranks:
        bound, _ = lora_bound(pair, r)
        exact, _ = lora_frozen_adapted_risk(pair, r, base_diag)
        task_seed = record_seed(seed, "fig-lora", "lora", f"n={n}", f"r={r}")
        tasks.append({
            "experiment": "fig-lora", "model": "lora", "lora_rank": r,
            "base_spec": _iso_spec_cfg(d, n, 0.0),
            "base_train": base_train,
            "spec": _iso_spec_cfg(d, n, 0.0, _encode_cov("pow2", d)),
            "train": vars(train_config_from(args, config, task_seed)),
            "theory": bound,
        })
        # closed-form reference: exact post-shift risk of the frozen base with
        # the best r indices re-solved (joint-diagonal case)
        records.append(RunRecord(experiment="fig-lora", model="pgd_theory",
                                 d=d, n=n, seed=seed, rank=r,
                                 theory_risk=exact))
    trained = _run_tasks(tasks)
    out = []
    for rec, ref in zip(trained, records):
        out.append(rec)
        out.append(ref)
    return out


def cmd_fig_avg(args, config) -> list[RunRecord]:
    d = effective(args, config, "run.d", 20 if args.full_scale else 8, int)
    n_max = effective(args, config, "run.n_max", 30, int)
    seed = effective(args, config, "run.seed", 0, int)
    positions = sorted(set(
        list(range(1, min(n_max, 8) + 1)) + list(range(10, n_max + 1, 5))
        + [n_max]
    ))
    theory = {t: optimal_independent(np.eye(d), np.eye(d), 0.0, t - 1).risk
              if t > 1 else float(d) for t in positions}
    tasks = []
    for model in ("attn", "h3"):
        task_seed = record_seed(seed, "fig-avg", model, f"n_max={n_max}")
        tasks.append({
            "experiment": "fig-avg", "model": model,
            "spec": _iso_spec_cfg(d, n_max, 0.0),
            "train": vars(train_config_from(args, config, task_seed,
                                            loss_mode="averaged_positions")),
            "positions": positions,
            "position_theory": theory,
        })
    return _run_tasks(tasks)


def cmd_fig_evolve(args, config) -> list[RunRecord]:
    d = effective(args, config, "run.d", 20 if args.full_scale else 8, int)
    n_list = effective(args, config, "sweep.n", [10, 20, 40], parse_int_list)
    seed = effective(args, config, "run.seed", 0, int)
    tasks = []
    for model in ("attn", "h3"):
        for n in n_list:
            # reference curve: the iid noiseless closed form
            theory = optimal_independent(np.eye(d), np.eye(d), 0.0, n).risk
            task_seed = record_seed(seed, "fig-evolve", model, f"n={n}")
            tasks.append({
                "experiment": "fig-evolve", "model": model,
                "spec": {"design": "evolving", "d": str(d), "n": str(n)},
                "train": vars(train_config_from(args, config, task_seed)),
                "theory": theory,
            })
    return _run_tasks(tasks)


# ---------------------------------------------------------------------------
# Oracle and table subcommands
# ---------------------------------------------------------------------------

def cmd_theory_table(args, config) -> list[RunRecord]:
    design = effective(args, config, "run.design", "iid", str)
    d = effective(args, config, "run.d", 20, int)
    n_list = effective(args, config, "sweep.n", list(range(1, 81)),
                       parse_int_list)
    sigma = effective(args, config, "run.sigma", 0.0, float)
    alpha = effective(args, config, "run.alpha", 0.0, float)
    seed = effective(args, config, "run.seed", 0, int)
    records = []
    for n in n_list:
        if design == "iid":
            theory = optimal_independent(np.eye(d), np.eye(d), sigma, n).risk
            a = None
        elif design == "rag":
            theory = rag_exact(alpha, sigma, d, n).risk
            a = alpha
        elif design == "task_feature":
            theory = task_feature_exact(alpha, sigma, d, n).risk
            a = alpha
        else:
            raise ConfigError(f"unknown design for theory-table: {design!r}")
        records.append(RunRecord(experiment="theory-table", model="pgd_theory",
                                 d=d, n=n, seed=seed, sigma=sigma, alpha=a,
                                 theory_risk=theory))
    return records


def cmd_oracle_moments(args, config) -> int:
    kind = effective(args, config, "run.kind", None, str)
    if kind is None:
        kinds = list(MOMENT_KINDS)
    elif kind in MOMENT_KINDS:
        kinds = [kind]
    else:
        raise ConfigError(f"unknown moment kind: {kind!r}")
    d = effective(args, config, "run.d", 2, int)
    samples = int(effective(args, config, "run.samples", 1_000_000, float))
    seed = effective(args, config, "run.seed", 0, int)
    status = 0
    for k in kinds:
        rng = RngStream(seed).derive("oracle-moments", k, d)
        eye = np.eye(d)
        if k == "even_scalar":
            closed = moment_identity(k, sigma=1.0, order=4)
            mean, se = mc_moment_oracle(k, samples, rng, sigma=1.0, order=4)
            label = "even_scalar(sigma=1, order=4)"
        else:
            closed = moment_identity(k, w=eye)
            mean, se = mc_moment_oracle(k, samples, rng, w=eye)
            label = f"{k}(W=I_{d})"
        gap = abs(mean - closed)
        line = (f"{label}: formula={closed:.6g} mc={mean:.6g} stderr={se:.3g} "
                f"gap={gap:.3g}")
        if k == "cross_quartic":
            reference = 3.0 * d * (d + 2)
            line += f" conditioning={reference:.6g}"
            if gap > 5 * se:
                line += "  DISCREPANCY (closed form vs oracle)"
            if abs(mean - reference) > 5 * se:
                status = 1
                line += "  ORACLE-MISMATCH vs conditioning identity"
        elif gap > 5 * se:
            status = 1
            line += "  DISAGREEMENT beyond 5 stderr"
        print(line)
    return status


def cmd_oracle_convexity(args, config) -> int:
    d = effective(args, config, "run.d", 2, int)
    n = effective(args, config, "run.n", 3, int)
    alpha = effective(args, config, "run.alpha", 0.5, float)
    probes = int(effective(args, config, "run.probes", 200_000, float))
    seed = effective(args, config, "run.seed", 0, int)
    specs = [
        ("independent", DesignSpec(Independent(np.eye(d), np.eye(d), 0.0), d=d, n=n)),
        ("rag", DesignSpec(Rag(alpha, 0.0), d=d, n=n)),
        ("task_feature", DesignSpec(TaskFeature(alpha, 0.0), d=d, n=n)),
    ]
    status = 0
    for name, spec in specs:
        rng = RngStream(seed).derive("oracle-convexity", name)
        eig = check_strong_convexity(spec, probes, rng)
        verdict = "strongly convex" if eig > 0 else "NOT certified"
        print(f"{name}: hessian min eigenvalue = {eig:.6g} ({verdict})")
        if eig <= 0:
            status = 1
    return status


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

TRAIN_COMMANDS = {
    "fig-iid": cmd_fig_iid,
    "fig-rag": cmd_fig_rag,
    "fig-task": cmd_fig_task,
    "fig-lowrank": cmd_fig_lowrank,
    "fig-lora": cmd_fig_lora,
    "fig-avg": cmd_fig_avg,
    "fig-evolve": cmd_fig_evolve,
    "theory-table": cmd_theory_table,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icl-lab",
        description="Train one-layer in-context learners and cross-check "
                    "their risks against closed forms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--d", type=int, default=None)
        p.add_argument("--n", type=parse_int_list, default=None,
                       help="context lengths, e.g. 4,8,16 or 1..80")
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output", default=None, help="CSV output path")
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--learning-rate", type=float, default=None)
        p.add_argument("--restarts", type=int, default=None)
        p.add_argument("--init-scale", type=float, default=None)
        p.add_argument("--eval-trials", type=int, default=None)
        p.add_argument("--full-scale", action="store_true",
                       help="d=20, 10000 iterations, 20 restarts")

    for name in TRAIN_COMMANDS:
        p = sub.add_parser(name)
        add_common(p)
        if name in ("fig-rag", "fig-task"):
            p.add_argument("--alpha-list", dest="alpha", type=parse_float_list,
                           default=None)
        if name == "theory-table":
            p.add_argument("--design", default=None,
                           choices=["iid", "rag", "task_feature"])
            p.add_argument("--alpha", type=float, default=None)
        if name in ("fig-lowrank", "fig-lora"):
            p.add_argument("--rank", type=parse_int_list, default=None)
        if name == "fig-avg":
            p.add_argument("--n-max", type=int, default=None)
        if name == "fig-iid":
            p.add_argument("--task-cov", default=None,
                           help="isotropic | ones_mix:<g> | inv_index | pow2")

    for name in ("oracle-moments", "oracle-convexity"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--d", type=int, default=None)
        if name == "oracle-moments":
            p.add_argument("--kind", default=None)
            p.add_argument("--samples", type=float, default=None)
        else:
            p.add_argument("--n", type=int, default=None)
            p.add_argument("--alpha", type=float, default=None)
            p.add_argument("--probes", type=float, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = {}
    if getattr(args, "config", None):
        try:
            config = load_config(args.config)
        except ConfigError as err:
            print(f"config error: {err}", file=sys.stderr)
            return 2
    try:
        if args.command == "oracle-moments":
            return cmd_oracle_moments(args, config)
        if args.command == "oracle-convexity":
            return cmd_oracle_convexity(args, config)
        handler = TRAIN_COMMANDS[args.command]
        # sweep flags: --n doubles as the n sweep, --rank as the rank sweep
        if getattr(args, "n", None) is not None:
            config["sweep.n"] = ",".join(str(x) for x in args.n)
            config["run.n"] = str(args.n[0])
            args.n = None
        if getattr(args, "alpha", None) is not None and \
                isinstance(args.alpha, list):
            config["sweep.alpha"] = ",".join(repr(x) for x in args.alpha)
            args.alpha = None
        if getattr(args, "rank", None) is not None:
            config["sweep.rank"] = ",".join(str(x) for x in args.rank)
            args.rank = None
        if getattr(args, "n_max", None) is not None:
            config["run.n_max"] = str(args.n_max)
            args.n_max = None
        records = handler(args, config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 1
    output = effective(args, config, "run.output", f"{args.command}.csv", str)
    try:
        write_csv(output, records)
    except OSError as err:
        print(f"cannot write {output}: {err}", file=sys.stderr)
        return 1
    print(f"wrote {len(records)} rows to {output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
