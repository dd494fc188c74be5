"""Experiment orchestration: runs, delay-budget sweeps, CSV output and comparison."""

from __future__ import annotations

import csv
import dataclasses
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wirelessfedft.bounds import (
    BoundParams,
    estimate_gradient_variance,
    estimate_smoothness,
    optimality_gap_bound,
)
from wirelessfedft.config import ExperimentConfig, dump_config
from wirelessfedft.fedft import TrainingRun, simulate

METRIC_COLUMNS = (
    "run_id", "seed", "policy", "t", "N", "D", "D_hat", "J", "mu",
    "train_loss", "test_accuracy", "scheduler_wall_time_us",
)
# columns that must match between reruns of the same config
DETERMINISTIC_COLUMNS = METRIC_COLUMNS[:-1]
BOUND_COLUMNS = ("run_id", "seed", "policy", "t", "N", "varsigma", "weight_product", "cumulative_bound")
SWEEP_COLUMNS = (
    "delay_budget", "policy", "mean_N", "mean_D", "final_accuracy_mean", "final_accuracy_std",
    "wall_us_mean", "wall_us_median", "wall_us_p95", "wall_us_max",
)
ACCURACY_ORDER = ("allin", "online", "gs", "aaba")


class DataError(ValueError):
    """Metrics CSV empty or with an unexpected schema."""


def _fmt(x) -> str:
    # repr keeps full float precision (and spells nan / inf)
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, columns, rows) -> None:
    """Write atomically: a failed run never leaves a partial file behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in columns])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_metrics(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no data")
        if tuple(header) != METRIC_COLUMNS:
            raise DataError(f"{path}: schema mismatch, expected columns {list(METRIC_COLUMNS)}")
        rows = [dict(zip(header, r)) for r in reader if r]
    if not rows:
        raise DataError(f"{path}: no data")
    return rows


def metric_rows(run: TrainingRun) -> list[dict]:
    run_id = f"{run.policy}-s{run.seed}"
    return [
        {"run_id": run_id, "seed": run.seed, "policy": run.policy, "t": tr.t, "N": tr.n,
         "D": tr.delay, "D_hat": tr.queue, "J": tr.objective, "mu": tr.payload,
         "train_loss": tr.train_loss, "test_accuracy": tr.test_accuracy,
         "scheduler_wall_time_us": tr.wall_time * 1e6}
        for tr in run.traces
    ]


@dataclass
class BoundEstimate:
    """Bound trajectory evaluated with estimated L and phi^2.

    F* is unknown; the running-minimum training loss stands in for it, so
    ``initial_gap`` and the resulting curve are proxies.
    """

    params: BoundParams
    initial_gap: float
    rounds: list[int]
    counts: list[int]
    trajectory: object
    step_condition_ok: bool


def bound_estimate(run: TrainingRun, cfg: ExperimentConfig) -> BoundEstimate | None:
    """Estimate-parameterised bound for a trained run, or None if not computable."""
    if run.model is None or len(run.probes) < 2 or cfg.channel.num_devices < 2:
        return None
    rounds = [tr.t for tr in run.traces if tr.n > 0]
    counts = [tr.n for tr in run.traces if tr.n > 0]
    if not counts:
        return None
    m = cfg.model
    try:
        L = estimate_smoothness(run.probes)
    except ValueError:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 0xB0D]))
    phi2 = estimate_gradient_variance(run.model, run.datasets, cfg.bound.variance_draws, rng)
    params = BoundParams(L=L, eta=m.learning_rate, tau=cfg.bound.pl_constant, phi2=phi2,
                         omega_a=m.rank * (m.embed_dim + m.feat_dim),
                         omega_t=m.num_classes * (m.feat_dim + 1), K=cfg.channel.num_devices)
    f_star = min([run.initial_loss] + [tr.train_loss for tr in run.traces])
    gap0 = run.initial_loss - f_star
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        traj = optimality_gap_bound(counts, params, gap0)
    ok = bool(traj.global_step_ok and traj.round_step_ok.all())
    return BoundEstimate(params, gap0, rounds, counts, traj, ok)


def bound_rows(run: TrainingRun, est: BoundEstimate) -> list[dict]:
    run_id = f"{run.policy}-s{run.seed}"
    traj = est.trajectory
    return [
        {"run_id": run_id, "seed": run.seed, "policy": run.policy, "t": t, "N": n,
         "varsigma": float(traj.varsigma[i]), "weight_product": float(traj.weight_product[i]),
         "cumulative_bound": float(traj.gap[i + 1])}
        for i, (t, n) in enumerate(zip(est.rounds, est.counts))
    ]


@dataclass
class PolicySummary:
    policy: str
    seeds: int
    mean_n: float
    mean_delay: float
    final_loss_mean: float
    final_loss_std: float
    final_accuracy_mean: float
    final_accuracy_std: float
    wall_us: np.ndarray = field(repr=False)


def summarize(runs: list[TrainingRun]) -> list[PolicySummary]:
    out = []
    for policy in dict.fromkeys(r.policy for r in runs):
        group = [r for r in runs if r.policy == policy]
        loss = np.array([r.traces[-1].train_loss for r in group])
        acc = np.array([r.traces[-1].test_accuracy for r in group])
        out.append(PolicySummary(
            policy, len(group),
            float(np.mean([tr.n for r in group for tr in r.traces])),
            float(np.mean([tr.delay for r in group for tr in r.traces])),
            float(loss.mean()), float(loss.std()), float(acc.mean()), float(acc.std()),
            np.array([tr.wall_time * 1e6 for r in group for tr in r.traces]),
        ))
    return out


def format_summary(summaries: list[PolicySummary]) -> str:
    lines = [f"{'policy':<8} {'seeds':>5} {'mean N':>7} {'mean D (s)':>11} {'final loss':>17} "
             f"{'final acc':>17} {'wall us':>9}"]
    for s in summaries:
        lines.append(
            f"{s.policy:<8} {s.seeds:>5} {s.mean_n:>7.2f} {s.mean_delay:>11.5f} "
            f"{s.final_loss_mean:>9.4f}±{s.final_loss_std:<7.4f} "
            f"{s.final_accuracy_mean:>9.4f}±{s.final_accuracy_std:<7.4f} {np.mean(s.wall_us):>9.1f}")
    return "\n".join(lines)


@dataclass
class RunResult:
    runs: list[TrainingRun]
    summaries: list[PolicySummary]
    metrics_path: Path | None
    bounds_path: Path | None
    bounds: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, out_dir=None, policies=None, seeds=None,
                   train: bool = True) -> RunResult:
    """Every (policy, seed) pair of the config; CSVs written when ``out_dir`` is set.

    Writes ``metrics.csv`` (``METRIC_COLUMNS``), ``bound_estimate.csv``
    (``BOUND_COLUMNS``, only for trained runs with probes enabled) and
    ``config.json`` (the resolved config).
    """
    policies = list(policies or cfg.policies)
    seeds = [int(s) for s in (seeds or cfg.seeds)]
    probe = cfg.bound.probe_every if train else 0
    runs, bounds = [], {}
    for policy in policies:
        for seed in seeds:
            run = simulate(cfg, policy, seed, train=train, probe_every=probe)
            runs.append(run)
            est = bound_estimate(run, cfg) if train else None
            if est is not None:
                bounds[(policy, seed)] = est
    metrics_path = bounds_path = None
    if out_dir is not None:
        out = Path(out_dir)
        metrics_path = out / "metrics.csv"
        write_csv(metrics_path, METRIC_COLUMNS, [row for r in runs for row in metric_rows(r)])
        if bounds:
            bounds_path = out / "bound_estimate.csv"
            rows = [row for r in runs if (r.policy, r.seed) in bounds
                    for row in bound_rows(r, bounds[(r.policy, r.seed)])]
            write_csv(bounds_path, BOUND_COLUMNS, rows)
        (out / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    return RunResult(runs, summarize(runs), metrics_path, bounds_path, bounds)


@dataclass
class SweepResult:
    values: list[float]
    results: list[RunResult]
    rows: list[dict]
    summary_path: Path | None


def with_delay_budget(cfg: ExperimentConfig, value: float) -> ExperimentConfig:
    sched = dataclasses.replace(cfg.scheduler, delay_budget=float(value))
    return dataclasses.replace(cfg, scheduler=sched, delay_per_bit=None)


def sweep(cfg: ExperimentConfig, values, out_dir=None, relative: bool = False, policies=None,
          seeds=None, train: bool = True) -> SweepResult:
    """One run set per delay budget.

    ``relative`` treats ``values`` as multiples of the config's resolved
    budget. Each value gets its own subdirectory; ``sweep_summary.csv``
    aggregates mean N, final accuracy and the scheduler wall-time
    distribution per (value, policy).
    """
    base = cfg.scheduler_config().delay_budget
    budgets = [float(v) * base if relative else float(v) for v in values]
    if not budgets:
        raise ValueError("sweep needs at least one value")
    results, rows = [], []
    for budget in budgets:
        sub = None if out_dir is None else Path(out_dir) / f"delay_budget_{budget:.6g}"
        res = run_experiment(with_delay_budget(cfg, budget), sub, policies, seeds, train)
        results.append(res)
        for s in res.summaries:
            w = s.wall_us
            rows.append({"delay_budget": budget, "policy": s.policy, "mean_N": s.mean_n,
                         "mean_D": s.mean_delay, "final_accuracy_mean": s.final_accuracy_mean,
                         "final_accuracy_std": s.final_accuracy_std,
                         "wall_us_mean": float(np.mean(w)), "wall_us_median": float(np.median(w)),
                         "wall_us_p95": float(np.percentile(w, 95)), "wall_us_max": float(np.max(w))})
    summary_path = None
    if out_dir is not None:
        summary_path = Path(out_dir) / "sweep_summary.csv"
        write_csv(summary_path, SWEEP_COLUMNS, rows)
    return SweepResult(budgets, results, rows, summary_path)


@dataclass
class ComparisonRow:
    source: str
    policy: str
    seeds: int
    loss_mean: float
    loss_std: float
    acc_mean: float
    acc_std: float
    loss_diff: float  # relative to the first file's value for the same policy
    acc_diff: float


@dataclass
class Comparison:
    rows: list[ComparisonRow]
    # per source: True / False when the accuracy ordering holds / fails, None if not checkable
    ordering: dict[str, bool | None]

    def format(self) -> str:
        lines = [f"{'source':<30} {'policy':<7} {'seeds':>5} {'final loss':>19} {'final acc':>19} "
                 f"{'d loss':>9} {'d acc':>9}"]
        for r in self.rows:
            lines.append(f"{r.source[-30:]:<30} {r.policy:<7} {r.seeds:>5} "
                         f"{r.loss_mean:>10.4f}±{r.loss_std:<8.4f} {r.acc_mean:>10.4f}±{r.acc_std:<8.4f} "
                         f"{r.loss_diff:>9.4f} {r.acc_diff:>9.4f}")
        for src, ok in self.ordering.items():
            if ok is None:
                verdict = "not checkable (policies missing)"
            else:
                verdict = "holds" if ok else "VIOLATED"
            lines.append(f"{src}: accuracy ordering allin >= online >= gs >= aaba {verdict}")
        return "\n".join(lines)


def _final_by_policy(rows: list[dict]) -> dict[str, list[tuple[float, float]]]:
    last: dict[str, dict] = {}
    for row in rows:
        key = row["run_id"]
        if key not in last or int(row["t"]) > int(last[key]["t"]):
            last[key] = row
    out: dict[str, list[tuple[float, float]]] = {}
    for row in last.values():
        out.setdefault(row["policy"], []).append((float(row["train_loss"]), float(row["test_accuracy"])))
    return out


def compare(paths) -> Comparison:
    """Final-round loss/accuracy per policy for each metrics CSV."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise DataError("no input files")
    tables = [(str(p), _final_by_policy(read_metrics(p))) for p in paths]
    reference: dict[str, tuple[float, float]] = {}
    rows, ordering = [], {}
    for src, table in tables:
        means = {}
        for policy, vals in table.items():
            arr = np.array(vals)
            means[policy] = (float(arr[:, 0].mean()), float(arr[:, 1].mean()))
            reference.setdefault(policy, means[policy])
            ref = reference[policy]
            rows.append(ComparisonRow(src, policy, len(vals), means[policy][0], float(arr[:, 0].std()),
                                      means[policy][1], float(arr[:, 1].std()),
                                      means[policy][0] - ref[0], means[policy][1] - ref[1]))
        present = [p for p in ACCURACY_ORDER if p in means]
        if len(present) < 2:
            ordering[src] = None
        else:
            accs = [means[p][1] for p in present]
            ordering[src] = all(a >= b for a, b in zip(accs, accs[1:]))
    return Comparison(rows, ordering)
