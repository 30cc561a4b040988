"""Closed-loop simulation, trial management, and policy comparison.

Causality contract: at hour t a policy sees only realized prices up to and
including t (through the current price and the trailing residual window) and
the frozen forecast model.  Scenario draws at hour t are keyed by
(base_seed, trial, t) alone, so every policy within a trial consumes the
same samples in the same order; a policy wanting S scenarios takes the
prefix of the hour's pool.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, PolicyFailure, SolverFailure
from .forecast import AR_WINDOW, ForecastModel, point_forecast, sample_scenarios
from .policies import (
    IPMPCConfig,
    PrescientResult,
    StorageSpec,
    ip_mpc_policy,
    mf_mpc_policy,
    mpc_policy,
    prescient_bound,
)
from .prices import PriceSeries, loglog

SUMMARY_VERSION = 1


@dataclass(frozen=True)
class PolicySpec:
    """Configuration of one policy in a comparison run."""

    kind: str  # "mpc" | "mf_mpc" | "ip_mpc"
    scenarios: int = 0  # S, for mf_mpc
    batch: int = 20
    iterations: int = 1
    step_alpha: float = 7.0
    step_beta: float = 0.0
    order: str = "cyclic"
    init: str = "mpc_plan"

    def __post_init__(self):
        if self.kind not in ("mpc", "mf_mpc", "ip_mpc"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "mf_mpc" and self.scenarios < 1:
            raise ValueError("mf_mpc needs scenarios >= 1")
        if self.kind == "ip_mpc":
            IPMPCConfig(self.batch, self.iterations, self.step_alpha, self.step_beta,
                        self.order, self.init)

    @property
    def label(self) -> str:
        if self.kind == "mpc":
            return "mpc"
        if self.kind == "mf_mpc":
            return f"mf_mpc_s{self.scenarios}"
        return f"ip_mpc_k{self.iterations}_b{self.batch}"

    def samples_touched(self, pool: int) -> int:
        if self.kind == "mpc":
            return 0
        if self.kind == "mf_mpc":
            return self.scenarios
        return min(self.iterations * self.batch, pool)

    def uses_scenarios(self) -> bool:
        return self.kind != "mpc"

    def to_dict(self) -> dict:
        if self.kind == "mpc":
            return {"kind": "mpc"}
        if self.kind == "mf_mpc":
            return {"kind": "mf_mpc", "scenarios": self.scenarios}
        return {
            "kind": "ip_mpc",
            "batch": self.batch,
            "iterations": self.iterations,
            "step_alpha": self.step_alpha,
            "step_beta": self.step_beta,
            "order": self.order,
            "init": self.init,
        }


@dataclass(frozen=True)
class SimContext:
    """Everything a closed-loop run needs besides the policy itself.

    `series` must cover at least AR_WINDOW hours before `test_start` (the
    residual window at the first test hour comes from the training tail).
    """

    model: ForecastModel
    series: PriceSeries
    test_start: int
    test_len: int
    spec: StorageSpec
    q_init: float
    scenario_pool: int
    base_seed: int

    def __post_init__(self):
        if self.test_start < AR_WINDOW:
            raise DataError(f"test_start must be >= {AR_WINDOW} to provide a residual window")
        if self.test_start + self.test_len > len(self.series):
            raise DataError("test window extends past the end of the series")
        if self.test_len < 1:
            raise DataError("test window is empty")
        if not 0 <= self.q_init <= self.spec.capacity:
            raise DataError("q_init outside the storage capacity")
        if self.scenario_pool < 1:
            raise DataError("scenario_pool must be >= 1")
        if self.spec.horizon > AR_WINDOW:
            raise DataError(f"planning horizon > {AR_WINDOW} exceeds the forecast range")

    def validate_policy(self, policy: PolicySpec):
        need = policy.scenarios if policy.kind == "mf_mpc" else (
            policy.batch if policy.kind == "ip_mpc" else 0
        )
        if need > self.scenario_pool:
            raise DataError(
                f"policy {policy.label} needs {need} scenarios but the pool has {self.scenario_pool}"
            )

    def test_prices(self) -> np.ndarray:
        return self.series.prices[self.test_start : self.test_start + self.test_len]


@dataclass(frozen=True)
class SimulationResult:
    """Hour-level closed-loop record of one policy in one trial."""

    policy: str
    trial: int
    u: np.ndarray  # (T,)
    q: np.ndarray  # (T+1,), q[0] = q_init
    costs: np.ndarray  # (T,)
    prices: np.ndarray  # (T,) realized
    eval_seconds: np.ndarray  # (T,)
    fallback_hours: tuple[int, ...]

    @property
    def cost_per_hour(self) -> float:
        return float(np.mean(self.costs))


def _hour_rng(ctx: SimContext, trial: int, t: int) -> np.random.Generator:
    return np.random.default_rng([ctx.base_seed, trial, t])


def _policy_rng(ctx: SimContext, trial: int, t: int, label: str) -> np.random.Generator:
    return np.random.default_rng([ctx.base_seed, trial, t, zlib.crc32(label.encode())])


def simulate(ctx: SimContext, policy: PolicySpec, trial: int = 0) -> SimulationResult:
    """Run one policy over the test window, accruing realized costs.

    The applied input is the policy's action projected onto the exactly
    feasible one-hour set, which only removes solver-tolerance noise; actual
    projections beyond 1e-6 are reported as fallback hours.
    """
    ctx.validate_policy(policy)
    spec = ctx.spec
    horizon = spec.horizon
    prices_all = ctx.series.prices
    z = loglog(prices_all)
    r = z - ctx.model.baseline.predict(np.arange(len(prices_all)))

    config = IPMPCConfig(policy.batch, policy.iterations, policy.step_alpha,
                         policy.step_beta, policy.order, policy.init) if policy.kind == "ip_mpc" else None

    T = ctx.test_len
    u_out = np.zeros(T)
    q_out = np.zeros(T + 1)
    costs = np.zeros(T)
    secs = np.zeros(T)
    fallbacks: list[int] = []
    q = float(ctx.q_init)
    q_out[0] = q

    for s in range(T):
        t = ctx.test_start + s
        p_t = float(prices_all[t])
        window = r[t - AR_WINDOW + 1 : t + 1]
        tic = time.perf_counter()
        try:
            if policy.kind == "mpc":
                path = np.concatenate([[p_t], point_forecast(ctx.model, t, window)])
                decision = mpc_policy(spec, q, path[:horizon])
            else:
                pool = sample_scenarios(
                    ctx.model, t, int(ctx.series.hour_of_week[t]), window, p_t,
                    ctx.scenario_pool, _hour_rng(ctx, trial, t),
                )
                if policy.kind == "mf_mpc":
                    decision = mf_mpc_policy(spec, q, pool.prefix(policy.scenarios))
                else:
                    rng = _policy_rng(ctx, trial, t, policy.label) if policy.order == "random" else None
                    decision = ip_mpc_policy(spec, q, pool, config, rng=rng)
        except SolverFailure as exc:
            raise PolicyFailure(policy.label, t, {"error": str(exc)}) from exc
        secs[s] = time.perf_counter() - tic

        lo = max(-spec.discharge_max, -q)
        hi = min(spec.charge_max, spec.capacity - q)
        u = float(np.clip(decision.u, lo, hi))
        if abs(u - decision.u) > 1e-6 or decision.status == "infeasible":
            fallbacks.append(t)
        costs[s] = p_t * (u + spec.spread * abs(u))
        q += u
        u_out[s] = u
        q_out[s + 1] = q

    return SimulationResult(
        policy.label, trial, u_out, q_out, costs,
        prices_all[ctx.test_start : ctx.test_start + T].copy(), secs, tuple(fallbacks),
    )


@dataclass(frozen=True)
class TrialSet:
    """Per-trial results of one policy plus the aggregate statistics."""

    policy: PolicySpec
    results: tuple[SimulationResult, ...]
    cost_by_trial: np.ndarray
    mean_cost_per_hour: float
    std_cost_per_hour: float

    @classmethod
    def from_results(cls, policy: PolicySpec, results: list[SimulationResult]) -> "TrialSet":
        costs = np.array([res.cost_per_hour for res in results])
        return cls(policy, tuple(results), costs, float(costs.mean()), float(costs.std()))

    @property
    def n_trials(self) -> int:
        return len(self.results)


def _sim_job(args) -> SimulationResult:
    ctx, policy, trial = args
    return simulate(ctx, policy, trial)


def _run_jobs(jobs: list, workers: int) -> list:
    """Run (ctx, policy, trial) jobs, in worker processes when workers > 1.

    Results are ordered like the jobs regardless of scheduling, so the
    parallel path is bit-identical to the serial one.
    """
    if workers > 1 and len(jobs) > 1:
        try:
            mp = multiprocessing.get_context("fork")
        except ValueError:
            mp = None
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp) as pool:
            return list(pool.map(_sim_job, jobs))
    return [_sim_job(job) for job in jobs]


def run_trials(ctx: SimContext, policy: PolicySpec, n_trials: int, threads: int = 1) -> TrialSet:
    """Simulate `n_trials` independent trials of one policy.

    Trial i derives all its randomness from (base_seed, i); a fixed base seed
    reproduces the TrialSet exactly.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    results = _run_jobs([(ctx, policy, i) for i in range(n_trials)], threads)
    return TrialSet.from_results(policy, results)


@dataclass(frozen=True)
class Comparison:
    """Mean per-hour costs of several policies plus the prescient bound."""

    trial_sets: tuple[TrialSet, ...]
    prescient: PrescientResult
    pool: int
    wall_seconds: float = field(default=0.0, compare=False)

    def rows(self) -> list[dict]:
        out = []
        for ts in self.trial_sets:
            out.append(
                {
                    "label": ts.policy.label,
                    "kind": ts.policy.kind,
                    "samples": ts.policy.samples_touched(self.pool),
                    "mean_cost_per_hour": ts.mean_cost_per_hour,
                    "std_cost_per_hour": ts.std_cost_per_hour,
                    "trials": ts.n_trials,
                    "cost_per_hour_by_trial": ts.cost_by_trial.tolist(),
                }
            )
        return out


def compare(ctx: SimContext, policies: list[PolicySpec], n_trials: int, threads: int = 1) -> Comparison:
    """Run every policy for `n_trials` trials on the shared realized window."""
    labels = [p.label for p in policies]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate policy labels: {labels}")
    for p in policies:
        ctx.validate_policy(p)
    tic = time.perf_counter()
    jobs = [(ctx, p, i) for p in policies for i in range(n_trials)]
    results = _run_jobs(jobs, threads)
    by_policy: dict[str, list[SimulationResult]] = {p.label: [] for p in policies}
    for (_, p, _), res in zip(jobs, results):
        by_policy[p.label].append(res)
    trial_sets = tuple(TrialSet.from_results(p, by_policy[p.label]) for p in policies)
    bound = prescient_bound(ctx.spec, ctx.q_init, ctx.test_prices())
    return Comparison(trial_sets, bound, ctx.scenario_pool, time.perf_counter() - tic)


# ---------------------------------------------------------------------------
# Artifact emission

def summary_dict(comp: Comparison, ctx: SimContext, run_id: str, config_echo: dict) -> dict:
    timings = {
        ts.policy.label: float(np.mean([res.eval_seconds.mean() for res in ts.results]))
        for ts in comp.trial_sets
    }
    return {
        "summary_version": SUMMARY_VERSION,
        "run_id": run_id,
        "config": config_echo,
        "window": {
            "test_start": ctx.test_start,
            "test_len": ctx.test_len,
            "q_init": ctx.q_init,
            "scenario_pool": ctx.scenario_pool,
            "base_seed": ctx.base_seed,
        },
        "prescient": {
            "cost_per_hour": comp.prescient.cost_per_hour,
            "objective": comp.prescient.objective,
        },
        "policies": comp.rows(),
        "timings": {
            "eval_seconds_per_policy": timings,
            "wall_seconds": comp.wall_seconds,
        },
    }


def write_outputs(out_dir, run_id: str, comp: Comparison, ctx: SimContext, config_echo: dict) -> Path:
    """Write trials.csv, summary.json and figure_data/ under out_dir/run_id."""
    root = Path(out_dir) / run_id
    root.mkdir(parents=True, exist_ok=True)

    with open(root / "trials.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "trial", "hour", "timestamp", "price", "u", "q_after", "cost"])
        for ts in comp.trial_sets:
            for res in ts.results:
                for s in range(len(res.u)):
                    t = ctx.test_start + s
                    w.writerow([
                        res.policy, res.trial, t,
                        np.datetime_as_string(ctx.series.timestamps[t], unit="s"),
                        repr(float(res.prices[s])), repr(float(res.u[s])),
                        repr(float(res.q[s + 1])), repr(float(res.costs[s])),
                    ])

    summary = summary_dict(comp, ctx, run_id, config_echo)
    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True),
                                       encoding="utf-8")

    figdir = root / "figure_data"
    figdir.mkdir(exist_ok=True)
    with open(figdir / "cost_per_policy.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "kind", "samples", "mean_cost_per_hour", "std_cost_per_hour", "trials"])
        for row in comp.rows():
            w.writerow([row["label"], row["kind"], row["samples"],
                        repr(row["mean_cost_per_hour"]), repr(row["std_cost_per_hour"]),
                        row["trials"]])
        w.writerow(["prescient", "prescient", "", repr(comp.prescient.cost_per_hour), "", ""])
    return root
