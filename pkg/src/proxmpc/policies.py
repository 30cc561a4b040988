"""Storage-arbitrage policies: MPC, MF-MPC, IP-MPC, and the prescient bound.

The storage system charges at rate u (discharges when negative) with
dynamics q_{t+1} = q_t + u_t, paying p (u + eta |u|) each hour: purchases at
(1 + eta) p, sales at (1 - eta) p.  Every policy plans over a horizon with a
terminal stored-energy equality and applies only the first input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SolverFailure
from .forecast import ScenarioSet
from .qp import (
    INFEASIBLE,
    OPTIMAL,
    AffineDynamics,
    PlanProblem,
    StageCost,
    solve_coupled,
    solve_plan,
)


@dataclass(frozen=True)
class StorageSpec:
    """Physical storage parameters and the planning conventions.

    The input box is [-discharge_max, charge_max].  The planning terminal
    target defaults to half the capacity, which is always reachable within
    the horizon because capacity/2 <= min(charge, discharge) * horizon for
    any sane configuration (checked here).
    """

    charge_max: float = 10.0
    discharge_max: float = 10.0
    capacity: float = 50.0
    spread: float = 0.075
    horizon: int = 24
    terminal_target: float | None = None

    def __post_init__(self):
        if min(self.charge_max, self.discharge_max, self.capacity) <= 0:
            raise ValueError("charge_max, discharge_max and capacity must be positive")
        if not 0 < self.spread < 1:
            raise ValueError("spread must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.terminal_target is None:
            object.__setattr__(self, "terminal_target", self.capacity / 2.0)
        if not 0 <= self.terminal_target <= self.capacity:
            raise ValueError("terminal_target must lie in [0, capacity]")


@dataclass(frozen=True)
class IPMPCConfig:
    """Incremental proximal configuration.

    Iterations are indexed from k = 1 with step size
    alpha_k = step_alpha / (k + step_beta), so the defaults give 7/k.
    """

    batch: int = 20
    iterations: int = 1
    step_alpha: float = 7.0
    step_beta: float = 0.0
    order: str = "cyclic"  # or "random"
    init: str = "mpc_plan"  # or "zero"

    def __post_init__(self):
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be >= 1 and iterations >= 0")
        if self.step_alpha <= 0 or self.step_beta < 0:
            raise ValueError("need step_alpha > 0 and step_beta >= 0")
        if self.order not in ("cyclic", "random"):
            raise ValueError("order must be 'cyclic' or 'random'")
        if self.init not in ("mpc_plan", "zero"):
            raise ValueError("init must be 'mpc_plan' or 'zero'")

    def step(self, k: int) -> float:
        return self.step_alpha / (k + self.step_beta)


@dataclass(frozen=True)
class PolicyDecision:
    """First action plus whatever the policy wants to report about the solve."""

    u: float
    status: str
    objective: float
    diagnostics: dict = field(default_factory=dict)


def storage_plan_problem(
    spec: StorageSpec,
    q_t: float,
    prices: np.ndarray,
    terminal: bool = True,
    extra_input_quad: float = 0.0,
) -> PlanProblem:
    """Planning problem for one price path p_t .. p_{t+H-1}.

    Stage cost p u + eta p |u|; charge rate in [-D, C]; stored energy in
    [0, Q]; terminal equality q_{t+H} = terminal_target unless disabled.
    `extra_input_quad` adds a tiny diagonal quadratic when a unique optimum
    is needed.
    """
    prices = np.asarray(prices, dtype=float)
    horizon = len(prices)
    if horizon < 1:
        raise ValueError("need at least one price")
    if np.any(prices <= 0) or not np.all(np.isfinite(prices)):
        raise ValueError("prices must be positive and finite")
    if not 0 <= q_t <= spec.capacity:
        raise ValueError(f"stored energy {q_t} outside [0, {spec.capacity}]")

    p = prices[:, None]
    cost = StageCost(
        u_lin=p.copy(),
        u_abs=spec.spread * p,
        u_quad=np.full((horizon, 1), float(extra_input_quad)),
        u_lo=np.full((horizon, 1), -spec.discharge_max),
        u_hi=np.full((horizon, 1), spec.charge_max),
        x_lin=np.zeros((horizon, 1)),
        x_quad=np.zeros((horizon, 1)),
        x_lo=np.zeros((horizon, 1)),
        x_hi=np.full((horizon, 1), spec.capacity),
        E_term=np.array([[1.0]]) if terminal else None,
        f_term=np.array([spec.terminal_target]) if terminal else None,
    )
    dynamics = AffineDynamics.constant([[1.0]], [[1.0]], [0.0], horizon)
    return PlanProblem(dynamics, cost, np.array([float(q_t)]))


def _feasible_fallback(spec: StorageSpec, q_t: float) -> float:
    """Project u = 0 onto the one-hour feasible action set."""
    lo = max(-spec.discharge_max, -q_t)
    hi = min(spec.charge_max, spec.capacity - q_t)
    return float(np.clip(0.0, lo, hi))


def mpc_policy(spec: StorageSpec, q_t: float, prices: np.ndarray) -> PolicyDecision:
    """Single-forecast MPC: solve one plan, apply its first input.

    `prices` is the H-vector of forecast prices with the current price first.
    Infeasibility cannot occur when the terminal target is reachable within
    the horizon; if it does occur the policy falls back to (a projection of)
    doing nothing and flags the event.
    """
    plan = solve_plan(storage_plan_problem(spec, q_t, prices))
    if plan.status == INFEASIBLE:
        return PolicyDecision(
            _feasible_fallback(spec, q_t), INFEASIBLE, np.inf, {"fallback": True}
        )
    if plan.status != OPTIMAL:
        raise SolverFailure(f"MPC solve failed: {plan.residuals}")
    return PolicyDecision(
        float(plan.u[0, 0]), plan.status, plan.objective, {"residuals": plan.residuals}
    )


def _scenario_problems(
    spec: StorageSpec, q_t: float, scenarios: ScenarioSet, extra_input_quad: float = 0.0
) -> list[PlanProblem]:
    return [
        storage_plan_problem(spec, q_t, scenarios.prices[i], extra_input_quad=extra_input_quad)
        for i in range(scenarios.count)
    ]


def mf_mpc_policy(
    spec: StorageSpec, q_t: float, scenarios: ScenarioSet, extra_input_quad: float = 0.0
) -> PolicyDecision:
    """Multi-forecast MPC: one plan per scenario, all sharing the first input.

    The objective is (1/S) sum_i w_i (scenario i plan cost), solved as a
    single coupled QP.
    """
    count = scenarios.count
    problems = [
        replace(p, cost=p.cost.scaled(w / count))
        for p, w in zip(_scenario_problems(spec, q_t, scenarios, extra_input_quad), scenarios.weights)
    ]
    sol = solve_coupled(problems)
    if sol.status == INFEASIBLE:
        return PolicyDecision(
            _feasible_fallback(spec, q_t), INFEASIBLE, np.inf, {"fallback": True}
        )
    if sol.status != OPTIMAL:
        raise SolverFailure(f"MF-MPC solve failed: {sol.residuals}")
    return PolicyDecision(
        float(sol.u_first[0]), sol.status, sol.objective, {"residuals": sol.residuals}
    )


def _batch_indices(config: IPMPCConfig, count: int, k: int, rng) -> np.ndarray:
    if config.order == "cyclic":
        start = (k - 1) * config.batch
        return np.arange(start, start + config.batch) % count
    if rng is None:
        raise ValueError("random index order needs an rng")
    return rng.choice(count, size=config.batch, replace=False)


def ip_mpc_policy(
    spec: StorageSpec,
    q_t: float,
    scenarios: ScenarioSet,
    config: IPMPCConfig,
    rng: np.random.Generator | None = None,
    extra_input_quad: float = 0.0,
) -> PolicyDecision:
    """Incremental proximal MPC over the scenario set.

    Starting from the MPC plan on the first scenario (or zero), each
    iteration k takes a minibatch S_k (cyclic with wraparound, or uniform
    without replacement) and moves to

        argmin (alpha_k / b) sum_{i in S_k} w_i F_i(u) + 1/2 ||u - u_prev||^2,

    solved as one coupled QP of b plans plus the proximal term.  With zero
    iterations the policy returns the initial MPC action unchanged.
    """
    count = scenarios.count
    if config.batch > count:
        raise ValueError(f"batch {config.batch} exceeds scenario count {count}")

    if config.init == "mpc_plan":
        init_decision = mpc_policy(spec, q_t, scenarios.prices[0])
        u = init_decision.u
        statuses = [init_decision.status]
    else:
        u = 0.0
        statuses = ["init_zero"]

    iterates = [u]
    objectives: list[float] = []
    base_problems = _scenario_problems(spec, q_t, scenarios, extra_input_quad)
    for k in range(1, config.iterations + 1):
        alpha = config.step(k)
        idx = _batch_indices(config, count, k, rng)
        batch = [
            replace(
                base_problems[i],
                cost=base_problems[i].cost.scaled(alpha * scenarios.weights[i] / config.batch),
            )
            for i in idx
        ]
        sol = solve_coupled(batch, prox=(np.array([u]), 1.0))
        if sol.status != OPTIMAL:
            raise SolverFailure(
                f"IP-MPC iteration {k} failed ({sol.status}): {sol.residuals}"
            )
        u = float(sol.u_first[0])
        iterates.append(u)
        objectives.append(sol.objective)
        statuses.append(sol.status)

    return PolicyDecision(
        u,
        OPTIMAL,
        objectives[-1] if objectives else np.nan,
        {"iterates": iterates, "objectives": objectives, "statuses": statuses},
    )


@dataclass(frozen=True)
class PrescientResult:
    cost_per_hour: float
    objective: float
    u: np.ndarray
    q: np.ndarray  # stored energy after each hour


def prescient_bound(spec: StorageSpec, q_init: float, prices: np.ndarray) -> PrescientResult:
    """Optimal schedule with all prices known: one LP over the whole window.

    No terminal constraint, so doing nothing is always feasible and the bound
    is never positive.  This lower-bounds the realized cost of every causal
    policy on the same prices, because any closed-loop trajectory is feasible
    here.
    """
    prices = np.asarray(prices, dtype=float)
    if len(prices) == 0:
        raise ValueError("prescient bound needs a nonempty price window")
    problem = storage_plan_problem(spec, q_init, prices, terminal=False)
    plan = solve_plan(problem)
    if plan.status != OPTIMAL:
        raise SolverFailure(f"prescient LP failed: {plan.status}, {plan.residuals}")
    return PrescientResult(
        cost_per_hour=plan.objective / len(prices),
        objective=plan.objective,
        u=plan.u[:, 0].copy(),
        q=plan.x[:, 0].copy(),
    )
