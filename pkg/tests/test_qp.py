import dataclasses

import numpy as np
import pytest

from proxmpc.errors import SolverFailure
from proxmpc.qp import (
    FAILURE,
    INFEASIBLE,
    OPTIMAL,
    AffineDynamics,
    PlanProblem,
    StageCost,
    canonicalize,
    canonicalize_coupled,
    evaluate_cost,
    prox_step,
    recover_inputs,
    scenario_value,
    solve,
    solve_coupled,
    solve_plan,
)

from .oracles import StorageOracle, refine_grid_minimize, stage_cost


def storage_problem(prices, q0=25.0, C=10.0, D=10.0, Q=50.0, eta=0.075,
                    terminal=25.0, quad=0.0, prox=None, fixed=None):
    prices = np.atleast_1d(np.asarray(prices, dtype=float))
    H = len(prices)
    p = prices[:, None]
    cost = StageCost(
        u_lin=p.copy(),
        u_abs=eta * p,
        u_quad=np.full((H, 1), quad),
        u_lo=np.full((H, 1), -D),
        u_hi=np.full((H, 1), C),
        x_lin=np.zeros((H, 1)),
        x_quad=np.zeros((H, 1)),
        x_lo=np.zeros((H, 1)),
        x_hi=np.full((H, 1), Q),
        E_term=np.array([[1.0]]) if terminal is not None else None,
        f_term=np.array([terminal]) if terminal is not None else None,
    )
    dyn = AffineDynamics.constant([[1.0]], [[1.0]], [0.0], H)
    return PlanProblem(dyn, cost, np.array([q0]), prox=prox, first_input_fixed=fixed)


def random_storage_instance(rng, H=None, terminal_choice=None, quad_choice=(0.0,)):
    H = H or int(rng.integers(1, 4))
    prices = np.exp(rng.uniform(1.5, 4.5, H))
    Q = float(rng.uniform(10, 60))
    C = float(rng.uniform(2, 12))
    D = float(rng.uniform(2, 12))
    eta = float(rng.uniform(0.01, 0.3))
    q0 = float(rng.uniform(0, Q))
    if terminal_choice is None:
        use_term = rng.random() < 0.5
    else:
        use_term = terminal_choice
    if use_term:
        # keep the target reachable so feasibility is guaranteed
        lo = max(0.0, q0 - D * H)
        hi = min(Q, q0 + C * H)
        terminal = float(rng.uniform(lo, hi))
    else:
        terminal = None
    quad = float(rng.choice(np.asarray(quad_choice)))
    problem = storage_problem(prices, q0=q0, C=C, D=D, Q=Q, eta=eta,
                              terminal=terminal, quad=quad)
    oracle = StorageOracle(prices, q0, C, D, Q, eta, terminal=terminal, quad=quad)
    return problem, oracle


class TestCanonicalize:
    def test_no_abs_no_prox_dimension(self):
        H, n, m = 3, 2, 2
        cost = StageCost.zeros(H, m, n, -1.0, 1.0)
        dyn = AffineDynamics.constant(np.eye(n), np.ones((n, m)), np.zeros(n), H)
        qp = canonicalize(PlanProblem(dyn, cost, np.zeros(n)))
        assert qp.nv == H * (n + m)
        assert qp.P.nnz == 0

    def test_split_dimension(self):
        problem = storage_problem([30.0, 40.0])
        qp = canonicalize(problem)
        # every input has a positive abs coefficient: 2 columns each, plus states
        assert qp.nv == 2 * 2 * 1 + 2 * 1

    def test_single_stage_abs_lp_against_oracle(self):
        # min p(u + eta|u|) over u in [-D, C], free state: optimum is u = -D
        p, eta, C, D = 20.0, 0.2, 10.0, 10.0
        problem = storage_problem([p], q0=25.0, C=C, D=D, Q=100.0, eta=eta, terminal=None)
        plan = solve_plan(problem)
        assert plan.status == OPTIMAL
        assert plan.objective == pytest.approx(-p * (1 - eta) * D, abs=1e-6)
        _, oracle_val = refine_grid_minimize(lambda u: stage_cost(p, eta, u), -D, C)
        assert plan.objective == pytest.approx(oracle_val, abs=1e-4)

    def test_prox_of_zero_cost_returns_center(self):
        cost = StageCost.zeros(2, 1, 1, -100.0, 100.0)
        dyn = AffineDynamics.constant([[1.0]], [[1.0]], [0.0], 2)
        problem = PlanProblem(dyn, cost, np.zeros(1), prox=(np.array([3.7]), 2.0))
        plan = solve_plan(problem)
        assert plan.status == OPTIMAL
        assert plan.u[0, 0] == pytest.approx(3.7, abs=1e-7)

    def test_recovered_objective_matches_true_cost(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            problem, _ = random_storage_instance(rng, quad_choice=(0.0, 0.5))
            plan = solve_plan(problem)
            if plan.status != OPTIMAL:
                continue
            direct = evaluate_cost(problem, plan.u, plan.x)
            assert plan.objective == pytest.approx(direct, abs=1e-6 * (1 + abs(direct)))

    def test_split_exactness_at_optimum(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            problem, _ = random_storage_instance(rng)
            qp = canonicalize(problem)
            sol = solve(qp)
            if sol.status != OPTIMAL:
                continue
            lay = qp.blocks[0]
            has_neg = lay.neg >= 0
            up = sol.z[lay.pos]
            un = sol.z[np.where(has_neg, lay.neg, 0)]
            both = np.minimum(up, un)[has_neg & (problem.cost.u_abs * problem.cost.u_lin > 0)]
            if len(both):
                assert np.max(both) <= 1e-6

    def test_debug_dump(self, tmp_path):
        qp = canonicalize(storage_problem([30.0]))
        path = tmp_path / "qp.json"
        qp.dump(path)
        import json

        doc = json.loads(path.read_text())
        assert doc["A_eq"]["shape"] == [2, 3]  # dynamics + terminal rows
        assert len(doc["q"]) == qp.nv


class TestSolve:
    def test_box_quadratic(self):
        # min u^2 s.t. u in [1, 2] -> u = 1, objective 1
        cost = StageCost.zeros(1, 1, 1, 1.0, 2.0)
        cost = dataclasses.replace(cost, u_quad=np.array([[2.0]]))
        dyn = AffineDynamics.constant([[1.0]], [[1.0]], [0.0], 1)
        plan = solve_plan(PlanProblem(dyn, cost, np.zeros(1)))
        assert plan.status == OPTIMAL
        assert plan.u[0, 0] == pytest.approx(1.0, abs=1e-7)
        assert plan.objective == pytest.approx(1.0, abs=1e-6)

    def test_contradictory_equalities_infeasible(self):
        cost = StageCost.zeros(1, 1, 1, -1.0, 1.0)
        cost = dataclasses.replace(cost, E_term=np.array([[1.0], [1.0]]),
                                   f_term=np.array([0.0, 1.0]))
        dyn = AffineDynamics.constant([[1.0]], [[1.0]], [0.0], 1)
        plan = solve_plan(PlanProblem(dyn, cost, np.zeros(1)))
        assert plan.status == INFEASIBLE

    def test_unreachable_terminal_infeasible(self):
        plan = solve_plan(storage_problem([30.0], q0=0.0, terminal=25.0))
        assert plan.status == INFEASIBLE

    def test_kkt_residuals_certified(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            problem, _ = random_storage_instance(rng, quad_choice=(0.0, 1.0))
            qp = canonicalize(problem)
            sol = solve(qp)
            if sol.status != OPTIMAL:
                continue
            assert sol.residuals["primal_eq"] <= 1e-6
            assert sol.residuals["primal_ineq"] <= 1e-6
            assert sol.residuals["stationarity"] <= 1e-6 * (1 + sol.residuals["q_scale"])

    def test_plan_feasibility_residuals(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            problem, _ = random_storage_instance(rng)
            plan = solve_plan(problem)
            if plan.status != OPTIMAL:
                continue
            assert plan.residuals["dynamics"] <= 1e-6
            assert plan.residuals["box"] <= 1e-6
            assert plan.residuals["terminal"] <= 1e-6

    def test_objective_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(4)
        checked = 0
        for _ in range(25):
            problem, oracle = random_storage_instance(rng)
            plan = solve_plan(problem)
            if plan.status != OPTIMAL:
                continue
            assert plan.objective == pytest.approx(oracle.optimal_value(), abs=1e-4)
            checked += 1
        assert checked >= 20


class TestScenarioValue:
    def test_consistency_with_full_solve(self):
        problem = storage_problem(np.array([30.0, 45.0, 20.0]), q0=20.0, terminal=None)
        plan = solve_plan(problem)
        val = scenario_value(problem, plan.u[0])
        assert val == pytest.approx(plan.objective, abs=1e-5)

    def test_outside_box_is_inf(self):
        problem = storage_problem([30.0, 40.0])
        assert scenario_value(problem, np.array([11.0])) == np.inf
        assert scenario_value(problem, np.array([-10.5])) == np.inf

    def test_infeasible_recourse_is_inf(self):
        # q0 = 0, terminal 25 with H = 2 and C = 10: u0 = -5 makes it unreachable
        problem = storage_problem([30.0, 40.0], q0=0.0, C=10.0, terminal=25.0)
        assert scenario_value(problem, np.array([-5.0])) == np.inf

    def test_matches_recourse_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(8):
            problem, oracle = random_storage_instance(rng, H=2)
            for u0 in rng.uniform(problem.cost.u_lo[0, 0], problem.cost.u_hi[0, 0], 3):
                val = scenario_value(problem, np.array([u0]))
                expect = oracle.optimal_value(first_input=float(u0))
                if np.isinf(expect):
                    assert np.isinf(val)
                else:
                    assert val == pytest.approx(expect, abs=1e-4)

    def test_weight_scales_value(self):
        problem = storage_problem([30.0, 45.0], q0=20.0, terminal=None)
        v1 = scenario_value(problem, np.array([2.0]))
        v3 = scenario_value(problem, np.array([2.0]), weight=3.0)
        assert v3 == pytest.approx(3.0 * v1, rel=1e-8)

    def test_convexity_property(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            problem, _ = random_storage_instance(rng, H=2, terminal_choice=False)
            lo, hi = problem.cost.u_lo[0, 0], problem.cost.u_hi[0, 0]
            for _ in range(20):
                ua, ub = rng.uniform(lo, hi, 2)
                fa = scenario_value(problem, np.array([ua]))
                fb = scenario_value(problem, np.array([ub]))
                fm = scenario_value(problem, np.array([(ua + ub) / 2]))
                assert fm <= 0.5 * fa + 0.5 * fb + 1e-6

    def test_partial_minimization_consistency(self):
        rng = np.random.default_rng(7)
        problem, _ = random_storage_instance(rng, H=3, terminal_choice=True)
        plan = solve_plan(problem)
        lo, hi = problem.cost.u_lo[0, 0], problem.cost.u_hi[0, 0]

        def f(us):
            return np.array([scenario_value(problem, np.array([u])) for u in np.atleast_1d(us)])

        _, best = refine_grid_minimize(f, lo, hi, points=81, passes=6)
        assert plan.objective == pytest.approx(best, abs=1e-4)


class TestProxStep:
    def test_vanishing_step_fixed_point(self):
        # "feasible" means u_prev is in the domain of the scenario value
        # function, not merely inside the input box
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 10:
            problem, _ = random_storage_instance(rng)
            lo, hi = problem.cost.u_lo[0, 0], problem.cost.u_hi[0, 0]
            u_prev = np.array([rng.uniform(lo, hi)])
            if np.isinf(scenario_value(problem, u_prev)):
                continue
            out = prox_step(problem, u_prev, 1e-9)
            assert np.max(np.abs(out - u_prev)) <= 1e-6
            checked += 1

    def test_huge_step_approaches_minimizer_of_value_function(self):
        rng = np.random.default_rng(9)
        problem, oracle = random_storage_instance(rng, H=2, terminal_choice=False)
        out = prox_step(problem, np.array([0.0]), 1e9)
        lo, hi = problem.cost.u_lo[0, 0], problem.cost.u_hi[0, 0]
        u_star, _ = refine_grid_minimize(oracle.value_of_first_input, lo, hi,
                                         points=4001, passes=3)
        val_out = oracle.optimal_value(first_input=float(out[0]))
        val_star = oracle.optimal_value(first_input=u_star)
        assert val_out == pytest.approx(val_star, abs=1e-4)

    def test_quadratic_prox_closed_form(self):
        cost = StageCost.zeros(1, 1, 1, -100.0, 100.0)
        cost = dataclasses.replace(cost, u_quad=np.array([[1.0]]))
        dyn = AffineDynamics.constant([[1.0]], [[1.0]], [0.0], 1)
        problem = PlanProblem(dyn, cost, np.zeros(1))
        for alpha in (0.3, 1.0, 5.0):
            out = prox_step(problem, np.array([4.0]), alpha)
            assert out[0] == pytest.approx(4.0 / (1 + alpha), abs=1e-7)

    def test_nonexpansiveness(self):
        rng = np.random.default_rng(10)
        for _ in range(3):
            problem, _ = random_storage_instance(rng)
            lo, hi = problem.cost.u_lo[0, 0], problem.cost.u_hi[0, 0]
            for _ in range(30):
                ua = np.array([rng.uniform(lo - 2, hi + 2)])
                ub = np.array([rng.uniform(lo - 2, hi + 2)])
                alpha = float(rng.uniform(0.01, 10.0))
                pa = prox_step(problem, ua, alpha)
                pb = prox_step(problem, ub, alpha)
                assert np.linalg.norm(pa - pb) <= np.linalg.norm(ua - ub) + 1e-6

    def test_infeasible_problem_raises(self):
        problem = storage_problem([30.0], q0=0.0, terminal=25.0)
        with pytest.raises(SolverFailure):
            prox_step(problem, np.array([0.0]), 1.0)


class TestCoupled:
    def test_single_scenario_matches_plain_solve(self):
        problem = storage_problem(np.array([30.0, 45.0, 20.0]), q0=20.0)
        plain = solve_plan(problem)
        coupled = solve_coupled([problem])
        assert coupled.status == OPTIMAL
        # objectives must agree; argmins may differ only when the LP has ties
        assert coupled.objective == pytest.approx(plain.objective, abs=1e-6)

    def test_coupling_constraint_binds(self):
        rng = np.random.default_rng(11)
        problems = [storage_problem(np.exp(rng.uniform(2, 4, 3)), q0=20.0) for _ in range(4)]
        sol = solve_coupled(problems, return_plans=True)
        assert sol.status == OPTIMAL
        for plan in sol.plans:
            assert plan.u[0, 0] == pytest.approx(sol.u_first[0], abs=1e-6)

    def test_mixed_split_and_unsplit_coupling(self):
        # one scenario with abs cost (split first input), one without
        a = storage_problem([30.0, 40.0], q0=20.0, eta=0.1)
        b = storage_problem([35.0, 25.0], q0=20.0, eta=0.075)
        b = dataclasses.replace(b, cost=dataclasses.replace(b.cost, u_abs=np.zeros((2, 1))))
        sol = solve_coupled([a, b], return_plans=True)
        assert sol.status == OPTIMAL
        assert sol.plans[0].u[0, 0] == pytest.approx(sol.plans[1].u[0, 0], abs=1e-6)

    def test_coupled_objective_is_sum(self):
        rng = np.random.default_rng(12)
        problems = [storage_problem(np.exp(rng.uniform(2, 4, 2)), q0=25.0) for _ in range(3)]
        sol = solve_coupled(problems)
        total = sum(scenario_value(p, sol.u_first) for p in problems)
        assert sol.objective == pytest.approx(total, abs=1e-4)

    def test_prox_on_shared_input(self):
        problems = [storage_problem(np.full(2, 30.0), q0=25.0, terminal=None)]
        sol = solve_coupled(
            [dataclasses.replace(problems[0], cost=problems[0].cost.scaled(1e-9))],
            prox=(np.array([2.5]), 1.0),
        )
        assert sol.u_first[0] == pytest.approx(2.5, abs=1e-6)

    def test_rejects_per_scenario_prox(self):
        p = storage_problem([30.0], prox=(np.array([0.0]), 1.0), terminal=None)
        with pytest.raises(ValueError):
            canonicalize_coupled([p])


class TestRecovery:
    def test_recover_inputs_mixed(self):
        a = storage_problem([30.0, 40.0], q0=20.0)
        qp = canonicalize(a)
        z = np.zeros(qp.nv)
        lay = qp.blocks[0]
        z[lay.pos[0, 0]] = 3.0
        z[lay.neg[0, 0]] = 1.0
        u = recover_inputs(qp, z)
        assert u[0, 0] == pytest.approx(2.0)
