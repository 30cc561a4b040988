"""Multi-forecast MPC evaluated by incremental proximal iterations.

A library and CLI for receding-horizon control against forecast scenarios:
single-forecast MPC, multi-forecast MPC (all plans share the first action),
and its incremental proximal evaluation, together with a complete energy
storage arbitrage benchmark (price forecasting, scenario sampling,
closed-loop simulation, prescient bound).
"""

from .errors import ConfigError, DataError, PolicyFailure, SolverFailure
from .forecast import (
    ARModel,
    BaselineModel,
    ErrorModel,
    ForecastModel,
    ScenarioSet,
    fit_ar,
    fit_baseline,
    fit_error_model,
    fit_forecast_model,
    fourier_features,
    load_model,
    point_forecast,
    rms_log_error,
    sample_scenarios,
    save_model,
)
from .policies import (
    IPMPCConfig,
    PolicyDecision,
    PrescientResult,
    StorageSpec,
    ip_mpc_policy,
    mf_mpc_policy,
    mpc_policy,
    prescient_bound,
    storage_plan_problem,
)
from .prices import PriceSeries, expexp, load_prices, loglog, split, winsorize_low
from .qp import (
    AffineDynamics,
    CanonicalQP,
    Plan,
    PlanProblem,
    StageCost,
    canonicalize,
    canonicalize_coupled,
    prox_step,
    scenario_value,
    solve,
    solve_coupled,
    solve_plan,
)
from .simulate import Comparison, PolicySpec, SimContext, SimulationResult, TrialSet, compare, run_trials, simulate
from .synth import SynthParams, generate_prices

__version__ = "0.1.0"
