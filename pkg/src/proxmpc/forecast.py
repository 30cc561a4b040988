"""Price forecasting: seasonal baseline, AR residual model, stratified errors.

The pipeline works in double-log space (z = log log p):

1. a 33-parameter Fourier baseline b_t capturing diurnal, weekly and annual
   structure plus interaction periods;
2. an AR matrix mapping the last 24 baseline residuals to the next 23;
3. a per-hour-of-week Gaussian error model (168 means and covariances),
   smoothed over the week cycle graph;
4. scenario sampling: point forecast plus Gaussian error draws, mapped back
   to prices with exp(exp(.)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .prices import HOURS_PER_WEEK, PriceSeries, expexp, loglog

AR_WINDOW = 24
AR_HORIZON = 23

# Period list, in hours: diurnal 24/k, weekly 168/k, annual 8760/k for
# k = 1..4, then the interaction periods 168 +/- 24 and 8760 +/- 24.
PERIODS = np.array(
    [24.0 / k for k in (1, 2, 3, 4)]
    + [168.0 / k for k in (1, 2, 3, 4)]
    + [8760.0 / k for k in (1, 2, 3, 4)]
    + [168.0 + 24.0, 168.0 - 24.0, 8760.0 + 24.0, 8760.0 - 24.0]
)

N_PARAMS = 1 + 2 * len(PERIODS)  # 33

MODEL_VERSION = 1
COV_EIG_FLOOR = 1e-8


def fourier_features(t) -> np.ndarray:
    """Feature vector [1, cos(2*pi*t/T_1), sin(2*pi*t/T_1), ...] per period.

    `t` is an hour index (scalar or array).  Returns shape (33,) or (len(t), 33).
    """
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    ang = 2.0 * np.pi * t[:, None] / PERIODS[None, :]
    feats = np.empty((len(t), N_PARAMS))
    feats[:, 0] = 1.0
    feats[:, 1::2] = np.cos(ang)
    feats[:, 2::2] = np.sin(ang)
    return feats[0] if scalar else feats


def _ridge_lstsq(X: np.ndarray, Y: np.ndarray, lam: float, penalize: np.ndarray) -> np.ndarray:
    """Ridge solution via least squares on the lambda-augmented system.

    `penalize` is a boolean mask over columns; unpenalized columns (the
    intercept) get no augmentation row.  Kept deliberately distinct from the
    normal-equations route used as a cross-check in the tests.
    """
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")
    if lam > 0:
        k = int(penalize.sum())
        aug = np.zeros((k, X.shape[1]))
        aug[np.arange(k), np.flatnonzero(penalize)] = np.sqrt(lam)
        X = np.vstack([X, aug])
        Y = np.vstack([Y, np.zeros((k, Y.shape[1]))]) if Y.ndim == 2 else np.concatenate([Y, np.zeros(k)])
    theta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return theta


@dataclass(frozen=True)
class BaselineModel:
    """Fourier baseline in double-log space: 33 parameters."""

    intercept: float
    cos_coeffs: np.ndarray  # (16,)
    sin_coeffs: np.ndarray  # (16,)
    periods: np.ndarray = field(default_factory=lambda: PERIODS.copy())

    def __post_init__(self):
        if len(self.cos_coeffs) != len(PERIODS) or len(self.sin_coeffs) != len(PERIODS):
            raise ValueError(f"expected {len(PERIODS)} cosine and sine coefficients")
        if not np.allclose(self.periods, PERIODS):
            raise ValueError("unexpected period list")

    @property
    def theta(self) -> np.ndarray:
        out = np.empty(N_PARAMS)
        out[0] = self.intercept
        out[1::2] = self.cos_coeffs
        out[2::2] = self.sin_coeffs
        return out

    @classmethod
    def from_theta(cls, theta: np.ndarray) -> "BaselineModel":
        theta = np.asarray(theta, dtype=float)
        return cls(float(theta[0]), theta[1::2].copy(), theta[2::2].copy())

    def predict(self, t) -> np.ndarray:
        return fourier_features(t) @ self.theta


def default_ridge(n_samples: int) -> float:
    """Default ridge penalty: weak, scaled with the sample count."""
    return 1e-3 * n_samples


def fit_baseline(z: np.ndarray, ridge_lambda: float | None = None) -> BaselineModel:
    """Fit the baseline by ridge regression (intercept unpenalized).

    An all-equal series makes the design degenerate relative to the
    near-constant annual columns; it is handled directly as an
    intercept-only fit.
    """
    z = np.asarray(z, dtype=float)
    if len(z) < N_PARAMS:
        raise DataError(f"need at least {N_PARAMS} samples to fit the baseline")
    if np.ptp(z) == 0.0:
        return BaselineModel(float(z[0]), np.zeros(len(PERIODS)), np.zeros(len(PERIODS)))
    lam = default_ridge(len(z)) if ridge_lambda is None else float(ridge_lambda)
    X = fourier_features(np.arange(len(z)))
    penalize = np.ones(N_PARAMS, dtype=bool)
    penalize[0] = False
    theta = _ridge_lstsq(X, z, lam, penalize)
    return BaselineModel.from_theta(theta)


@dataclass(frozen=True)
class ARModel:
    """Residual model: the next 23 residuals as a linear map of the last 24."""

    gamma: np.ndarray  # (23, 24)
    window: int = AR_WINDOW
    horizon: int = AR_HORIZON

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.shape != (self.horizon, self.window):
            raise ValueError(f"gamma must be {self.horizon}x{self.window}, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("gamma entries must be finite")
        object.__setattr__(self, "gamma", g)

    def predict(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=float)
        if window.shape != (self.window,):
            raise ValueError(f"window must have length {self.window}")
        return self.gamma @ window


def residual_windows(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 training pairs: rows of 24 past residuals and 23 future ones."""
    r = np.asarray(r, dtype=float)
    n = len(r)
    if n < AR_WINDOW + AR_HORIZON:
        raise DataError(f"need at least {AR_WINDOW + AR_HORIZON} residuals, have {n}")
    W = np.lib.stride_tricks.sliding_window_view(r, AR_WINDOW)[: n - AR_WINDOW - AR_HORIZON + 1]
    Y = np.lib.stride_tricks.sliding_window_view(r[AR_WINDOW:], AR_HORIZON)
    return W.copy(), Y.copy()


def fit_ar(residuals: np.ndarray, ridge_lambda: float | None = None) -> ARModel:
    """Fit all 23 rows of the AR matrix by ridge regression on sliding windows."""
    W, Y = residual_windows(residuals)
    lam = default_ridge(len(W)) if ridge_lambda is None else float(ridge_lambda)
    gamma_t = _ridge_lstsq(W, Y, lam, np.ones(AR_WINDOW, dtype=bool))
    return ARModel(gamma_t.T)


@dataclass(frozen=True)
class ErrorModel:
    """Per-hour-of-week Gaussian error model for the 23-step forecast errors.

    `means[m]` and `covs[m]` describe errors of forecasts issued at hours with
    hour-of-week m.  Covariances are smoothed over the 168-vertex cycle graph
    and eigenvalue-floored, so every matrix admits a Cholesky factor.
    """

    means: np.ndarray  # (168, 23)
    covs: np.ndarray  # (168, 23, 23)
    smoothing: float
    counts: np.ndarray  # (168,) samples per stratum

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float))
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if self.means.shape != (HOURS_PER_WEEK, AR_HORIZON):
            raise ValueError("means must be 168 x 23")
        if self.covs.shape != (HOURS_PER_WEEK, AR_HORIZON, AR_HORIZON):
            raise ValueError("covs must be 168 x 23 x 23")
        if self.smoothing < 0:
            raise ValueError("smoothing must be nonnegative")
        object.__setattr__(self, "_chol_cache", {})

    def cholesky(self, m: int) -> np.ndarray:
        """Factor L with L L' = cov of stratum m (eigendecomposition fallback).

        The fallback clips negative eigenvalues at zero only; flooring
        covariances is the model fit's job, and a literally zero covariance
        must sample with zero noise.
        """
        cache = self._chol_cache
        if m not in cache:
            cov = self.covs[m]
            try:
                cache[m] = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                w, v = np.linalg.eigh((cov + cov.T) / 2.0)
                cache[m] = v * np.sqrt(np.maximum(w, 0.0))
        return cache[m]

    def sample(self, m: int, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw `count` IID error vectors from stratum m."""
        xi = rng.standard_normal((count, AR_HORIZON))
        return self.means[m] + xi @ self.cholesky(m).T


def _smooth_on_cycle(emp: np.ndarray, counts: np.ndarray, gamma: float) -> np.ndarray:
    """Solve the fixed point of the neighbor-averaging update on the week cycle.

    The update S_m <- (n_m * emp_m + gamma * (S_{m-1} + S_{m+1})) / (n_m + 2 gamma)
    has the linear fixed point (diag(n) + gamma * L) S = diag(n) emp with L the
    cycle-graph Laplacian; we solve that system directly, which is exact.
    """
    k = len(counts)
    flat = emp.reshape(k, -1)
    if gamma == 0.0:
        return emp.copy()
    lap = 2.0 * np.eye(k) - np.roll(np.eye(k), 1, axis=1) - np.roll(np.eye(k), -1, axis=1)
    system = np.diag(counts.astype(float)) + gamma * lap
    smoothed = np.linalg.solve(system, counts[:, None] * flat)
    return smoothed.reshape(emp.shape)


def floor_psd(cov: np.ndarray, floor: float = COV_EIG_FLOOR) -> np.ndarray:
    """Symmetrize and floor the eigenvalues of one covariance matrix."""
    sym = (cov + cov.T) / 2.0
    w, v = np.linalg.eigh(sym)
    floored = (v * np.maximum(w, floor)) @ v.T
    return (floored + floored.T) / 2.0


def fit_error_model(errors: np.ndarray, strata: np.ndarray, smoothing: float) -> ErrorModel:
    """Fit stratum means and graph-smoothed covariances.

    Parameters
    ----------
    errors : (T, 23) forecast-error vectors
    strata : (T,) hour-of-week of the forecast start hour, in [0, 168)
    smoothing : cycle-graph regularization weight (0 disables smoothing)
    """
    errors = np.asarray(errors, dtype=float)
    strata = np.asarray(strata, dtype=np.int64)
    if errors.ndim != 2 or errors.shape[1] != AR_HORIZON:
        raise DataError(f"errors must be (T, {AR_HORIZON})")
    if len(strata) != len(errors):
        raise DataError("errors and strata must align")

    means = np.zeros((HOURS_PER_WEEK, AR_HORIZON))
    emp = np.zeros((HOURS_PER_WEEK, AR_HORIZON, AR_HORIZON))
    counts = np.zeros(HOURS_PER_WEEK, dtype=np.int64)
    for m in range(HOURS_PER_WEEK):
        rows = errors[strata == m]
        if len(rows) == 0:
            raise DataError(f"no error samples for hour-of-week stratum {m}")
        counts[m] = len(rows)
        means[m] = rows.mean(axis=0)
        centered = rows - means[m]
        emp[m] = centered.T @ centered / len(rows)

    smoothed = _smooth_on_cycle(emp, counts, float(smoothing))
    covs = np.stack([floor_psd(smoothed[m]) for m in range(HOURS_PER_WEEK)])
    return ErrorModel(means, covs, float(smoothing), counts)


@dataclass(frozen=True)
class ScenarioSet:
    """S sampled price paths over the planning horizon, sharing the hour-0 price."""

    prices: np.ndarray  # (S, H') with column 0 the anchor price
    weights: np.ndarray  # (S,)
    anchor: float

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.ndim != 2 or len(w) != p.shape[0]:
            raise ValueError("prices must be (S, H') with one weight per scenario")
        if np.any(p <= 0) or np.any(w <= 0):
            raise ValueError("scenario prices and weights must be positive")
        if not np.all(p[:, 0] == self.anchor):
            raise ValueError("every scenario must start at the anchor price")
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "weights", w)

    @property
    def count(self) -> int:
        return self.prices.shape[0]

    def prefix(self, s: int) -> "ScenarioSet":
        if not 1 <= s <= self.count:
            raise ValueError(f"cannot take {s} scenarios from a set of {self.count}")
        return ScenarioSet(self.prices[:s], self.weights[:s], self.anchor)


@dataclass(frozen=True)
class ForecastModel:
    """Baseline + AR + stratified error model, with the training length."""

    baseline: BaselineModel
    ar: ARModel
    error: ErrorModel
    n_train: int


def point_forecast(model: ForecastModel, t: int, window: np.ndarray) -> np.ndarray:
    """Point price forecast for hours t+1 .. t+23.

    `window` holds the last 24 baseline residuals in double-log space,
    ending at hour t.  Output prices are strictly greater than 1 (the range
    of exp(exp(.))).
    """
    zhat = model.baseline.predict(np.arange(t + 1, t + 1 + AR_HORIZON)) + model.ar.predict(window)
    return expexp(zhat)


def sample_scenarios(
    model: ForecastModel,
    t: int,
    hour_of_week: int,
    window: np.ndarray,
    p_t: float,
    count: int,
    seed,
) -> ScenarioSet:
    """Sample `count` scenario price paths for hours t .. t+23.

    Errors are drawn IID from the stratum of the start hour; hour 0 of every
    scenario is the known current price.  A fixed seed gives bit-identical
    output.
    """
    if count < 1:
        raise ValueError("scenario count must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    zhat = model.baseline.predict(np.arange(t + 1, t + 1 + AR_HORIZON)) + model.ar.predict(window)
    errs = model.error.sample(int(hour_of_week), count, rng)
    paths = expexp(zhat[None, :] + errs)
    prices = np.column_stack([np.full(count, float(p_t)), paths])
    return ScenarioSet(prices, np.ones(count), float(p_t))


def rms_log_error(forecasts: np.ndarray, actual: np.ndarray, by_lead: bool = False):
    """RMS of log(actual) - log(forecast), overall or per lead time."""
    f = np.asarray(forecasts, dtype=float)
    a = np.asarray(actual, dtype=float)
    if f.shape != a.shape:
        raise DataError(f"shape mismatch: forecasts {f.shape} vs actual {a.shape}")
    err = np.log(a) - np.log(f)
    if by_lead:
        if err.ndim != 2:
            raise DataError("per-lead RMS needs (T, leads) inputs")
        return np.sqrt(np.mean(err**2, axis=0))
    return float(np.sqrt(np.mean(err**2)))


def training_errors(
    baseline: BaselineModel, ar: ARModel, z: np.ndarray, hour_of_week: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Forecast errors e = z_actual - z_forecast at every training start hour.

    Returns the (T, 23) error matrix and the (T,) stratum of each start hour.
    """
    z = np.asarray(z, dtype=float)
    r = z - baseline.predict(np.arange(len(z)))
    W, Y = residual_windows(r)
    errors = Y - W @ ar.gamma.T
    start_hours = np.arange(AR_WINDOW - 1, AR_WINDOW - 1 + len(W))
    return errors, np.asarray(hour_of_week)[start_hours]


def fit_forecast_model(
    train: PriceSeries,
    ridge_baseline: float | None = None,
    ridge_ar: float | None = None,
    smoothing: float = 10.0,
) -> ForecastModel:
    """Fit the whole pipeline on a training window."""
    z = loglog(train)
    baseline = fit_baseline(z, ridge_baseline)
    r = z - baseline.predict(np.arange(len(z)))
    ar = fit_ar(r, ridge_ar)
    errors, strata = training_errors(baseline, ar, z, train.hour_of_week)
    error = fit_error_model(errors, strata, smoothing)
    return ForecastModel(baseline, ar, error, n_train=len(train))


def fit_report(model: ForecastModel, train: PriceSeries) -> dict:
    """In-sample forecast quality: log-price RMS overall, per lead, and baseline.

    "log-price error" means log p - log p_hat, i.e. exp(z) - exp(z_hat) in
    double-log terms.
    """
    z = loglog(train)
    b = model.baseline.predict(np.arange(len(z)))
    r = z - b
    W, _ = residual_windows(r)
    zhat = W @ model.ar.gamma.T  # predicted residuals
    # targets: z and baseline at hours t+1 .. t+23 for each start hour t
    z_t = np.lib.stride_tricks.sliding_window_view(z[AR_WINDOW:], AR_HORIZON)
    b_t = np.lib.stride_tricks.sliding_window_view(b[AR_WINDOW:], AR_HORIZON)
    forecast_prices = expexp(b_t + zhat)
    actual_prices = expexp(z_t)
    return {
        "n_train": len(z),
        "baseline_rms_log": float(np.sqrt(np.mean((np.exp(z) - np.exp(b)) ** 2))),
        "forecast_rms_log": rms_log_error(forecast_prices, actual_prices),
        "rms_log_by_lead": rms_log_error(forecast_prices, actual_prices, by_lead=True).tolist(),
    }


# ---------------------------------------------------------------------------
# Persistence: one JSON document, covariances stored as lower triangles.

def model_to_dict(model: ForecastModel) -> dict:
    tril = np.tril_indices(AR_HORIZON)
    return {
        "model_version": MODEL_VERSION,
        "n_train": model.n_train,
        "baseline": {
            "intercept": model.baseline.intercept,
            "cos_coeffs": model.baseline.cos_coeffs.tolist(),
            "sin_coeffs": model.baseline.sin_coeffs.tolist(),
            "periods": model.baseline.periods.tolist(),
        },
        "ar": {"gamma": model.ar.gamma.flatten().tolist()},
        "error": {
            "smoothing": model.error.smoothing,
            "strata": [
                {
                    "mean": model.error.means[m].tolist(),
                    "cov_lower": model.error.covs[m][tril].tolist(),
                    "count": int(model.error.counts[m]),
                }
                for m in range(HOURS_PER_WEEK)
            ],
        },
    }


def model_from_dict(doc: dict) -> ForecastModel:
    if doc.get("model_version") != MODEL_VERSION:
        raise DataError(f"unsupported model_version {doc.get('model_version')!r}")
    base = doc["baseline"]
    baseline = BaselineModel(
        float(base["intercept"]),
        np.array(base["cos_coeffs"], dtype=float),
        np.array(base["sin_coeffs"], dtype=float),
        np.array(base["periods"], dtype=float),
    )
    ar = ARModel(np.array(doc["ar"]["gamma"], dtype=float).reshape(AR_HORIZON, AR_WINDOW))
    strata = doc["error"]["strata"]
    if len(strata) != HOURS_PER_WEEK:
        raise DataError(f"expected {HOURS_PER_WEEK} strata, found {len(strata)}")
    means = np.zeros((HOURS_PER_WEEK, AR_HORIZON))
    covs = np.zeros((HOURS_PER_WEEK, AR_HORIZON, AR_HORIZON))
    counts = np.zeros(HOURS_PER_WEEK, dtype=np.int64)
    tril = np.tril_indices(AR_HORIZON)
    for m, entry in enumerate(strata):
        means[m] = np.array(entry["mean"], dtype=float)
        low = np.zeros((AR_HORIZON, AR_HORIZON))
        low[tril] = entry["cov_lower"]
        covs[m] = low + low.T - np.diag(np.diag(low))
        counts[m] = int(entry.get("count", 0))
    error = ErrorModel(means, covs, float(doc["error"]["smoothing"]), counts)
    return ForecastModel(baseline, ar, error, int(doc["n_train"]))


def save_model(model: ForecastModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1), encoding="utf-8")


def load_model(path) -> ForecastModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"cannot parse model file {path}: {exc}") from None
    return model_from_dict(doc)
