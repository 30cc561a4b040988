"""Synthetic hourly prices from the baseline + AR + stratified-noise model.

The generator mirrors the forecasting pipeline's structure: a smooth Fourier
baseline in double-log space, an AR(1) residual whose innovation scale
depends on the hour of the week, and a sharp weekday evening ridge / morning
dip that is deliberately too narrow for the 33-parameter baseline to resolve
(real price shapes have such features; the stratified error model is what
picks them up).  The double-log transform turns modest z-movements into
realistic price swings and spikes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forecast import PERIODS, BaselineModel
from .prices import HOURS_PER_WEEK, PriceSeries, from_arrays, loglog

# Monday 00:00, so hour_of_week starts at 0.
DEFAULT_START = np.datetime64("2020-01-06T00:00:00", "s")

PRICE_FLOOR = 2.0
PRICE_CAP = 3000.0


def _default_baseline() -> BaselineModel:
    cos = np.zeros(len(PERIODS))
    sin = np.zeros(len(PERIODS))
    # diurnal k=1..4 (afternoon-peaked)
    cos[0], sin[0] = -0.085, -0.045
    cos[1], sin[1] = 0.030, 0.020
    cos[2], sin[2] = -0.010, 0.006
    cos[3], sin[3] = 0.005, -0.003
    # weekly k=1..4
    cos[4], sin[4] = 0.015, 0.010
    cos[5], sin[5] = -0.008, 0.005
    cos[6], sin[6] = 0.004, -0.003
    cos[7], sin[7] = 0.002, 0.001
    # annual k=1..4
    cos[8], sin[8] = 0.050, 0.030
    cos[9], sin[9] = -0.020, 0.012
    cos[10], sin[10] = 0.008, -0.005
    cos[11], sin[11] = 0.004, 0.003
    # interactions
    cos[12], sin[12] = 0.008, -0.005
    cos[13], sin[13] = -0.006, 0.004
    cos[14], sin[14] = 0.005, 0.003
    cos[15], sin[15] = -0.004, -0.002
    return BaselineModel(1.17, cos, sin)


def _stratum_profile() -> np.ndarray:
    """Relative innovation-noise profile over the 168 hours of the week.

    Noise is highest around weekday evening peaks, mildly elevated at the
    morning ramp, and calm overnight and on weekends.
    """
    hours = np.arange(HOURS_PER_WEEK)
    hod = hours % 24
    weekday = (hours // 24) < 5
    evening = np.exp(-0.5 * ((hod - 19.0) / 2.5) ** 2)
    morning = 0.5 * np.exp(-0.5 * ((hod - 8.0) / 2.0) ** 2)
    return 0.4 + (evening + morning) * np.where(weekday, 1.3, 0.5)


@dataclass(frozen=True)
class SynthParams:
    """Generator knobs; defaults give a benchmark-ready 54-week world."""

    weeks: int = 54
    ar_coeff: float = 0.8
    noise_base: float = 0.035
    ridge_amp: float = 0.16  # weekday evening ridge height in z
    ridge_noise: float = 0.25  # day-to-day lognormal sigma of the ridge
    dip_amp: float = 0.10  # weekday morning dip depth in z
    spike_prob: float = 0.0  # extra 1-hour variance bursts in the AR innovations
    spike_scale: float = 4.0

    def __post_init__(self):
        if self.weeks < 1:
            raise ValueError("weeks must be >= 1")
        if not 0 <= self.ar_coeff < 1:
            raise ValueError("ar_coeff must lie in [0, 1)")
        if self.noise_base <= 0:
            raise ValueError("noise_base must be positive")
        if self.ridge_amp < 0 or self.dip_amp < 0 or self.ridge_noise < 0:
            raise ValueError("ridge_amp, dip_amp and ridge_noise must be nonnegative")
        if not 0 <= self.spike_prob < 1:
            raise ValueError("spike_prob must lie in [0, 1)")
        if self.spike_scale < 1:
            raise ValueError("spike_scale must be >= 1")


def generate_prices(params: SynthParams, seed: int, start=DEFAULT_START) -> PriceSeries:
    """Deterministic synthetic price series for the given seed."""
    rng = np.random.default_rng(seed)
    n = params.weeks * HOURS_PER_WEEK
    t = np.arange(n)
    hod = t % 24
    days = t // 24
    weekday = (days % 7) < 5
    b = _default_baseline().predict(t)

    # sharp weekday features, day-to-day amplitude wobble
    ridge_shape = np.exp(-0.5 * ((hod - 19.5) / 1.1) ** 2)
    dip_shape = np.exp(-0.5 * ((hod - 8.0) / 1.0) ** 2)
    n_days = int(days.max()) + 1
    day_amp = np.exp(rng.normal(-params.ridge_noise**2 / 2, params.ridge_noise, n_days))
    sharp = weekday * day_amp[days] * (
        params.ridge_amp * ridge_shape - params.dip_amp * dip_shape
    )

    profile = _stratum_profile()
    sigma = params.noise_base * profile[t % HOURS_PER_WEEK]
    if params.spike_prob > 0:
        bursts = rng.random(n) < params.spike_prob
        sigma = np.where(bursts, params.spike_scale * sigma, sigma)
    eps = rng.standard_normal(n) * sigma
    r = np.zeros(n)
    for k in range(1, n):
        r[k] = params.ar_coeff * r[k - 1] + eps[k]

    z = np.clip(b + sharp + r, loglog([PRICE_FLOOR]), loglog([PRICE_CAP]))
    prices = np.exp(np.exp(z))
    timestamps = np.datetime64(start, "s") + np.arange(n) * np.timedelta64(3600, "s")
    return from_arrays(timestamps, prices)
