"""Hourly price data: loading, winsorization, the double-log transform, splitting.

All functions are pure; a :class:`PriceSeries` is immutable once built.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import DataError

HOURS_PER_WEEK = 168
_HOUR = np.timedelta64(1, "h")


@dataclass(frozen=True)
class PriceSeries:
    """A gap-free hourly series of positive prices.

    Attributes
    ----------
    timestamps : ndarray of datetime64[s], strictly increasing, 1-hour spacing
    prices : ndarray of float, all > 0, $/MWh
    hour_of_week : ndarray of int in [0, 168), Monday 00:00 = 0
    """

    timestamps: np.ndarray
    prices: np.ndarray
    hour_of_week: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        p = np.asarray(self.prices, dtype=float)
        how = np.asarray(self.hour_of_week, dtype=np.int64)
        if not (len(ts) == len(p) == len(how)):
            raise DataError("timestamps, prices and hour_of_week must have equal length")
        if len(ts) == 0:
            raise DataError("empty price series")
        if len(ts) > 1:
            d = np.diff(ts)
            if np.any(d != _HOUR):
                i = int(np.argmax(d != _HOUR))
                raise DataError(
                    f"timestamps must be hourly without gaps: expected "
                    f"{ts[i] + _HOUR} after {ts[i]}, found {ts[i + 1]}"
                )
        if not np.all(np.isfinite(p)):
            raise DataError("prices must be finite")
        if np.any(p <= 0):
            raise DataError("prices must be strictly positive")
        if np.any((how < 0) | (how >= HOURS_PER_WEEK)):
            raise DataError("hour_of_week out of range [0, 168)")
        if len(how) > 1 and np.any(np.diff(how) % HOURS_PER_WEEK != 1):
            raise DataError("hour_of_week must increment by 1 mod 168")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "hour_of_week", how)
        self.timestamps.setflags(write=False)
        self.prices.setflags(write=False)
        self.hour_of_week.setflags(write=False)

    def __len__(self) -> int:
        return len(self.prices)

    def slice(self, start: int, stop: int) -> "PriceSeries":
        return PriceSeries(self.timestamps[start:stop], self.prices[start:stop],
                           self.hour_of_week[start:stop])

    def with_prices(self, prices: np.ndarray) -> "PriceSeries":
        return PriceSeries(self.timestamps, prices, self.hour_of_week)


def hour_of_week_of(ts: np.datetime64) -> int:
    """Hour-of-week index of one timestamp (Monday 00:00 -> 0)."""
    ts = np.datetime64(ts, "s")
    days = ts.astype("datetime64[D]").astype(np.int64)
    hour = ts.astype("datetime64[h]").astype(np.int64) % 24
    dow = (days + 3) % 7  # 1970-01-01 was a Thursday
    return int(dow * 24 + hour)


def from_arrays(timestamps: np.ndarray, prices: np.ndarray) -> PriceSeries:
    """Build a PriceSeries, deriving hour_of_week from the first timestamp."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    if len(ts) == 0:
        raise DataError("empty price series")
    how0 = hour_of_week_of(ts[0])
    how = (how0 + np.arange(len(ts))) % HOURS_PER_WEEK
    return PriceSeries(ts, np.asarray(prices, dtype=float), how)


def _parse_timestamp(text: str, line: int) -> np.datetime64:
    try:
        dt = datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {line}: cannot parse timestamp {text!r}") from None
    if dt.tzinfo is not None:
        raise DataError(f"line {line}: timezone-aware timestamps are not supported")
    return np.datetime64(dt, "s")


def load_prices(source) -> PriceSeries:
    """Read a `timestamp,price` CSV into a PriceSeries.

    `source` may be a path, a text stream, or a byte stream.  Rejects (never
    repairs) malformed rows, gapped or non-monotone timestamps, and
    non-positive prices; errors carry the offending line number.
    """
    if isinstance(source, (str, Path)):
        try:
            fh = open(source, "r", newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read {source}: {exc}") from None
        with fh:
            return load_prices(fh)
    if isinstance(source, (bytes, bytearray)):
        return load_prices(io.StringIO(source.decode("utf-8")))
    if hasattr(source, "read") and isinstance(source.read(0), bytes):
        source = io.TextIOWrapper(source, encoding="utf-8")

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty CSV: missing header") from None
    if [h.strip().lower() for h in header] != ["timestamp", "price"]:
        raise DataError(f"expected header 'timestamp,price', found {','.join(header)!r}")

    timestamps, prices = [], []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"line {line}: expected 2 fields, found {len(row)}")
        ts = _parse_timestamp(row[0], line)
        try:
            p = float(row[1])
        except ValueError:
            raise DataError(f"line {line}: cannot parse price {row[1]!r}") from None
        if not np.isfinite(p):
            raise DataError(f"line {line}: price is not finite")
        if p <= 0:
            raise DataError(f"line {line}: non-positive price {p}")
        timestamps.append(ts)
        prices.append(p)
    if not timestamps:
        raise DataError("CSV contains no data rows")
    return from_arrays(np.array(timestamps, dtype="datetime64[s]"), np.array(prices))


def save_prices(series: PriceSeries, path) -> None:
    """Write a PriceSeries as a `timestamp,price` CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "price"])
        for ts, p in zip(series.timestamps, series.prices):
            w.writerow([np.datetime_as_string(ts, unit="s"), repr(float(p))])


def winsorize_low(series: PriceSeries, percentile: float) -> PriceSeries:
    """Clip prices below the given empirical percentile up to that percentile.

    The clip level is the inverted-CDF empirical quantile (an order
    statistic), a fixed deterministic convention that also makes the
    operation exactly idempotent: re-clipping cannot move the quantile.
    """
    if not 0 < percentile < 100:
        raise DataError("percentile must lie in (0, 100)")
    if len(series) == 0:
        raise DataError("cannot winsorize an empty series")
    level = float(np.percentile(series.prices, percentile, method="inverted_cdf"))
    return series.with_prices(np.maximum(series.prices, level))


def loglog(series) -> np.ndarray:
    """The double-log transform z = log(log(p)).  Requires all prices > 1."""
    p = series.prices if isinstance(series, PriceSeries) else np.asarray(series, dtype=float)
    if np.any(p <= 1.0):
        raise DataError(
            "log log is undefined for prices <= 1; winsorize above 1 first "
            f"(min price {p.min():g})"
        )
    return np.log(np.log(p))


def expexp(values) -> np.ndarray:
    """Exact inverse of :func:`loglog`: p = exp(exp(z))."""
    return np.exp(np.exp(np.asarray(values, dtype=float)))


def split(series: PriceSeries, train_len: int, test_len: int) -> tuple[PriceSeries, PriceSeries]:
    """Contiguous prefix/suffix split; the test window starts right after train."""
    if train_len < 1 or test_len < 1:
        raise DataError("train_len and test_len must be positive")
    if train_len + test_len > len(series):
        raise DataError(
            f"insufficient data: need {train_len + test_len} hours, have {len(series)}"
        )
    return series.slice(0, train_len), series.slice(train_len, train_len + test_len)
