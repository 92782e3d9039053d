"""Seasonal-cycle removal, low-frequency filtering and Z-score standardization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .gridio import DAYS_PER_YEAR, NonFiniteError

N_HARMONICS = 3
RUNNING_MEAN_DAYS = 120

CLIM_MAGIC = b"MJOC"
ZSCORE_MAGIC = b"MJOZ"


class DegenerateVariableError(ValueError):
    pass


@dataclass(frozen=True)
class Climatology:
    """Mean plus the first three annual harmonics at every point.

    ``a`` and ``b`` have shape (3, *point_shape) holding the cosine and sine coefficients.
    """

    mean: np.ndarray
    a: np.ndarray
    b: np.ndarray
    period: float = DAYS_PER_YEAR

    def reconstruct(self, days) -> np.ndarray:
        """Climatology at each day in ``days``; result shape (len(days), *point_shape)."""
        w = 2 * np.pi * np.asarray(days, dtype=float) / self.period
        out = np.broadcast_to(self.mean, (len(w),) + self.mean.shape).copy()
        for k in range(N_HARMONICS):
            c = np.cos((k + 1) * w).reshape((-1,) + (1,) * self.mean.ndim)
            s = np.sin((k + 1) * w).reshape((-1,) + (1,) * self.mean.ndim)
            out += c * self.a[k] + s * self.b[k]
        return out


def _design(days, period):
    w = 2 * np.pi * np.asarray(days, dtype=float) / period
    cols = [np.ones_like(w)]
    for k in range(1, N_HARMONICS + 1):
        cols += [np.cos(k * w), np.sin(k * w)]
    return np.stack(cols, axis=1)


def fit_climatology(series, days=None, period: float = DAYS_PER_YEAR) -> Climatology:
    """Least-squares fit of mean + three annual harmonics along axis 0 of ``series``."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    if days is None:
        days = np.arange(n)
    if n < 2 * period:
        raise ValueError(f"need at least two years of daily data, got {n} days")
    if not np.isfinite(series).all():
        raise NonFiniteError("climatology input contains non-finite values")
    X = _design(days, period)
    coef, *_ = np.linalg.lstsq(X, series.reshape(n, -1), rcond=None)
    coef = coef.reshape((2 * N_HARMONICS + 1,) + series.shape[1:])
    return Climatology(coef[0], coef[1::2], coef[2::2], period)


def subtract_climatology(series, days, clim: Climatology) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    if series.shape[1:] != clim.mean.shape or series.shape[0] != len(days):
        raise ValueError(f"series shape {series.shape} does not match climatology {clim.mean.shape}")
    return series - clim.reconstruct(days)


def remove_lowfreq(series, window: int = RUNNING_MEAN_DAYS) -> np.ndarray:
    """Subtract a trailing running mean along axis 0.

    Output day j corresponds to input day j + window - 1; the first window - 1 input days
    serve only as history, so the output is shorter by window - 1.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[0] < window:
        raise ValueError(f"need at least {window} days (history included), got {x.shape[0]}")
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    means = (csum[window:] - csum[:-window]) / window
    return x[window - 1:] - means


def remove_lowfreq_forecast(leads, history, window: int = RUNNING_MEAN_DAYS) -> np.ndarray:
    """Running-mean removal for forecast leads using observed days before initialization.

    ``history`` holds the ``window - 1`` observed days ending on the initialization date.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.shape[0] < window - 1:
        raise ValueError(f"need {window - 1} days of observed history, got {history.shape[0]}")
    joined = np.concatenate([history[-(window - 1):], np.asarray(leads, dtype=np.float64)])
    return remove_lowfreq(joined, window)


@dataclass(frozen=True)
class ZScoreParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.sigma) > 0)):
            raise DegenerateVariableError("sigma must be strictly positive")


def zscore_fit(fields, var_axis: int = 1) -> ZScoreParams:
    """Per-variable mean and (population) standard deviation over all other axes.

    ``fields`` is e.g. (n_cases, var, lead, lat, lon) from the training split only.
    """
    x = np.asarray(fields)
    x = np.moveaxis(x, var_axis % x.ndim, 0)
    n_var = x.shape[0]
    mu, sigma = np.empty(n_var), np.empty(n_var)
    # per-variable two-pass moments in float64; avoids a full float64 copy of float32 input
    for v in range(n_var):
        xv = x[v]
        mu[v] = xv.mean(dtype=np.float64)
        ss = 0.0
        for chunk in np.array_split(xv, max(1, xv.shape[0] // 16), axis=0) if xv.ndim else [xv]:
            ss += np.sum((chunk.astype(np.float64) - mu[v]) ** 2)
        sigma[v] = np.sqrt(ss / xv.size)
    bad = np.flatnonzero(~(sigma > 1e-300))
    if bad.size:
        raise DegenerateVariableError(f"zero variance for variable index {bad.tolist()}")
    return ZScoreParams(mu, sigma)


def _bcast(p, ndim, var_axis):
    shape = [1] * ndim
    shape[var_axis] = -1
    return np.reshape(p, shape)


def zscore_apply(fields, params: ZScoreParams, var_axis: int = 1) -> np.ndarray:
    x = np.asarray(fields, dtype=np.float64)
    ax = var_axis % x.ndim
    return (x - _bcast(params.mu, x.ndim, ax)) / _bcast(params.sigma, x.ndim, ax)


def zscore_invert(fields, params: ZScoreParams, var_axis: int = 1) -> np.ndarray:
    z = np.asarray(fields, dtype=np.float64)
    ax = var_axis % z.ndim
    return z * _bcast(params.sigma, z.ndim, ax) + _bcast(params.mu, z.ndim, ax)


def save_climatology(clim: Climatology, path) -> None:
    container.save(path, CLIM_MAGIC, {"mean": clim.mean, "a": clim.a, "b": clim.b,
                                      "period": np.array([clim.period])})


def load_climatology(path) -> Climatology:
    d = container.load(path, CLIM_MAGIC)
    return Climatology(d["mean"], d["a"], d["b"], float(d["period"][0]))


def save_zscore(params: ZScoreParams, path) -> None:
    container.save(path, ZSCORE_MAGIC, {"mu": params.mu, "sigma": params.sigma})


def load_zscore(path) -> ZScoreParams:
    d = container.load(path, ZSCORE_MAGIC)
    return ZScoreParams(d["mu"], d["sigma"])


# ---------------------------------------------------------------- dataset pipeline

def _time_first(values):
    """(3, L, lat, lon) -> (L, 3, lat, lon) float64."""
    return np.moveaxis(np.asarray(values, dtype=np.float64), 1, 0)


def preprocess_dataset(data, n_train: int, remove_climatology: bool = True,
                       remove_lowfreq_days: int | None = RUNNING_MEAN_DAYS):
    """Turn a dataset of raw fields into anomalies using only the training period.

    The climatology is fitted on the observed record up to the last valid day of the first
    ``n_train`` cases and subtracted from observations, forecasts and truths by valid day. The
    low-frequency filter uses observed history before each initialization.
    Returns (anomaly Dataset, Climatology or None).
    """
    from .gridio import AnomalyField, Dataset, ForecastCase

    if data.observed is None:
        raise ValueError("preprocessing needs the continuous observed record")
    obs = _time_first(data.observed)                      # (n_days, 3, lat, lon)
    days = data.obs_start_day + np.arange(obs.shape[0])
    clim = None
    if remove_climatology:
        last = data.cases[n_train - 1]
        end = last.init_date + last.forecast.n_leads - data.obs_start_day + 1
        clim = fit_climatology(obs[:end], days[:end])
        obs = subtract_climatology(obs, days, clim)
    window = remove_lowfreq_days or 0
    cases = []
    for c in data.cases:
        L = c.forecast.n_leads
        valid = c.init_date + 1 + np.arange(L)
        fc = _time_first(c.forecast.values)
        if clim is not None:
            fc = fc - clim.reconstruct(valid)
        truth = obs[valid - data.obs_start_day]
        if window:
            i0 = c.init_date - data.obs_start_day
            if i0 - (window - 2) < 0:
                raise ValueError(f"case {c.init_date} lacks {window - 1} days of observed history")
            hist = obs[i0 - (window - 2):i0 + 1]
            fc = remove_lowfreq_forecast(fc, hist, window)
            truth = remove_lowfreq_forecast(truth, hist, window)
        to_field = lambda v: AnomalyField(np.moveaxis(v, 0, 1).astype(np.float32), c.init_date, c.forecast.grid)
        cases.append(ForecastCase(c.init_date, to_field(fc), to_field(truth)))
    obs_out = np.moveaxis(obs, 0, 1).astype(np.float32)
    return Dataset(cases, data.split_fraction, data.test_count, obs_out, data.obs_start_day), clim
