"""Gridded anomaly data model, the MJOG field format, and the synthetic MJO generator."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import (BadMagicError, FormatError, SizeMismatchError, VersionMismatchError,
                        atomic_write_bytes, atomic_write_text)

VARIABLES = ("OLR", "U850", "U200")
UNITS = {"OLR": "W/m2", "U850": "m/s", "U200": "m/s"}

GRID_MAGIC = b"MJOG"
GRID_VERSION = 1
# magic, version, 6 grid scalars, n_vars, n_leads, init_date
_HEADER = struct.Struct("<4sI QQdddd QQq")
HEADER_BYTES = _HEADER.size

DAYS_PER_YEAR = 365
_MONTH_LENGTHS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
_MONTH_STARTS = np.cumsum((0,) + _MONTH_LENGTHS)


class NonFiniteError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n_lat: int = 17
    n_lon: int = 144
    lat_start_deg: float = -20.0
    lat_step_deg: float = 2.5
    lon_start_deg: float = 0.0
    lon_step_deg: float = 2.5

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise ValueError("grid extents must be positive")
        if not (self.lat_step_deg > 0 and self.lon_step_deg > 0):
            raise ValueError("grid steps must be positive")

    @property
    def lats(self) -> np.ndarray:
        return self.lat_start_deg + self.lat_step_deg * np.arange(self.n_lat)

    @property
    def lons(self) -> np.ndarray:
        return self.lon_start_deg + self.lon_step_deg * np.arange(self.n_lon)

    def band_rows(self, south: float = -15.0, north: float = 15.0) -> np.ndarray:
        """Indices of latitude rows whose centers lie inside [south, north]."""
        lats = self.lats
        rows = np.flatnonzero((lats >= south - 1e-9) & (lats <= north + 1e-9))
        if rows.size == 0:
            raise ValueError(f"latitude band [{south}, {north}] selects no grid rows")
        return rows


@dataclass(frozen=True)
class AnomalyField:
    """One initialization's (variable, lead, lat, lon) anomaly block."""

    values: np.ndarray
    init_date: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    variables: tuple = VARIABLES

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or not np.issubdtype(v.dtype, np.floating):
            raise TypeError("values must be a floating-point ndarray")
        if tuple(self.variables) != VARIABLES:
            raise ValueError(f"variable order must be {VARIABLES}")
        if v.ndim != 4 or v.shape[0] != len(VARIABLES) or v.shape[2:] != (self.grid.n_lat, self.grid.n_lon):
            raise ValueError(f"values shape {v.shape} inconsistent with grid {self.grid}")
        if not np.isfinite(v).all():
            raise NonFiniteError("anomaly field contains non-finite values")

    @property
    def n_leads(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ForecastCase:
    init_date: int
    forecast: AnomalyField
    truth: AnomalyField

    def __post_init__(self):
        if self.forecast.grid != self.truth.grid or self.forecast.n_leads != self.truth.n_leads:
            raise ValueError("forecast and truth must share grid and lead count")


@dataclass
class Dataset:
    cases: list
    split_fraction: float = 0.2
    # explicit test count overrides the fraction (reproducing fixed external split sizes)
    test_count: int | None = None
    # continuous observed record (3, n_days, lat, lon) starting at obs_start_day, if available
    observed: np.ndarray | None = None
    obs_start_day: int = 0

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        dates = [c.init_date for c in self.cases]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("cases must be strictly ordered by init_date")

    @property
    def grid(self) -> GridSpec:
        return self.cases[0].forecast.grid


@dataclass(frozen=True)
class SyntheticConfig:
    n_cases: int = 400
    mjo_period_days: float = 45.0
    mjo_zonal_wavenumber: int = 2
    truth_amplitude: float = 1.0
    forecast_damping_rate: float = 0.05
    forecast_phase_lag_rate: float = 2.0
    noise_sigma: float = 0.1
    rng_seed: int = 0
    n_leads: int = 40
    init_spacing_days: int = 2
    history_days: int = 119
    lat_efold_deg: float = 10.0
    split_fraction: float = 0.2
    # amplitude of an added three-harmonic seasonal cycle; 0 emits anomalies directly
    climatology_amplitude: float = 0.0
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if not 0.0 <= self.forecast_damping_rate < 1.0:
            raise ValueError("forecast_damping_rate must lie in [0, 1)")
        rates = (self.mjo_period_days, self.forecast_phase_lag_rate, self.noise_sigma,
                 self.truth_amplitude, self.climatology_amplitude)
        if not all(math.isfinite(r) for r in rates):
            raise ValueError("synthetic rates must be finite")
        if self.n_cases < 1 or self.n_leads < 1 or self.init_spacing_days < 1:
            raise ValueError("counts must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


# ---------------------------------------------------------------- calendar

def day_of_year(day) -> np.ndarray:
    return np.asarray(day) % DAYS_PER_YEAR


def month_of_day(day) -> np.ndarray:
    """Calendar month 1..12 on the idealized 365-day year."""
    return np.searchsorted(_MONTH_STARTS, day_of_year(day), side="right")


# ---------------------------------------------------------------- MJOG I/O

def encode_field(fld: AnomalyField) -> bytes:
    if not np.isfinite(fld.values).all():
        raise NonFiniteError("refusing to write non-finite values")
    g = fld.grid
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, g.n_lat, g.n_lon, g.lat_start_deg, g.lat_step_deg,
                          g.lon_start_deg, g.lon_step_deg, fld.values.shape[0], fld.values.shape[1],
                          int(fld.init_date))
    payload = np.ascontiguousarray(fld.values, dtype="<f4").tobytes()
    return header + payload


def decode_field(raw: bytes) -> AnomalyField:
    if len(raw) < 4 or raw[:4] != GRID_MAGIC:
        raise BadMagicError(f"expected magic {GRID_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < HEADER_BYTES:
        raise SizeMismatchError("file shorter than MJOG header")
    (_, version, n_lat, n_lon, lat0, dlat, lon0, dlon,
     n_vars, n_leads, init_date) = _HEADER.unpack_from(raw, 0)
    if version != GRID_VERSION:
        raise VersionMismatchError(f"MJOG version {version}, expected {GRID_VERSION}")
    shape = (n_vars, n_leads, n_lat, n_lon)
    expected = HEADER_BYTES + 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise SizeMismatchError(f"MJOG payload is {len(raw)} bytes, header implies {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES).reshape(shape).astype(np.float32)
    grid = GridSpec(n_lat, n_lon, lat0, dlat, lon0, dlon)
    return AnomalyField(values, int(init_date), grid)


def write_grid_file(fld: AnomalyField, path) -> None:
    atomic_write_bytes(path, encode_field(fld))


def read_grid_file(path) -> AnomalyField:
    return decode_field(Path(path).read_bytes())


def field_to_csv(fld: AnomalyField) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["var", "lead", "lat_idx", "lon_idx", "value"])
    vals = fld.values.astype(np.float32)
    for v, name in enumerate(fld.variables):
        for t in range(vals.shape[1]):
            for i in range(vals.shape[2]):
                row = vals[v, t, i]
                for j in range(vals.shape[3]):
                    w.writerow([name, t + 1, i, j, repr(float(row[j]))])
    return buf.getvalue()


def write_field_csv(fld: AnomalyField, path) -> None:
    atomic_write_text(path, field_to_csv(fld))


# ---------------------------------------------------------------- datasets on disk

def save_dataset(data: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = ["case,init_date,forecast_file,truth_file"]
    for i, case in enumerate(data.cases):
        f_name, t_name = f"forecast_{i:05d}.mjog", f"truth_{i:05d}.mjog"
        write_grid_file(case.forecast, d / f_name)
        write_grid_file(case.truth, d / t_name)
        rows.append(f"{i},{case.init_date},{f_name},{t_name}")
    atomic_write_text(d / "index.csv", "\n".join(rows) + "\n")
    meta = {"split_fraction": data.split_fraction, "test_count": data.test_count,
            "obs_start_day": data.obs_start_day, "has_observed": data.observed is not None}
    if data.observed is not None:
        write_grid_file(AnomalyField(data.observed, data.obs_start_day, data.grid), d / "observed.mjog")
    atomic_write_text(d / "dataset.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / "index.csv").exists():
        raise FormatError(f"{d} is not a dataset directory (missing index.csv)")
    meta = json.loads((d / "dataset.json").read_text())
    cases = []
    with open(d / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            fc = read_grid_file(d / row["forecast_file"])
            tr = read_grid_file(d / row["truth_file"])
            cases.append(ForecastCase(int(row["init_date"]), fc, tr))
    observed = None
    if meta.get("has_observed"):
        observed = read_grid_file(d / "observed.mjog").values
    return Dataset(cases, meta["split_fraction"], meta.get("test_count"), observed,
                   meta.get("obs_start_day", 0))


# ---------------------------------------------------------------- split

def chronological_split(data: Dataset):
    """Train on the earliest cases, test on the chronologically last fraction."""
    n = len(data.cases)
    if n < 5:
        raise SplitError(f"need at least 5 cases to split, got {n}")
    if data.test_count is not None:
        n_test = int(data.test_count)
    else:
        n_test = math.ceil(data.split_fraction * n - 1e-9)
    if not 1 <= n_test < n:
        raise SplitError(f"test size {n_test} incompatible with {n} cases")
    ordered = sorted(data.cases, key=lambda c: c.init_date)
    return ordered[:n - n_test], ordered[n - n_test:]


# ---------------------------------------------------------------- synthetic generator

_SIGNS = np.array([-1.0, 1.0, -1.0])  # OLR, U850, U200: baroclinic opposition


def _wave(cfg: SyntheticConfig, phase_deg: np.ndarray, amplitude: np.ndarray) -> np.ndarray:
    """MJO pattern for each (time, phase shift); returns (3, n_time, lat, lon)."""
    g = cfg.grid
    env = np.exp(-0.5 * (g.lats / cfg.lat_efold_deg) ** 2)
    arg = np.deg2rad(cfg.mjo_zonal_wavenumber * g.lons[None, :] - phase_deg[:, None])
    base = amplitude[:, None, None] * env[None, :, None] * np.cos(arg)[:, None, :]
    return _SIGNS[:, None, None, None] * base[None]


def seasonal_cycle(cfg: SyntheticConfig, days: np.ndarray) -> np.ndarray:
    """Deterministic three-harmonic annual cycle plus a per-variable offset."""
    g = cfg.grid
    w = 2 * np.pi * np.asarray(days, dtype=float) / DAYS_PER_YEAR
    harm = np.cos(w) + 0.5 * np.sin(2 * w + 0.3) + 0.25 * np.cos(3 * w - 1.1)
    lon_mod = 1.0 + 0.3 * np.cos(np.deg2rad(g.lons))
    lat_mod = 1.0 + 0.2 * g.lats / 20.0
    offsets = np.array([2.0, 0.5, -1.0])
    shape = harm[:, None, None] * lat_mod[None, :, None] * lon_mod[None, None, :]
    return cfg.climatology_amplitude * (offsets[:, None, None, None] + shape[None])


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Truth: eastward-propagating coupled wave plus noise.

    Forecast at lead t: the noise-free wave damped by (1 - damping)^t and lagged in phase by
    lag_rate * t degrees, plus independent noise. Values are held at on-disk (float32) precision.
    """
    g = cfg.grid
    omega = 360.0 / cfg.mjo_period_days
    n_days = cfg.history_days + (cfg.n_cases - 1) * cfg.init_spacing_days + cfg.n_leads + 1
    days = np.arange(n_days)
    obs_rng, fc_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.rng_seed).spawn(2))

    amp = np.full(n_days, cfg.truth_amplitude)
    observed = _wave(cfg, omega * days, amp)
    if cfg.noise_sigma > 0:
        observed += cfg.noise_sigma * obs_rng.standard_normal(observed.shape)
    if cfg.climatology_amplitude != 0:
        observed += seasonal_cycle(cfg, days)
    observed = observed.astype(np.float32)

    leads = np.arange(1, cfg.n_leads + 1)
    damp = cfg.truth_amplitude * (1.0 - cfg.forecast_damping_rate) ** leads
    cases = []
    for i in range(cfg.n_cases):
        init = cfg.history_days + i * cfg.init_spacing_days
        valid = init + leads
        fc = _wave(cfg, omega * valid - cfg.forecast_phase_lag_rate * leads, damp)
        if cfg.noise_sigma > 0:
            fc += cfg.noise_sigma * fc_rng.standard_normal(fc.shape)
        if cfg.climatology_amplitude != 0:
            fc += seasonal_cycle(cfg, valid)
        truth = observed[:, init + 1:init + 1 + cfg.n_leads]
        cases.append(ForecastCase(init, AnomalyField(fc.astype(np.float32), init, g),
                                  AnomalyField(truth, init, g)))
    return Dataset(cases, cfg.split_fraction, None, observed, 0)


def config_dict(cfg) -> dict:
    return asdict(cfg)


def synthetic_from_dict(d: dict) -> SyntheticConfig:
    d = dict(d)
    if isinstance(d.get("grid"), dict):
        d["grid"] = GridSpec(**d["grid"])
    return replace(SyntheticConfig(), **d)
