"""Bivariate RMM skill metrics, Steiger's test for dependent correlations and the
diagnostic products built on them (phase composites, stratified skill, Hovmöller)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import eofrmm
from .gridio import GridSpec

SKILL_THRESHOLD = 0.5
Z90 = float(stats.norm.ppf(0.95))
Z95 = float(stats.norm.ppf(0.975))
SIG_LEVELS = ("none", "p90", "p95")


class UndefinedMetricError(ValueError):
    pass


def _pair(observed, forecast):
    a = np.asarray(observed, dtype=np.float64)
    b = np.asarray(forecast, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 2:
        raise ValueError(f"expected matching (..., 2) RMM arrays, got {a.shape} and {b.shape}")
    return a, b


# ---------------------------------------------------------------- per-lead metrics
# Arrays are (N, L, 2) for curves or (N, 2) for a single lead; sums run over forecasts N.

def cor_curve(observed, forecast) -> np.ndarray:
    """Uncentered bivariate correlation per lead."""
    a, b = _pair(observed, forecast)
    num = (a * b).sum(axis=(0, -1))
    # sqrt of the product keeps the perfect-forecast case exactly 1
    den = np.sqrt((a * a).sum(axis=(0, -1)) * (b * b).sum(axis=(0, -1)))
    if np.any(den == 0):
        raise UndefinedMetricError("zero denominator in bivariate correlation")
    return num / den


def mse_f(observed, forecast) -> np.ndarray:
    a, b = _pair(observed, forecast)
    return ((a - b) ** 2).sum(axis=-1).mean(axis=0)


def mse_c(observed) -> np.ndarray:
    """Error of the no-MJO (zero) forecast, per lead."""
    a = np.asarray(observed, dtype=np.float64)
    return (a * a).sum(axis=-1).mean(axis=0)


def rmse_curve(observed, forecast) -> np.ndarray:
    return np.sqrt(mse_f(observed, forecast))


def msss_curve(observed, forecast) -> np.ndarray:
    c = mse_c(observed)
    if np.any(c == 0):
        raise UndefinedMetricError("zero climatological variance")
    return 1.0 - mse_f(observed, forecast) / c


def _at(curve_fn, observed, forecast, t):
    a, b = _pair(observed, forecast)
    if a.ndim == 3:
        a, b = a[:, t - 1], b[:, t - 1]
    return float(curve_fn(a, b))


def cor(observed, forecast, t: int = 1) -> float:
    a, _ = _pair(observed, forecast)
    if a.shape[0] < 2:
        raise ValueError("bivariate correlation needs N >= 2")
    return _at(cor_curve, observed, forecast, t)


def rmse(observed, forecast, t: int = 1) -> float:
    return _at(rmse_curve, observed, forecast, t)


def msss(observed, forecast, t: int = 1) -> float:
    return _at(msss_curve, observed, forecast, t)


def skillful_lead(curve, threshold: float = SKILL_THRESHOLD) -> int:
    """Lead before the first drop below ``threshold``; the full length if it never drops."""
    below = np.flatnonzero(np.asarray(curve) < threshold)
    return int(below[0]) if below.size else len(curve)


# ---------------------------------------------------------------- Steiger's test

def fisher_z(r) -> float:
    if not -1.0 < r < 1.0:
        raise UndefinedMetricError(f"Fisher transform undefined at r = {r}")
    return math.atanh(r)


def significance_band(z: float) -> str:
    az = abs(z)
    return "p95" if az >= Z95 else "p90" if az >= Z90 else "none"


def steiger_z(r1: float, r2: float, r12: float, n: int):
    """Compare two correlations sharing a variable: r1 = cor(obs, f1), r2 = cor(obs, f2),
    r12 = cor(f1, f2). Returns (Z, band), positive when r1 > r2."""
    if n <= 3:
        raise ValueError("Steiger's test needs N > 3")
    z1, z2 = fisher_z(r1), fisher_z(r2)
    if not -1.0 <= r12 <= 1.0:
        raise ValueError(f"r12 = {r12} outside [-1, 1]")
    rm = 0.5 * (r1 + r2)
    rm2 = rm * rm
    psi = r12 * (1 - 2 * rm2) - 0.5 * rm2 * (1 - 2 * rm2 - r12 * r12)
    s_bar = psi / (1 - rm2) ** 2
    if not s_bar < 1:
        raise UndefinedMetricError("dependent-correlation covariance term reached 1")
    z = (z1 - z2) * math.sqrt((n - 3) / (2 - 2 * s_bar))
    return z, significance_band(z)


def steiger_curve(observed, corrected, raw):
    """Per-lead Z and band for corrected vs raw; undefined leads give (nan, 'none')."""
    a, c = _pair(observed, corrected)
    _, r = _pair(observed, raw)
    n = a.shape[0]
    rc, rr, cr = cor_curve(a, c), cor_curve(a, r), cor_curve(c, r)
    zs, bands = [], []
    for t in range(a.shape[1]):
        try:
            z, band = steiger_z(rc[t], rr[t], cr[t], n)
        except (UndefinedMetricError, ValueError):
            z, band = float("nan"), "none"
        zs.append(z)
        bands.append(band)
    return np.array(zs), bands


# ---------------------------------------------------------------- skill report

@dataclass(frozen=True)
class SkillReport:
    n: int
    cor_raw: np.ndarray
    cor_corr: np.ndarray
    rmse_raw: np.ndarray
    rmse_corr: np.ndarray
    msss_raw: np.ndarray
    msss_corr: np.ndarray
    z: np.ndarray
    significance: tuple

    @property
    def leads(self) -> np.ndarray:
        return np.arange(1, len(self.cor_raw) + 1)

    @property
    def skillful_lead_raw(self) -> int:
        return skillful_lead(self.cor_raw)

    @property
    def skillful_lead_corr(self) -> int:
        return skillful_lead(self.cor_corr)


def skill_report(observed, raw, corrected) -> SkillReport:
    a = np.asarray(observed, dtype=np.float64)
    z, bands = steiger_curve(a, corrected, raw)
    return SkillReport(a.shape[0], cor_curve(a, raw), cor_curve(a, corrected),
                       rmse_curve(a, raw), rmse_curve(a, corrected),
                       msss_curve(a, raw), msss_curve(a, corrected), z, tuple(bands))


def _fmt(v) -> str:
    return "nan" if not np.isfinite(v) else f"{float(v):.10g}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def skill_csv(rep: SkillReport) -> str:
    rows = [[int(t), _fmt(rep.cor_raw[i]), _fmt(rep.cor_corr[i]), _fmt(rep.rmse_raw[i]),
             _fmt(rep.rmse_corr[i]), _fmt(rep.msss_raw[i]), _fmt(rep.msss_corr[i]),
             _fmt(rep.z[i]), rep.significance[i]] for i, t in enumerate(rep.leads)]
    return _csv(["lead", "cor_raw", "cor_corr", "rmse_raw", "rmse_corr", "msss_raw", "msss_corr",
                 "z", "sig"], rows)


def read_skill_csv(text: str) -> dict:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k != "sig"}
    out["sig"] = [r["sig"] for r in rows]
    return out


# ---------------------------------------------------------------- phase composites

def initial_state(observed):
    """Initial (amplitude, phase) per case, taken from the first verifying lead."""
    a = np.asarray(observed, dtype=np.float64)[:, 0]
    return np.hypot(a[:, 0], a[:, 1]), eofrmm.phases_of(a[:, 0], a[:, 1])


@dataclass(frozen=True)
class PhaseComposite:
    phase: int
    count: int
    observed: np.ndarray | None  # (L, 2) or None when the group is empty
    raw: np.ndarray | None
    corrected: np.ndarray | None


def phase_composites(observed, raw, corrected, min_amplitude: float = 1.0):
    """Mean trajectories per initial phase for cases with initial amplitude > min_amplitude."""
    a = np.asarray(observed, dtype=np.float64)
    amp, phase = initial_state(a)
    strong = amp > min_amplitude
    out = []
    for p in range(1, 9):
        sel = strong & (phase == p)
        if not sel.any():
            out.append(PhaseComposite(p, 0, None, None, None))
            continue
        out.append(PhaseComposite(p, int(sel.sum()), a[sel].mean(axis=0),
                                  np.asarray(raw)[sel].mean(axis=0),
                                  np.asarray(corrected)[sel].mean(axis=0)))
    return out


def angle_deg(rmm) -> np.ndarray:
    r = np.asarray(rmm, dtype=np.float64)
    return np.degrees(np.arctan2(r[..., 1], r[..., 0]))


def angular_lag(reference, forecast) -> np.ndarray:
    """Degrees by which ``forecast`` trails ``reference`` anticlockwise, wrapped to (-180, 180]."""
    d = angle_deg(reference) - angle_deg(forecast)
    return 180.0 - np.mod(180.0 - d, 360.0)


def composite_lags(composites, lead: int):
    """(raw lags, corrected lags) at ``lead`` over non-empty groups."""
    groups = [c for c in composites if c.count]
    raw = np.array([angular_lag(c.observed[lead - 1], c.raw[lead - 1]) for c in groups])
    corr = np.array([angular_lag(c.observed[lead - 1], c.corrected[lead - 1]) for c in groups])
    return raw, corr


def composite_csv(composites) -> str:
    rows = []
    for c in composites:
        if not c.count:
            rows.append([c.phase, "missing", 0, "nan", "nan", 0])
            continue
        for name, traj in (("observed", c.observed), ("raw", c.raw), ("corrected", c.corrected)):
            for t in range(traj.shape[0]):
                rows.append([c.phase, name, t + 1, _fmt(traj[t, 0]), _fmt(traj[t, 1]), c.count])
    return _csv(["phase", "source", "lead", "rmm1", "rmm2", "count"], rows)


# ---------------------------------------------------------------- stratified skill

@dataclass(frozen=True)
class StratifiedSkill:
    """COR by stratum and lead; NaN marks cells below the minimum sample count."""

    kind: str            # "phase" or "month"
    strata: np.ndarray   # stratum labels
    counts: np.ndarray   # cases per stratum
    cor_raw: np.ndarray  # (n_strata, L)
    cor_corr: np.ndarray
    z: np.ndarray
    significance: tuple  # per stratum, tuple of bands per lead

    @property
    def diff(self) -> np.ndarray:
        return self.cor_corr - self.cor_raw


def _stratify(kind, labels, strata, a, raw, corr, min_count):
    L = a.shape[1]
    cr = np.full((len(strata), L), np.nan)
    cc, zz = cr.copy(), cr.copy()
    counts, sig = [], []
    for i, s in enumerate(strata):
        sel = labels == s
        counts.append(int(sel.sum()))
        bands = ("none",) * L
        if sel.sum() >= max(min_count, 2):
            try:
                cr[i] = cor_curve(a[sel], raw[sel])
                cc[i] = cor_curve(a[sel], corr[sel])
            except UndefinedMetricError:
                cr[i] = cc[i] = np.nan
            else:
                if sel.sum() > 3:
                    z, b = steiger_curve(a[sel], corr[sel], raw[sel])
                    zz[i], bands = z, tuple(b)
        sig.append(bands)
    return StratifiedSkill(kind, np.asarray(strata), np.array(counts), cr, cc, zz, tuple(sig))


def stratified_skill(observed, raw, corrected, init_months, min_count: int = 10):
    """(by initial phase, by initial calendar month)."""
    a = np.asarray(observed, dtype=np.float64)
    r, c = np.asarray(raw, dtype=np.float64), np.asarray(corrected, dtype=np.float64)
    _, phase = initial_state(a)
    by_phase = _stratify("phase", phase, np.arange(1, 9), a, r, c, min_count)
    by_month = _stratify("month", np.asarray(init_months), np.arange(1, 13), a, r, c, min_count)
    return by_phase, by_month


def stratified_csv(tables) -> str:
    rows = []
    for tab in tables:
        for i, s in enumerate(tab.strata):
            for t in range(tab.cor_raw.shape[1]):
                rows.append([tab.kind, int(s), t + 1, int(tab.counts[i]), _fmt(tab.cor_raw[i, t]),
                             _fmt(tab.cor_corr[i, t]), _fmt(tab.diff[i, t]), _fmt(tab.z[i, t]),
                             tab.significance[i][t]])
    return _csv(["kind", "stratum", "lead", "n", "cor_raw", "cor_corr", "diff", "z", "sig"], rows)


# ---------------------------------------------------------------- Hovmöller

def hovmoller(values, grid: GridSpec = GridSpec(), band=eofrmm.DEFAULT_BAND) -> np.ndarray:
    """(3, L, lat, lon) field -> (3, L, lon) meridional means."""
    return eofrmm.meridional_mean(values, grid, band)


def pattern_cc(a, b) -> float:
    """Centered Pearson correlation over all cells."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("pattern shapes differ")
    x, y = x - x.mean(), y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    if den == 0:
        raise UndefinedMetricError("pattern correlation undefined for a constant pattern")
    return float(x @ y) / den


def hovmoller_csv(matrix, var_names=("OLR", "U850", "U200")) -> str:
    m = np.asarray(matrix)
    rows = [[var_names[v], t + 1, j, _fmt(m[v, t, j])]
            for v in range(m.shape[0]) for t in range(m.shape[1]) for j in range(m.shape[2])]
    return _csv(["var", "lead", "lon_idx", "value"], rows)
