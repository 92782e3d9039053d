"""Combined EOFs of meridional-mean OLR/U850/U200 and the RMM index."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import container
from .gridio import GridSpec

EOF_MAGIC = b"MJOE"
DEFAULT_BAND = (-15.0, 15.0)


class DegenerateCovarianceError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    pass


class UndefinedPhaseError(ValueError):
    pass


@dataclass(frozen=True)
class CombinedProfile:
    values: np.ndarray  # (3 * n_lon,) normalized, field order OLR, U850, U200
    norms: np.ndarray   # (3,)


@dataclass(frozen=True)
class EofBasis:
    eof1: np.ndarray
    eof2: np.ndarray
    explained_variance: np.ndarray  # (2,)
    scale: np.ndarray               # (2,) std of training projections
    norms: np.ndarray               # (3,) per-field normalization of meridional means
    band: tuple = DEFAULT_BAND

    @property
    def n_lon(self) -> int:
        return self.eof1.size // 3

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([self.eof1, self.eof2], axis=1)

    def to_bytes(self) -> bytes:
        return container.encode(EOF_MAGIC, self._entries())

    def _entries(self):
        return {"eof1": self.eof1, "eof2": self.eof2, "explained_variance": self.explained_variance,
                "scale": self.scale, "norms": self.norms, "band": np.asarray(self.band, dtype=float)}


@dataclass(frozen=True)
class RmmSeries:
    rmm: np.ndarray  # (n_leads, 2)
    init_date: int = 0

    @property
    def rmm1(self):
        return self.rmm[:, 0]

    @property
    def rmm2(self):
        return self.rmm[:, 1]

    @property
    def amplitude(self) -> np.ndarray:
        return np.hypot(self.rmm[:, 0], self.rmm[:, 1])

    @property
    def phase(self) -> np.ndarray:
        return phases_of(self.rmm[:, 0], self.rmm[:, 1])


# ---------------------------------------------------------------- profiles

def meridional_mean(values, grid: GridSpec, band=DEFAULT_BAND) -> np.ndarray:
    """Unweighted mean over latitude rows inside ``band``; latitude is axis -2."""
    rows = grid.band_rows(*band)
    return np.asarray(values, dtype=np.float64)[..., rows, :].mean(axis=-2)


def combine(profiles, norms) -> np.ndarray:
    """(..., 3, n_lon) meridional means -> (..., 3 * n_lon) normalized concatenation."""
    p = np.asarray(profiles, dtype=np.float64) / np.asarray(norms)[:, None]
    return p.reshape(p.shape[:-2] + (-1,))


# ---------------------------------------------------------------- eigen-solver

def _leading_vector(A, tol, max_iter, n_square=12):
    n = A.shape[0]
    norm = np.linalg.norm(A)
    if not norm > 0:
        raise DegenerateCovarianceError("matrix is zero")
    # repeated squaring sharpens the spectrum before plain power iteration
    B = A / norm
    for _ in range(n_square):
        B = B @ B
        bn = np.linalg.norm(B)
        if not bn > 0:
            break
        B /= bn
    v = B[:, np.argmax(np.linalg.norm(B, axis=0))].copy() if np.linalg.norm(B) > 0 else np.ones(n)
    if not np.linalg.norm(v) > 0:
        v = np.ones(n)
    v /= np.linalg.norm(v)
    rho = v @ A @ v
    for it in range(max_iter):
        w = A @ v
        wn = np.linalg.norm(w)
        if not wn > 0:
            raise DegenerateCovarianceError("power iteration collapsed to zero")
        v = w / wn
        rho_new = v @ A @ v
        if it > 0 and abs(rho_new - rho) <= tol * max(abs(rho_new), 1e-300):
            return rho_new, v
        rho = rho_new
    raise NonConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def leading_eigenpairs(C, k: int = 2, tol: float = 1e-12, max_iter: int = 100_000):
    """Leading ``k`` eigenpairs of symmetric PSD ``C`` by power iteration with deflation."""
    C = np.asarray(C, dtype=np.float64)
    A = C.copy()
    vals, vecs = [], []
    for _ in range(k):
        _, v = _leading_vector(A, tol, max_iter)
        for u in vecs * 2:  # two Gram-Schmidt passes
            v = v - (u @ v) * u
        v /= np.linalg.norm(v)
        lam = v @ C @ v
        vals.append(lam)
        vecs.append(v)
        A = A - lam * np.outer(v, v)
        A = 0.5 * (A + A.T)
    return np.array(vals), np.stack(vecs, axis=1)


# ---------------------------------------------------------------- fitting

def _orient(eof1, eof2, grid: GridSpec):
    n = grid.n_lon
    lons = grid.lons % 360.0
    warm_pool = (lons >= 60.0) & (lons <= 180.0)
    if eof1[:n][warm_pool].mean() > 0:
        eof1 = -eof1
    # eof2 must equal eof1 displaced eastward so eastward propagation turns anticlockwise
    shifted = np.concatenate([np.roll(eof1[i * n:(i + 1) * n], 1) for i in range(3)])
    if eof2 @ (shifted - eof1) < 0:
        eof2 = -eof2
    return eof1, eof2


def fit_eof(profiles, grid: GridSpec = GridSpec(), band=DEFAULT_BAND, tol: float = 1e-12,
            max_iter: int = 100_000) -> EofBasis:
    """Fit the two leading combined EOFs from (n_samples, 3, n_lon) observed meridional means."""
    P = np.asarray(profiles, dtype=np.float64)
    if P.ndim != 3 or P.shape[1] != 3:
        raise ValueError(f"profiles must be (n_samples, 3, n_lon), got {P.shape}")
    norms = P.std(axis=(0, 2))
    if np.any(~(norms > 0)):
        raise DegenerateCovarianceError("a field has zero variance")
    X = combine(P, norms)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    trace = np.trace(C)
    if not trace > 0:
        raise DegenerateCovarianceError("covariance trace is zero")
    vals, vecs = leading_eigenpairs(C, 2, tol, max_iter)
    eof1, eof2 = _orient(vecs[:, 0], vecs[:, 1], grid)
    pcs = X @ np.stack([eof1, eof2], axis=1)
    scale = pcs.std(axis=0)
    return EofBasis(eof1, eof2, vals / trace, scale, norms, tuple(band))


def profiles_from_fields(values, grid: GridSpec, band=DEFAULT_BAND) -> np.ndarray:
    """(..., 3, n_leads, lat, lon) fields -> (..., n_leads, 3, n_lon) meridional means."""
    mm = meridional_mean(values, grid, band)
    return np.swapaxes(mm, -3, -2)


# ---------------------------------------------------------------- projection

def project_rmm(profiles, basis: EofBasis) -> np.ndarray:
    """(..., 3, n_lon) meridional-mean profiles -> (..., 2) RMM values."""
    P = np.asarray(profiles, dtype=np.float64)
    if P.shape[-2:] != (3, basis.n_lon):
        raise ValueError(f"profile shape {P.shape[-2:]} does not match basis (3, {basis.n_lon})")
    return combine(P, basis.norms) @ basis.matrix / basis.scale


def rmm_of_field(values, grid: GridSpec, basis: EofBasis) -> np.ndarray:
    """(..., 3, n_leads, lat, lon) -> (..., n_leads, 2)."""
    return project_rmm(profiles_from_fields(values, grid, basis.band), basis)


def phases_of(rmm1, rmm2) -> np.ndarray:
    """Octant 1..8 (0 where amplitude is zero). Phase 5 covers angles [0, 45) degrees."""
    r1, r2 = np.asarray(rmm1, dtype=float), np.asarray(rmm2, dtype=float)
    theta = np.degrees(np.arctan2(r2, r1)) % 360.0
    octant = np.minimum((theta // 45.0).astype(int), 7)
    phase = (octant + 4) % 8 + 1
    return np.where((r1 == 0) & (r2 == 0), 0, phase)


def phase_of(rmm1: float, rmm2: float) -> int:
    if rmm1 == 0 and rmm2 == 0:
        raise UndefinedPhaseError("phase is undefined at zero amplitude")
    return int(phases_of(rmm1, rmm2))


def rmm_csv(series_list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["init_date", "lead", "rmm1", "rmm2", "amplitude", "phase"])
    for s in series_list:
        amp, ph = s.amplitude, s.phase
        for t in range(s.rmm.shape[0]):
            w.writerow([s.init_date, t + 1, f"{s.rmm[t, 0]:.10g}", f"{s.rmm[t, 1]:.10g}",
                        f"{amp[t]:.10g}", int(ph[t])])
    return buf.getvalue()


def read_rmm_csv(text: str):
    """Inverse of :func:`rmm_csv`: (init_dates, (N, L, 2) array) in file order."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or set(rows[0]) != {"init_date", "lead", "rmm1", "rmm2", "amplitude", "phase"}:
        raise ValueError("not an RMM CSV")
    by_case = {}
    for r in rows:
        by_case.setdefault(int(r["init_date"]), []).append((int(r["lead"]), float(r["rmm1"]),
                                                            float(r["rmm2"])))
    dates = list(by_case)
    leads = {len(v) for v in by_case.values()}
    if len(leads) != 1:
        raise ValueError("RMM CSV cases have differing lead counts")
    arr = np.array([[(a, b) for _, a, b in sorted(by_case[d])] for d in dates])
    return np.array(dates), arr


def save_basis(basis: EofBasis, path) -> None:
    container.atomic_write_bytes(path, basis.to_bytes())


def load_basis(path) -> EofBasis:
    d = container.load(path, EOF_MAGIC)
    return EofBasis(d["eof1"], d["eof2"], d["explained_variance"], d["scale"], d["norms"],
                    tuple(float(b) for b in d["band"]))
