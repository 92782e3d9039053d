"""Integrated-gradients attribution of refined RMM outputs to the input fields."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import container, eofrmm, pcc, tensor as T
from .eofrmm import EofBasis
from .gridio import VARIABLES, GridSpec

ATTRIBUTION_MAGIC = b"MJOA"
TARGETS = ("RMM1", "RMM2")
DEFAULT_LEAD = 20
MIN_STEPS = 16


class AttributionError(ValueError):
    pass


@dataclass(frozen=True)
class AttributionMap:
    target: str
    target_lead: int
    values: np.ndarray      # same shape as the input field
    steps: int
    delta_f: float          # F(x) - F(baseline)
    baseline_kind: str = "zero-anomaly"

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def completeness_residual(self) -> float:
        return abs(self.total - self.delta_f)


def model_target(model: pcc.CorrectorModel, target: str = "RMM1", lead: int = DEFAULT_LEAD):
    """F(x): refined RMM component at ``lead`` for a batch of physical anomaly fields."""
    model.require_fitted()
    if target not in TARGETS:
        raise AttributionError(f"target must be one of {TARGETS}")
    if not 1 <= lead <= model.n_leads:
        raise AttributionError(f"target lead {lead} outside 1..{model.n_leads}")
    comp = TARGETS.index(target)
    mu = model.zscore.mu[None, :, None, None, None]
    sigma = model.zscore.sigma[None, :, None, None, None]

    def fn(x):
        z = (x - mu) / sigma
        corrected = pcc.unet_forward(z, model) if model.use_stage1 else z
        return pcc.stage2_forward(corrected, model)[:, lead - 1, comp]
    return fn


def _eval(fn, xs) -> np.ndarray:
    return np.asarray(fn(T.Tensor(xs)).data, dtype=np.float64)


def integrated_gradients(fn, x, steps: int = 64, baseline=None, chunk: int = 8,
                         target: str = "RMM1", target_lead: int = DEFAULT_LEAD) -> AttributionMap:
    """Midpoint-rule integrated gradients of scalar-per-sample ``fn`` at a single input ``x``.

    ``fn`` maps a Tensor batch (B, *x.shape) to a Tensor of shape (B,).
    """
    if steps < 1:
        raise AttributionError("steps must be positive")
    x = np.asarray(x, dtype=np.float64)
    x0 = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    diff = x - x0
    alphas = (np.arange(steps) + 0.5) / steps
    grad_sum = np.zeros_like(x)
    for lo in range(0, steps, chunk):
        a = alphas[lo:lo + chunk]
        pts = T.Tensor(x0[None] + a.reshape((-1,) + (1,) * x.ndim) * diff[None], requires_grad=True)
        out = fn(pts)
        # samples are independent, so the gradient of the batch sum is the per-sample gradient
        T.backward(out.sum())
        grad_sum += pts.grad.sum(axis=0)
    attr = diff * grad_sum / steps
    if not np.isfinite(attr).all():
        raise AttributionError("non-finite gradients along the integration path")
    ends = _eval(fn, np.stack([x0, x]))
    return AttributionMap(target, target_lead, attr, steps, float(ends[1] - ends[0]))


def attribute(model: pcc.CorrectorModel, field_values, target: str = "RMM1",
              lead: int = DEFAULT_LEAD, steps: int = 64, chunk: int = 8) -> AttributionMap:
    if steps < MIN_STEPS:
        raise AttributionError(f"use at least {MIN_STEPS} integration steps")
    return integrated_gradients(model_target(model, target, lead), field_values, steps,
                                None, chunk, target, lead)


def composite_attributions(maps) -> AttributionMap:
    """Elementwise mean of maps sharing one target and lead."""
    maps = list(maps)
    if not maps:
        raise AttributionError("no attribution maps to composite")
    if len({(m.target, m.target_lead, m.values.shape) for m in maps}) != 1:
        raise AttributionError("maps differ in target, lead or shape")
    values = np.mean(np.stack([m.values for m in maps]), axis=0)
    dfs = float(np.mean([m.delta_f for m in maps]))
    return AttributionMap(maps[0].target, maps[0].target_lead, values, maps[0].steps, dfs,
                          maps[0].baseline_kind)


def meridional_attribution(values, grid: GridSpec = GridSpec(), band=eofrmm.DEFAULT_BAND):
    """(3, L, lat, lon) attributions -> (3, lon): band mean, then mean over leads."""
    v = values.values if isinstance(values, AttributionMap) else values
    return eofrmm.meridional_mean(v, grid, band).mean(axis=-2)


def eof_congruence(profile, basis: EofBasis, target: str = "RMM1") -> float:
    """Centered Pearson correlation of a (3, lon) profile with eof1 (RMM1) or eof2 (RMM2)."""
    p = np.asarray(profile, dtype=np.float64).ravel()
    e = basis.eof1 if target == "RMM1" else basis.eof2
    if p.size != e.size:
        raise AttributionError(f"profile length {p.size} != EOF length {e.size}")
    p, e = p - p.mean(), e - e.mean()
    den = np.sqrt((p @ p) * (e @ e))
    if den == 0:
        raise AttributionError("congruence undefined for a constant profile")
    return float(p @ e / den)


def save_attribution(amap: AttributionMap, path) -> None:
    container.save(path, ATTRIBUTION_MAGIC, {
        "target": amap.target, "baseline_kind": amap.baseline_kind,
        "target_lead": np.array([amap.target_lead]), "steps": np.array([amap.steps]),
        "delta_f": np.array([amap.delta_f]), "values": amap.values})


def load_attribution(path) -> AttributionMap:
    d = container.load(path, ATTRIBUTION_MAGIC)
    return AttributionMap(d["target"], int(d["target_lead"][0]), d["values"], int(d["steps"][0]),
                          float(d["delta_f"][0]), d["baseline_kind"])


def profile_csv(profile) -> str:
    p = np.asarray(profile)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["var", "lon_idx", "value"])
    for v in range(p.shape[0]):
        for j in range(p.shape[1]):
            w.writerow([VARIABLES[v], j, f"{p[v, j]:.10g}"])
    return buf.getvalue()
