"""The two-stage corrector: a 3D U-Net on standardized fields, then EOF projection and an
LSTM that refines the RMM sequence under a bivariate-correlation loss."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import container, eofrmm, prep, tensor as T
from .eofrmm import EofBasis
from .gridio import AnomalyField, GridSpec, chronological_split
from .prep import ZScoreParams

log = logging.getLogger(__name__)

MODEL_MAGIC = T.WEIGHTS_MAGIC
STAGES = ("stage1", "stage2", "cascade")


class ModelError(RuntimeError):
    pass


class UnfittedModelError(ModelError):
    pass


class TrainingDivergedError(ModelError):
    pass


class EmptyTrainingSetError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class UNetConfig:
    # (k_lon, k_lat) per encoder level; the decoder mirrors the schedule
    spatial_kernels: tuple = ((7, 5), (5, 3), (3, 3), (3, 3))
    temporal_kernels: tuple = (3, 7, 15, 21)
    channels: tuple = (8, 16, 32, 64)
    # (f_t, f_lat, f_lon) applied after each encoder level
    pool_factors: tuple = ((1, 2, 2), (1, 2, 2), (2, 2, 2), (2, 2, 2))
    pooling: str = "avg"
    in_channels: int = 3
    # add the input to the output head; with a zero-initialized head training starts at identity
    residual: bool = True
    padding: tuple = T.DEFAULT_PADDING

    def __post_init__(self):
        n = len(self.channels)
        lists = (self.spatial_kernels, self.temporal_kernels, self.pool_factors)
        if n < 1 or any(len(x) != n for x in lists):
            raise ValueError("kernel, pool and channel schedules must share one length")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.pooling not in ("avg", "max"):
            raise ValueError("pooling must be 'avg' or 'max'")
        for (kx, ky), kt in zip(self.spatial_kernels, self.temporal_kernels):
            if min(kx, ky, kt) < 1 or (kx % 2 == 0) or (ky % 2 == 0) or (kt % 2 == 0):
                raise ValueError("kernel extents must be odd and positive")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def kernel(self, level: int) -> tuple:
        """Conv kernel (k_t, k_lat, k_lon) for 0-based ``level``."""
        k_lon, k_lat = self.spatial_kernels[level]
        return (self.temporal_kernels[level], k_lat, k_lon)

    def level_extents(self, extents) -> list:
        """(T, H, W) at each encoder level followed by the bottleneck."""
        out = [tuple(extents)]
        for f in self.pool_factors:
            out.append(T.pooled_extents(out[-1], f))
        return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 100
    stage: str = "cascade"
    seed: int = 0
    # per-stage epoch caps; None means max_epochs
    stage1_epochs: int | None = None
    stage2_epochs: int | None = None
    # samples per forward/backward pass; gradients are accumulated up to batch_size
    micro_batch: int = 8
    # stop a stage early when the epoch loss improves by less than this relative amount
    rel_tol: float = 0.0
    finetune_unet: bool = False
    lstm_hidden: int = 32
    lstm_residual: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.batch_size < 1 or self.micro_batch < 1 or self.max_epochs < 0:
            raise ValueError("batch sizes must be positive and epochs non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for e in (self.stage1_epochs, self.stage2_epochs):
            if e is not None and e < 0:
                raise ValueError("epoch counts must be non-negative")
        if self.lstm_hidden < 1 or self.rel_tol < 0:
            raise ValueError("lstm_hidden must be positive and rel_tol non-negative")

    def epochs(self, stage: str) -> int:
        e = self.stage1_epochs if stage == "stage1" else self.stage2_epochs
        return self.max_epochs if e is None else e


@dataclass
class CorrectorModel:
    unet_config: UNetConfig
    lstm_spec: T.LstmSpec
    unet: dict
    lstm: dict
    basis: EofBasis | None = None
    zscore: ZScoreParams | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    n_leads: int = 40
    use_stage1: bool = True
    use_stage2: bool = True
    lstm_residual: bool = True
    seed: int = 0
    climatology_ref: str = ""
    history: list = field(default_factory=list)  # (epoch, stage, loss)

    @property
    def fitted(self) -> bool:
        return self.basis is not None and self.zscore is not None

    def require_fitted(self):
        if not self.fitted:
            raise UnfittedModelError("model has no EOF basis or Z-score parameters attached")

    def parameters(self, which: str = "all") -> list:
        out = []
        if which in ("all", "unet"):
            out += [self.unet[k] for k in sorted(self.unet)]
        if which in ("all", "lstm"):
            out += [self.lstm[k] for k in sorted(self.lstm)]
        return out


# ---------------------------------------------------------------- construction

def _conv_params(rng, c_in, c_out, kernel):
    fan = math.prod(kernel)
    w = T.glorot(rng, (c_out, c_in) + tuple(kernel), c_in * fan, c_out * fan)
    return T.Tensor(w, True), T.Tensor(np.zeros(c_out), True)


def init_unet(cfg: UNetConfig, rng: np.random.Generator) -> dict:
    params = {}
    c_prev = cfg.in_channels
    for lvl, c in enumerate(cfg.channels):
        params[f"enc{lvl}.w"], params[f"enc{lvl}.b"] = _conv_params(rng, c_prev, c, cfg.kernel(lvl))
        c_prev = c
    c_up = cfg.channels[-1]
    for lvl in reversed(range(cfg.levels)):
        c = cfg.channels[lvl]
        params[f"dec{lvl}.w"], params[f"dec{lvl}.b"] = _conv_params(rng, c_up + c, c, cfg.kernel(lvl))
        c_up = c
    params["head.w"] = T.Tensor(np.zeros((cfg.in_channels, cfg.channels[0], 1, 1, 1)), True)
    params["head.b"] = T.Tensor(np.zeros(cfg.in_channels), True)
    return params


def build_model(unet_config: UNetConfig = UNetConfig(), lstm_hidden: int = 32, seed: int = 0,
                grid: GridSpec = GridSpec(), n_leads: int = 40, **flags) -> CorrectorModel:
    rng = np.random.default_rng(seed)
    spec = T.LstmSpec(2, lstm_hidden, 2)
    return CorrectorModel(unet_config, spec, init_unet(unet_config, rng), T.init_lstm(spec, rng),
                          grid=grid, n_leads=n_leads, seed=seed, **flags)


def unet_param_count(cfg: UNetConfig) -> int:
    total, c_prev = 0, cfg.in_channels
    for lvl, c in enumerate(cfg.channels):
        total += c * c_prev * math.prod(cfg.kernel(lvl)) + c
        c_prev = c
    c_up = cfg.channels[-1]
    for lvl in reversed(range(cfg.levels)):
        c = cfg.channels[lvl]
        total += c * (c_up + c) * math.prod(cfg.kernel(lvl)) + c
        c_up = c
    return total + cfg.in_channels * cfg.channels[0] + cfg.in_channels


def count_parameters(model: CorrectorModel) -> tuple:
    """(U-Net count, LSTM count) from the parameter shapes."""
    unet = sum(p.size for p in model.unet.values())
    lstm = sum(p.size for p in model.lstm.values())
    return unet, lstm


# ---------------------------------------------------------------- stage 1

def unet_forward(x, model: CorrectorModel):
    """(N, 3, T, H, W) standardized fields -> corrected fields of the same shape."""
    cfg, p = model.unet_config, model.unet
    x = T.as_tensor(x)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"U-Net expects (N, {cfg.in_channels}, T, H, W), got {x.shape}")
    pool = T.pool_avg if cfg.pooling == "avg" else T.pool_max
    skips, h = [], x
    for lvl in range(cfg.levels):
        h = T.relu(T.conv3d(h, p[f"enc{lvl}.w"], p[f"enc{lvl}.b"], cfg.padding))
        skips.append(h)
        h = pool(h, cfg.pool_factors[lvl])
    for lvl in reversed(range(cfg.levels)):
        skip = skips[lvl]
        h = T.upsample_nn(h, skip.shape[2:], cfg.pool_factors[lvl])
        h = T.concat_channels(h, skip)
        h = T.relu(T.conv3d(h, p[f"dec{lvl}.w"], p[f"dec{lvl}.b"], cfg.padding))
    out = T.conv3d(h, p["head.w"], p["head.b"], cfg.padding)
    return out + x if cfg.residual else out


def stage1_loss(corrected, truth):
    corrected, truth = T.as_tensor(corrected), T.as_tensor(truth)
    if corrected.shape != truth.shape:
        raise ValueError(f"shape mismatch {corrected.shape} vs {truth.shape}")
    d = corrected - truth
    return (d * d).mean()


# ---------------------------------------------------------------- stage 2

def projection_operator(model: CorrectorModel):
    """Constants of the affine map from standardized fields to preliminary RMM.

    Returns (rows, sigma, mu, M) with M of shape (3 * n_lon, 2) folding the per-field norms,
    the EOFs and the RMM scales.
    """
    model.require_fitted()
    b, z = model.basis, model.zscore
    rows = model.grid.band_rows(*b.band)
    per_elem = np.repeat(1.0 / b.norms, b.n_lon)
    M = per_elem[:, None] * b.matrix / b.scale[None, :]
    return rows, z.sigma, z.mu, M


def project_standardized(x, model: CorrectorModel):
    """(N, 3, L, H, W) standardized fields -> (N, L, 2) preliminary RMM, differentiable."""
    rows, sigma, mu, M = projection_operator(model)
    x = T.as_tensor(x)
    if x.shape[1] != 3 or x.shape[-1] * 3 != M.shape[0]:
        raise ValueError(f"field shape {x.shape} does not match the EOF basis")
    phys = x * sigma[None, :, None, None, None] + mu[None, :, None, None, None]
    band = phys[:, :, :, rows[0]:rows[-1] + 1, :].mean(axis=3)       # (N, 3, L, W)
    prof = band.transpose(0, 2, 1, 3)                                # (N, L, 3, W)
    n, L = prof.shape[:2]
    return prof.reshape(n, L, -1) @ M


def refine(prelim, model: CorrectorModel):
    """LSTM refinement of a (N, L, 2) preliminary RMM sequence."""
    if not model.use_stage2:
        return T.as_tensor(prelim)
    out = T.lstm_forward(prelim, model.lstm, model.lstm_spec)
    return out + prelim if model.lstm_residual else out


def stage2_forward(corrected, model: CorrectorModel):
    return refine(project_standardized(corrected, model), model)


def cor_terms(refined, observed):
    """Per-lead numerator and squared norms of the bivariate correlation across the batch."""
    a = np.asarray(observed, dtype=np.float64)
    b = T.as_tensor(refined)
    num = (b * a).sum(axis=(0, 2))
    bb = (b * b).sum(axis=(0, 2))
    aa = (a * a).sum(axis=(0, 2))
    return num, bb, aa


def stage2_loss_with_flags(refined, observed):
    """Negative mean bivariate COR over non-degenerate leads, plus the degenerate-lead mask."""
    b = T.as_tensor(refined)
    a = np.asarray(observed, dtype=np.float64)
    if b.shape != a.shape or b.ndim != 3 or b.shape[2] != 2:
        raise ValueError(f"expected matching (N, L, 2) batches, got {b.shape} and {a.shape}")
    if b.shape[0] < 2:
        raise ValueError("bivariate correlation needs at least two forecasts")
    num, bb, aa = cor_terms(b, a)
    degenerate = ~((aa > 0) & (bb.data > 0))
    if degenerate.all():
        return T.Tensor(0.0), degenerate
    keep = np.flatnonzero(~degenerate)
    cor = num[keep] / (T.sqrt(bb[keep]) * np.sqrt(aa[keep]))
    return -cor.mean(), degenerate


def stage2_loss(refined, observed):
    loss, degenerate = stage2_loss_with_flags(refined, observed)
    if degenerate.any():
        log.info("stage-2 loss skipped %d degenerate lead(s)", int(degenerate.sum()))
    return loss


# ---------------------------------------------------------------- data helpers

def stack_cases(cases, which: str) -> np.ndarray:
    """(N, 3, L, H, W) float32 array of forecast or truth values."""
    return np.stack([getattr(c, which).values for c in cases])


def observed_rmm(truth, model: CorrectorModel) -> np.ndarray:
    """Observed RMM (N, L, 2) from physical truth fields."""
    return eofrmm.rmm_of_field(truth, model.grid, model.basis)


def fit_preprocessing(train_cases, grid: GridSpec, band=eofrmm.DEFAULT_BAND):
    """Z-score parameters and EOF basis from the truth fields of the training cases only."""
    truth = stack_cases(train_cases, "truth")
    zs = prep.zscore_fit(truth, var_axis=1)
    prof = eofrmm.profiles_from_fields(truth, grid, band)  # (N, L, 3, W)
    basis = eofrmm.fit_eof(prof.reshape(-1, 3, grid.n_lon), grid, band)
    return zs, basis


def _standardize(values, model):
    return prep.zscore_apply(values, model.zscore, var_axis=1)


def _unet_eval(values, model, micro: int):
    """Corrected standardized fields, no graph; processed in micro-batches."""
    out = np.empty(values.shape, dtype=np.float64)
    for lo in range(0, len(values), micro):
        x = _standardize(values[lo:lo + micro], model)
        out[lo:lo + micro] = unet_forward(x, model).data if model.use_stage1 else x
    return out


def preliminary_rmm(values, model: CorrectorModel, micro: int = 8) -> np.ndarray:
    """(N, L, 2) preliminary RMM of forecasts passed through the (frozen) U-Net."""
    out = []
    for lo in range(0, len(values), micro):
        corrected = _unet_eval(values[lo:lo + micro], model, micro)
        out.append(project_standardized(corrected, model).data)
    return np.concatenate(out) if out else np.zeros((0, model.n_leads, 2))


# ---------------------------------------------------------------- training

def _check_finite(loss, stage, epoch, batch):
    v = float(loss)
    if not math.isfinite(v):
        raise TrainingDivergedError(f"non-finite {stage} loss {v} at epoch {epoch}, batch {batch}")
    return v


def _converged(losses, rel_tol):
    if rel_tol <= 0 or len(losses) < 2:
        return False
    prev, cur = losses[-2], losses[-1]
    return abs(prev - cur) <= rel_tol * max(abs(prev), 1e-12)


def _train_stage1(model, forecast, truth, cfg: TrainConfig, rng):
    params = model.parameters("unet")
    opt = T.Adam(params, cfg.learning_rate)
    n = len(forecast)
    losses = []
    for epoch in range(cfg.epochs("stage1")):
        order = rng.permutation(n)
        total = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            opt.zero_grad()
            batch_loss = 0.0
            for mlo in range(0, len(idx), cfg.micro_batch):
                mi = idx[mlo:mlo + cfg.micro_batch]
                x = _standardize(forecast[mi], model)
                y = _standardize(truth[mi], model)
                loss = stage1_loss(unet_forward(x, model), y) * (len(mi) / len(idx))
                batch_loss += _check_finite(loss.data, "stage1", epoch, bi)
                T.backward(loss)
            opt.step()
            total += batch_loss * len(idx)
        losses.append(total / n)
        model.history.append((epoch, "stage1", losses[-1]))
        log.info("stage1 epoch %d loss %.6g", epoch, losses[-1])
        if _converged(losses, cfg.rel_tol):
            break


def _train_stage2(model, forecast, obs_rmm, cfg: TrainConfig, rng):
    joint = cfg.finetune_unet and model.use_stage1
    params = model.parameters("all" if joint else "lstm")
    opt = T.Adam(params, cfg.learning_rate)
    n = len(forecast)
    prelim = None if joint else preliminary_rmm(forecast, model, cfg.micro_batch)
    losses = []
    for epoch in range(cfg.epochs("stage2")):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            if len(idx) < 2:
                continue
            opt.zero_grad()
            if joint:
                x = T.Tensor(_standardize(forecast[idx], model))
                src = unet_forward(x, model) if model.use_stage1 else x
                refined = stage2_forward(src, model)
            else:
                refined = refine(T.Tensor(prelim[idx]), model)
            loss, degenerate = stage2_loss_with_flags(refined, obs_rmm[idx])
            if degenerate.all() or not loss.requires_grad:
                continue
            total += _check_finite(loss.data, "stage2", epoch, bi) * len(idx)
            count += len(idx)
            T.backward(loss)
            opt.step()
        losses.append(total / max(count, 1))
        model.history.append((epoch, "stage2", losses[-1]))
        log.info("stage2 epoch %d loss %.6g", epoch, losses[-1])
        if _converged(losses, cfg.rel_tol):
            break


def train(dataset, cfg: TrainConfig = TrainConfig(), unet_config: UNetConfig = UNetConfig(),
          model: CorrectorModel | None = None, zscore: ZScoreParams | None = None,
          basis: EofBasis | None = None) -> CorrectorModel:
    """Fit preprocessing and the EOF basis on the training split, then train the stages.

    ``stage`` selects what is trained: "stage1" (U-Net only; refined index = projection),
    "stage2" (LSTM on the uncorrected projection) or "cascade" (both, in sequence).
    """
    train_cases, _ = chronological_split(dataset)
    if not train_cases:
        raise EmptyTrainingSetError("training split is empty")
    grid = dataset.grid
    n_leads = train_cases[0].forecast.n_leads
    if model is None:
        model = build_model(unet_config, cfg.lstm_hidden, cfg.seed, grid, n_leads,
                            lstm_residual=cfg.lstm_residual)
    model.use_stage1 = cfg.stage in ("stage1", "cascade")
    model.use_stage2 = cfg.stage in ("stage2", "cascade")
    if zscore is None or basis is None:
        fitted_z, fitted_b = fit_preprocessing(train_cases, grid)
        zscore = fitted_z if zscore is None else zscore
        basis = fitted_b if basis is None else basis
    model.zscore, model.basis = zscore, basis
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    forecast = stack_cases(train_cases, "forecast")
    truth = stack_cases(train_cases, "truth")
    if model.use_stage1:
        _train_stage1(model, forecast, truth, cfg, rng)
    if model.use_stage2:
        _train_stage2(model, forecast, observed_rmm(truth, model), cfg, rng)
    return model


# ---------------------------------------------------------------- inference

def correct_batch(model: CorrectorModel, values, micro: int = 8):
    """Physical forecast fields (N, 3, L, H, W) -> (corrected physical fields, refined RMM)."""
    model.require_fitted()
    values = np.asarray(values)
    fields, rmm = [], []
    for lo in range(0, len(values), micro):
        z = _unet_eval(values[lo:lo + micro], model, micro)
        fields.append(prep.zscore_invert(z, model.zscore, var_axis=1))
        rmm.append(stage2_forward(T.Tensor(z), model).data)
    return np.concatenate(fields), np.concatenate(rmm)


def correct(model: CorrectorModel, forecast: AnomalyField):
    """Single-case inference: (corrected AnomalyField, refined RmmSeries)."""
    fields, rmm = correct_batch(model, forecast.values[None])
    fld = AnomalyField(fields[0], forecast.init_date, forecast.grid, forecast.variables)
    return fld, eofrmm.RmmSeries(rmm[0], forecast.init_date)


def raw_rmm(model: CorrectorModel, values) -> np.ndarray:
    """RMM of the uncorrected forecast fields."""
    model.require_fitted()
    return eofrmm.rmm_of_field(values, model.grid, model.basis)


# ---------------------------------------------------------------- linear baseline

@dataclass(frozen=True)
class LinearBaseline:
    """Per lead, variable and grid point: truth ~ slope * forecast + intercept."""

    slope: np.ndarray
    intercept: np.ndarray

    def apply(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.slope + self.intercept


def fit_linear_baseline(forecast, truth) -> LinearBaseline:
    f = np.asarray(forecast, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    fm, ym = f.mean(axis=0), y.mean(axis=0)
    var = ((f - fm) ** 2).mean(axis=0)
    cov = ((f - fm) * (y - ym)).mean(axis=0)
    slope = np.divide(cov, var, out=np.zeros_like(cov), where=var > 0)
    return LinearBaseline(slope, ym - slope * fm)


# ---------------------------------------------------------------- persistence

def _manifest(model: CorrectorModel) -> str:
    return json.dumps({
        "unet_config": asdict(model.unet_config),
        "lstm_spec": asdict(model.lstm_spec),
        "grid": asdict(model.grid),
        "n_leads": model.n_leads,
        "use_stage1": model.use_stage1,
        "use_stage2": model.use_stage2,
        "lstm_residual": model.lstm_residual,
        "seed": model.seed,
        "climatology_ref": model.climatology_ref,
        "history": [list(h) for h in model.history],
    }, sort_keys=True)


def model_entries(model: CorrectorModel) -> dict:
    model.require_fitted()
    entries = {"manifest": _manifest(model)}
    for k in sorted(model.unet):
        entries[f"unet/{k}"] = model.unet[k].data
    for k in sorted(model.lstm):
        entries[f"lstm/{k}"] = model.lstm[k].data
    entries["zscore/mu"] = model.zscore.mu
    entries["zscore/sigma"] = model.zscore.sigma
    for k, v in model.basis._entries().items():
        entries[f"basis/{k}"] = v
    return entries


def save_model(model: CorrectorModel, path) -> None:
    container.save(path, MODEL_MAGIC, model_entries(model))


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, list) else x


def load_model(path) -> CorrectorModel:
    d = container.load(path, MODEL_MAGIC)
    try:
        man = json.loads(d["manifest"])
        ucfg = UNetConfig(**{k: _tuples(v) for k, v in man["unet_config"].items()})
        spec = T.LstmSpec(**man["lstm_spec"])
        unet = {k[5:]: T.Tensor(v, True) for k, v in d.items() if k.startswith("unet/")}
        lstm = {k[5:]: T.Tensor(v, True) for k, v in d.items() if k.startswith("lstm/")}
        basis = EofBasis(d["basis/eof1"], d["basis/eof2"], d["basis/explained_variance"],
                         d["basis/scale"], d["basis/norms"], tuple(float(b) for b in d["basis/band"]))
        zs = ZScoreParams(d["zscore/mu"], d["zscore/sigma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"incompatible checkpoint {path}: {exc}") from exc
    model = CorrectorModel(ucfg, spec, unet, lstm, basis, zs, GridSpec(**man["grid"]), man["n_leads"],
                           man["use_stage1"], man["use_stage2"], man["lstm_residual"], man["seed"],
                           man["climatology_ref"], [tuple(h) for h in man["history"]])
    ref = init_unet(ucfg, np.random.default_rng(0))
    if {k: v.shape for k, v in ref.items()} != {k: v.shape for k, v in unet.items()}:
        raise ModelError("checkpoint U-Net parameters do not match its configuration")
    return model


def training_log_csv(model: CorrectorModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "stage", "loss"])
    for epoch, stage, loss in model.history:
        w.writerow([epoch, stage, f"{loss:.10g}"])
    return buf.getvalue()


def with_flags(model: CorrectorModel, **flags) -> CorrectorModel:
    """Shallow copy with ablation flags changed (parameters shared, not copied)."""
    return replace(model, **flags)
