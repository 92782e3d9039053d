"""Strict JSON run configuration with dotted-key overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .gridio import SyntheticConfig
from .pcc import TrainConfig, UNetConfig

OUTPUT_ROOT_ENV = "PCCMJO_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PrepConfig:
    remove_climatology: bool = False
    remove_lowfreq: bool = False
    band_south: float = -15.0
    band_north: float = 15.0


@dataclass(frozen=True)
class VerifyConfig:
    min_amplitude: float = 1.0
    min_stratum_count: int = 10
    composite_lead: int = 20
    hovmoller_case: int = 0


@dataclass(frozen=True)
class AttributeConfig:
    target_lead: int = 20
    steps: int = 32
    n_samples: int = 8
    chunk: int = 8


@dataclass(frozen=True)
class AblateConfig:
    variants: tuple = ("default", "uniform_spatial", "reversed_temporal", "no_temporal",
                       "no_stage1", "no_stage2")


@dataclass(frozen=True)
class RunConfig:
    workdir: str = ""
    # when set, overrides the synthetic and training seeds
    seed: int | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(channels=(4, 8, 8, 16)))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(stage1_epochs=2,
                                                                   stage2_epochs=300))
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    attribute: AttributeConfig = field(default_factory=AttributeConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def resolved_workdir(self) -> str:
        return self.workdir or os.environ.get(OUTPUT_ROOT_ENV, "") or "pccmjo_run"


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, list) else x


def _merge_nested(cls, current, value, path):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path.rstrip('.') or 'config'}")
    kwargs = {}
    for k, v in value.items():
        cur = getattr(current, k)
        if is_dataclass(cur):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be an object")
            kwargs[k] = _merge_nested(type(cur), cur, v, f"{path}{k}.")
        else:
            kwargs[k] = _tuples(v)
    try:
        return replace(current, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in {path.rstrip('.') or 'config'}: {exc}") from exc


def to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge_nested(RunConfig, RunConfig(), data, "")
    return with_seed(cfg, cfg.seed) if cfg.seed is not None else cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(raw)
    return data


def load(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate the run seed into every seeded component."""
    return replace(cfg, seed=seed, synthetic=replace(cfg.synthetic, rng_seed=seed),
                   train=replace(cfg.train, seed=seed))


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"

