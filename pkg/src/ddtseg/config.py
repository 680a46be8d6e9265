"""Run configuration: one JSON file, every field defaulted."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .metrics import BDE_SOURCES, check_weights
from .nn.training import PipelineKind, TrainConfig
from .nn.unet import DTYPES, OUTPUT_ACTIVATIONS

NORMALIZE_MODES = ("minmax", "fixed16")
BDE_MODES = ("symmetric", "pred-to-gt")


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_filters: int = 8
    precision: str = "double"
    ddt_activation: str = "linear"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("net.depth: must be >= 1")
        if self.base_filters < 1:
            raise ConfigError("net.base_filters: must be >= 1")
        if self.precision not in DTYPES:
            raise ConfigError(f"net.precision: expected one of {sorted(DTYPES)}")
        if self.ddt_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"net.ddt_activation: expected one of {list(OUTPUT_ACTIVATIONS)}")


def default_jobs() -> int:
    raw = os.environ.get("DDTSEG_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RunConfig:
    """Everything a train / predict / cv run needs.

    ``train`` holds the optimiser settings; its seed is always taken from
    the top-level ``seed`` so a single number pins a whole run.
    """

    dataset_dir: str = "data"
    prepared_dir: str = "prepared"
    output_dir: str = "runs/default"
    pipeline: str = "DDT_UNet2"
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tile_size: int = 256
    normalize: str = "minmax"
    watershed_h: float = 0.1
    wdmc_weights: tuple[float, float, float] = (0.3, 0.3, 0.4)
    bde_source: str = "classes"
    bde_mode: str = "symmetric"
    std_ddof: int = 0
    seed: int = 0
    k: int = 5
    jobs: int = field(default_factory=default_jobs)

    def __post_init__(self):
        try:
            PipelineKind(self.pipeline)
        except ValueError:
            raise ConfigError(f"pipeline: expected one of {[p.value for p in PipelineKind]}") from None
        if self.tile_size < 1:
            raise ConfigError("tile_size: must be >= 1")
        if self.normalize not in NORMALIZE_MODES:
            raise ConfigError(f"normalize: expected one of {list(NORMALIZE_MODES)}")
        if not 0 <= self.watershed_h < 1:
            raise ConfigError("watershed_h: must lie in [0, 1)")
        try:
            check_weights(self.wdmc_weights)
        except Exception as exc:
            raise ConfigError(f"wdmc_weights: {exc}") from None
        if self.bde_source not in BDE_SOURCES:
            raise ConfigError(f"bde_source: expected one of {list(BDE_SOURCES)}")
        if self.bde_mode not in BDE_MODES:
            raise ConfigError(f"bde_mode: expected one of {list(BDE_MODES)}")
        if self.std_ddof not in (0, 1):
            raise ConfigError("std_ddof: must be 0 or 1")
        if self.k < 2:
            raise ConfigError("k: must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs: must be >= 1")

    @property
    def kind(self) -> PipelineKind:
        return PipelineKind(self.pipeline)

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def to_json(self) -> dict:
        out = asdict(self)
        out["wdmc_weights"] = list(self.wdmc_weights)
        out["train"].pop("seed")
        out.pop("jobs")
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config: expected a JSON object")
        obj = dict(obj)
        _reject_unknown(obj, cls, "")
        try:
            net = obj.pop("net", {})
            _reject_unknown(net, NetConfig, "net.")
            train = dict(obj.pop("train", {}))
            train.pop("seed", None)
            _reject_unknown(train, TrainConfig, "train.")
            if "wdmc_weights" in obj:
                obj["wdmc_weights"] = tuple(obj["wdmc_weights"])
            return cls(net=NetConfig(**net), train=_train_config(train), **obj)
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None


def _train_config(values: dict) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"train.{exc}") from None


def _reject_unknown(obj: dict, cls, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from None
    return RunConfig.from_json(obj)
