"""Pipeline configurations, mini-batch training and inference."""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import ConfigError
from ..imgcore import Cls
from . import losses
from .adam import adam_step
from .unet import UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)


class PipelineKind(str, enum.Enum):
    UNET1 = "UNet1"
    DDT = "DDT"
    DDT_UNET1 = "DDT_UNet1"
    DDT_UNET2 = "DDT_UNet2"

    @property
    def composite(self) -> bool:
        return self in (PipelineKind.DDT_UNET1, PipelineKind.DDT_UNET2)

    @property
    def stages(self) -> tuple[str, ...]:
        if self is PipelineKind.UNET1:
            return ("top",)
        if self is PipelineKind.DDT:
            return ("ddt",)
        return ("ddt", "top")

    @property
    def top_channels(self) -> int:
        return 2 if self is PipelineKind.DDT_UNET2 else 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; defaults are batch 10, lr 0.001, Adam, 50 epochs."""

    batch_size: int = 10
    learning_rate: float = 1e-3
    epochs: int = 50
    loss: str = "cross_entropy"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    top_epochs: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or (self.top_epochs is not None and self.top_epochs < 0):
            raise ConfigError("epochs must be non-negative")
        if self.loss not in ("cross_entropy", "mae"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_json(self) -> dict:
        return asdict(self)


LOSSES = {"cross_entropy": losses.cross_entropy, "mae": losses.mae}


def fit(model: UNet, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
        stage: str = "") -> UNet:
    """Train ``model`` in place with seeded, epoch-shuffled mini-batches.

    Appends ``{"stage", "epoch", "loss"}`` records to ``model.history``,
    where ``loss`` is the sample-weighted mean of the epoch's batch losses.
    """
    loss_fn = LOSSES[cfg.loss]
    n = len(inputs)
    if n == 0:
        raise ConfigError("no training samples")
    if len(targets) != n:
        raise ConfigError("inputs and targets differ in length")
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, n)
    start = len([r for r in model.history if r.get("stage") == stage])
    for epoch in range(start + 1, start + cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            out = model.forward(inputs[idx], record_tape=True)
            loss, dout = loss_fn(out, targets[idx])
            grads = model.backward(dout)
            adam_step(model, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * len(idx)
        model.history.append({"stage": stage, "epoch": epoch, "loss": total / n})
        log.debug("%s epoch %d loss %.6f", stage, epoch, total / n)
    return model


def run_model(model: UNet, inputs: np.ndarray, batch_size: int = 10) -> np.ndarray:
    """Forward pass in batches without recording a tape."""
    outs = [model.forward(inputs[lo:lo + batch_size]) for lo in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def ddt_maps_of(model: UNet, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
    """DDT maps for a stack of frames, clipped to the [0, 1] target range.

    The same clipped maps feed the top model during training and inference.
    """
    return np.clip(run_model(model, images[:, None], batch_size)[:, 0], 0.0, 1.0)


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ConfigError(f"expected a stack of 2D images, got shape {arr.shape}")
    return arr


def top_inputs(kind: PipelineKind, images: np.ndarray, ddt_maps: np.ndarray | None) -> np.ndarray:
    """Stack the top-model channels: the image, the DDT map, or DDT map then image."""
    images = _as_batch(images)
    if kind is PipelineKind.UNET1:
        return images[:, None]
    if kind is PipelineKind.DDT_UNET1:
        return ddt_maps[:, None]
    if kind is PipelineKind.DDT_UNET2:
        return np.stack([ddt_maps, images], axis=1)
    raise ConfigError(f"{kind.value} has no top model")


@dataclass
class Pipeline:
    kind: PipelineKind
    models: dict[str, UNet] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return max(m.config.depth for m in self.models.values())

    def require(self) -> None:
        missing = [s for s in self.kind.stages if s not in self.models]
        if missing:
            raise ConfigError(f"{self.kind.value} pipeline lacks its {', '.join(missing)} model")
        if "top" in self.models and self.models["top"].config.in_channels != self.kind.top_channels:
            raise ConfigError(f"top model expects {self.models['top'].config.in_channels} channels, "
                              f"{self.kind.value} feeds {self.kind.top_channels}")


def train(kind: PipelineKind | str, images, cfg: TrainConfig = TrainConfig(), *,
          inverse_targets=None, class_targets=None, depth: int = 2, base_filters: int = 8,
          precision: str = "double", ddt_activation: str = "linear") -> Pipeline:
    """Train every model a pipeline needs.

    ``images`` are normalized 2D frames. The DDT back-bone regresses
    ``inverse_targets`` with MAE; class heads fit ``class_targets`` with
    cross-entropy. Composite pipelines train the DDT first, freeze it and
    feed its output (plus the image for DDT_UNet2) to the top model.
    """
    kind = PipelineKind(kind)
    images = _as_batch(images)
    needs_inverse = "ddt" in kind.stages
    needs_class = "top" in kind.stages
    if needs_inverse and inverse_targets is None:
        raise ConfigError(f"{kind.value} needs inverse distance targets")
    if needs_class and class_targets is None:
        raise ConfigError(f"{kind.value} needs class map targets")
    pipe = Pipeline(kind)
    ddt_maps = None
    if needs_inverse:
        inv = _as_batch(inverse_targets)
        if inv.shape != images.shape:
            raise ConfigError("inverse targets do not match the images")
        ucfg = UNetConfig(1, 1, depth, base_filters, "regression1", precision, ddt_activation)
        model = build_unet(ucfg, cfg.seed)
        fit(model, images[:, None], inv[:, None], replace(cfg, loss="mae"), stage="ddt")
        pipe.models["ddt"] = model
        if needs_class:
            ddt_maps = ddt_maps_of(model, images, cfg.batch_size)
    if needs_class:
        cls = np.asarray(class_targets)
        if cls.ndim == 2:
            cls = cls[None]
        if cls.shape != images.shape:
            raise ConfigError("class targets do not match the images")
        x = top_inputs(kind, images, ddt_maps)
        ucfg = UNetConfig(kind.top_channels, 3, depth, base_filters, "logits3", precision)
        model = build_unet(ucfg, cfg.seed + 1)
        top_cfg = replace(cfg, loss="cross_entropy", seed=cfg.seed + 1,
                          epochs=cfg.top_epochs if cfg.top_epochs is not None else cfg.epochs)
        fit(model, x, cls, top_cfg, stage="top")
        pipe.models["top"] = model
    return pipe


def _pad_to(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return img
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="symmetric")


@dataclass
class Prediction:
    output: np.ndarray            # class map, or the inverse map for the DDT pipeline
    ddt: np.ndarray | None = None  # intermediate DDT map of composite pipelines
    probabilities: np.ndarray | None = None


def predict(pipe: Pipeline, image: np.ndarray) -> Prediction:
    """Run a trained pipeline on one normalized frame of any size.

    Frames are mirror-padded up to a multiple of ``2**depth`` and cropped
    back afterwards. DDT maps are clipped to [0, 1].
    """
    pipe.require()
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    padded = _pad_to(image, 2 ** pipe.depth)
    ddt = None
    if "ddt" in pipe.models:
        ddt = ddt_maps_of(pipe.models["ddt"], padded[None])[0]
        if pipe.kind is PipelineKind.DDT:
            return Prediction(ddt[:h, :w], ddt[:h, :w])
    x = top_inputs(pipe.kind, padded[None], None if ddt is None else ddt[None])
    logits = pipe.models["top"].forward(x)
    probs = losses.softmax(logits)[0, :, :h, :w]
    classes = probs.argmax(axis=0).astype(np.uint8)
    return Prediction(classes, None if ddt is None else ddt[:h, :w], probs)


def logits_to_classes(logits: np.ndarray) -> np.ndarray:
    return np.asarray(logits).argmax(axis=-3).astype(np.uint8)
