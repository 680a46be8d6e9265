"""Toy-scale comparison of the UNet1 baseline against DDT_UNet2."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import metrics
from .dataio import SynthConfig, normalize, synth_blobs
from .morphology import Cls, btgt, dtgt, inverse_normalize
from .nn.training import PipelineKind, TrainConfig, predict, train


@dataclass(frozen=True)
class OrderingConfig:
    n_train: int = 40
    n_test: int = 20
    image_size: int = 48
    n_blobs: tuple[int, int] = (4, 7)
    radius: tuple[float, float] = (5.0, 8.0)
    noise_sigma: float = 0.03
    epochs: int = 100
    batch_size: int = 10
    learning_rate: float = 1e-3
    depth: int = 2
    base_filters: int = 8

    def to_json(self) -> dict:
        return asdict(self)


def make_dataset(cfg: OrderingConfig, seed: int):
    """Normalized images, inverse maps and class maps of overlapping blobs."""
    base = SynthConfig(image_size=cfg.image_size, n_blobs=cfg.n_blobs, radius=cfg.radius,
                       noise_sigma=cfg.noise_sigma, overlap_allowed=True)
    images, inverse, classes = [], [], []
    for i in range(cfg.n_train + cfg.n_test):
        s = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        img, gt = synth_blobs(replace(base, seed=s))
        images.append(normalize(img))
        inverse.append(inverse_normalize(dtgt(gt), gt))
        classes.append(btgt(gt))
    return np.stack(images), np.stack(inverse), np.stack(classes)


def score(pipe, images, classes) -> dict:
    preds = [predict(pipe, im).output for im in images]
    dice = np.array([metrics.dice_per_class(p, g) for p, g in zip(preds, classes)])
    wdmc = [metrics.wdmc_from_dice(d) for d in dice]
    return {"wdmc": float(np.mean(wdmc)), "border_dice": float(dice[:, Cls.BORDER].mean()),
            "fg_dice": float(dice[:, Cls.FOREGROUND].mean())}


def ordering_run(cfg: OrderingConfig, seed: int) -> dict:
    """Train both pipelines on one seeded split and score the held-out part."""
    t0 = time.perf_counter()
    images, inverse, classes = make_dataset(cfg, seed)
    n = cfg.n_train
    tcfg = TrainConfig(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                       epochs=cfg.epochs, seed=seed)
    out = {"seed": seed}
    for kind in (PipelineKind.UNET1, PipelineKind.DDT_UNET2):
        pipe = train(kind, images[:n], tcfg, inverse_targets=inverse[:n], class_targets=classes[:n],
                     depth=cfg.depth, base_filters=cfg.base_filters)
        out[kind.value] = score(pipe, images[n:], classes[n:])
    a, b = out[PipelineKind.UNET1.value], out[PipelineKind.DDT_UNET2.value]
    out["wdmc_ok"] = b["wdmc"] >= a["wdmc"] - 0.01
    out["border_better"] = b["border_dice"] > a["border_dice"]
    out["seconds"] = time.perf_counter() - t0
    return out


def ordering_verdict(runs: list[dict], min_wins: int = 3) -> tuple[bool, int]:
    """A seed is a win when both the WDMC margin and the Border ordering hold."""
    wins = sum(1 for r in runs if r["wdmc_ok"] and r["border_better"])
    return wins >= min_wins, wins
