"""Siamese and triplet training loops."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, BackboneParams, build_backbone, embed, embed_triplet
from .data import Dataset, sample_pair, sample_triplet
from .tensor import GradientRecorder, Tensor

MODES = ("siamese", "triplet")
DEFAULT_EPOCHS = {"siamese": 50, "triplet": 100}
# Short runs on the narrow desk backbone: the siamese score offset starts at 0 and
# needs a larger step to go negative in 10 epochs; triplet collapses above 0.001.
DESK_LR = {"siamese": 0.01, "triplet": 0.001}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    mode: str = "siamese"
    epochs: Optional[int] = None  # resolved to 50 (siamese) / 100 (triplet)
    instances_per_epoch: int = 5000
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    margin: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.mode]
        if self.epochs < 0 or self.instances_per_epoch <= 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0; instances_per_epoch and batch_size > 0")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    checksum: str = ""

    def __len__(self) -> int:
        return len(self.epoch_loss)


def _images(samples, attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr).pixels for s in samples])


def siamese_score(params: BackboneParams, first, second) -> Tensor:
    """``sigmoid(w * ||embed(a) - embed(b)|| + c)`` with both branches on one parameter set.

    ``first``/``second`` are images or batches of images.
    """
    d = T.l2_distance(embed(params, first), embed(params, second))
    return T.sigmoid(d * params["score.w"] + params["score.c"])


def siamese_loss(score: Tensor, label) -> Tensor:
    """Mean binary cross-entropy of the twin score against 0 (same) / 1 (different)."""
    return T.mean(T.bce_loss(score, label))


def triplet_loss(fa: Tensor, fp: Tensor, fn: Tensor, margin: float = 0.4) -> Tensor:
    """``max(0, |fa-fp|² - |fa-fn|² + margin)``, averaged over a batch."""
    if not (fa.shape == fp.shape == fn.shape):
        raise T.ShapeError(f"triplet_loss: shapes {fa.shape}, {fp.shape}, {fn.shape} differ")
    hinge = T.relu(T.l2_distance_sq(fa, fp) - T.l2_distance_sq(fa, fn) + margin)
    return T.mean(hinge)


def _batch_loss(params: BackboneParams, batch, config: TrainConfig) -> Tensor:
    if config.mode == "siamese":
        labels = np.array([s.label for s in batch])
        score = siamese_score(params, _images(batch, "first"), _images(batch, "second"))
        return siamese_loss(score, labels)
    fa = embed_triplet(params, _images(batch, "anchor"))
    fp = embed_triplet(params, _images(batch, "positive"))
    fn = embed_triplet(params, _images(batch, "negative"))
    return triplet_loss(fa, fp, fn, config.margin)


def train(
    dataset: Dataset,
    config: TrainConfig,
    backbone: BackboneConfig = BackboneConfig(),
    params: Optional[BackboneParams] = None,
    progress: Optional[TextIO] = None,
    on_epoch: Optional[Callable[[int, BackboneParams], None]] = None,
) -> tuple[BackboneParams, TrainHistory]:
    """Train with SGD+momentum, one optimizer step per batch.

    Initialisation and sampling both derive from ``config.seed``, so two runs
    with the same inputs give bit-identical parameters. When ``progress`` is
    given one JSON object per epoch is written to it.
    """
    init_seed, sample_seed = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        if config.mode == "triplet" and not backbone.include_triplet_head:
            raise ValueError("triplet training needs a backbone with the triplet head")
        params = build_backbone(backbone, seed=int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(sample_seed)
    draw = sample_pair if config.mode == "siamese" else sample_triplet
    plist = list(params)
    history = TrainHistory()

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        samples = [draw(dataset, rng) for _ in range(config.instances_per_epoch)]
        total = 0.0
        for b, lo in enumerate(range(0, len(samples), config.batch_size)):
            batch = samples[lo : lo + config.batch_size]
            with GradientRecorder() as rec:
                loss = _batch_loss(params, batch, config)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            T.backward(loss, rec)
            T.sgd_step(plist, config.lr, config.momentum)
            total += value * len(batch)
        seconds = time.perf_counter() - start
        history.epoch_loss.append(total / len(samples))
        history.epoch_seconds.append(seconds)
        if progress is not None:
            progress.write(json.dumps({"epoch": epoch, "loss": history.epoch_loss[-1], "seconds": round(seconds, 3)}) + "\n")
            progress.flush()
        if on_epoch is not None:
            on_epoch(epoch, params)

    history.checksum = params.checksum()
    return params, history
