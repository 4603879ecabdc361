"""Training loop, evaluation, and five-fold cross-validation.

Cross-entropy loss, Adam at a constant learning rate, seeded shuffling and
augmentation per epoch. Runs are deterministic given (weights, data,
config): identical seeds reproduce identical parameter checksums.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import IGNORE_INDEX, AugmentConfig, augment
from .data import five_fold_split
from .metrics import Metrics, confusion_matrix, mean_iou, pixel_accuracy
from .model import ModelConfig, build_model, forward, model_params, named_params
from .tensor import AdamState, Tensor, adam_step, softmax_cross_entropy


class TrainError(ValueError):
    pass


class TrainDivergence(RuntimeError):
    """Raised when the loss stops being finite; carries epoch/step context."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3          # constant; no schedule
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 10
    augment: Optional[AugmentConfig] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise TrainError(f"lr must be >= 0, got {self.lr}")  # 0 = frozen run
        if self.eval_interval < 1:
            raise TrainError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1) or self.eps <= 0:
            raise TrainError(f"bad Adam hyperparameters betas={self.betas}, eps={self.eps}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    pa: float
    miou: float
    seconds: float


@dataclass
class RunHistory:
    """One entry per completed epoch; epoch PA/mIoU come from the training
    batches themselves (predictions already computed during the forward
    pass), so they cost nothing extra. ``val`` holds held-out evaluations
    every ``eval_interval`` epochs when validation data is supplied."""

    epochs: list = field(default_factory=list)
    val: list = field(default_factory=list)

    def as_records(self) -> list:
        rows = [vars(e).copy() for e in self.epochs]
        for epoch, metrics in self.val:
            rows.append({"epoch": epoch, "split": "val", **metrics.as_record()})
        return rows


def batch_arrays(records, multiple: int = 32):
    """Stack records into NCHW inputs and index targets, edge-padding
    images (and ignore-padding masks) up to a shared multiple-of-32 size."""
    h = max(r.image.shape[0] for r in records)
    w = max(r.image.shape[1] for r in records)
    h += (-h) % multiple
    w += (-w) % multiple
    x = np.zeros((len(records), 3, h, w), dtype=np.float64)
    y = np.full((len(records), h, w), IGNORE_INDEX, dtype=np.int64)
    for i, rec in enumerate(records):
        rh, rw = rec.image.shape[:2]
        img = np.pad(rec.image, ((0, h - rh), (0, w - rw), (0, 0)), mode="edge")
        x[i] = img.transpose(2, 0, 1)
        y[i, :rh, :rw] = rec.mask
    return x, y


def _aug_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, index)).generate_state(1)[0])


def train(model, data: list, cfg: TrainConfig, val_data: Optional[list] = None,
          on_epoch=None):
    """Train in place; returns (model, RunHistory).

    ``on_epoch(stats)`` fires after each completed epoch — progress
    reporting for long runs.
    """
    if not data:
        raise TrainError("training needs at least one sample")
    params = model_params(model)
    opt = AdamState.for_params(params)
    history = RunHistory()
    num_classes = model.cfg.num_classes
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(data))
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            picked = order[start:start + cfg.batch_size]
            if cfg.augment is not None:
                records = [augment(data[i], _aug_seed(cfg.seed, epoch, int(i)), cfg.augment)
                           for i in picked]
            else:
                records = [data[i] for i in picked]
            x, y = batch_arrays(records)
            logits = forward(model, Tensor(x))
            loss = softmax_cross_entropy(logits, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainDivergence(
                    f"training diverged: loss {value} at epoch {epoch}, step {step}"
                )
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(params, grads, opt, lr=cfg.lr,
                      beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.eps)
            step += 1
            losses.append(value)
            pred = np.argmax(logits.data, axis=1)
            confusion += confusion_matrix(pred, y, num_classes=num_classes)
        if confusion.sum() > 0:
            pa, miou = pixel_accuracy(confusion), mean_iou(confusion)[0]
        else:
            pa = miou = float("nan")
        stats = EpochStats(epoch, float(np.mean(losses)), pa, miou, time.perf_counter() - t0)
        history.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if val_data is not None and (epoch + 1) % cfg.eval_interval == 0:
            history.val.append((epoch, evaluate(model, val_data)))
    return model, history


def predict(model, image: np.ndarray) -> np.ndarray:
    """Class-index map for one (H, W, 3) image of any size; the input is
    edge-padded to a multiple of 32 and the output cropped back. Argmax
    ties resolve to the lowest class index."""
    h, w = image.shape[:2]
    ph, pw = h + (-h) % 32, w + (-w) % 32
    padded = np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    x = Tensor(padded.transpose(2, 0, 1)[None])
    logits = forward(model, x)
    return np.argmax(logits.data[0], axis=0)[:h, :w].astype(np.uint8)


def evaluate(model, data: list) -> Metrics:
    """Argmax predictions aggregated into one global confusion matrix."""
    if not data:
        raise TrainError("evaluation needs at least one sample")
    num_classes = model.cfg.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for rec in data:
        pred = predict(model, rec.image)
        confusion += confusion_matrix(pred, rec.mask, num_classes=num_classes)
    return Metrics.from_confusion(confusion)


def parameter_checksum(model) -> str:
    """Order-stable SHA-256 over all named parameters."""
    digest = hashlib.sha256()
    for name, p in named_params(model):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    history: RunHistory


@dataclass
class CrossValResult:
    folds: list
    mean_pa: float
    mean_miou: float

    def as_record(self) -> dict:
        return {
            "mean_pa": self.mean_pa,
            "mean_miou": self.mean_miou,
            "folds": [{"fold": f.fold, **f.metrics.as_record()} for f in self.folds],
        }


def cross_validate(data: list, model_cfg: ModelConfig, train_cfg: TrainConfig) -> CrossValResult:
    """Five folds, fresh model per fold: train on four, test on the fifth."""
    if len(data) < 5:
        raise TrainError(f"five-fold cross-validation needs at least 5 samples, got {len(data)}")
    folds = five_fold_split(len(data), train_cfg.seed)
    results = []
    for k, held_out in enumerate(folds):
        try:
            held = set(int(i) for i in held_out)
            train_set = [data[i] for i in range(len(data)) if i not in held]
            test_set = [data[i] for i in sorted(held)]
            model = build_model(model_cfg, seed=train_cfg.seed + k)
            model, history = train(model, train_set, train_cfg)
            metrics = evaluate(model, test_set)
        except Exception as e:
            raise TrainError(f"fold {k} failed: {e}") from e
        results.append(FoldResult(k, metrics, history))
    return CrossValResult(
        folds=results,
        mean_pa=float(np.mean([f.metrics.pa for f in results])),
        mean_miou=float(np.mean([f.metrics.miou for f in results])),
    )
