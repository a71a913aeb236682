"""Epoch loop: patch batches, masked-RMSE loss, full-domain validation.

Each epoch trains on ``steps_per_epoch`` batches, validates by stitching a
prediction for every validation image, then feeds the validation loss to the
plateau scheduler and the early stopper. The returned model carries the
parameters of the best validation epoch.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .convnet import UNet, UNetConfig
from .inference import InferenceConfig, predict_image
from .metrics import MetricReport, masked_rmse, masked_rmse_loss_backward, pooled_report
from .optimization import DEFAULT_LR, Adam, EarlyStopper, PlateauScheduler
from .patches import AugmentConfig, PatchSampler, SamplerConfig, augment, fit_norm_stats

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_rmse", "val_rmse", "lr", "stopped"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    depth: int = 4
    width: int = 16
    patch_size: int = 128
    patches_per_image: int = 400
    valid_threshold: float = 0.0
    batch_size: int = 32
    max_epochs: int = 750
    patience: int = 75
    lr: float = DEFAULT_LR
    lr_factor: float = 0.1
    lr_patience: int = 10
    min_lr: float = 1e-8
    target_norm: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    validation: InferenceConfig | None = None  # defaults to center_crop at patch_size
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patches_per_image < 1:
            raise ValueError("batch_size, max_epochs and patches_per_image must be positive")
        UNetConfig(self.depth, self.width).check_patch(self.patch_size)
        if self.validation is None:
            self.validation = InferenceConfig("center_crop", patch_size=self.patch_size)

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(self.depth, self.width)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.patch_size, self.patches_per_image, self.valid_threshold)

    def steps_per_epoch(self, n_images: int) -> int:
        return max(1, math.ceil(n_images * self.patches_per_image / self.batch_size))


@dataclass
class RunState:
    model: UNet
    optimizer: Adam
    scheduler: PlateauScheduler
    stopper: EarlyStopper
    epoch: int = 0
    history: list = field(default_factory=list)  # dicts with HISTORY_COLUMNS keys

    @classmethod
    def create(cls, cfg: TrainConfig) -> "RunState":
        model = UNet(cfg.unet, seed=cfg.seed)
        return cls(
            model,
            Adam(model.params, lr=cfg.lr),
            PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr),
            EarlyStopper(cfg.patience),
        )


def _batch(sampler, norm, cfg: TrainConfig, n_images: int, epoch: int, step: int):
    """Assemble one normalized, augmented batch. The RNG depends only on (seed, epoch, step)."""
    rng = np.random.default_rng([cfg.seed, epoch, step])
    xs, ys, ms = [], [], []
    for i in range(cfg.batch_size):
        index = (step * cfg.batch_size + i) % n_images
        pair = sampler.sample(index, rng)
        pair.inputs = norm.normalize_inputs(pair.inputs)
        pair.target = np.where(pair.mask, norm.normalize_target(pair.target), 0.0).astype(np.float32)
        pair = augment(pair, cfg.augment, rng)
        xs.append(pair.inputs)
        ys.append(pair.target)
        ms.append(pair.mask)
    return np.stack(xs), np.stack(ys), np.stack(ms)


def train_step(model: UNet, optimizer: Adam, x, y, mask) -> float:
    """One forward/backward/Adam update; returns the batch loss in training units."""
    pred = model.forward(x)
    loss = masked_rmse(pred, y, mask)
    grad, _ = masked_rmse_loss_backward(pred, y, mask)
    grads = model.backward(grad)
    optimizer.step(model.params, grads)
    return loss


def train_epoch(state: RunState, sampler: PatchSampler, norm, cfg: TrainConfig) -> float:
    """Run one epoch; returns the mean batch loss converted to metres."""
    state.model.train()
    state.optimizer.lr = state.scheduler.lr
    n = len(sampler.images)
    losses = []
    for step in range(cfg.steps_per_epoch(n)):
        x, y, m = _batch(sampler, norm, cfg, n, state.epoch, step)
        losses.append(train_step(state.model, state.optimizer, x, y, m))
    scale = (norm.target_max - norm.target_min) if norm.target_norm_enabled else 1.0
    return float(np.mean(losses)) * scale


def validate(model: UNet, images, norm, inference: InferenceConfig) -> float:
    """Mean over images of the masked RMSE (metres) of stitched full-domain predictions."""
    images = list(images)
    if not images:
        raise TrainingError("empty validation set")
    scores = [masked_rmse(predict_image(model, img, norm, inference), img.target, img.mask) for img in images]
    return float(np.mean(scores))


def write_history(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({
                "epoch": row["epoch"],
                "train_rmse": repr(float(row["train_rmse"])),
                "val_rmse": repr(float(row["val_rmse"])),
                "lr": repr(float(row["lr"])),
                "stopped": int(row["stopped"]),
            })


def check_disjoint(splits: dict) -> None:
    seen = {}
    for name, qs in splits.items():
        for q in qs:
            if q in seen and seen[q] != name:
                raise TrainingError(f"discharge {q} appears in both {seen[q]} and {name}")
            seen[q] = name


@dataclass
class FitResult:
    model: UNet
    norm: object
    history: list
    best_epoch: int
    train_seconds: float
    optimizer: Adam = None


def fit(cfg: TrainConfig, train_images, val_images, norm=None, history_path=None,
        on_epoch=None) -> FitResult:
    """Train a U-Net and return it loaded with the best-validation parameters.

    Parameters
    ----------
    train_images, val_images : sequence of DomainImage
    norm : NormStats, optional
        Fitted from ``train_images`` when omitted.
    history_path : path, optional
        History CSV; written after every epoch so a failed run leaves a
        partial record.
    on_epoch : callable, optional
        Called with each history row (progress reporting).
    """
    train_images, val_images = list(train_images), list(val_images)
    check_disjoint({"train": [i.discharge for i in train_images], "val": [i.discharge for i in val_images]})
    if norm is None:
        norm = fit_norm_stats(train_images, [i.discharge for i in train_images], target_norm=cfg.target_norm)
    sampler = PatchSampler(train_images, cfg.sampler)
    state = RunState.create(cfg)
    model = state.model
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        try:
            train_loss = train_epoch(state, sampler, norm, cfg)
            val_loss = validate(model, val_images, norm, cfg.validation)
        except Exception as exc:
            if history_path is not None:
                write_history(history_path, state.history)
            raise TrainingError(f"epoch {epoch + 1}: {exc}") from exc
        lr_used = state.optimizer.lr
        state.scheduler.observe(val_loss)
        stop = state.stopper.observe(val_loss, model.state)
        row = {"epoch": epoch + 1, "train_rmse": train_loss, "val_rmse": val_loss,
               "lr": lr_used, "stopped": stop}
        state.history.append(row)
        if history_path is not None:
            write_history(history_path, state.history)
        if on_epoch is not None:
            on_epoch(row)
        if stop:
            break
    model.load_state(state.stopper.best_state)
    model.eval()
    return FitResult(model, norm, state.history, state.stopper.best_epoch,
                     time.perf_counter() - t0, state.optimizer)


def evaluate(model: UNet, images, norm, inference: InferenceConfig):
    """Pooled report, per-image reports and predictions (metres) for ``images``."""
    images = list(images)
    if not images:
        raise TrainingError("no images to evaluate")
    preds = [predict_image(model, img, norm, inference) for img in images]
    per_image = [MetricReport.compute(p, img.target, img.mask) for p, img in zip(preds, images)]
    pooled = pooled_report(preds, [i.target for i in images], [i.mask for i in images])
    return pooled, per_image, preds


def cross_validate(cfg: TrainConfig, images, fold_epochs: int | None = None, on_fold=None):
    """Leave-one-discharge-out folds.

    Each fold trains on all other discharges, uses the held-out one both for
    early stopping and for the reported metrics, and caps training at
    ``fold_epochs`` (default ``cfg.max_epochs``).
    """
    images = sorted(images, key=lambda i: i.discharge)
    if len(images) < 3:
        raise TrainingError(f"cross-validation needs at least 3 discharges, got {len(images)}")
    fold_cfg = cfg if fold_epochs is None else replace(cfg, max_epochs=fold_epochs)
    results = []
    for k, held in enumerate(images):
        train = [img for img in images if img is not held]
        fit_res = fit(fold_cfg, train, [held])
        report, _, _ = evaluate(fit_res.model, [held], fit_res.norm, cfg.validation)
        results.append({"fold": k, "discharge": held.discharge,
                        "train_discharges": [i.discharge for i in train], "report": report,
                        "epochs": len(fit_res.history)})
        if on_fold is not None:
            on_fold(results[-1])
    return results


def zero_shot_eval(model: UNet, norm, foreign_images, inference: InferenceConfig):
    """Evaluate on a domain never seen in training, scaled with the source statistics."""
    if norm is None:
        raise TrainingError("zero-shot evaluation needs the source-domain normalization stats")
    foreign_images = list(foreign_images)
    for img in foreign_images:
        z = img.inputs[0][img.mask]
        if z.size and (z.min() < norm.elev_min or z.max() > norm.elev_max):
            log.warning("foreign elevation [%.2f, %.2f] outside source range [%.2f, %.2f]; "
                        "normalized inputs leave [0, 1]", z.min(), z.max(), norm.elev_min, norm.elev_max)
            break
    return evaluate(model, foreign_images, norm, inference)


__all__ = [
    "FitResult",
    "HISTORY_COLUMNS",
    "RunState",
    "TrainConfig",
    "TrainingError",
    "cross_validate",
    "evaluate",
    "fit",
    "train_epoch",
    "train_step",
    "validate",
    "write_history",
    "zero_shot_eval",
]
