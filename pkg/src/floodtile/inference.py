"""Full-domain prediction by stitching patch predictions.

Three strategies are provided: ``no_overlap`` (adjacent tiles), ``overlap``
(stride-S windows averaged) and ``center_crop`` (predict a large context
tile, keep only its centre). All of them pad by reflection, run the model in
evaluation mode on batches of tiles and crop back to the input extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("no_overlap", "overlap", "center_crop")


class InferenceConfigError(ValueError):
    pass


@dataclass
class InferenceConfig:
    strategy: str = "center_crop"
    patch_size: int = 128  # P, or P_total for center_crop
    stride: int | None = None  # overlap; defaults to P // 2
    center_size: int | None = None  # center_crop; defaults to P_total // 2
    batch_size: int = 32

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InferenceConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy == "overlap":
            s = self.resolved_stride
            if not 0 < s < self.patch_size:
                raise InferenceConfigError(f"stride must satisfy 0 < S < P, got S={s}, P={self.patch_size}")
        if self.strategy == "center_crop":
            c = self.resolved_center
            if not 0 < c < self.patch_size or c % 2 or self.patch_size % 2:
                raise InferenceConfigError(
                    f"center_crop needs even P_center < P_total, got {c} and {self.patch_size}"
                )

    @property
    def resolved_stride(self) -> int:
        return self.stride if self.stride is not None else self.patch_size // 2

    @property
    def resolved_center(self) -> int:
        return self.center_size if self.center_size is not None else self.patch_size // 2


def _pad(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Reflect-pad the last two axes; pads larger than the image reflect repeatedly."""
    if not (top or bottom or left or right):
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]
    if h == 1 or w == 1:
        return np.pad(x, widths, mode="edge")
    return np.pad(x, widths, mode="reflect")


def _check_model_patch(model, p: int) -> None:
    cfg = getattr(model, "config", None)
    if cfg is not None:
        try:
            cfg.check_patch(p)
        except ValueError as exc:
            raise InferenceConfigError(str(exc)) from None


def _run_tiles(model, padded: np.ndarray, corners, p: int, batch_size: int):
    """Yield ``(corner, prediction)`` for every P x P tile at ``corners``."""
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        for start in range(0, len(corners), batch_size):
            chunk = corners[start:start + batch_size]
            batch = np.stack([padded[:, y:y + p, x:x + p] for y, x in chunk])
            pred = model.forward(batch)
            for corner, tile in zip(chunk, pred[:, 0]):
                yield corner, tile
    finally:
        if was_training:
            model.train()


def infer_no_overlap(model, image: np.ndarray, p: int, batch_size: int = 32, trace=None) -> np.ndarray:
    """Predict adjacent P x P tiles and place each one directly.

    Parameters
    ----------
    image : ndarray, shape (C, H, W)
        Model-ready (normalized) input planes.
    """
    _check_model_patch(model, p)
    _, h, w = image.shape
    hp, wp = -(-h // p) * p, -(-w // p) * p
    padded = _pad(image, 0, hp - h, 0, wp - w)
    out = np.zeros((hp, wp), dtype=np.float32)
    corners = [(y, x) for y in range(0, hp, p) for x in range(0, wp, p)]
    for (y, x), tile in _run_tiles(model, padded, corners, p, batch_size):
        out[y:y + p, x:x + p] = tile
        if trace is not None:
            trace.append({"tile": (y, x), "size": p, "keep": (y, x, p)})
    return out[:h, :w]


def overlap_extent(n: int, p: int, s: int) -> int:
    """Smallest padded length >= max(n, p) whose windows (stride s) end exactly at the edge."""
    return p + -(-max(n - p, 0) // s) * s


def infer_overlap(model, image: np.ndarray, p: int, s: int, batch_size: int = 32,
                  return_counts: bool = False, trace=None):
    """Average every stride-S window that covers a pixel.

    The image is reflect-padded at the bottom/right just enough that the
    last window ends on the padded edge, so every original pixel is covered
    at least once.
    """
    if not 0 < s < p:
        raise InferenceConfigError(f"stride must satisfy 0 < S < P, got S={s}, P={p}")
    _check_model_patch(model, p)
    _, h, w = image.shape
    hp, wp = overlap_extent(h, p, s), overlap_extent(w, p, s)
    padded = _pad(image, 0, hp - h, 0, wp - w)
    acc = np.zeros((hp, wp), dtype=np.float64)
    cnt = np.zeros((hp, wp), dtype=np.int32)
    corners = [(y, x) for y in range(0, hp - p + 1, s) for x in range(0, wp - p + 1, s)]
    for (y, x), tile in _run_tiles(model, padded, corners, p, batch_size):
        acc[y:y + p, x:x + p] += tile
        cnt[y:y + p, x:x + p] += 1
        if trace is not None:
            trace.append({"tile": (y, x), "size": p, "keep": (y, x, p)})
    out = (acc / cnt).astype(np.float32)[:h, :w]
    if return_counts:
        return out, cnt[:h, :w]
    return out


def infer_center_crop(model, image: np.ndarray, p_total: int, p_center: int, batch_size: int = 32,
                      trace=None) -> np.ndarray:
    """Predict P_total context tiles and keep only their central P_center block.

    ``trace``, if a list, receives one record per tile with the tile corner
    in padded coordinates and the retained block.
    """
    if not 0 < p_center < p_total or (p_total - p_center) % 2:
        raise InferenceConfigError(f"misaligned sizes: P_total={p_total}, P_center={p_center}")
    _check_model_patch(model, p_total)
    ctx = (p_total - p_center) // 2
    _, h, w = image.shape
    hc, wc = -(-h // p_center) * p_center, -(-w // p_center) * p_center
    aligned = _pad(image, 0, hc - h, 0, wc - w)
    padded = _pad(aligned, ctx, ctx, ctx, ctx)
    out = np.zeros((hc, wc), dtype=np.float32)
    corners = [(y, x) for y in range(0, hc, p_center) for x in range(0, wc, p_center)]
    for (y, x), tile in _run_tiles(model, padded, corners, p_total, batch_size):
        out[y:y + p_center, x:x + p_center] = tile[ctx:ctx + p_center, ctx:ctx + p_center]
        if trace is not None:
            trace.append({"tile": (y, x), "size": p_total, "keep": (ctx, ctx, p_center)})
    return out[:h, :w]


def tile_count(h: int, w: int, cfg: InferenceConfig) -> int:
    if cfg.strategy == "no_overlap":
        return -(-h // cfg.patch_size) * -(-w // cfg.patch_size)
    if cfg.strategy == "overlap":
        p, s = cfg.patch_size, cfg.resolved_stride
        return ((overlap_extent(h, p, s) - p) // s + 1) * ((overlap_extent(w, p, s) - p) // s + 1)
    c = cfg.resolved_center
    return -(-h // c) * -(-w // c)


def infer(model, image: np.ndarray, cfg: InferenceConfig, trace=None) -> np.ndarray:
    """Dispatch to the configured stitching strategy."""
    if cfg.strategy == "no_overlap":
        return infer_no_overlap(model, image, cfg.patch_size, cfg.batch_size, trace=trace)
    if cfg.strategy == "overlap":
        return infer_overlap(model, image, cfg.patch_size, cfg.resolved_stride, cfg.batch_size, trace=trace)
    return infer_center_crop(model, image, cfg.patch_size, cfg.resolved_center, cfg.batch_size, trace=trace)


def predict_image(model, image, norm, cfg: InferenceConfig) -> np.ndarray:
    """Water depth (m) for a :class:`~floodtile.patches.DomainImage`.

    Inputs are scaled with ``norm``; the stitched prediction is mapped back
    to metres once, after stitching.
    """
    x = norm.normalize_inputs(image.inputs)
    pred = infer(model, x, cfg)
    return np.asarray(norm.denormalize_target(pred), dtype=np.float32)
