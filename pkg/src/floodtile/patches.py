"""Domain images, rejection-sampled training patches, augmentation, min-max scaling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .raster_io import Raster, ValidityMask, build_validity_mask, stack_input_channels


class PatchSamplingError(RuntimeError):
    pass


@dataclass
class DomainImage:
    """One simulation run: raw input planes, target depths and the validity mask.

    ``target`` holds 0 wherever ``mask`` is false; those cells carry no meaning.
    """

    discharge: float
    inputs: np.ndarray  # (3, H, W) float32: elevation, discharge, mask
    target: np.ndarray  # (H, W) float32
    mask: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def from_rasters(cls, dem: Raster, discharge: float, water: Raster) -> "DomainImage":
        """Build an image from a DEM and a simulated water-level raster.

        The mask marks cells where the simulation produced a value (and the
        DEM is valid); it becomes the third input plane.
        """
        mask = build_validity_mask(water).bits & build_validity_mask(dem).bits
        stack = stack_input_channels(dem, discharge, ValidityMask(mask))
        target = np.where(mask, water.values, 0.0).astype(np.float32)
        return cls(float(discharge), stack.data, target, mask)


@dataclass
class SamplerConfig:
    patch_size: int = 128
    patches_per_image: int = 400
    valid_threshold: float = 0.0  # fraction of valid cells required; 0 means at least one
    max_attempts: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.valid_threshold <= 1.0:
            raise ValueError(f"valid_threshold must be in [0, 1], got {self.valid_threshold}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")

    @property
    def min_valid(self) -> int:
        return max(1, math.ceil(self.valid_threshold * self.patch_size ** 2))


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot: float = 0.5

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rot"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")


@dataclass
class PatchPair:
    inputs: np.ndarray  # (3, P, P)
    target: np.ndarray  # (1, P, P)
    mask: np.ndarray  # (1, P, P) bool
    origin: tuple  # (row, col) of the top-left corner in the source image
    transform: tuple = (False, False, 0)  # (hflip, vflip, quarter turns)


def _valid_counts(mask: np.ndarray, p: int) -> np.ndarray:
    """Number of valid cells in every P x P window, indexed by top-left corner."""
    ii = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    return ii[p:, p:] - ii[:-p, p:] - ii[p:, :-p] + ii[:-p, :-p]


class PatchSampler:
    """Rejection sampler over one or more domain images.

    Window counts are precomputed per image so each acceptance test is O(1).
    """

    def __init__(self, images, cfg: SamplerConfig):
        self.images = list(images)
        self.cfg = cfg
        p = cfg.patch_size
        for img in self.images:
            h, w = img.shape
            if p > min(h, w):
                raise ValueError(f"patch size {p} exceeds image size {h}x{w}")
        self._counts = [_valid_counts(img.mask, p) for img in self.images]

    def sample(self, index: int, rng: np.random.Generator) -> PatchPair:
        img, counts = self.images[index], self._counts[index]
        p = self.cfg.patch_size
        need = self.cfg.min_valid
        n_r, n_c = counts.shape
        for _ in range(self.cfg.max_attempts):
            r = int(rng.integers(n_r))
            c = int(rng.integers(n_c))
            if counts[r, c] >= need:
                return PatchPair(
                    img.inputs[:, r:r + p, c:c + p].copy(),
                    img.target[None, r:r + p, c:c + p].copy(),
                    img.mask[None, r:r + p, c:c + p].copy(),
                    (r, c),
                )
        raise PatchSamplingError(
            f"no window with >= {need} valid cells after {self.cfg.max_attempts} attempts "
            f"(image q={img.discharge})"
        )


def sample_valid_patch(image: DomainImage, cfg: SamplerConfig, rng: np.random.Generator) -> PatchPair:
    return PatchSampler([image], cfg).sample(0, rng)


def draw_transform(cfg: AugmentConfig, rng: np.random.Generator) -> tuple:
    hflip = bool(rng.random() < cfg.p_hflip)
    vflip = bool(rng.random() < cfg.p_vflip)
    turns = int(rng.integers(1, 4)) if rng.random() < cfg.p_rot else 0
    return hflip, vflip, turns


def apply_transform(plane_stack: np.ndarray, transform: tuple) -> np.ndarray:
    """Apply (hflip, vflip, quarter turns) to the last two axes."""
    hflip, vflip, turns = transform
    out = plane_stack
    if hflip:
        out = out[..., :, ::-1]
    if vflip:
        out = out[..., ::-1, :]
    if turns:
        out = np.rot90(out, turns, axes=(-2, -1))
    return np.ascontiguousarray(out)


def augment(pair: PatchPair, cfg: AugmentConfig, rng: np.random.Generator) -> PatchPair:
    """Apply one randomly drawn flip/rotation jointly to inputs, target and mask."""
    t = draw_transform(cfg, rng)
    if t[2] and pair.inputs.shape[-1] != pair.inputs.shape[-2]:
        raise ValueError("rotation needs square patches")
    return PatchPair(
        apply_transform(pair.inputs, t),
        apply_transform(pair.target, t),
        apply_transform(pair.mask, t),
        pair.origin,
        t,
    )


# --- normalization ---------------------------------------------------------------

def normalize(x, lo: float, hi: float):
    """Min-max scale; a degenerate range (hi == lo) maps everything to 0."""
    x = np.asarray(x)
    if hi == lo:
        return np.zeros_like(x, dtype=np.result_type(x, np.float32))
    return (x - lo) / (hi - lo)


def denormalize(x, lo: float, hi: float):
    return np.asarray(x) * (hi - lo) + lo


@dataclass
class NormStats:
    elev_min: float
    elev_max: float
    q_min: float
    q_max: float
    target_min: float
    target_max: float
    target_norm_enabled: bool = True

    def normalize_inputs(self, x: np.ndarray) -> np.ndarray:
        """Scale elevation and discharge planes of a ``(..., 3, H, W)`` stack; the mask plane is kept."""
        out = np.array(x, dtype=np.float32, copy=True)
        out[..., 0, :, :] = normalize(out[..., 0, :, :], self.elev_min, self.elev_max)
        out[..., 1, :, :] = normalize(out[..., 1, :, :], self.q_min, self.q_max)
        return out

    def normalize_target(self, y):
        if not self.target_norm_enabled:
            return np.asarray(y, dtype=np.float32)
        return normalize(y, self.target_min, self.target_max).astype(np.float32)

    def denormalize_target(self, y):
        if not self.target_norm_enabled:
            return np.asarray(y)
        return denormalize(y, self.target_min, self.target_max)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def fit_norm_stats(train_images, train_discharges, elevation=None, target_norm: bool = True) -> NormStats:
    """Min-max statistics from the training split only.

    Parameters
    ----------
    train_images : sequence of DomainImage
    train_discharges : sequence of float
    elevation : (values, valid) pair, optional
        Whole-study-area DEM and its validity; defaults to the cells of the
        training images' elevation planes (same DEM for every image).
    """
    images = list(train_images)
    qs = [float(q) for q in train_discharges]
    if not images or not qs:
        raise ValueError("empty training split")
    if elevation is None:
        elevation = (images[0].inputs[0], np.ones(images[0].shape, bool))
    ev, evalid = elevation
    ev = np.asarray(ev)[np.asarray(evalid, bool)]
    tv = np.concatenate([img.target[img.mask] for img in images])
    if ev.size == 0 or tv.size == 0:
        raise ValueError("no valid cells in training split")
    return NormStats(
        float(ev.min()), float(ev.max()),
        min(qs), max(qs),
        float(tv.min()), float(tv.max()),
        target_norm,
    )


def inclusion_probability(n_patch: int, m_valid: int, n_patches: int) -> float:
    """Chance that a fixed pixel falls in at least one of ``n_patches`` independent windows."""
    if not 0 < n_patch <= m_valid:
        raise ValueError(f"need 0 < N <= M, got N={n_patch}, M={m_valid}")
    if n_patches < 0:
        raise ValueError("patch count must be non-negative")
    return 1.0 - (1.0 - n_patch / m_valid) ** n_patches


__all__ = [
    "AugmentConfig",
    "DomainImage",
    "NormStats",
    "PatchPair",
    "PatchSampler",
    "PatchSamplingError",
    "SamplerConfig",
    "apply_transform",
    "augment",
    "denormalize",
    "fit_norm_stats",
    "inclusion_probability",
    "normalize",
    "sample_valid_patch",
]
