"""Synthetic valley terrains and steady-state flood levels.

This stands in for a 2D hydraulic model so the learning pipeline can be run
and tested end to end. It is intentionally crude: a river runs west to east
along a meandering thalweg, the water surface is flat across the valley and
follows the thalweg downstream, and a cell floods when it lies below that
surface and is 4-connected to the river.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster_io import DEFAULT_NODATA, Raster

# Discharges (m^3/s) and their train/val/test assignment for the default preset.
BEY_TRAIN = [5, 20, 50, 80, 110, 140, 170, 200, 230, 260, 275, 290, 320, 335, 350, 365, 380, 395]
BEY_VAL = [35, 95, 155, 215]
BEY_TEST = [65, 125, 185, 245, 305]
BEY_DISCHARGES = sorted(BEY_TRAIN + BEY_VAL + BEY_TEST)

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class TerrainPreset:
    """Shape parameters of a generated valley (all lengths in cells, heights in m)."""

    name: str = "default"
    base_elevation: float = 180.0
    downstream_slope: float = 0.01
    valley_linear: float = 0.02
    valley_quadratic: float = 4e-4
    bank_height: float = 0.4
    noise_amplitude: float = 1.5
    noise_octaves: int = 4
    noise_base_cells: int = 64
    meander_fraction: float = 0.12
    rating_exponent: float = 0.6
    target_flood_fraction: float = 0.25


PRESETS = {
    "default": TerrainPreset(),
    # a wider, flatter valley with stronger relief noise: the zero-shot domain
    "unseen": TerrainPreset(
        name="unseen", base_elevation=150.0, downstream_slope=0.006, valley_linear=0.035,
        valley_quadratic=1.5e-4, bank_height=0.7, noise_amplitude=2.5, meander_fraction=0.2,
    ),
}


@dataclass
class SyntheticDomain:
    seed: int
    dem: Raster
    channel_cells: np.ndarray  # (K, 2) int array of (row, col), ordered upstream to downstream
    rating: tuple  # (k, e): stage(q) = k * q**e
    preset: str = "default"
    notes: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.dem.rows

    @property
    def cols(self) -> int:
        return self.dem.cols

    def stage(self, q: float) -> float:
        k, e = self.rating
        return k * q ** e

    def thalweg_profile(self) -> np.ndarray:
        """Per-column channel bed elevation, interpolated across columns without channel cells."""
        z = self.dem.values
        cols = np.arange(self.cols)
        bed = np.full(self.cols, np.inf)
        rr, cc = self.channel_cells[:, 0], self.channel_cells[:, 1]
        np.minimum.at(bed, cc, z[rr, cc].astype(np.float64))
        have = np.isfinite(bed)
        return np.interp(cols, cols[have], bed[have])


def value_noise(rng: np.random.Generator, rows: int, cols: int, octaves: int, base_cells: int) -> np.ndarray:
    """Fractal value noise in roughly [-1, 1] with smoothstep interpolation."""
    out = np.zeros((rows, cols))
    amp, total = 1.0, 0.0
    cell = float(base_cells)
    for _ in range(octaves):
        gy = int(np.ceil(rows / cell)) + 2
        gx = int(np.ceil(cols / cell)) + 2
        lattice = rng.uniform(-1.0, 1.0, (gy, gx))
        y = np.arange(rows) / cell
        x = np.arange(cols) / cell
        y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
        ty, tx = y - y0, x - x0
        sy, sx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
        a = lattice[np.ix_(y0, x0)]
        b = lattice[np.ix_(y0, x0 + 1)]
        c = lattice[np.ix_(y0 + 1, x0)]
        d = lattice[np.ix_(y0 + 1, x0 + 1)]
        top = a + (b - a) * sx[None, :]
        bot = c + (d - c) * sx[None, :]
        out += amp * (top + (bot - top) * sy[:, None])
        total += amp
        amp *= 0.5
        cell = max(cell / 2.0, 2.0)
    return out / total


def _channel_path(rng, rows, cols, meander_fraction):
    amp1 = meander_fraction * rows
    amp2 = 0.35 * amp1
    # wavelengths long enough that the path never doubles back on itself
    wl1 = max(cols / rng.uniform(1.2, 2.0), 2 * np.pi * amp1 * 1.05)
    wl2 = max(cols / rng.uniform(3.0, 5.0), 2 * np.pi * amp2 * 1.05)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    x = np.arange(cols)
    center = rows / 2 + amp1 * np.sin(2 * np.pi * x / wl1 + ph1) + amp2 * np.sin(2 * np.pi * x / wl2 + ph2)
    r = np.clip(np.rint(center).astype(int), 1, rows - 2)
    cells = [(r[0], 0)]
    for j in range(1, cols):
        prev = r[j - 1]
        step = np.sign(r[j] - prev)
        rr = prev
        while rr != r[j]:
            cells.append((rr, j))
            rr += step
        cells.append((r[j], j))
    return np.array(cells, dtype=np.int64)


def _distance_to_channel(rows, cols, channel_cells):
    lo = np.full(cols, rows, dtype=np.int64)
    hi = np.full(cols, -1, dtype=np.int64)
    np.minimum.at(lo, channel_cells[:, 1], channel_cells[:, 0])
    np.maximum.at(hi, channel_cells[:, 1], channel_cells[:, 0])
    r = np.arange(rows)[:, None]
    return np.maximum(np.maximum(lo[None, :] - r, r - hi[None, :]), 0).astype(np.float64)


def gen_terrain(seed: int, rows: int, cols: int, preset: str | TerrainPreset = "default",
                q_ref: float = max(BEY_DISCHARGES)) -> SyntheticDomain:
    """Generate a valley DEM with a west-to-east river.

    The rating coefficient is calibrated so that ``q_ref`` floods about
    ``preset.target_flood_fraction`` of the domain.
    """
    if rows < 64 or cols < 64:
        raise ValueError(f"domain must be at least 64x64 cells, got {rows}x{cols}")
    p = PRESETS[preset] if isinstance(preset, str) else preset
    rng = np.random.default_rng(seed)
    channel = _channel_path(rng, rows, cols, p.meander_fraction)
    dist = _distance_to_channel(rows, cols, channel)
    x = np.arange(cols)[None, :]
    thalweg = p.base_elevation + p.downstream_slope * (cols - 1 - x)
    bank = p.bank_height * np.clip((dist - 0.5) / 2.0, 0.0, 1.0)
    valley = p.valley_linear * dist + p.valley_quadratic * dist ** 2
    # noise fades out towards the channel so the bed stays the cross-section minimum
    fade = np.clip(dist / 20.0, 0.0, 1.0) ** 2
    noise = p.noise_amplitude * value_noise(rng, rows, cols, p.noise_octaves, p.noise_base_cells) * fade
    dem = thalweg + bank + valley + noise
    domain = SyntheticDomain(
        seed=int(seed),
        dem=Raster(dem.astype(np.float32)),
        channel_cells=channel,
        rating=(1.0, p.rating_exponent),
        preset=p.name,
    )
    domain.rating = (calibrate_rating(domain, q_ref, p.target_flood_fraction), p.rating_exponent)
    domain.notes = {
        "fidelity": "synthetic; flat cross-valley water surface, no hydrodynamics",
        "q_ref": float(q_ref),
        "target_flood_fraction": p.target_flood_fraction,
    }
    return domain


def flooded_cells(domain: SyntheticDomain, q: float):
    """Boolean flooded set and the per-column water surface elevation for discharge ``q``."""
    if not q > 0:
        raise ValueError(f"discharge must be positive, got {q}")
    surface = domain.thalweg_profile() + domain.stage(q)
    z = domain.dem.values.astype(np.float64)
    valid = ~domain.dem.is_nodata()
    below = (z < surface[None, :]) & valid
    labels, _ = ndimage.label(below, structure=_FOUR)
    rr, cc = domain.channel_cells[:, 0], domain.channel_cells[:, 1]
    seeds = np.unique(labels[rr, cc])
    seeds = seeds[seeds > 0]
    return np.isin(labels, seeds), surface


def simulate_water_level(domain: SyntheticDomain, q: float) -> Raster:
    """Water depth above terrain (m) for steady discharge ``q``; dry cells are NODATA."""
    wet, surface = flooded_cells(domain, q)
    depth = np.full(domain.dem.shape, DEFAULT_NODATA, dtype=np.float32)
    z = domain.dem.values.astype(np.float64)
    depth[wet] = (np.broadcast_to(surface[None, :], z.shape) - z)[wet].astype(np.float32)
    dem = domain.dem
    return Raster(depth, dem.cell_size, dem.origin_x, dem.origin_y, DEFAULT_NODATA)


def calibrate_rating(domain: SyntheticDomain, q_ref: float, fraction: float, iters: int = 40) -> float:
    """Bisect the rating coefficient so ``q_ref`` floods ``fraction`` of the cells."""
    e = domain.rating[1]
    lo, hi = 1e-6, 1.0
    total = domain.dem.values.size

    def frac(k):
        domain.rating = (k, e)
        return flooded_cells(domain, q_ref)[0].sum() / total

    while frac(hi) < fraction and hi < 1e4:
        hi *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if frac(mid) < fraction:
            lo = mid
        else:
            hi = mid
    return hi


class SplitError(ValueError):
    pass


def make_splits(discharge_grid, val=None, test=None) -> dict:
    """Assign discharges to train/val/test.

    ``val`` and ``test`` default to the interleaved pattern of the default
    preset; every remaining value trains. Held-out values must lie strictly
    inside the training range so evaluation measures interpolation.
    """
    grid = sorted(float(q) for q in discharge_grid)
    if len(set(grid)) != len(grid):
        raise SplitError("duplicate discharge values in grid")
    val = [float(q) for q in (BEY_VAL if val is None else val)]
    test = [float(q) for q in (BEY_TEST if test is None else test)]
    overlap = set(val) & set(test)
    if overlap:
        raise SplitError(f"overlap between splits: {sorted(overlap)}")
    missing = (set(val) | set(test)) - set(grid)
    if missing:
        raise SplitError(f"split values not in discharge grid: {sorted(missing)}")
    train = [q for q in grid if q not in set(val) | set(test)]
    if not train:
        raise SplitError("empty training split")
    lo, hi = min(train), max(train)
    outside = [q for q in val + test if not lo < q < hi]
    if outside:
        raise SplitError(f"extrapolation split: {outside} outside training range ({lo}, {hi})")
    return {"train": train, "val": sorted(val), "test": sorted(test)}
