"""Raster containers, ESRI ASCII grid IO, validity masks and input stacking."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterFormatError(ValueError):
    """Raised when a grid file or raster violates the expected layout."""


@dataclass
class Raster:
    """A north-up grid of float32 cells with an ESRI-style header.

    Row 0 is the northern (top) row. Cells holding ``nodata`` carry no value.
    """

    values: np.ndarray
    cell_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise RasterFormatError(f"raster values must be 2-D, got shape {values.shape}")
        if values.shape[0] == 0 or values.shape[1] == 0:
            raise RasterFormatError("empty raster")
        if not self.cell_size > 0:
            raise RasterFormatError(f"cell_size must be positive, got {self.cell_size}")
        nodata = np.float32(self.nodata)
        bad = ~np.isfinite(values)
        if bad.any():
            # NaN is how simulators commonly flag dry cells; fold it into the sentinel.
            values = values.copy()
            values[bad] = nodata
        self.values = values

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def is_nodata(self) -> np.ndarray:
        return self.values == np.float32(self.nodata)

    def with_values(self, values: np.ndarray) -> "Raster":
        """Copy of this raster's header around new cell values."""
        return Raster(values, self.cell_size, self.origin_x, self.origin_y, self.nodata)


@dataclass
class ValidityMask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


@dataclass
class InputStack:
    """Three planes: filled elevation, broadcast discharge, mask as 0/1."""

    data: np.ndarray = field(repr=False)

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]


def read_ascii_grid(path) -> Raster:
    """Read an ESRI ASCII grid (``.asc``).

    Parameters
    ----------
    path : str or Path
        File with the six header lines followed by ``nrows * ncols``
        whitespace-separated values, first row northernmost.

    Returns
    -------
    Raster
    """
    text = Path(path).read_text()
    tokens = text.split()
    header = {}
    pos = 0
    for expected in _HEADER_KEYS:
        if pos + 1 >= len(tokens):
            raise RasterFormatError(f"malformed header: missing {expected}")
        key = tokens[pos].lower()
        if key != expected:
            raise RasterFormatError(f"malformed header: expected {expected}, found {tokens[pos]!r}")
        try:
            header[key] = float(tokens[pos + 1])
        except ValueError:
            raise RasterFormatError(f"malformed header: {tokens[pos]} value {tokens[pos + 1]!r}") from None
        pos += 2

    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols <= 0 or nrows <= 0:
        raise RasterFormatError("empty raster")
    body = tokens[pos:]
    if len(body) != ncols * nrows:
        raise RasterFormatError(
            f"value count mismatch: header says {nrows}x{ncols}={nrows * ncols}, found {len(body)}"
        )
    try:
        values = np.array(body, dtype=np.float64)
    except ValueError as exc:
        raise RasterFormatError(f"non-numeric token in grid body: {exc}") from None
    return Raster(
        values.reshape(nrows, ncols),
        cell_size=header["cellsize"],
        origin_x=header["xllcorner"],
        origin_y=header["yllcorner"],
        nodata=header["nodata_value"],
    )


def write_ascii_grid(raster: Raster, path) -> None:
    """Write ``raster`` as an ESRI ASCII grid.

    Header floats are written with ``repr`` so they read back exactly; cell
    values carry 9 significant digits, enough to round-trip float32.
    """
    if raster.rows == 0 or raster.cols == 0:
        raise RasterFormatError("empty raster")
    nodata_token = _fmt_exact(raster.nodata)
    lines = [
        f"ncols {raster.cols}",
        f"nrows {raster.rows}",
        f"xllcorner {_fmt_exact(raster.origin_x)}",
        f"yllcorner {_fmt_exact(raster.origin_y)}",
        f"cellsize {_fmt_exact(raster.cell_size)}",
        f"NODATA_value {nodata_token}",
    ]
    nodata_mask = raster.is_nodata()
    for r in range(raster.rows):
        row = raster.values[r]
        tokens = [nodata_token if nodata_mask[r, c] else f"{row[c]:.9g}" for c in range(raster.cols)]
        lines.append(" ".join(tokens))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_exact(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def build_validity_mask(raster: Raster) -> ValidityMask:
    vals = raster.values
    return ValidityMask(np.isfinite(vals) & (vals != np.float32(raster.nodata)))


def fill_nodata(raster: Raster, mask: ValidityMask | None = None) -> np.ndarray:
    """Cell values with invalid cells set to the minimum valid value.

    An all-invalid raster fills with zeros.
    """
    if mask is None:
        mask = build_validity_mask(raster)
    out = raster.values.astype(np.float32, copy=True)
    if mask.bits.any():
        out[~mask.bits] = out[mask.bits].min()
    else:
        out[:] = 0.0
    return out


def stack_input_channels(dem: Raster, discharge: float, mask: ValidityMask) -> InputStack:
    """Assemble the elevation / discharge / mask input planes.

    Elevation cells that are nodata in ``dem`` are filled with the minimum
    valid elevation; the mask plane marks which cells the caller considers
    valid.
    """
    if dem.shape != mask.shape:
        raise RasterFormatError(f"dimension mismatch: dem {dem.shape} vs mask {mask.shape}")
    data = np.empty((3, dem.rows, dem.cols), dtype=np.float32)
    data[0] = fill_nodata(dem)
    data[1] = np.float32(discharge)
    data[2] = mask.bits.astype(np.float32)
    return InputStack(data)


def reflect_pad(grid: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Mirror-pad the last two axes without repeating the edge row/column.

    Leading axes (channels, batch) are left untouched.
    """
    grid = np.asarray(grid)
    h, w = grid.shape[-2:]
    for amount, dim, name in ((top, h, "top"), (bottom, h, "bottom"), (left, w, "left"), (right, w, "right")):
        if amount < 0:
            raise ValueError(f"{name} padding must be non-negative, got {amount}")
        if amount >= dim and amount > 0:
            raise ValueError(f"{name} padding {amount} must be smaller than dimension {dim}")
    widths = [(0, 0)] * (grid.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(grid, widths, mode="reflect")


def write_pgm(grid: np.ndarray, path, lo: float, hi: float) -> None:
    """Render ``grid`` as a binary 8-bit PGM, mapping ``[lo, hi]`` onto 0..255."""
    if not hi > lo:
        raise ValueError(f"hi ({hi}) must exceed lo ({lo})")
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("write_pgm expects a 2-D grid")
    scaled = np.clip((g - lo) / (hi - lo), 0.0, 1.0) * 255.0
    pixels = np.floor(scaled + 0.5).astype(np.uint8)  # round half up
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise RasterFormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise RasterFormatError(f"unsupported PGM max value {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
