"""Grid types, probability quantization, error metrics and the grid binary format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LEVELS = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
N_LEVELS = len(LEVELS)

# probability bands over ground-truth values: [0, 0.2], (0.2, 0.7], (0.7, 1.0]
BAND_NAMES = ("low", "mid", "high")
BAND_EDGES = (0.2, 0.7)

GRID_MAGIC = b"POGG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sHIIIf")


class GridFormatError(ValueError):
    """Malformed grid binary; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GridConfig:
    """Cell layout. Row ``i`` runs along x, column ``j`` along y.

    Cell (i, j) spans ``origin + (i*cell_length, j*cell_width)`` to the next
    corner; its center is half a cell further in both directions.
    """

    rows: int
    cols: int
    cell_length: float
    cell_width: float
    origin: tuple[float, float] = (0.0, 0.0)
    attributes_per_cell: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid needs rows, cols >= 1, got {self.rows}x{self.cols}")
        if not (self.cell_length > 0 and self.cell_width > 0):
            raise ValueError("cell dimensions must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.rows * self.cell_length, self.cols * self.cell_width)

    def with_attributes(self, n: int) -> GridConfig:
        return GridConfig(self.rows, self.cols, self.cell_length, self.cell_width, self.origin, n)

    def same_layout(self, other: GridConfig) -> bool:
        """Equal geometry, ignoring the attribute count."""
        return (self.rows, self.cols, self.cell_length, self.cell_width, self.origin) == (
            other.rows, other.cols, other.cell_length, other.cell_width, other.origin)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) arrays of shape (rows, cols) holding every cell center."""
        xs = self.origin[0] + (np.arange(self.rows) + 0.5) * self.cell_length
        ys = self.origin[1] + (np.arange(self.cols) + 0.5) * self.cell_width
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        i = math.floor((x - self.origin[0]) / self.cell_length)
        j = math.floor((y - self.origin[1]) / self.cell_width)
        if 0 <= i < self.rows and 0 <= j < self.cols:
            return (i, j)
        return None

    def to_dict(self) -> dict:
        return {
            "rows": self.rows, "cols": self.cols,
            "cell_length": self.cell_length, "cell_width": self.cell_width,
            "origin": list(self.origin), "attributes_per_cell": self.attributes_per_cell,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridConfig:
        return cls(int(d["rows"]), int(d["cols"]), float(d["cell_length"]),
                   float(d["cell_width"]), tuple(d.get("origin", (0.0, 0.0))),
                   int(d.get("attributes_per_cell", 1)))


AOG_ATTRIBUTES = ("occupied", "velocity", "orientation", "accel_x", "accel_y")


@dataclass(frozen=True, eq=False)
class AugmentedOccupancyGrid:
    config: GridConfig
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.shape != (self.config.rows, self.config.cols, len(AOG_ATTRIBUTES)):
            raise ValueError(f"AOG cells have shape {cells.shape}, config wants "
                             f"{(self.config.rows, self.config.cols, len(AOG_ATTRIBUTES))}")
        flag = cells[..., 0]
        if not np.all((flag == 0.0) | (flag == 1.0)):
            raise ValueError("occupancy flag must be exactly 0 or 1")
        if np.any(cells[flag == 0.0][:, 1:] != 0.0):
            raise ValueError("free cells must carry zero attributes")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "config", self.config.with_attributes(len(AOG_ATTRIBUTES)))

    @classmethod
    def empty(cls, config: GridConfig) -> AugmentedOccupancyGrid:
        return cls(config, np.zeros((config.rows, config.cols, len(AOG_ATTRIBUTES))))

    def flatten(self) -> np.ndarray:
        return self.cells.reshape(-1)


@dataclass(frozen=True, eq=False)
class PredictedOccupancyGrid:
    config: GridConfig
    t_pred: float
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != self.config.shape:
            raise ValueError(f"POG probs have shape {probs.shape}, config wants {self.config.shape}")
        if not np.all((probs >= 0.0) & (probs <= 1.0)):
            raise ValueError("POG probabilities must lie in [0, 1]")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "config", self.config.with_attributes(1))

    @classmethod
    def empty(cls, config: GridConfig, t_pred: float = 0.0):
        return cls(config, t_pred, np.zeros(config.shape))


class QuantizedPog(PredictedOccupancyGrid):
    """POG whose cells hold only the six quantization levels."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isin(self.probs, LEVELS)):
            raise ValueError("quantized POG holds a value outside the six levels")

    @property
    def classes(self) -> np.ndarray:
        """Integer level index 0..5 per cell."""
        return level_index(self.probs)


@dataclass(frozen=True)
class BandedError:
    """Per-band errors; ``None`` marks a band with no contributing cells."""

    eps_low: float | None
    eps_mid: float | None
    eps_high: float | None
    n_low: int = 0
    n_mid: int = 0
    n_high: int = 0

    def as_tuple(self) -> tuple[float | None, float | None, float | None]:
        return (self.eps_low, self.eps_mid, self.eps_high)

    def counts(self) -> tuple[int, int, int]:
        return (self.n_low, self.n_mid, self.n_high)


# -- quantization -----------------------------------------------------------

def _check_probability(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ValueError("probability outside [0, 1]")
    return arr


def level_index(p) -> np.ndarray:
    """Index (0..5) of the nearest level, ties upward."""
    arr = _check_probability(p)
    return np.floor(arr * 5.0 + 0.5).astype(np.int64)


def quantize_probability(p):
    """Snap ``p`` to the nearest multiple of 0.2; exact halves go up (0.1 -> 0.2)."""
    idx = level_index(p)
    out = LEVELS[idx]
    return float(out) if np.ndim(out) == 0 else out


def quantize_pog(pog: PredictedOccupancyGrid) -> QuantizedPog:
    return QuantizedPog(pog.config, pog.t_pred, LEVELS[level_index(pog.probs)])


# -- metrics ----------------------------------------------------------------

def reconstruction_rmse(reconstruction, original) -> float:
    """Per-component RMSE: sqrt(mean((r - p)**2))."""
    r = np.asarray(reconstruction, dtype=np.float64).ravel()
    p = np.asarray(original, dtype=np.float64).ravel()
    if r.shape != p.shape:
        raise ValueError(f"length mismatch: {r.size} vs {p.size}")
    if r.size == 0:
        raise ValueError("empty vectors")
    d = r - p
    return float(np.sqrt(np.dot(d, d) / d.size))


def reconstruction_norm(reconstruction, original) -> float:
    """Plain Euclidean norm ||r - p|| (not divided by the length)."""
    r = np.asarray(reconstruction, dtype=np.float64).ravel()
    p = np.asarray(original, dtype=np.float64).ravel()
    if r.shape != p.shape:
        raise ValueError(f"length mismatch: {r.size} vs {p.size}")
    return float(np.linalg.norm(r - p))


def _check_pair(gt: PredictedOccupancyGrid, est: PredictedOccupancyGrid):
    if not gt.config.same_layout(est.config):
        raise ValueError("ground truth and estimate use different grid configs")


def occupied_cell_sets(gt: PredictedOccupancyGrid, est: PredictedOccupancyGrid):
    """Return (B, D, K): occupied cells of gt and est and the size of their symmetric difference."""
    _check_pair(gt, est)
    b_mask = gt.probs > 0.0
    d_mask = est.probs > 0.0
    B = {tuple(int(v) for v in ij) for ij in np.argwhere(b_mask)}
    D = {tuple(int(v) for v in ij) for ij in np.argwhere(d_mask)}
    K = int(np.count_nonzero(b_mask ^ d_mask))
    return B, D, K


def pog_error(gt: PredictedOccupancyGrid, est: PredictedOccupancyGrid) -> float:
    """Root of the squared error summed over every cell and divided by the symmetric-difference size K.

    When K is 0 but values differ on the shared support, |B| is used instead.
    """
    _check_pair(gt, est)
    b_mask = gt.probs > 0.0
    k = np.count_nonzero(b_mask ^ (est.probs > 0.0))
    sq = float(np.sum((est.probs - gt.probs) ** 2))
    if k == 0:
        if sq == 0.0:
            return 0.0
        k = np.count_nonzero(b_mask)
    return math.sqrt(sq / k)


def band_masks(gt_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = BAND_EDGES
    return gt_probs <= lo, (gt_probs > lo) & (gt_probs <= hi), gt_probs > hi


def banded_pog_error(gt: PredictedOccupancyGrid, est: PredictedOccupancyGrid) -> BandedError:
    """Errors split by the ground-truth probability band.

    Cells that are free in both grids never count toward the low band.
    """
    _check_pair(gt, est)
    support = (gt.probs > 0.0) | (est.probs > 0.0)
    sq = (est.probs - gt.probs) ** 2
    eps, counts = [], []
    for mask in band_masks(gt.probs):
        cells = mask & support
        n = int(np.count_nonzero(cells))
        counts.append(n)
        eps.append(math.sqrt(float(np.sum(sq[cells])) / n) if n else None)
    return BandedError(*eps, *counts)


# -- binary format ----------------------------------------------------------

def encode_grid(values: np.ndarray, t_pred: float = 0.0) -> bytes:
    """Serialize a rows x cols (x attributes) array."""
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"grid arrays are 2-D or 3-D, got {arr.ndim}-D")
    rows, cols, attrs = arr.shape
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, rows, cols, attrs, t_pred)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_grid(data: bytes) -> tuple[np.ndarray, float]:
    """Inverse of :func:`encode_grid`; returns (rows x cols x attributes float64 array, t_pred)."""
    if len(data) < _HEADER.size:
        raise GridFormatError(f"truncated header: {len(data)} bytes", len(data))
    magic, version, rows, cols, attrs, t_pred = _HEADER.unpack_from(data, 0)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}", 0)
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + 4 * rows * cols * attrs
    if len(data) != expected:
        raise GridFormatError(f"payload size mismatch: expected {expected} bytes, got {len(data)}",
                              min(len(data), expected))
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return arr.reshape(rows, cols, attrs), float(t_pred)


def save_grid(path, grid) -> None:
    if isinstance(grid, AugmentedOccupancyGrid):
        payload = encode_grid(grid.cells, 0.0)
    else:
        payload = encode_grid(grid.probs, grid.t_pred)
    Path(path).write_bytes(payload)


def load_aog(path, config: GridConfig) -> AugmentedOccupancyGrid:
    arr, _ = decode_grid(Path(path).read_bytes())
    return AugmentedOccupancyGrid(config, arr)


def load_pog(path, config: GridConfig, quantized: bool = False) -> PredictedOccupancyGrid:
    arr, t_pred = decode_grid(Path(path).read_bytes())
    if arr.shape[2] != 1:
        raise GridFormatError(f"POG file has {arr.shape[2]} attributes", 14)
    # f32 storage rounds values; clip the rounding back into [0, 1]. Values sitting exactly
    # on a quantization tie (0.1, 0.3, ...) may land on either side after the f32 round trip.
    probs = np.clip(arr[..., 0], 0.0, 1.0)
    pog = PredictedOccupancyGrid(config, t_pred, probs)
    return quantize_pog(pog) if quantized else pog
