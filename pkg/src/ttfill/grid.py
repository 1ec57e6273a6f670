"""Receiver/source grid data model, residual tensors, masks, and matricizations.

A residual tensor holds travel-time residuals (seconds) on a uniform
``(nx, ny)`` receiver grid for ``n_s`` sources.  Two invertible matrix
layouts are supported:

* ``receiver_by_source`` -- each source's receiver grid is vectorized
  (column major over ``(p, q)``) into one column; shape ``(nx*ny, n_s)``.
* ``block`` -- each source's receiver grid is inserted as a contiguous
  ``nx x ny`` block of a tessellated matrix; blocks are filled column
  major over an ``(n_bx, n_by)`` source layout; shape ``(nx*n_bx, ny*n_by)``.

Sources are placed in decreasing order of observed energy (sum of absolute
observed residuals) in both layouts.
"""

from __future__ import annotations

import csv
import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LAYOUT_RECEIVER_BY_SOURCE = "receiver_by_source"
LAYOUT_BLOCK = "block"

TENSOR_CSV_HEADER = ["source_id", "rx_index", "ry_index", "value", "observed", "sigma_station"]


class DimensionError(ValueError):
    """Raised when array shapes do not match the declared grid/source layout."""


def _fmt(x: float) -> str:
    """17-significant-digit decimal formatting for byte-reproducible files."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class ReceiverGrid:
    """Uniform receiver grid; gridpoint (p, q) sits at origin + (p, q)*spacing (km)."""

    nx: int
    ny: int
    spacing: float = 5.0
    origin_x: float = 70.0
    origin_y: float = 70.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2 points per axis, got {self.nx}x{self.ny}")
        if self.spacing <= 0:
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def n_points(self) -> int:
        return self.nx * self.ny

    def x_coords(self) -> np.ndarray:
        return self.origin_x + self.spacing * np.arange(self.nx)

    def y_coords(self) -> np.ndarray:
        return self.origin_y + self.spacing * np.arange(self.ny)


@dataclass(frozen=True)
class SourceSet:
    """Source positions with optional per-source energy and energy ordering.

    ``order[t]`` is the index of the source with the t-th largest energy;
    ties break toward the smaller source index.
    """

    coords: np.ndarray
    energy: np.ndarray | None = None
    order: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"source coords must have shape (n_s, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("source coords must be finite")
        object.__setattr__(self, "coords", coords)
        if self.energy is not None:
            e = np.asarray(self.energy, dtype=float)
            if e.shape != (len(coords),) or np.any(e < 0):
                raise ValueError("energy must be a nonnegative vector of length n_s")
            object.__setattr__(self, "energy", e)
        if self.order is not None:
            o = np.asarray(self.order, dtype=int)
            if sorted(o.tolist()) != list(range(len(coords))):
                raise ValueError("order must be a permutation of 0..n_s-1")
            object.__setattr__(self, "order", o)

    @property
    def n_s(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class ResidualTensor:
    """Travel-time residuals (seconds), shape (nx, ny, n_s)."""

    grid: ReceiverGrid
    sources: SourceSet
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expect = (self.grid.nx, self.grid.ny, self.sources.n_s)
        if v.shape != expect:
            raise DimensionError(f"tensor values shape {v.shape} != grid/source shape {expect}")
        if not np.all(np.isfinite(v)):
            raise ValueError("tensor values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SamplingMask:
    """Boolean tensor of observed entries, shape (nx, ny, n_s)."""

    flags: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flags, dtype=bool)
        if f.ndim != 3:
            raise DimensionError(f"mask must be a 3D tensor, got shape {f.shape}")
        object.__setattr__(self, "flags", f)

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.flags.shape


class MatricizedView:
    """Invertible map between a residual tensor and one of its matrix layouts.

    ``rows[p, q, s]`` / ``cols[p, q, s]`` give the matrix position of each
    tensor entry; the map is a bijection, so ``unmap(map_tensor(T)) == T``
    exactly for any array of the tensor shape.
    """

    def __init__(self, layout, shape, rows, cols, grid, sources, order, source_layout=None):
        self.layout = layout
        self.shape = tuple(shape)
        self.rows = rows
        self.cols = cols
        self.grid = grid
        self.sources = sources
        self.order = np.asarray(order, dtype=int)
        self.source_layout = source_layout
        self.matrix: np.ndarray | None = None

    @property
    def tensor_shape(self) -> tuple[int, int, int]:
        return self.rows.shape

    def map_tensor(self, values: np.ndarray) -> np.ndarray:
        """Scatter a tensor-shaped array into the matrix layout."""
        values = np.asarray(values)
        if values.shape != self.rows.shape:
            raise DimensionError(f"cannot map shape {values.shape} through a view of shape {self.rows.shape}")
        out = np.zeros(self.shape, dtype=values.dtype)
        out[self.rows, self.cols] = values
        return out

    def unmap(self, matrix: np.ndarray) -> np.ndarray:
        """Gather a matrix-layout array back to the tensor shape."""
        matrix = np.asarray(matrix)
        if matrix.shape != self.shape:
            raise DimensionError(f"matrix shape {matrix.shape} != view shape {self.shape}")
        return matrix[self.rows, self.cols]


def compute_source_energy(tensor: ResidualTensor, mask: SamplingMask) -> SourceSet:
    """Per-source energy (sum of |observed residual|) and the descending order.

    Ties break by ascending source index.
    """
    if mask.shape != tensor.shape:
        raise DimensionError(f"mask shape {mask.shape} != tensor shape {tensor.shape}")
    energy = np.abs(np.where(mask.flags, tensor.values, 0.0)).sum(axis=(0, 1))
    order = np.lexsort((np.arange(len(energy)), -energy))
    return SourceSet(coords=tensor.sources.coords, energy=energy, order=order)


def _source_ranks(order: np.ndarray, n_s: int) -> np.ndarray:
    order = np.asarray(order, dtype=int)
    if sorted(order.tolist()) != list(range(n_s)):
        raise ValueError(f"order must be a permutation of 0..{n_s - 1}")
    ranks = np.empty(n_s, dtype=int)
    ranks[order] = np.arange(n_s)
    return ranks


def matricize_receiver_by_source(tensor: ResidualTensor, order: np.ndarray) -> MatricizedView:
    """Layout 1: column t holds the vectorized grid of the t-th highest-energy source."""
    nx, ny, n_s = tensor.shape
    ranks = _source_ranks(order, n_s)
    p, q, s = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(n_s), indexing="ij")
    rows = p + q * nx  # column-major vectorization over (p, q)
    cols = ranks[s]
    view = MatricizedView(LAYOUT_RECEIVER_BY_SOURCE, (nx * ny, n_s), rows, cols,
                          tensor.grid, tensor.sources, order)
    view.matrix = view.map_tensor(tensor.values)
    return view


def matricize_block(tensor: ResidualTensor, order: np.ndarray, n_bx: int, n_by: int) -> MatricizedView:
    """Layout 2: the t-th highest-energy source occupies the t-th block of an
    (n_bx, n_by) tessellation filled column major (down the first block column
    first); block interiors preserve (p, q) indexing with p along matrix rows.
    """
    nx, ny, n_s = tensor.shape
    if n_bx * n_by != n_s:
        raise ValueError(f"block layout {n_bx}x{n_by} incompatible with {n_s} sources")
    ranks = _source_ranks(order, n_s)
    p, q, s = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(n_s), indexing="ij")
    t = ranks[s]
    bi = t % n_bx
    bj = t // n_bx
    rows = bi * nx + p
    cols = bj * ny + q
    source_layout = np.asarray(order, dtype=int).reshape((n_by, n_bx)).T  # column-major fill
    view = MatricizedView(LAYOUT_BLOCK, (nx * n_bx, ny * n_by), rows, cols,
                          tensor.grid, tensor.sources, order, source_layout)
    view.matrix = view.map_tensor(tensor.values)
    return view


def dematricize(view: MatricizedView) -> ResidualTensor:
    """Exact inverse of the matricization that built the view."""
    return ResidualTensor(view.grid, view.sources, view.unmap(view.matrix))


def write_tensor_csv(path, tensor: ResidualTensor, mask: SamplingMask | None = None,
                     station_sigmas: np.ndarray | None = None) -> None:
    """Write a residual tensor as CSV, one row per entry, sorted by
    (source_id, rx_index, ry_index) with 1-based indices and LF line endings.
    """
    nx, ny, n_s = tensor.shape
    flags = mask.flags if mask is not None else np.ones(tensor.shape, dtype=bool)
    if flags.shape != tensor.shape:
        raise DimensionError(f"mask shape {flags.shape} != tensor shape {tensor.shape}")
    sig = np.zeros((nx, ny)) if station_sigmas is None else np.asarray(station_sigmas, dtype=float)
    if sig.shape != (nx, ny):
        raise DimensionError(f"station sigma shape {sig.shape} != grid shape {(nx, ny)}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TENSOR_CSV_HEADER)
        for s in range(n_s):
            for p in range(nx):
                for q in range(ny):
                    writer.writerow([s + 1, p + 1, q + 1, _fmt(tensor.values[p, q, s]),
                                     int(flags[p, q, s]), _fmt(sig[p, q])])


def read_tensor_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a tensor CSV back into (values, flags, station_sigmas) arrays."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TENSOR_CSV_HEADER:
            raise ValueError(f"unexpected tensor CSV header in {path}: {header}")
        for rec in reader:
            rows.append((int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3]), int(rec[4]), float(rec[5])))
    if not rows:
        raise ValueError(f"empty tensor CSV: {path}")
    n_s = max(r[0] for r in rows)
    nx = max(r[1] for r in rows)
    ny = max(r[2] for r in rows)
    if len(rows) != nx * ny * n_s:
        raise ValueError(f"tensor CSV {path} has {len(rows)} rows, expected {nx * ny * n_s}")
    values = np.zeros((nx, ny, n_s))
    flags = np.zeros((nx, ny, n_s), dtype=bool)
    sigmas = np.zeros((nx, ny))
    for s_id, p_id, q_id, val, obs, sig in rows:
        values[p_id - 1, q_id - 1, s_id - 1] = val
        flags[p_id - 1, q_id - 1, s_id - 1] = bool(obs)
        sigmas[p_id - 1, q_id - 1] = sig
    return values, flags, sigmas


def write_grid_meta(path, grid: ReceiverGrid, sources: SourceSet, extra: dict | None = None) -> None:
    """Sidecar metadata: grid geometry, source coordinates, and run scalars."""
    cp = configparser.ConfigParser()
    cp["grid"] = {
        "nx": str(grid.nx),
        "ny": str(grid.ny),
        "spacing_km": _fmt(grid.spacing),
        "origin_x_km": _fmt(grid.origin_x),
        "origin_y_km": _fmt(grid.origin_y),
    }
    src = {"n_s": str(sources.n_s)}
    for i, (x, y) in enumerate(sources.coords):
        src[f"s{i + 1:04d}"] = f"{_fmt(x)} {_fmt(y)}"
    cp["sources"] = src
    if extra:
        cp["extra"] = {k: (v if isinstance(v, str) else _fmt(v)) for k, v in extra.items()}
    with open(path, "w", newline="\n") as fh:
        cp.write(fh)


def read_grid_meta(path) -> tuple[ReceiverGrid, SourceSet, dict]:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"missing metadata file: {path}")
    g = cp["grid"]
    grid = ReceiverGrid(nx=int(g["nx"]), ny=int(g["ny"]), spacing=float(g["spacing_km"]),
                        origin_x=float(g["origin_x_km"]), origin_y=float(g["origin_y_km"]))
    n_s = int(cp["sources"]["n_s"])
    coords = np.zeros((n_s, 2))
    for i in range(n_s):
        x, y = cp["sources"][f"s{i + 1:04d}"].split()
        coords[i] = (float(x), float(y))
    extra = dict(cp["extra"]) if cp.has_section("extra") else {}
    return grid, SourceSet(coords=coords), extra


__all__ = [
    "DimensionError", "ReceiverGrid", "SourceSet", "ResidualTensor", "SamplingMask",
    "MatricizedView", "LAYOUT_RECEIVER_BY_SOURCE", "LAYOUT_BLOCK",
    "compute_source_energy", "matricize_receiver_by_source", "matricize_block", "dematricize",
    "write_tensor_csv", "read_tensor_csv", "write_grid_meta", "read_grid_meta",
]
