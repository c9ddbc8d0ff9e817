"""Dynamic voxelization and the sub-voxel pyramid.

Voxels are half-open boxes ``[lo, lo + g)``; every in-range point lands in
exactly one voxel and no voxel is capped.  Points are kept sorted by linear
voxel id (x fastest) so each non-empty voxel is a contiguous span.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pointcloud_io import PointCloud


class GridConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    range_min: tuple
    range_max: tuple
    voxel_size: tuple

    def __post_init__(self) -> None:
        for name in ("range_min", "range_max", "voxel_size"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(np.isfinite(v)):
                raise GridConfigError(f"{name} needs three finite values")
            object.__setattr__(self, name, v)
        if any(g <= 0 for g in self.voxel_size):
            raise GridConfigError("voxel_size must be positive")
        for lo, hi, g in zip(self.range_min, self.range_max, self.voxel_size):
            cells = (hi - lo) / g
            if abs(cells - round(cells)) > 1e-6:
                raise GridConfigError(f"range {hi - lo} is not a multiple of voxel size {g}")
            if round(cells) < 1:
                raise GridConfigError("grid needs at least one voxel per axis")

    @property
    def dims(self) -> tuple:
        return tuple(
            int(round((hi - lo) / g)) for lo, hi, g in zip(self.range_min, self.range_max, self.voxel_size)
        )

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def unravel(self, ids) -> np.ndarray:
        """Linear ids to (i_x, i_y, i_z) rows."""
        ids = np.asarray(ids, dtype=np.int64)
        nx, ny, _ = self.dims
        return np.stack([ids % nx, (ids // nx) % ny, ids // (nx * ny)], axis=-1)

    def ravel(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        nx, ny, _ = self.dims
        return idx[..., 0] + idx[..., 1] * nx + idx[..., 2] * nx * ny

    def lower_corner(self, ids) -> np.ndarray:
        return np.asarray(self.range_min) + self.unravel(ids) * np.asarray(self.voxel_size)

    def to_dict(self) -> dict:
        return {
            "range_min": list(self.range_min),
            "range_max": list(self.range_max),
            "voxel_size": list(self.voxel_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(d["range_min"], d["range_max"], d["voxel_size"])


PRESETS = {
    "nuscenes": GridConfig((-51.2, -51.2, -5.0), (51.2, 51.2, 3.0), (0.256, 0.256, 8.0)),
    "waymo": GridConfig((-74.88, -74.88, -2.0), (74.88, 74.88, 4.0), (0.32, 0.32, 6.0)),
}


@dataclass(frozen=True)
class PyramidSpec:
    divisions: tuple = ((1, 1, 1), (2, 2, 4), (4, 4, 8))
    names: tuple = ("top", "middle", "bottom")

    @property
    def counts(self) -> tuple:
        return tuple(int(np.prod(d)) for d in self.divisions)

    @property
    def offsets(self) -> tuple:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.counts)[:-1]]))

    @property
    def total(self) -> int:
        return sum(self.counts)

    def level(self, level) -> int:
        return self.names.index(level) if isinstance(level, str) else int(level)

    def subgrid_size(self, level, voxel_size: Sequence[float]) -> np.ndarray:
        d = self.divisions[self.level(level)]
        return np.asarray(voxel_size, dtype=np.float64) / np.asarray(d, dtype=np.float64)


PYRAMID = PyramidSpec()


@dataclass
class VoxelPartition:
    """Point-to-voxel assignment.

    ``order`` indexes the original cloud; ``points`` is the in-range cloud in
    that order (float64).  Group ``k`` covers ``points[starts[k]:starts[k] +
    counts[k]]`` and belongs to voxel ``group_ids[k]``.
    """

    config: GridConfig
    order: np.ndarray
    points: np.ndarray
    point_ids: np.ndarray
    group_ids: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    out_of_range: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_nonempty(self) -> int:
        return int(self.group_ids.shape[0])

    def group_index(self, ids) -> np.ndarray:
        """Group positions for voxel ids, -1 where the voxel is empty."""
        ids = np.asarray(ids, dtype=np.int64)
        if self.n_nonempty == 0:
            return np.full(ids.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.group_ids, ids), self.n_nonempty - 1)
        return np.where(self.group_ids[pos] == ids, pos, -1)

    def group_points(self, k: int) -> np.ndarray:
        s = self.starts[k]
        return self.points[s : s + self.counts[k]]


def voxel_indices(points: np.ndarray, config: GridConfig) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    rel = (pts - np.asarray(config.range_min)) / np.asarray(config.voxel_size)
    return np.floor(rel).astype(np.int64)


def voxelize(cloud: PointCloud, config: GridConfig) -> VoxelPartition:
    pts = np.asarray(cloud.points, dtype=np.float64).reshape(-1, 3)
    idx = voxel_indices(pts, config)
    dims = np.asarray(config.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    kept = np.flatnonzero(inside)
    ids = config.ravel(idx[kept])
    perm = np.argsort(ids, kind="stable")
    order = kept[perm]
    ids = ids[perm]
    group_ids, starts, counts = np.unique(ids, return_index=True, return_counts=True)
    return VoxelPartition(
        config=config,
        order=order,
        points=pts[order],
        point_ids=ids,
        group_ids=group_ids.astype(np.int64),
        starts=starts.astype(np.int64),
        counts=counts.astype(np.int64),
        out_of_range=np.flatnonzero(~inside),
    )


def subgrid_index(local, level, config: GridConfig, pyramid: PyramidSpec = PYRAMID) -> int:
    """Linear sub-grid index (x fastest) of a voxel-local coordinate."""
    local = np.asarray(local, dtype=np.float64)
    g = np.asarray(config.voxel_size)
    if np.any(local < 0) or np.any(local >= g):
        raise ValueError("point outside voxel")
    lvl = pyramid.level(level)
    per_axis = subgrid_axes(local[None, :], lvl, config.voxel_size, pyramid)[0]
    dx, dy, _ = pyramid.divisions[lvl]
    return int(per_axis[0] + per_axis[1] * dx + per_axis[2] * dx * dy)


def subgrid_axes(local: np.ndarray, level: int, voxel_size, pyramid: PyramidSpec = PYRAMID) -> np.ndarray:
    """Per-axis sub-grid indices for an (n, 3) array of local coordinates."""
    d = np.asarray(pyramid.divisions[level], dtype=np.int64)
    size = pyramid.subgrid_size(level, voxel_size)
    return np.minimum(np.floor(local / size).astype(np.int64), d - 1)


def neighborhood_ids(voxel_id: int, config: GridConfig) -> list:
    """The voxel and its (up to) 8 neighbours in the same z layer, ascending."""
    ix, iy, iz = (int(v) for v in config.unravel(voxel_id))
    nx, ny, _ = config.dims
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            x, y = ix + dx, iy + dy
            if 0 <= x < nx and 0 <= y < ny:
                out.append(x + y * nx + iz * nx * ny)
    return sorted(out)


def neighborhood_table(ids: np.ndarray, config: GridConfig) -> np.ndarray:
    """(m, 9) neighbour ids per voxel, -1 where the neighbour is off-grid.

    Columns are ordered so that valid entries ascend along each row.
    """
    ijk = config.unravel(ids)
    nx, ny, _ = config.dims
    cols = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            x = ijk[:, 0] + dx
            y = ijk[:, 1] + dy
            ok = (x >= 0) & (x < nx) & (y >= 0) & (y < ny)
            cols.append(np.where(ok, x + y * nx + ijk[:, 2] * nx * ny, -1))
    return np.stack(cols, axis=1)
