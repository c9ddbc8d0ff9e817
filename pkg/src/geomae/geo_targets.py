"""Per-voxel prediction targets.

Point statistics (pyramid centroid and occupancy) come from a masked voxel's
own points.  Surface properties (normal and pseudo-curvature) come from the
voxel plus its 3x3 BEV neighbourhood, via the eigen-decomposition of the
local covariance.  All geometry is computed in float64 and stored as float32
records (see :data:`geomae.pointcloud_io.RECORD_DTYPE`).

Centroids are stored relative to the centre of their sub-grid and scaled by
the sub-grid size, so every occupied slot lies in [-0.5, 0.5) on each axis.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .pointcloud_io import N_GRIDS, RECORD_DTYPE
from .voxelizer import PYRAMID, GridConfig, PyramidSpec, VoxelPartition, neighborhood_table, subgrid_axes

JACOBI_TOL = 1e-13
JACOBI_MAX_SWEEPS = 30
TIE_EPS = 1e-9
MIN_TRACE = 1e-12
# second eigenvalue below this fraction of the trace: points are collinear
RANK_TOL = 1e-10

_HALF_F32 = np.nextafter(np.float32(0.5), np.float32(0.0))


@dataclass
class SymMat3:
    """Symmetric 3x3 matrix stored as (xx, xy, xz, yy, yz, zz)."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=np.float64).reshape(6)

    def to_matrix(self) -> np.ndarray:
        xx, xy, xz, yy, yz, zz = self.entries
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])

    @classmethod
    def from_matrix(cls, m) -> "SymMat3":
        m = np.asarray(m, dtype=np.float64)
        return cls([m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]])


@dataclass
class PointStatTargets:
    centroid: np.ndarray  # (145, 3) float32, encoded offsets
    occupancy: np.ndarray  # (145,) uint8


@dataclass
class SurfaceTargets:
    normal: np.ndarray
    curvature: np.ndarray
    valid: bool


# ---------------------------------------------------------------- normals


def _canonical_flip(n: np.ndarray) -> np.ndarray:
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.where(
        np.abs(z) > TIE_EPS,
        z < 0,
        np.where(np.abs(y) > TIE_EPS, y < 0, x < 0),
    )


def canonicalize_normal(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if not np.linalg.norm(n) > 1e-12:
        raise ValueError("cannot canonicalize a zero vector")
    return -n if _canonical_flip(n) else n.copy()


def canonicalize_normals(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    return np.where(_canonical_flip(n)[..., None], -n, n)


# ---------------------------------------------------------------- covariance / eigen


def covariance(points) -> SymMat3:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("covariance needs at least one point")
    cov = _segment_covariance(pts, np.zeros(pts.shape[0], dtype=np.int64), 1)[0]
    return SymMat3(cov)


def _segment_covariance(pts: np.ndarray, seg: np.ndarray, m: int) -> np.ndarray:
    """Mean-subtracted covariance per segment as (m, 6) entries.

    Accumulation is sequential in array order within each segment, which keeps
    the result independent of how segments are batched.
    """
    k = np.bincount(seg, minlength=m).astype(np.float64)
    safe = np.maximum(k, 1.0)
    # bincount of empty weights yields integers, hence the explicit cast
    mean = np.stack([np.bincount(seg, weights=pts[:, a], minlength=m) for a in range(3)], axis=1).astype(np.float64)
    mean /= safe[:, None]
    d = pts - mean[seg]
    out = np.empty((m, 6))
    for j, (a, b) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
        out[:, j] = np.bincount(seg, weights=d[:, a] * d[:, b], minlength=m) / safe
    return out


def _sym_full(entries: np.ndarray) -> np.ndarray:
    e = np.asarray(entries, dtype=np.float64).reshape(-1, 6)
    a = np.empty((e.shape[0], 3, 3))
    a[:, 0, 0], a[:, 0, 1], a[:, 0, 2] = e[:, 0], e[:, 1], e[:, 2]
    a[:, 1, 0], a[:, 1, 1], a[:, 1, 2] = e[:, 1], e[:, 3], e[:, 4]
    a[:, 2, 0], a[:, 2, 1], a[:, 2, 2] = e[:, 2], e[:, 4], e[:, 5]
    return a


def jacobi_eigh(mats: np.ndarray):
    """Cyclic Jacobi on a stack of symmetric 3x3 matrices.

    Returns eigenvalues (m, 3) in descending order and eigenvectors (m, 3, 3)
    as columns.  Each matrix is rotated only while its own off-diagonal norm
    exceeds ``JACOBI_TOL * ||M||_F``, so results do not depend on which other
    matrices share the batch.
    """
    a = np.array(mats, dtype=np.float64).reshape(-1, 3, 3)
    m = a.shape[0]
    v = np.tile(np.eye(3), (m, 1, 1))
    tol = JACOBI_TOL * np.sqrt(np.einsum("kij,kij->k", a, a))
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(2.0 * (a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2))
        active = off > tol
        if not active.any():
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            rows = np.flatnonzero(active & (a[:, p, q] != 0.0))
            if rows.size == 0:
                continue
            _rotate(a, v, rows, p, q)
    lam = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return lam, v


def _rotate(a: np.ndarray, v: np.ndarray, rows: np.ndarray, p: int, q: int) -> None:
    r = 3 - p - q
    A = a[rows]
    V = v[rows]
    apq = A[:, p, q]
    app = A[:, p, p]
    aqq = A[:, q, q]
    with np.errstate(over="ignore", divide="ignore"):
        theta = (aqq - app) / (2.0 * apq)
        big = np.abs(theta) > 1e150
        t_small = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
        t = np.where(big, 0.5 / theta, t_small)
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    tau = s / (1.0 + c)
    arp = A[:, r, p].copy()
    arq = A[:, r, q].copy()
    A[:, p, p] = app - t * apq
    A[:, q, q] = aqq + t * apq
    A[:, p, q] = 0.0
    A[:, q, p] = 0.0
    A[:, r, p] = A[:, p, r] = arp - s * (arq + tau * arp)
    A[:, r, q] = A[:, q, r] = arq + s * (arp - tau * arq)
    vp = V[:, :, p].copy()
    vq = V[:, :, q].copy()
    V[:, :, p] = vp - s[:, None] * (vq + tau[:, None] * vp)
    V[:, :, q] = vq + s[:, None] * (vp - tau[:, None] * vq)
    a[rows] = A
    v[rows] = V


def eig3_sym(m):
    """Eigen-decomposition of one symmetric 3x3 matrix (``SymMat3`` or array)."""
    mat = m.to_matrix() if isinstance(m, SymMat3) else np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix must be finite")
    lam, vec = jacobi_eigh(mat[None])
    return lam[0], vec[0]


# ---------------------------------------------------------------- point statistics


def _slot_tables(voxel_size, pyramid: PyramidSpec):
    """Per-slot local centre and size, (145, 3) each."""
    centers, sizes = [], []
    for lvl, (dx, dy, dz) in enumerate(pyramid.divisions):
        size = pyramid.subgrid_size(lvl, voxel_size)
        iz, iy, ix = np.meshgrid(np.arange(dz), np.arange(dy), np.arange(dx), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        centers.append((idx + 0.5) * size)
        sizes.append(np.broadcast_to(size, idx.shape))
    return np.concatenate(centers), np.concatenate(sizes)


def _local_coords(points: np.ndarray, lower: np.ndarray, voxel_size) -> np.ndarray:
    g = np.asarray(voxel_size, dtype=np.float64)
    # subtraction can round a boundary point just outside its own voxel
    return np.clip(points - lower, 0.0, np.nextafter(g, 0.0))


def _batch_point_stats(local: np.ndarray, seg: np.ndarray, m: int, voxel_size, pyramid: PyramidSpec):
    total = pyramid.total
    counts = np.empty((m, total))
    sums = np.empty((m, total, 3))
    for lvl, (offset, n_slot) in enumerate(zip(pyramid.offsets, pyramid.counts)):
        dx, dy, _ = pyramid.divisions[lvl]
        ax = subgrid_axes(local, lvl, voxel_size, pyramid)
        key = seg * n_slot + ax[:, 0] + ax[:, 1] * dx + ax[:, 2] * dx * dy
        counts[:, offset : offset + n_slot] = np.bincount(key, minlength=m * n_slot).reshape(m, n_slot)
        for a in range(3):
            sums[:, offset : offset + n_slot, a] = np.bincount(
                key, weights=local[:, a], minlength=m * n_slot
            ).reshape(m, n_slot)
    occupied = counts > 0
    centers, sizes = _slot_tables(voxel_size, pyramid)
    # only occupied slots are encoded; most of the pyramid is empty
    row, slot = np.nonzero(occupied)
    vals = (sums[row, slot] / counts[row, slot, None] - centers[slot]) / sizes[slot]
    enc = np.zeros((m, total, 3), dtype=np.float32)
    enc[row, slot] = np.clip(vals.astype(np.float32), np.float32(-0.5), _HALF_F32)
    return enc, occupied.astype(np.uint8)


def point_stats(points, lower_corner, config: GridConfig, pyramid: PyramidSpec = PYRAMID) -> PointStatTargets:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty voxel has no targets")
    local = _local_coords(pts, np.asarray(lower_corner, dtype=np.float64), config.voxel_size)
    enc, occ = _batch_point_stats(local, np.zeros(pts.shape[0], dtype=np.int64), 1, config.voxel_size, pyramid)
    return PointStatTargets(enc[0], occ[0])


# ---------------------------------------------------------------- surface properties


def _batch_surface(pts: np.ndarray, seg: np.ndarray, m: int):
    k = np.bincount(seg, minlength=m)
    cov = _segment_covariance(pts, seg, m)
    lam_all = np.zeros((m, 3))
    normal = np.zeros((m, 3))
    curvature = np.zeros((m, 3))
    valid = np.zeros(m, dtype=bool)
    cand = np.flatnonzero(k >= 3)
    if cand.size:
        lam, vec = jacobi_eigh(_sym_full(cov[cand]))
        lam_all[cand] = lam
        trace = lam.sum(axis=1)
        ok = (trace > MIN_TRACE) & (lam[:, 1] > RANK_TOL * trace)
        rows = cand[ok]
        normal[rows] = canonicalize_normals(vec[ok, :, 2])
        curvature[rows] = lam[ok] / trace[ok, None]
        valid[rows] = True
    return normal, curvature, valid, lam_all


def surface_targets(points) -> SurfaceTargets:
    """Normal and pseudo-curvature of a gathered point set.

    Invalid (all-zero) when fewer than three points are given or the points
    span less than a plane.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normal, curvature, valid, _ = _batch_surface(pts, np.zeros(pts.shape[0], dtype=np.int64), 1)
    return SurfaceTargets(normal[0], curvature[0], bool(valid[0]))


# ---------------------------------------------------------------- records


def _span_indices(starts: np.ndarray, counts: np.ndarray):
    """Concatenated ``arange(s, s + c)`` spans and their span number."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    span = np.repeat(np.arange(counts.shape[0]), counts)
    first = np.cumsum(counts) - counts
    idx = np.arange(total) - np.repeat(first, counts) + np.repeat(np.asarray(starts, dtype=np.int64), counts)
    return idx, span


def _gather_neighborhoods(partition: VoxelPartition, ids: np.ndarray):
    """Points of each voxel's BEV-9 neighbourhood and their owner row."""
    table = neighborhood_table(ids, partition.config)
    groups = np.where(table >= 0, partition.group_index(np.maximum(table, 0)), -1)
    row, col = np.nonzero(groups >= 0)  # row-major: ascending neighbour id per voxel
    g = groups[row, col]
    idx, span = _span_indices(partition.starts[g], partition.counts[g])
    return partition.points[idx], row[span]


def surface_for_voxels(partition: VoxelPartition, ids) -> dict:
    """Float64 surface quantities (before record storage) for voxel ids."""
    ids = np.asarray(ids, dtype=np.int64)
    pts, seg = _gather_neighborhoods(partition, ids)
    normal, curvature, valid, lam = _batch_surface(pts, seg, ids.shape[0])
    return {"normal": normal, "curvature": curvature, "valid": valid, "eigenvalues": lam}


def _records_chunk(partition: VoxelPartition, ids: np.ndarray, pyramid: PyramidSpec) -> np.ndarray:
    cfg = partition.config
    m = ids.shape[0]
    rec = np.zeros(m, dtype=RECORD_DTYPE)
    if m == 0:
        return rec
    own = partition.group_index(ids)
    idx, seg = _span_indices(partition.starts[own], partition.counts[own])
    local = _local_coords(partition.points[idx], cfg.lower_corner(ids)[seg], cfg.voxel_size)
    enc, occ = _batch_point_stats(local, seg, m, cfg.voxel_size, pyramid)

    pts, owner = _gather_neighborhoods(partition, ids)
    normal, curvature, valid, _ = _batch_surface(pts, owner, m)

    rec["voxel_id"] = ids
    rec["centroid"] = enc.reshape(m, 3 * pyramid.total)
    rec["occupancy"] = occ
    rec["normal"] = normal.astype(np.float32)
    rec["curvature"] = curvature.astype(np.float32)
    rec["surface_valid"] = valid.astype(np.uint8)
    return rec


def build_target_records(
    partition: VoxelPartition,
    mask_ids,
    pyramid: PyramidSpec = PYRAMID,
    threads: int = 1,
) -> np.ndarray:
    """One record per masked voxel, ascending by voxel id.

    Surface properties use every point of the neighbouring voxels, masked or
    not.  Work is split into contiguous chunks of voxels; each record depends
    only on its own voxel's data, so the output is identical for any
    ``threads``.
    """
    if pyramid.total != N_GRIDS:
        raise ValueError(f"record layout expects {N_GRIDS} sub-grids, pyramid has {pyramid.total}")
    ids = np.unique(np.asarray(mask_ids, dtype=np.int64))
    if ids.size and np.any(partition.group_index(ids) < 0):
        bad = ids[partition.group_index(ids) < 0][0]
        raise ValueError(f"masked voxel {bad} is not a non-empty voxel")
    threads = max(1, int(threads))
    if threads == 1 or ids.size < 2 * threads:
        return _records_chunk(partition, ids, pyramid)
    chunks = np.array_split(ids, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: _records_chunk(partition, c, pyramid), chunks))
    return np.concatenate(parts)
