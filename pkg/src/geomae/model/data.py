"""Turn voxelized scenes plus masks into model-ready batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geo_targets import build_target_records
from ..masking import MaskSpec
from ..pointcloud_io import empty_records
from ..voxelizer import VoxelPartition
from .network import point_features


@dataclass
class Batch:
    """One or more scenes flattened into a single token list.

    Token rows follow (scene, voxel id) order.  ``feats``/``point_token``
    describe the points of visible voxels only; ``point_token`` indexes into
    the visible tokens.
    """

    ij: np.ndarray
    scene: np.ndarray
    voxel_ids: np.ndarray
    visible_rows: np.ndarray
    masked_rows: np.ndarray
    feats: np.ndarray
    point_token: np.ndarray
    records: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.ij.shape[0])

    @property
    def n_visible(self) -> int:
        return int(self.visible_rows.size)


def scene_batch(partition: VoxelPartition, mask: MaskSpec, records: np.ndarray | None = None) -> Batch:
    cfg = partition.config
    ids = partition.group_ids
    n = ids.size
    idx = cfg.unravel(ids).reshape(-1, 3)
    visible_rows = partition.group_index(mask.visible_ids)
    masked_rows = partition.group_index(mask.masked_ids)
    if np.any(visible_rows < 0) or np.any(masked_rows < 0):
        raise ValueError("mask refers to an empty voxel")
    if np.intersect1d(visible_rows, masked_rows).size:
        raise ValueError("masked and visible voxels overlap")
    if visible_rows.size + masked_rows.size != n:
        raise ValueError("mask does not cover every non-empty voxel")

    counts = partition.counts[visible_rows]
    starts = partition.starts[visible_rows]
    within = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    point_rows = np.repeat(starts, counts) + within
    point_token = np.repeat(np.arange(visible_rows.size), counts)
    pts = partition.points[point_rows]
    lower = cfg.lower_corner(ids[visible_rows]).reshape(-1, 3)
    centers = lower + 0.5 * np.asarray(cfg.voxel_size)
    feats = point_features(pts, point_token, visible_rows.size, centers) if pts.size else np.zeros((0, 9))

    if records is None:
        records = build_target_records(partition, mask.masked_ids) if masked_rows.size else empty_records(0)
    return Batch(
        ij=idx[:, :2].astype(np.int64),
        scene=np.zeros(n, dtype=np.int64),
        voxel_ids=ids.astype(np.int64),
        visible_rows=visible_rows.astype(np.int64),
        masked_rows=masked_rows.astype(np.int64),
        feats=feats,
        point_token=point_token.astype(np.int64),
        records=records,
    )


def merge_batches(batches: list) -> Batch:
    """Stack scenes; each keeps its own window space through ``scene``."""
    tok_off = np.cumsum([0] + [b.n_tokens for b in batches])
    vis_off = np.cumsum([0] + [b.n_visible for b in batches])
    cat = np.concatenate
    return Batch(
        ij=cat([b.ij for b in batches]).reshape(-1, 2),
        scene=cat([np.full(b.n_tokens, i, dtype=np.int64) for i, b in enumerate(batches)]),
        voxel_ids=cat([b.voxel_ids for b in batches]),
        visible_rows=cat([b.visible_rows + tok_off[i] for i, b in enumerate(batches)]),
        masked_rows=cat([b.masked_rows + tok_off[i] for i, b in enumerate(batches)]),
        feats=cat([b.feats for b in batches]).reshape(-1, 9),
        point_token=cat([b.point_token + vis_off[i] for i, b in enumerate(batches)]),
        records=cat([b.records for b in batches]),
    )
