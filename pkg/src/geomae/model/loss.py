"""Reconstruction losses for the four prediction targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..pointcloud_io import N_GRIDS
from . import autograd as ag
from .autograd import Tensor
from .network import Predictions


@dataclass
class LossReport:
    l_cent: float
    l_occ: float
    l_curv: float
    l_nor: float
    l_point: float
    l_surface: float
    total: float
    n_records: int = 0
    n_occupied: int = 0
    n_valid: int = 0
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def row(self) -> tuple:
        """(l_cent, l_occ, l_nor, l_curv, total), the loss-curve column order."""
        return (self.l_cent, self.l_occ, self.l_nor, self.l_curv, self.total)

    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.row())))


def _ratio(num: Tensor, den: int) -> Tensor:
    # a degenerate denominator contributes an exact zero with no gradient path
    return num * (1.0 / den) if den else ag.Tensor(0.0)


def compute_loss(pred: Predictions, records: np.ndarray, sign_invariant_normal: bool = False) -> LossReport:
    """Mean-squared and cross-entropy losses against target records.

    Centroid error is averaged over the coordinates of occupied sub-grids,
    occupancy cross-entropy over all slots, and normal/curvature error over
    the coordinates of records with a valid surface.
    """
    m = len(records)
    if len(pred) != m:
        raise ValueError(f"{len(pred)} predictions for {m} records")
    rec_ids = records["voxel_id"].astype(np.int64)
    if pred.voxel_ids.size != m or np.any(pred.voxel_ids != rec_ids):
        raise ValueError("prediction and record voxel ids are misaligned")

    occ = records["occupancy"].astype(np.float64)
    cent_w = np.repeat(occ, 3, axis=1)
    cent_t = records["centroid"].astype(np.float64)
    valid = records["surface_valid"].astype(bool)
    n_occ = int(occ.sum())
    n_valid = int(valid.sum())

    l_cent = _ratio((ag.square(pred.cent - cent_t) * cent_w).sum(), 3 * n_occ)
    l_occ = _ratio(ag.bce_with_logits(pred.occ, occ).sum(), m * N_GRIDS)

    vw = valid.astype(np.float64)[:, None]
    nor_t = records["normal"].astype(np.float64)
    plus = (ag.square(pred.nor - nor_t) * vw).sum(axis=1)
    if sign_invariant_normal:
        minus = (ag.square(pred.nor + nor_t) * vw).sum(axis=1)
        plus = ag.minimum(plus, minus)
    l_nor = _ratio(plus.sum(), 3 * n_valid)
    l_curv = _ratio((ag.square(pred.curv - records["curvature"].astype(np.float64)) * vw).sum(), 3 * n_valid)

    l_point = l_cent + l_occ
    l_surface = l_curv + l_nor
    total = l_point + l_surface
    return LossReport(
        l_cent=float(l_cent.value),
        l_occ=float(l_occ.value),
        l_curv=float(l_curv.value),
        l_nor=float(l_nor.value),
        l_point=float(l_point.value),
        l_surface=float(l_surface.value),
        total=float(total.value),
        n_records=m,
        n_occupied=n_occ,
        n_valid=n_valid,
        graph=total,
    )
