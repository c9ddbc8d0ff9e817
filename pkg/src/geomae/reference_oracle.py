"""Slow, independent re-derivations of every target, for tests and ``verify``.

Nothing here calls into the production target code.  Voxel membership uses
explicit per-point loops, sub-grid membership uses interval tests over every
(point, sub-grid) pair, eigenvalues come from the trigonometric solution of
the characteristic cubic and eigenvectors from cross products of rows of
``M - lambda I``.  Agreement with production is therefore evidence rather
than a tautology.
"""

from __future__ import annotations

import math

import numpy as np

from .pointcloud_io import RECORD_DTYPE

LEVEL_DIVISIONS = ((1, 1, 1), (2, 2, 4), (4, 4, 8))
_F32_BELOW_HALF = np.nextafter(np.float32(0.5), np.float32(0.0))


def oracle_voxel_groups(points, config) -> dict:
    """Map voxel id -> list of points (in input order) by a plain loop."""
    lo = [float(v) for v in config.range_min]
    hi = [float(v) for v in config.range_max]
    g = [float(v) for v in config.voxel_size]
    n = [int(round((hi[a] - lo[a]) / g[a])) for a in range(3)]
    groups: dict = {}
    for p in np.asarray(points, dtype=np.float64).tolist():
        cell = [math.floor((p[a] - lo[a]) / g[a]) for a in range(3)]
        if any(cell[a] < 0 or cell[a] >= n[a] for a in range(3)):
            continue
        vid = cell[0] + cell[1] * n[0] + cell[2] * n[0] * n[1]
        groups.setdefault(vid, []).append(p)
    return groups


def oracle_point_stats(points, lower_corner, voxel_size):
    """Encoded centroids (145, 3) float32 and occupancy (145,) uint8."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty voxel has no targets")
    g = np.asarray(voxel_size, dtype=np.float64)
    local = pts - np.asarray(lower_corner, dtype=np.float64)
    local = np.minimum(np.maximum(local, 0.0), np.nextafter(g, 0.0))
    cent = []
    occ = []
    for div in LEVEL_DIVISIONS:
        step = g / np.asarray(div, dtype=np.float64)
        # every sub-grid of the level as explicit [lo, hi) boxes, x fastest
        ks = np.array([(kx, ky, kz) for kz in range(div[2]) for ky in range(div[1]) for kx in range(div[0])])
        lo = ks * step
        hi = np.where(ks < np.asarray(div) - 1, (ks + 1) * step, np.inf)
        inside = np.all((local[:, None, :] >= lo[None]) & (local[:, None, :] < hi[None]), axis=2)
        count = inside.sum(axis=0)
        sums = inside.T.astype(np.float64) @ local
        for j in range(ks.shape[0]):
            if count[j]:
                center = lo[j] + step / 2
                cent.append((sums[j] / count[j] - center) / step)
                occ.append(1)
            else:
                cent.append(np.zeros(3))
                occ.append(0)
    c = np.asarray(cent).astype(np.float32)
    c = np.minimum(np.maximum(c, np.float32(-0.5)), _F32_BELOW_HALF)
    return c, np.asarray(occ, dtype=np.uint8)


def oracle_covariance(points) -> np.ndarray:
    """Literal ``(1/K) sum p p^T - mean mean^T`` on points shifted by the first one."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = pts - pts[0]
    k = q.shape[0]
    m = (q.T @ q) / k
    mean = q.sum(axis=0) / k
    return m - np.outer(mean, mean)


def oracle_eigenvalues(m) -> tuple:
    """Descending eigenvalues of a symmetric 3x3 matrix from the characteristic cubic."""
    a = [[float(m[i][j]) for j in range(3)] for i in range(3)]
    p1 = a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2
    if p1 == 0.0:
        return tuple(sorted((a[0][0], a[1][1], a[2][2]), reverse=True))
    q = (a[0][0] + a[1][1] + a[2][2]) / 3.0
    p2 = (a[0][0] - q) ** 2 + (a[1][1] - q) ** 2 + (a[2][2] - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b = [[(a[i][j] - (q if i == j else 0.0)) / p for j in range(3)] for i in range(3)]
    det_b = (
        b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0])
    )
    r = min(1.0, max(-1.0, det_b / 2.0))
    phi = math.acos(r) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    return tuple(sorted((l1, l2, l3), reverse=True))


def oracle_eigenvector(m, lam: float) -> np.ndarray:
    """Unit null vector of ``M - lam I`` from the largest row cross product."""
    a = np.asarray(m, dtype=np.float64) - lam * np.eye(3)
    best = None
    best_norm = -1.0
    for i, j in ((0, 1), (0, 2), (1, 2)):
        c = np.cross(a[i], a[j])
        nrm = float(np.sqrt(c @ c))
        if nrm > best_norm:
            best, best_norm = c, nrm
    if best_norm == 0.0:
        raise ValueError("eigenvector undefined in a degenerate eigenspace")
    return best / best_norm


def oracle_canonical(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if abs(n[2]) > 1e-9:
        sign = 1.0 if n[2] > 0 else -1.0
    elif abs(n[1]) > 1e-9:
        sign = 1.0 if n[1] > 0 else -1.0
    else:
        sign = 1.0 if n[0] > 0 else -1.0
    return sign * n


def oracle_surface_targets(points) -> dict:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = {
        "normal": np.zeros(3),
        "curvature": np.zeros(3),
        "eigenvalues": np.zeros(3),
        "valid": False,
        "gap": 0.0,
        "fro": 0.0,
    }
    if pts.shape[0] < 3:
        return out
    m = oracle_covariance(pts)
    lam = oracle_eigenvalues(m)
    total = sum(lam)
    out["eigenvalues"] = np.asarray(lam)
    out["fro"] = float(np.sqrt((m * m).sum()))
    out["gap"] = lam[1] - lam[2]
    if total <= 1e-12 or lam[1] <= 1e-10 * total:
        return out
    out["valid"] = True
    out["curvature"] = np.asarray(lam) / total
    if out["gap"] > 0:
        out["normal"] = oracle_canonical(oracle_eigenvector(m, lam[2]))
    return out


def oracle_records(points, config, masked_ids) -> tuple:
    """Records for ``masked_ids`` plus per-record eigen diagnostics."""
    groups = oracle_voxel_groups(points, config)
    n = [int(round((config.range_max[a] - config.range_min[a]) / config.voxel_size[a])) for a in range(3)]
    recs = np.zeros(len(masked_ids), dtype=RECORD_DTYPE)
    diag = []
    for r, vid in enumerate(sorted(int(v) for v in masked_ids)):
        if vid not in groups:
            raise ValueError(f"masked voxel {vid} is not a non-empty voxel")
        ix, iy, iz = vid % n[0], (vid // n[0]) % n[1], vid // (n[0] * n[1])
        lower = [config.range_min[0] + ix * config.voxel_size[0],
                 config.range_min[1] + iy * config.voxel_size[1],
                 config.range_min[2] + iz * config.voxel_size[2]]
        cent, occ = oracle_point_stats(groups[vid], lower, config.voxel_size)
        gathered = []
        for nid in sorted(
            (ix + dx) + (iy + dy) * n[0] + iz * n[0] * n[1]
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            if 0 <= ix + dx < n[0] and 0 <= iy + dy < n[1]
        ):
            gathered.extend(groups.get(nid, []))
        surf = oracle_surface_targets(gathered)
        recs[r]["voxel_id"] = vid
        recs[r]["centroid"] = cent.reshape(-1)
        recs[r]["occupancy"] = occ
        recs[r]["normal"] = surf["normal"].astype(np.float32)
        recs[r]["curvature"] = surf["curvature"].astype(np.float32)
        recs[r]["surface_valid"] = 1 if surf["valid"] else 0
        diag.append(surf)
    return recs, diag


def _sigmoid_bce(logit: float, target: float) -> float:
    # log(1 + exp(x)) - t x, evaluated without overflow
    if logit > 0:
        sp = logit + math.log1p(math.exp(-logit))
    else:
        sp = math.log1p(math.exp(logit))
    return sp - target * logit


def oracle_loss(pred_cent, pred_occ, pred_nor, pred_curv, records, sign_invariant_normal: bool = False) -> dict:
    """Loop-based loss terms over plain arrays."""
    n_rec = len(records)
    cent_sum, cent_n = 0.0, 0
    occ_sum, occ_n = 0.0, 0
    nor_sum, curv_sum, n_valid = 0.0, 0.0, 0
    for r in range(n_rec):
        rec = records[r]
        for s in range(145):
            t_occ = float(rec["occupancy"][s])
            occ_sum += _sigmoid_bce(float(pred_occ[r][s]), t_occ)
            occ_n += 1
            if t_occ > 0:
                for a in range(3):
                    d = float(pred_cent[r][3 * s + a]) - float(rec["centroid"][3 * s + a])
                    cent_sum += d * d
                    cent_n += 1
        if rec["surface_valid"]:
            n_valid += 1
            plus = sum((float(pred_nor[r][a]) - float(rec["normal"][a])) ** 2 for a in range(3))
            if sign_invariant_normal:
                minus = sum((float(pred_nor[r][a]) + float(rec["normal"][a])) ** 2 for a in range(3))
                plus = min(plus, minus)
            nor_sum += plus
            curv_sum += sum((float(pred_curv[r][a]) - float(rec["curvature"][a])) ** 2 for a in range(3))
    l_cent = cent_sum / cent_n if cent_n else 0.0
    l_occ = occ_sum / occ_n if occ_n else 0.0
    l_nor = nor_sum / (3 * n_valid) if n_valid else 0.0
    l_curv = curv_sum / (3 * n_valid) if n_valid else 0.0
    return {
        "l_cent": l_cent,
        "l_occ": l_occ,
        "l_nor": l_nor,
        "l_curv": l_curv,
        "total": (l_cent + l_occ) + (l_curv + l_nor),
    }


def normal_angle(a, b) -> float:
    """Angle between unit vectors; sign-blind when ``a`` sits on the z tie boundary."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = float(a @ b)
    if abs(a[2]) < 1e-6:
        dot = abs(dot)
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), dot)


def compare_records(prod: np.ndarray, ref: np.ndarray) -> dict:
    """Deviations between two record arrays as stored (float32)."""
    out = {
        "records": int(len(prod)),
        "id_mismatch": int(len(prod) != len(ref) or bool(np.any(prod["voxel_id"] != ref["voxel_id"]))),
        "occupancy_mismatch": 0,
        "centroid_mismatch": 0,
        "valid_mismatch": 0,
        "curvature_max_abs": 0.0,
        "normal_max_abs": 0.0,
    }
    if out["id_mismatch"]:
        return out
    out["occupancy_mismatch"] = int(np.count_nonzero(prod["occupancy"] != ref["occupancy"]))
    out["centroid_mismatch"] = int(
        np.count_nonzero(prod["centroid"].view(np.uint32) != ref["centroid"].view(np.uint32))
    )
    out["valid_mismatch"] = int(np.count_nonzero(prod["surface_valid"] != ref["surface_valid"]))
    both = (prod["surface_valid"] == 1) & (ref["surface_valid"] == 1)
    if both.any():
        dc = prod["curvature"][both].astype(np.float64) - ref["curvature"][both].astype(np.float64)
        out["curvature_max_abs"] = float(np.max(np.abs(dc)))
        dn = np.abs(prod["normal"][both].astype(np.float64)) - np.abs(ref["normal"][both].astype(np.float64))
        out["normal_max_abs"] = float(np.max(np.abs(dn)))
    return out


def compare_surface(prod: dict, diag: list) -> dict:
    """Float64 comparison of production surface values against oracle diagnostics.

    Normals are only compared where the two smallest eigenvalues are separated
    by more than ``1e-6 * ||M||_F``; inside a degenerate eigenspace the
    direction is not unique.
    """
    out = {"eigenvalue_max_abs": 0.0, "curvature_max_abs": 0.0, "normal_max_angle": 0.0,
           "normals_compared": 0, "valid_mismatch": 0}
    for r, d in enumerate(diag):
        if bool(prod["valid"][r]) != d["valid"]:
            out["valid_mismatch"] += 1
            continue
        out["eigenvalue_max_abs"] = max(
            out["eigenvalue_max_abs"], float(np.max(np.abs(prod["eigenvalues"][r] - d["eigenvalues"])))
        )
        if not d["valid"]:
            continue
        out["curvature_max_abs"] = max(
            out["curvature_max_abs"], float(np.max(np.abs(prod["curvature"][r] - d["curvature"])))
        )
        if d["gap"] > 1e-6 * d["fro"]:
            out["normal_max_angle"] = max(out["normal_max_angle"], normal_angle(prod["normal"][r], d["normal"]))
            out["normals_compared"] += 1
    return out
