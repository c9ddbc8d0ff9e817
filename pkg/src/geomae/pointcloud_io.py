"""Point-cloud and target-file I/O.

Point formats: CSV rows ``x,y,z[,i]`` and ``xyzi_bin`` (little-endian f32
quadruples).  Target files (``GMT1``) hold fixed-size per-voxel records so a
reader can index into them directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

PathLike = Union[str, Path]

N_GRIDS = 145
N_CENTROID = 3 * N_GRIDS

TARGET_MAGIC = b"GMT1"
TARGET_VERSION = 1
# magic, version, range_min[3], range_max[3], voxel_size[3], record count
_HEADER = struct.Struct("<4sI3d3d3dQ")
HEADER_SIZE = _HEADER.size

RECORD_DTYPE = np.dtype(
    [
        ("voxel_id", "<u8"),
        ("centroid", "<f4", (N_CENTROID,)),
        ("occupancy", "u1", (N_GRIDS,)),
        ("normal", "<f4", (3,)),
        ("curvature", "<f4", (3,)),
        ("surface_valid", "u1"),
        ("pad", "u1", (3,)),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize


class PointFormatError(ValueError):
    pass


class TargetFileError(ValueError):
    pass


@dataclass
class PointCloud:
    """Points in meters.

    Storage is float32 unless float64 input is given; synthetic scenes keep
    float64 so that zero-noise geometry stays exact until it is written out.
    """

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points)
        if pts.dtype != np.float64:
            pts = pts.astype(np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length must equal point count")
            self.intensity = inten

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3), dtype=np.float32))


def read_points(path: PathLike, format: str = "csv") -> PointCloud:
    if format == "csv":
        return _read_csv(Path(path))
    if format == "xyzi_bin":
        return _read_bin(Path(path))
    raise ValueError(f"unknown point format {format!r}")


def write_points(path: PathLike, cloud: PointCloud, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with open(path, "w", encoding="ascii") as fh:
            pts = cloud.points
            if cloud.intensity is None:
                for x, y, z in pts.tolist():
                    fh.write(f"{_f32repr(x)},{_f32repr(y)},{_f32repr(z)}\n")
            else:
                for (x, y, z), i in zip(pts.tolist(), cloud.intensity.tolist()):
                    fh.write(f"{_f32repr(x)},{_f32repr(y)},{_f32repr(z)},{_f32repr(i)}\n")
    elif format == "xyzi_bin":
        buf = np.zeros((cloud.count, 4), dtype="<f4")
        buf[:, :3] = cloud.points
        if cloud.intensity is not None:
            buf[:, 3] = cloud.intensity
        buf.tofile(path)
    else:
        raise ValueError(f"unknown point format {format!r}")


def _f32repr(v: float) -> str:
    # shortest text that parses back to the same float32
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def _read_csv(path: Path) -> PointCloud:
    rows: list[list[float]] = []
    ncols = None
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            start, offset = offset, offset + len(raw)
            line = raw.decode("ascii", errors="replace").strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) not in (3, 4):
                raise PointFormatError(f"line {lineno}: expected 3 or 4 columns, got {len(fields)}")
            if ncols is None:
                ncols = len(fields)
            elif len(fields) != ncols:
                raise PointFormatError(f"line {lineno}: inconsistent columns")
            try:
                vals = [float(f) for f in fields]
            except ValueError:
                raise PointFormatError(f"line {lineno}: malformed number") from None
            if not np.all(np.isfinite(np.asarray(vals, dtype=np.float32))):
                raise PointFormatError(f"non-finite at offset {start} (line {lineno})")
            rows.append(vals)
    if not rows:
        return PointCloud.empty()
    arr = np.asarray(rows, dtype=np.float32)
    return PointCloud(arr[:, :3], arr[:, 3] if ncols == 4 else None)


def _read_bin(path: Path) -> PointCloud:
    raw = path.read_bytes()
    if len(raw) % 16 != 0:
        raise PointFormatError(
            f"binary length {len(raw)} is not a multiple of 16 (trailing bytes at offset {len(raw) - len(raw) % 16})"
        )
    vals = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(vals)
    if bad.any():
        first = int(np.flatnonzero(bad.reshape(-1))[0])
        raise PointFormatError(f"non-finite at offset {4 * first}")
    return PointCloud(vals[:, :3].astype(np.float32), vals[:, 3].astype(np.float32))


def empty_records(n: int) -> np.ndarray:
    return np.zeros(n, dtype=RECORD_DTYPE)


@dataclass
class TargetFile:
    version: int
    range_min: tuple
    range_max: tuple
    voxel_size: tuple
    records: np.ndarray

    @property
    def count(self) -> int:
        return int(self.records.shape[0])


def write_targets(path: PathLike, records: np.ndarray, config) -> None:
    """Write a GMT1 file.  ``config`` is any object with grid range/size fields."""
    records = np.asarray(records, dtype=RECORD_DTYPE)
    ids = records["voxel_id"]
    if ids.size > 1 and not np.all(ids[1:] > ids[:-1]):
        raise TargetFileError("records must be sorted by strictly ascending voxel id")
    header = _HEADER.pack(
        TARGET_MAGIC,
        TARGET_VERSION,
        *map(float, config.range_min),
        *map(float, config.range_max),
        *map(float, config.voxel_size),
        records.shape[0],
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_targets(path: PathLike) -> TargetFile:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != TARGET_MAGIC:
        raise TargetFileError("not a GMT1 file")
    if len(raw) < HEADER_SIZE:
        raise TargetFileError("unexpected EOF in header")
    magic, version, *rest = _HEADER.unpack_from(raw, 0)
    if version != TARGET_VERSION:
        raise TargetFileError(f"not a GMT1 file (version {version})")
    rmin, rmax, size, count = tuple(rest[0:3]), tuple(rest[3:6]), tuple(rest[6:9]), rest[9]
    expected = HEADER_SIZE + count * RECORD_SIZE
    if len(raw) < expected:
        raise TargetFileError(f"unexpected EOF: need {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise TargetFileError(f"trailing bytes after {count} records")
    records = np.frombuffer(raw, dtype=RECORD_DTYPE, count=count, offset=HEADER_SIZE).copy()
    return TargetFile(version, rmin, rmax, size, records)
