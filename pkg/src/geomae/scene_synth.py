"""Synthetic scenes built from planes, spheres and boxes.

Every shape is sampled area-uniformly with optional Gaussian jitter along the
local surface normal.  Sampling draws from an xorshift64* stream whose seed is
derived per shape from the scene seed, so a scene is a pure function of its
spec.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo_targets import canonicalize_normal
from .pointcloud_io import PointCloud
from .rng import XorShift64Star, derive_seed

KINDS = ("plane", "sphere", "box")


class ShapeError(ValueError):
    pass


@dataclass
class ShapeSpec:
    """One primitive.

    ``extent`` is (width, height) for a plane lying in its local x-y plane,
    (radius,) for a sphere and full side lengths (a, b, c) for a box.
    """

    kind: str
    extent: tuple
    density: float
    noise_sigma: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ShapeError(f"unknown shape kind {self.kind!r}")
        self.extent = tuple(float(e) for e in np.atleast_1d(self.extent))
        want = {"plane": 2, "sphere": 1, "box": 3}[self.kind]
        if len(self.extent) != want:
            raise ShapeError(f"{self.kind} extent needs {want} values, got {len(self.extent)}")
        if any(e < 0 for e in self.extent):
            raise ShapeError("extent must be non-negative")
        if not self.density > 0:
            raise ShapeError("density must be positive")
        if not self.noise_sigma >= 0:
            raise ShapeError("noise_sigma must be non-negative")
        self.translation = tuple(float(t) for t in self.translation)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ShapeError("rotation is not orthonormal")
        self.rotation = rot

    @property
    def area(self) -> float:
        if self.kind == "plane":
            return self.extent[0] * self.extent[1]
        if self.kind == "sphere":
            return 4.0 * math.pi * self.extent[0] ** 2
        a, b, c = self.extent
        return 2.0 * (a * b + b * c + c * a)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pose": {"translation": list(self.translation), "rotation": self.rotation.tolist()},
            "extent": list(self.extent),
            "density": self.density,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        pose = d.get("pose", {})
        return cls(
            kind=d["kind"],
            extent=d["extent"],
            density=float(d["density"]),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            translation=pose.get("translation", (0.0, 0.0, 0.0)),
            rotation=pose.get("rotation", np.eye(3)),
        )


@dataclass
class SceneSpec:
    shapes: list
    seed: int
    bounds: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax))

    def __post_init__(self) -> None:
        lo, hi = (tuple(float(v) for v in b) for b in self.bounds)
        if len(lo) != 3 or len(hi) != 3 or any(a > b for a, b in zip(lo, hi)):
            raise ValueError("bounds must be two 3-vectors with min <= max")
        self.bounds = (lo, hi)
        self.seed = int(self.seed) & ((1 << 64) - 1)

    def to_dict(self) -> dict:
        return {
            "shapes": [s.to_dict() for s in self.shapes],
            "seed": self.seed,
            "bounds": {"min": list(self.bounds[0]), "max": list(self.bounds[1])},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        b = d["bounds"]
        bounds = (b["min"], b["max"]) if isinstance(b, dict) else (b[0], b[1])
        return cls([ShapeSpec.from_dict(s) for s in d["shapes"]], int(d["seed"]), bounds)


def load_scene_spec(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))


def _local_samples(spec: ShapeSpec, n: int, stream: XorShift64Star):
    """Surface points and unit normals in the shape's local frame."""
    if spec.kind == "plane":
        w, h = spec.extent
        u = stream.uniforms(2 * n).reshape(n, 2)
        pts = np.column_stack([(u[:, 0] - 0.5) * w, (u[:, 1] - 0.5) * h, np.zeros(n)])
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        return pts, normals
    if spec.kind == "sphere":
        (r,) = spec.extent
        u = stream.uniforms(2 * n).reshape(n, 2)
        cos_t = 1.0 - 2.0 * u[:, 0]
        sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
        phi = 2.0 * np.pi * u[:, 1]
        normals = np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
        return r * normals, normals
    a, b, c = spec.extent
    half = np.array([a, b, c]) / 2.0
    # faces: +x, -x, +y, -y, +z, -z
    face_area = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    cum = np.cumsum(face_area) / face_area.sum()
    u = stream.uniforms(3 * n).reshape(n, 3)
    face = np.minimum(np.searchsorted(cum, u[:, 0], side="right"), 5)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    rows = np.arange(n)
    normals[rows, axis] = sign
    # the two in-face axes in increasing order
    other = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    pts[rows, axis] = sign * half[axis]
    pts[rows, other[:, 0]] = (u[:, 1] - 0.5) * 2.0 * half[other[:, 0]]
    pts[rows, other[:, 1]] = (u[:, 2] - 0.5) * 2.0 * half[other[:, 1]]
    return pts, normals


def sample_shape(spec: ShapeSpec, seed: int) -> PointCloud:
    n = int(round(spec.density * spec.area))
    if spec.area <= 0.0 or n == 0:
        raise ShapeError("empty shape")
    stream = XorShift64Star(seed)
    local, normals = _local_samples(spec, n, stream)
    jitter = stream.normals(n) * spec.noise_sigma
    local = local + normals * jitter[:, None]
    world = local @ spec.rotation.T + np.asarray(spec.translation)
    return PointCloud(world)


def analytic_normal(spec: ShapeSpec, p: Sequence[float], tol: float = 1e-6) -> np.ndarray:
    """Exact surface normal at the surface point nearest to ``p`` (canonical sign)."""
    limit = max(4.0 * spec.noise_sigma, tol)
    q = spec.rotation.T @ (np.asarray(p, dtype=np.float64) - np.asarray(spec.translation))
    if spec.kind == "plane":
        w, h = spec.extent
        dx = max(abs(q[0]) - w / 2.0, 0.0)
        dy = max(abs(q[1]) - h / 2.0, 0.0)
        dist = math.sqrt(dx * dx + dy * dy + q[2] * q[2])
        n_local = np.array([0.0, 0.0, 1.0])
    elif spec.kind == "sphere":
        rho = float(np.linalg.norm(q))
        dist = abs(rho - spec.extent[0])
        if rho == 0.0:
            raise ShapeError("off-surface query")
        n_local = q / rho
    else:
        half = np.array(spec.extent) / 2.0
        gap = np.abs(q) - half
        if np.all(gap <= 0):
            axis = int(np.argmax(gap))
            dist = -float(gap[axis])
        else:
            axis = int(np.argmax(gap))
            dist = float(np.linalg.norm(np.maximum(gap, 0.0)))
        n_local = np.zeros(3)
        n_local[axis] = 1.0 if q[axis] >= 0 else -1.0
    if dist > limit:
        raise ShapeError("off-surface query")
    return canonicalize_normal(spec.rotation @ n_local)


def compose_scene(spec: SceneSpec) -> PointCloud:
    if not spec.shapes:
        raise ShapeError("scene needs at least one shape")
    lo = np.asarray(spec.bounds[0])
    hi = np.asarray(spec.bounds[1])
    parts = []
    for index, shape in enumerate(spec.shapes):
        pts = sample_shape(shape, derive_seed(spec.seed, index)).points
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        parts.append(pts[inside])
    return PointCloud(np.concatenate(parts, axis=0))


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_scene_spec(
    seed: int,
    bounds=((0.0, 0.0, -1.0), (8.0, 8.0, 3.0)),
    density: float = 150.0,
    noise_sigma: float = 0.01,
    n_objects: int = 3,
) -> SceneSpec:
    """A ground plane plus boxes and spheres placed at seeded random poses.

    Object parameters are drawn from the same xorshift64* stream family as the
    point sampling, so the spec itself is reproducible from ``seed``.
    """
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    stream = XorShift64Star(derive_seed(seed, 1 << 32))
    span = hi - lo
    ground_z = lo[2] + 0.25 * span[2]
    shapes = [
        ShapeSpec(
            "plane",
            (span[0], span[1]),
            density,
            noise_sigma,
            translation=(lo[0] + span[0] / 2, lo[1] + span[1] / 2, ground_z),
        )
    ]
    for _ in range(n_objects):
        u = stream.uniforms(6)
        cx = lo[0] + span[0] * (0.15 + 0.7 * u[0])
        cy = lo[1] + span[1] * (0.15 + 0.7 * u[1])
        if u[2] < 0.5:
            size = 0.6 + 1.4 * u[3]
            height = 0.4 + 1.2 * u[4]
            shapes.append(
                ShapeSpec(
                    "box",
                    (size, 0.5 * size + 0.3, height),
                    density,
                    noise_sigma,
                    translation=(cx, cy, ground_z + height / 2),
                    rotation=rotation_z(2 * math.pi * u[5]),
                )
            )
        else:
            radius = 0.3 + 0.6 * u[3]
            shapes.append(
                ShapeSpec("sphere", (radius,), density, noise_sigma, translation=(cx, cy, ground_z + radius))
            )
    return SceneSpec(shapes, seed, (tuple(lo), tuple(hi)))
