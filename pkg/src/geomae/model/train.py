"""Pre-training loop, training config and the parameter blob format."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..masking import select_mask
from ..pointcloud_io import PointCloud
from ..rng import derive_seed
from ..scene_synth import compose_scene, random_scene_spec
from ..voxelizer import GridConfig, voxelize
from . import autograd as ag
from .data import Batch, merge_batches, scene_batch
from .loss import LossReport, compute_loss
from .network import ModelConfig, Predictions, decode_dual, encode, heads, init_params, vfe_embed
from .optim import DEFAULT_BETAS, DEFAULT_EPS, DEFAULT_WEIGHT_DECAY, AdamW

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_cent", "l_occ", "l_nor", "l_curv", "total")
PARAMS_MAGIC = b"GMP1"
PARAMS_VERSION = 1

DESK_GRID = GridConfig((0.0, 0.0, -1.0), (4.0, 4.0, 3.0), (0.5, 0.5, 4.0))


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, report: Optional[LossReport] = None) -> None:
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.report = report


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridConfig = DESK_GRID
    lr: float = 1e-3
    betas: tuple = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    steps: int = 200
    batch_size: int = 32
    n_scenes: int = 32
    mask_ratio: float = 0.7
    seed: int = 0
    scene_density: float = 30.0
    scene_noise: float = 0.01
    inject_nan_step: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ValueError("training config must be a JSON object")
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "grid" in d:
            d["grid"] = GridConfig.from_dict(d["grid"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        cfg = cls(**d)
        if cfg.steps < 0 or cfg.batch_size < 1 or cfg.n_scenes < 1:
            raise ValueError("steps must be >= 0, batch_size and n_scenes >= 1")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["grid"] = self.grid.to_dict()
        d["betas"] = list(self.betas)
        return d


def load_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return TrainConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------- data


def synthetic_clouds(cfg: TrainConfig) -> list:
    lo = cfg.grid.range_min
    hi = cfg.grid.range_max
    clouds = []
    for i in range(cfg.n_scenes):
        spec = random_scene_spec(derive_seed(cfg.seed, i), (lo, hi), cfg.scene_density, cfg.scene_noise)
        clouds.append(compose_scene(spec))
    return clouds


def make_batches(clouds: list, cfg: TrainConfig) -> list:
    """Fixed per-scene masks (seed derived from the scene index), grouped into batches."""
    per_scene = []
    for i, cloud in enumerate(clouds):
        part = voxelize(cloud, cfg.grid)
        if part.n_nonempty == 0:
            continue
        mask = select_mask(part.group_ids, cfg.mask_ratio, derive_seed(cfg.seed, i))
        per_scene.append(scene_batch(part, mask))
    if not per_scene:
        raise ValueError("no scene has a non-empty voxel inside the grid")
    return [merge_batches(per_scene[k : k + cfg.batch_size]) for k in range(0, len(per_scene), cfg.batch_size)]


# ---------------------------------------------------------------- model


def forward(params: dict, batch: Batch, cfg: ModelConfig) -> Predictions:
    vis = batch.visible_rows
    tokens = vfe_embed(params, batch.feats, batch.point_token, batch.n_visible, cfg)
    encoded = encode(params, tokens, batch.ij[vis], cfg, batch.scene[vis])
    t_point, t_surface = decode_dual(params, encoded, vis, batch.masked_rows, batch.ij, cfg, batch.scene)
    return heads(params, t_point, t_surface, batch.voxel_ids[batch.masked_rows])


def loss_and_grads(params: dict, batch: Batch, cfg: ModelConfig) -> LossReport:
    """Forward, loss and reverse pass; gradients land in ``p.grad``."""
    for p in params.values():
        p.grad = None
    report = compute_loss(forward(params, batch, cfg), batch.records, cfg.sign_invariant_normal)
    ag.backward(report.graph)
    return report


def gradients(params: dict) -> dict:
    """Parameter gradients, with exact zeros for parameters off the loss path."""
    return {k: (np.zeros_like(p.value) if p.grad is None else p.grad) for k, p in params.items()}


@dataclass
class TrainResult:
    params: dict
    history: list


def train(cfg: TrainConfig, batches: list | None = None, params: dict | None = None) -> TrainResult:
    """Run ``cfg.steps`` AdamW updates; step ``k`` uses batch ``k mod n_batches``.

    ``history`` rows are (step, l_cent, l_occ, l_nor, l_curv, total) measured
    before each update.  Raises :class:`NonFiniteLoss` on the first bad step.
    """
    if batches is None:
        batches = make_batches(synthetic_clouds(cfg), cfg)
    params = init_params(cfg.model, cfg.seed) if params is None else params
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    history = []
    for step in range(cfg.steps):
        if cfg.inject_nan_step is not None and step == cfg.inject_nan_step:
            params["mask_token"].value = np.full_like(params["mask_token"].value, np.nan)
        report = loss_and_grads(params, batches[step % len(batches)], cfg.model)
        if not report.finite():
            raise NonFiniteLoss(step, report)
        history.append((step,) + report.row())
        opt.step()
        log.debug("step %d total %.6f", step, report.total)
    return TrainResult(params, history)


def write_loss_csv(path, history: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------- parameter blob
#
# "GMP1", u32 version, u32 config-json length, config json (utf-8), u32 count,
# then per parameter: u16 name length, name, u8 ndim, u32 dims, f64 values (LE).


def save_params(path, params: dict, model_cfg: ModelConfig) -> None:
    cfg_json = json.dumps(model_cfg.to_dict(), sort_keys=True).encode()
    out = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(cfg_json)), cfg_json, struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        out.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_params(path) -> tuple:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise ValueError("not a GMP1 parameter file")
    version, n_cfg = struct.unpack_from("<II", data, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    pos = 12
    model_cfg = ModelConfig(**json.loads(data[pos : pos + n_cfg]))
    pos += n_cfg
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n_name].decode()
        pos += n_name
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 8
        params[name] = ag.parameter(np.frombuffer(data[pos : pos + size], dtype="<f8").reshape(shape).copy(), name)
        pos += size
    if pos != len(data):
        raise ValueError("trailing bytes in parameter file")
    return params, model_cfg


def clouds_from_dir(path, fmt: str | None = None) -> list:
    """Every point file in ``path`` (sorted by name)."""
    from ..pointcloud_io import read_points

    files = sorted(p for p in Path(path).iterdir() if p.suffix in (".csv", ".bin"))
    clouds: list[PointCloud] = []
    for f in files:
        clouds.append(read_points(f, fmt or ("csv" if f.suffix == ".csv" else "xyzi_bin")))
    return clouds
