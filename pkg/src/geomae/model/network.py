"""Masked autoencoder over voxel tokens.

Visible voxels are embedded by a two-layer VFE, encoded by windowed
self-attention blocks, then joined by a shared learnable mask token at every
masked position.  Two decoders with disjoint parameters read the same input:
one feeds the centroid/occupancy heads, the other the normal/curvature heads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..pointcloud_io import N_CENTROID, N_GRIDS
from . import autograd as ag
from .autograd import Tensor

HEAD_OUTPUTS = {"cent": N_CENTROID, "occ": N_GRIDS, "nor": 3, "curv": 3}
POINT_HEADS = ("cent", "occ")
SURFACE_HEADS = ("nor", "curv")


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 2
    d_hidden: int = 256
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    window: tuple = (4, 4)
    vfe_channels: tuple = (32, 128)
    head_hidden: int = 128
    sign_invariant_normal: bool = False

    def __post_init__(self) -> None:
        self.window = tuple(int(w) for w in self.window)
        self.vfe_channels = tuple(int(c) for c in self.vfe_channels)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for the 2-D positional encoding")
        if any(c % 2 for c in self.vfe_channels):
            raise ValueError("VFE channel widths must be even")
        if self.vfe_channels[-1] != self.d_model:
            raise ValueError("last VFE width must equal d_model")
        if any(w < 1 for w in self.window):
            raise ValueError("window must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        d["vfe_channels"] = list(self.vfe_channels)
        return d


POINT_FEATURES = 9


# ---------------------------------------------------------------- parameters


def _linear(params: dict, rng, name: str, fan_in: int, fan_out: int) -> None:
    params[f"{name}.w"] = ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), f"{name}.w")
    params[f"{name}.b"] = ag.parameter(np.zeros(fan_out), f"{name}.b")


def _norm(params: dict, name: str, d: int) -> None:
    params[f"{name}.g"] = ag.parameter(np.ones(d), f"{name}.g")
    params[f"{name}.b"] = ag.parameter(np.zeros(d), f"{name}.b")


def _block(params: dict, rng, name: str, cfg: ModelConfig) -> None:
    d = cfg.d_model
    _norm(params, f"{name}.ln1", d)
    _linear(params, rng, f"{name}.qkv", d, 3 * d)
    _linear(params, rng, f"{name}.proj", d, d)
    _norm(params, f"{name}.ln2", d)
    _linear(params, rng, f"{name}.ff1", d, cfg.d_hidden)
    _linear(params, rng, f"{name}.ff2", cfg.d_hidden, d)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameters keyed by dotted name; insertion order is stable."""
    rng = np.random.default_rng(seed)
    params: dict = {}
    fan_in = POINT_FEATURES
    for i, width in enumerate(cfg.vfe_channels):
        _linear(params, rng, f"vfe.{i}", fan_in, width // 2)
        fan_in = width
    for i in range(cfg.encoder_blocks):
        _block(params, rng, f"enc.{i}", cfg)
    _norm(params, "enc.norm", cfg.d_model)
    params["mask_token"] = ag.parameter(rng.normal(0.0, 0.02, cfg.d_model), "mask_token")
    for dec in ("dec_point", "dec_surface"):
        for i in range(cfg.decoder_blocks):
            _block(params, rng, f"{dec}.{i}", cfg)
        _norm(params, f"{dec}.norm", cfg.d_model)
    for head, n_out in HEAD_OUTPUTS.items():
        _linear(params, rng, f"head.{head}.0", cfg.d_model, cfg.head_hidden)
        _linear(params, rng, f"head.{head}.1", cfg.head_hidden, n_out)
    return params


def decoder_param_names(params: dict, decoder: str) -> list:
    return [k for k in params if k.startswith(decoder + ".")]


# ---------------------------------------------------------------- building blocks


def linear(params: dict, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def norm(params: dict, name: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x) * params[f"{name}.g"] + params[f"{name}.b"]


def point_features(points: np.ndarray, seg: np.ndarray, n_tokens: int, centers: np.ndarray) -> np.ndarray:
    """Per-point (xyz, offset from voxel point mean, offset from voxel centre)."""
    pts = np.asarray(points, dtype=np.float64)
    counts = np.maximum(np.bincount(seg, minlength=n_tokens), 1)
    mean = np.stack([np.bincount(seg, weights=pts[:, a], minlength=n_tokens) for a in range(3)], axis=1).astype(np.float64)
    mean /= counts[:, None]
    return np.concatenate([pts, pts - mean[seg], pts - centers[seg]], axis=1)


def vfe_embed(params: dict, feats: np.ndarray, seg: np.ndarray, n_tokens: int, cfg: ModelConfig) -> Tensor:
    """Voxel tokens from per-point features.

    Each layer is a per-point linear map and ReLU to half its width, joined
    with the voxel-wise max of that output; the token is the max over points
    of the last layer.
    """
    seg = np.asarray(seg, dtype=np.int64)
    x: Tensor = ag.Tensor(feats)
    for i in range(len(cfg.vfe_channels)):
        h = ag.relu(linear(params, f"vfe.{i}", x))
        pooled = ag.segment_max(h, seg, n_tokens)
        x = ag.concat([h, pooled[seg]], axis=-1)
    return ag.segment_max(x, seg, n_tokens)


def positional_encoding(ij: np.ndarray, d_model: int) -> np.ndarray:
    """Fixed sinusoids of integer BEV voxel indices: first half x, second half y."""
    ij = np.asarray(ij, dtype=np.float64).reshape(-1, 2)
    half = d_model // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half // 2) * 2.0 / half))
    parts = []
    for axis in range(2):
        ang = ij[:, axis : axis + 1] * freqs[None, :]
        parts.append(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))
    return np.concatenate(parts, axis=1)


@dataclass
class Windows:
    """Tokens grouped by window: ``index[w, t]`` is a token (0 where padded)."""

    index: np.ndarray
    valid: np.ndarray
    slot: np.ndarray  # flat position of every token inside ``index``


def window_partition(ij: np.ndarray, scene: np.ndarray, window: tuple, shifted: bool) -> Windows:
    ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
    n = ij.shape[0]
    if n == 0:
        return Windows(np.zeros((0, 1), np.int64), np.zeros((0, 1), bool), np.zeros(0, np.int64))
    w = np.asarray(window, dtype=np.int64)
    shift = w // 2 if shifted else np.zeros(2, dtype=np.int64)
    cell = (ij + shift) // w
    keys = np.column_stack([np.asarray(scene, dtype=np.int64), cell])
    _, win = np.unique(keys, axis=0, return_inverse=True)
    win = win.reshape(-1)
    order = np.argsort(win, kind="stable")
    counts = np.bincount(win)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - np.repeat(np.cumsum(counts) - counts, counts)
    t_max = int(counts.max())
    index = np.zeros((counts.shape[0], t_max), dtype=np.int64)
    valid = np.zeros((counts.shape[0], t_max), dtype=bool)
    index[win, rank] = np.arange(n)
    valid[win, rank] = True
    return Windows(index, valid, win * t_max + rank)


def window_attention(params: dict, name: str, x: Tensor, win: Windows, cfg: ModelConfig) -> Tensor:
    n, d = x.shape
    h = cfg.n_heads
    dh = d // h
    qkv = linear(params, f"{name}.qkv", x).reshape(n, 3, h, dh)
    q = qkv[:, 0][win.index].transpose(0, 2, 1, 3)
    k = qkv[:, 1][win.index].transpose(0, 2, 3, 1)
    v = qkv[:, 2][win.index].transpose(0, 2, 1, 3)
    att = ag.softmax((q @ k) * (1.0 / np.sqrt(dh)), mask=win.valid[:, None, None, :])
    out = (att @ v).transpose(0, 2, 1, 3)
    n_win, t_max = win.index.shape
    out = out.reshape(n_win * t_max, d)[win.slot]
    return linear(params, f"{name}.proj", out)


def transformer_block(params: dict, name: str, x: Tensor, win: Windows, cfg: ModelConfig) -> Tensor:
    x = x + window_attention(params, name, norm(params, f"{name}.ln1", x), win, cfg)
    hidden = ag.gelu(linear(params, f"{name}.ff1", norm(params, f"{name}.ln2", x)))
    return x + linear(params, f"{name}.ff2", hidden)


def run_stack(params: dict, prefix: str, x: Tensor, ij, scene, n_blocks: int, cfg: ModelConfig) -> Tensor:
    """Blocks alternate regular and half-shifted windows, then a final norm."""
    if x.shape[0] == 0:
        return x
    plain = window_partition(ij, scene, cfg.window, shifted=False)
    shifted = window_partition(ij, scene, cfg.window, shifted=True)
    for i in range(n_blocks):
        x = transformer_block(params, f"{prefix}.{i}", x, shifted if i % 2 else plain, cfg)
    return norm(params, f"{prefix}.norm", x)


def encode(params: dict, tokens: Tensor, ij, cfg: ModelConfig, scene=None) -> Tensor:
    ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
    scene = np.zeros(ij.shape[0], np.int64) if scene is None else np.asarray(scene)
    x = tokens + positional_encoding(ij, cfg.d_model)
    return run_stack(params, "enc", x, ij, scene, cfg.encoder_blocks, cfg)


def decoder_input(params: dict, encoded: Tensor, visible_rows, masked_rows, ij, cfg: ModelConfig) -> Tensor:
    """Token-ordered decoder input: encoder output at visible rows, mask token elsewhere."""
    visible_rows = np.asarray(visible_rows, dtype=np.int64)
    masked_rows = np.asarray(masked_rows, dtype=np.int64)
    ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
    mask_tokens = params["mask_token"].reshape(1, cfg.d_model) + positional_encoding(ij[masked_rows], cfg.d_model)
    stacked = ag.concat([encoded, mask_tokens], axis=0)
    n = visible_rows.size + masked_rows.size
    where = np.empty(n, dtype=np.int64)
    where[visible_rows] = np.arange(visible_rows.size)
    where[masked_rows] = visible_rows.size + np.arange(masked_rows.size)
    return stacked[where]


def decode_dual(params: dict, encoded: Tensor, visible_rows, masked_rows, ij, cfg: ModelConfig, scene=None):
    """Run both decoders on the same input; return (T_point, T_surface) at masked rows."""
    masked_rows = np.asarray(masked_rows, dtype=np.int64)
    ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
    scene = np.zeros(ij.shape[0], np.int64) if scene is None else np.asarray(scene)
    if masked_rows.size == 0:
        empty = ag.Tensor(np.zeros((0, cfg.d_model)))
        return empty, empty
    t_d = decoder_input(params, encoded, visible_rows, masked_rows, ij, cfg)
    outs = []
    for dec in ("dec_point", "dec_surface"):
        y = run_stack(params, dec, t_d, ij, scene, cfg.decoder_blocks, cfg)
        outs.append(y[masked_rows])
    return outs[0], outs[1]


@dataclass
class Predictions:
    cent: Tensor
    occ: Tensor
    nor: Tensor
    curv: Tensor
    voxel_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return int(self.cent.shape[0])


def heads(params: dict, t_point: Tensor, t_surface: Tensor, voxel_ids=None) -> Predictions:
    out = {}
    for head in HEAD_OUTPUTS:
        src = t_point if head in POINT_HEADS else t_surface
        hidden = ag.gelu(linear(params, f"head.{head}.0", src))
        out[head] = linear(params, f"head.{head}.1", hidden)
    ids = np.zeros(0, np.int64) if voxel_ids is None else np.asarray(voxel_ids, dtype=np.int64)
    return Predictions(out["cent"], out["occ"], out["nor"], out["curv"], ids)
