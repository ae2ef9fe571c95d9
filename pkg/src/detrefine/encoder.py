"""Refinement encoder: pre-norm Transformer over the assembled token
sequence, plus parameter accounting, EMA arithmetic, and checkpoint IO.

The encoder output at the class token is v_cls; outputs at the patch
positions are v_patch. Global and register outputs are discarded.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import IO, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    BadMagic,
    ConfigMismatch,
    DimensionMismatch,
    NonFiniteActivation,
    ShapeMismatch,
    TruncatedRecord,
    VersionUnsupported,
)
from .tokens import TokenBuilder
from .types import N_REGISTERS, TrainConfig

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1
EMA_PREFIX = "ema/"

_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class FeatureDims:
    """Input/teacher dimensions recorded per dataset."""

    d_g: int = 768
    d_r: int = 768
    d_p: int = 768
    d_t: int = 512

    def to_dict(self) -> dict:
        return {"d_g": self.d_g, "d_r": self.d_r, "d_p": self.d_p, "d_t": self.d_t}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureDims":
        return cls(int(d["d_g"]), int(d["d_r"]), int(d["d_p"]), int(d["d_t"]))


class MultiHeadAttention(nn.Module):
    """Full (unmasked) multi-head self-attention with explicit projections."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads != 0:
            raise DimensionMismatch(f"heads {n_heads} must divide width {d}")
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        def split(z):
            return z.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d: int, mlp_ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, d: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = FeedForward(d, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class RefinementEncoder(nn.Module):
    def __init__(self, d: int, n_layers: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(d, n_heads, mlp_ratio) for _ in range(n_layers)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class DetRefiner(nn.Module):
    """Token builder + encoder (+ optional head into teacher text space).

    The text head exists only when the encoder width differs from the
    teacher dimension; at matching widths the encoder output is compared
    against text embeddings directly.
    """

    def __init__(self, cfg: TrainConfig, dims: FeatureDims,
                 grid: tuple[int, int] = (14, 14)):
        super().__init__()
        self.cfg = cfg
        self.dims = dims
        self.grid = tuple(grid)
        self.builder = TokenBuilder(cfg.d, dims.d_g, dims.d_r, dims.d_p, grid)
        self.encoder = RefinementEncoder(cfg.d, cfg.n_layers, cfg.n_heads, cfg.mlp_ratio)
        if cfg.d != dims.d_t:
            self.text_head = nn.Linear(cfg.d, dims.d_t)
        else:
            self.text_head = None

    def forward(self, g: torch.Tensor, r: torch.Tensor, p: torch.Tensor):
        """Returns (v_cls: (B, d), v_patch: (B, n_patches, d))."""
        tokens = self.builder(g, r, p)
        out = self.encoder(tokens)
        if not torch.isfinite(out).all():
            raise NonFiniteActivation("encoder produced non-finite outputs")
        v_cls = out[:, 0]
        v_patch = out[:, 2 + N_REGISTERS:]
        return v_cls, v_patch

    def text_space(self, v: torch.Tensor) -> torch.Tensor:
        """Map encoder-space vectors into the teacher text space."""
        return v if self.text_head is None else self.text_head(v)

    def param_dict(self) -> dict:
        return dict(self.named_parameters())


def parameter_shapes(cfg: TrainConfig, dims: FeatureDims) -> dict:
    """Name -> shape for every trainable tensor, in model definition order.

    Enumerated without building the model so degenerate widths (for which
    the fixed positional table is undefined) can still be counted.
    """
    d, ratio = cfg.d, cfg.mlp_ratio
    shapes: dict = {
        "builder.class_token": (d,),
        "builder.seg_emb": (4, d),
        "builder.proj_g.weight": (d, dims.d_g), "builder.proj_g.bias": (d,),
        "builder.proj_r.weight": (d, dims.d_r), "builder.proj_r.bias": (d,),
        "builder.proj_p.weight": (d, dims.d_p), "builder.proj_p.bias": (d,),
    }
    for i in range(cfg.n_layers):
        pre = f"encoder.layers.{i}."
        shapes[pre + "ln1.weight"] = (d,)
        shapes[pre + "ln1.bias"] = (d,)
        for name in ("q", "k", "v", "out"):
            shapes[pre + f"attn.{name}.weight"] = (d, d)
            shapes[pre + f"attn.{name}.bias"] = (d,)
        shapes[pre + "ln2.weight"] = (d,)
        shapes[pre + "ln2.bias"] = (d,)
        shapes[pre + "mlp.fc1.weight"] = (ratio * d, d)
        shapes[pre + "mlp.fc1.bias"] = (ratio * d,)
        shapes[pre + "mlp.fc2.weight"] = (d, ratio * d)
        shapes[pre + "mlp.fc2.bias"] = (d,)
    shapes["encoder.norm.weight"] = (d,)
    shapes["encoder.norm.bias"] = (d,)
    if cfg.d != dims.d_t:
        shapes["text_head.weight"] = (dims.d_t, d)
        shapes["text_head.bias"] = (dims.d_t,)
    return shapes


def count_params(cfg: TrainConfig, dims: FeatureDims = FeatureDims()) -> int:
    """Exact trainable parameter count (fixed positional table excluded)."""
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg, dims).values())


def ema_apply(shadow: Mapping, current: Mapping, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * current, elementwise, in place."""
    if set(shadow.keys()) != set(current.keys()):
        raise ShapeMismatch("EMA shadow and current parameter names differ")
    with torch.no_grad():
        for name, s in shadow.items():
            c = current[name]
            if tuple(s.shape) != tuple(c.shape):
                raise ShapeMismatch(
                    f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(c.shape)}"
                )
            s.mul_(decay).add_(c, alpha=1.0 - decay)


def make_ema_state(model: nn.Module) -> dict:
    """Detached copy of the model's parameters to seed the EMA shadow."""
    return {name: p.detach().clone() for name, p in model.named_parameters()}


# --- checkpoint IO ("DRCK") ------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    dims: FeatureDims
    grid: tuple[int, int]
    params: dict      # name -> float32 ndarray
    ema: dict         # name -> float32 ndarray

    @classmethod
    def from_model(cls, model: DetRefiner, ema_state: Optional[Mapping] = None) -> "Checkpoint":
        params = {
            name: p.detach().cpu().to(torch.float32).numpy().copy()
            for name, p in model.named_parameters()
        }
        if ema_state is None:
            ema = {k: v.copy() for k, v in params.items()}
        else:
            ema = {
                name: t.detach().cpu().to(torch.float32).numpy().copy()
                for name, t in ema_state.items()
            }
        return cls(config=model.cfg, dims=model.dims, grid=model.grid,
                   params=params, ema=ema)

    def build_model(self, use_ema: bool = True, dtype=torch.float32) -> DetRefiner:
        model = DetRefiner(self.config, self.dims, self.grid)
        source = self.ema if use_ema else self.params
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(source[name]))
        return model.to(dtype).eval()


def _write_named_tensor(f: IO[bytes], name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(_U32.pack(len(encoded)))
    f.write(encoded)
    f.write(_U32.pack(arr.ndim))
    for dim in arr.shape:
        f.write(_U32.pack(dim))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: IO[bytes], n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedRecord(f"checkpoint truncated while reading {what}")
    return buf


def _read_named_tensor(f: IO[bytes]):
    (name_len,) = _U32.unpack(_read_exact(f, 4, "tensor name length"))
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    (ndim,) = _U32.unpack(_read_exact(f, 4, f"{name} rank"))
    shape = tuple(
        _U32.unpack(_read_exact(f, 4, f"{name} dim"))[0] for _ in range(ndim)
    )
    n = int(np.prod(shape)) if shape else 1
    payload = _read_exact(f, 4 * n, f"{name} payload")
    return name, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "dims": ckpt.dims.to_dict(),
        "grid": list(ckpt.grid),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = list(ckpt.params) + [EMA_PREFIX + n for n in ckpt.ema]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_U32.pack(CHECKPOINT_VERSION))
        f.write(_U32.pack(len(meta_bytes)))
        f.write(meta_bytes)
        f.write(_U32.pack(len(names)))
        for name, arr in ckpt.params.items():
            _write_named_tensor(f, name, arr)
        for name, arr in ckpt.ema.items():
            _write_named_tensor(f, EMA_PREFIX + name, arr)


def read_checkpoint_meta(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected magic {CHECKPOINT_MAGIC!r}, got {magic!r}")
        (version,) = _U32.unpack(_read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionUnsupported(f"checkpoint version {version} unsupported")
        (meta_len,) = _U32.unpack(_read_exact(f, 4, "meta length"))
        return json.loads(_read_exact(f, meta_len, "meta").decode("utf-8"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected magic {CHECKPOINT_MAGIC!r}, got {magic!r}")
        (version,) = _U32.unpack(_read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionUnsupported(f"checkpoint version {version} unsupported")
        (meta_len,) = _U32.unpack(_read_exact(f, 4, "meta length"))
        meta = json.loads(_read_exact(f, meta_len, "meta").decode("utf-8"))
        cfg = TrainConfig.from_dict(meta["config"])
        dims = FeatureDims.from_dict(meta["dims"])
        grid = tuple(int(x) for x in meta["grid"])
        (count,) = _U32.unpack(_read_exact(f, 4, "tensor count"))
        params, ema = {}, {}
        for _ in range(count):
            name, arr = _read_named_tensor(f)
            if name.startswith(EMA_PREFIX):
                ema[name[len(EMA_PREFIX):]] = arr
            else:
                params[name] = arr
        if f.read(1):
            raise TruncatedRecord("trailing bytes after final checkpoint tensor")

    expected = parameter_shapes(cfg, dims)
    for label, found in (("parameters", params), ("EMA shadows", ema)):
        if set(found) != set(expected):
            missing = sorted(set(expected) - set(found))
            extra = sorted(set(found) - set(expected))
            raise ConfigMismatch(
                f"checkpoint {label} disagree with config: missing {missing}, extra {extra}"
            )
        for name, arr in found.items():
            if tuple(arr.shape) != expected[name]:
                raise ShapeMismatch(
                    f"{label[:-1]} {name} has shape {tuple(arr.shape)}, "
                    f"config implies {expected[name]}"
                )
    return Checkpoint(config=cfg, dims=dims, grid=grid, params=params, ema=ema)
