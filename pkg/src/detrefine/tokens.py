"""Input sequence assembly: projections, class token, segment embeddings,
and fixed 2D sine-cosine positional embeddings over the patch grid.

The assembled sequence is ordered [class; global; register x4; patch x N]
with segment ids [0; 1; 2,2,2,2; 3 x N]. Positional embeddings are added
to patch tokens only and are never trained.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import BadDimension, DimensionMismatch
from .types import FeatureBundle, N_REGISTERS

SEG_CLASS, SEG_GLOBAL, SEG_REGISTER, SEG_PATCH = 0, 1, 2, 3


def _sincos_1d(positions: np.ndarray, m: int) -> np.ndarray:
    """Length-m interleaved sin/cos encoding of integer positions.

    out[2i] = sin(pos * w_i), out[2i+1] = cos(pos * w_i) with
    w_i = 1 / 10000^(2i/m).
    """
    if m % 2 != 0:
        raise BadDimension(f"sincos half-width must be even, got {m}")
    i = np.arange(m // 2, dtype=np.float64)
    omega = 1.0 / (10000.0 ** (2.0 * i / m))
    angles = positions[:, None].astype(np.float64) * omega[None, :]
    out = np.empty((len(positions), m), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def make_pos_emb(d: int, grid_h: int = 14, grid_w: int = 14) -> np.ndarray:
    """Fixed 2D sine-cosine embeddings, one row per grid cell (row-major).

    The first d/2 entries encode the cell's row index, the last d/2 its
    column index. Deterministic in (d, grid_h, grid_w).
    """
    if d <= 0 or d % 4 != 0:
        raise BadDimension(f"pos emb width must be a positive multiple of 4, got {d}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    y_part = _sincos_1d(rows.reshape(-1), d // 2)
    x_part = _sincos_1d(cols.reshape(-1), d // 2)
    return np.concatenate([y_part, x_part], axis=1).astype(np.float32)


class TokenBuilder(nn.Module):
    """Projects a FeatureBundle into the encoder's token sequence."""

    def __init__(self, d: int, d_g: int, d_r: int, d_p: int,
                 grid: tuple[int, int] = (14, 14)):
        super().__init__()
        self.d = d
        self.grid = tuple(grid)
        self.n_patches = grid[0] * grid[1]
        self.seq_len = 2 + N_REGISTERS + self.n_patches
        self.proj_g = nn.Linear(d_g, d)
        self.proj_r = nn.Linear(d_r, d)
        self.proj_p = nn.Linear(d_p, d)
        self.class_token = nn.Parameter(torch.empty(d))
        self.seg_emb = nn.Parameter(torch.empty(4, d))
        pos = torch.from_numpy(make_pos_emb(d, grid[0], grid[1]))
        self.register_buffer("pos_emb", pos)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # linear weights keep their uniform fan-in init; biases start at zero
        for lin in (self.proj_g, self.proj_r, self.proj_p):
            nn.init.zeros_(lin.bias)
        nn.init.normal_(self.class_token, std=0.02)
        nn.init.normal_(self.seg_emb, std=0.02)

    @property
    def segment_ids(self) -> torch.Tensor:
        ids = [SEG_CLASS, SEG_GLOBAL] + [SEG_REGISTER] * N_REGISTERS \
            + [SEG_PATCH] * self.n_patches
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, g: torch.Tensor, r: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        """Assemble (B, seq_len, d) tokens from batched bundle tensors.

        g: (B, d_g); r: (B, 4, d_r); p: (B, n_patches, d_p).
        """
        if g.ndim != 2 or r.ndim != 3 or p.ndim != 3:
            raise DimensionMismatch("expected batched inputs g:(B,dg) r:(B,4,dr) p:(B,N,dp)")
        if r.shape[1] != N_REGISTERS:
            raise DimensionMismatch(f"expected {N_REGISTERS} register tokens, got {r.shape[1]}")
        if p.shape[1] != self.n_patches:
            raise DimensionMismatch(
                f"expected {self.n_patches} patch tokens for grid {self.grid}, got {p.shape[1]}"
            )
        batch = g.shape[0]
        seg = self.seg_emb
        cls_tok = (self.class_token + seg[SEG_CLASS]).expand(batch, 1, self.d)
        glob = (self.proj_g(g) + seg[SEG_GLOBAL]).unsqueeze(1)
        regs = self.proj_r(r) + seg[SEG_REGISTER]
        patches = self.proj_p(p) + seg[SEG_PATCH] + self.pos_emb
        return torch.cat([cls_tok, glob, regs, patches], dim=1)


def bundle_tensors(b: FeatureBundle, dtype=torch.float32):
    """FeatureBundle arrays as a (g, r, p, m_img) tuple of torch tensors."""
    return (
        torch.from_numpy(np.ascontiguousarray(b.g)).to(dtype),
        torch.from_numpy(np.ascontiguousarray(b.r)).to(dtype),
        torch.from_numpy(np.ascontiguousarray(b.p)).to(dtype),
        torch.from_numpy(np.ascontiguousarray(b.m_img)).to(dtype),
    )
