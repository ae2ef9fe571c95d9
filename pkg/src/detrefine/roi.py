"""Region pooling over the patch-vector grid.

Three variants share one contract: (H, W, d) grid + normalized box in,
single d-vector out. ``align`` is the default and the only one whose
gradient is piecewise-linear in the grid; the other two are ablation
modes. All are written in torch ops so autograd flows to the grid.
"""
from __future__ import annotations

import math

import torch

from .errors import DegenerateBox, InvariantViolation
from .types import Box

ROI_MODES = ("align", "inclusion", "maxpool")


def _bilinear_samples(grid: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample grid values at continuous coordinates.

    Cell (i, j) has its value located at coordinate (i + 0.5, j + 0.5);
    coordinates outside the border replicate the edge cells.
    ys/xs: (...,) index tensors; returns (..., d).
    """
    h, w, _ = grid.shape
    u = ys - 0.5
    v = xs - 0.5
    i0 = torch.floor(u)
    j0 = torch.floor(v)
    wi = (u - i0).unsqueeze(-1)
    wj = (v - j0).unsqueeze(-1)
    i0 = i0.long()
    j0 = j0.long()
    i0c = i0.clamp(0, h - 1)
    i1c = (i0 + 1).clamp(0, h - 1)
    j0c = j0.clamp(0, w - 1)
    j1c = (j0 + 1).clamp(0, w - 1)
    top = grid[i0c, j0c] * (1 - wj) + grid[i0c, j1c] * wj
    bottom = grid[i1c, j0c] * (1 - wj) + grid[i1c, j1c] * wj
    return top * (1 - wi) + bottom * wi


def _check_grid(grid: torch.Tensor) -> None:
    if grid.ndim != 3:
        raise InvariantViolation(f"patch grid must be (H, W, d), got shape {tuple(grid.shape)}")


def _sample_coords(box: Box, h: int, w: int, output_size, samples_per_bin,
                   dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    oy, ox = output_size
    sy, sx = samples_per_bin
    y0, y1 = box.y_min * h, box.y_max * h
    x0, x1 = box.x_min * w, box.x_max * w
    bin_h = (y1 - y0) / oy
    bin_w = (x1 - x0) / ox
    # sample offsets inside a bin follow the same (i + 0.5) centering
    off_y = (torch.arange(sy, dtype=dtype, device=device) + 0.5) / sy
    off_x = (torch.arange(sx, dtype=dtype, device=device) + 0.5) / sx
    by = torch.arange(oy, dtype=dtype, device=device)
    bx = torch.arange(ox, dtype=dtype, device=device)
    ys = y0 + (by[:, None] + off_y[None, :]).reshape(-1) * bin_h
    xs = x0 + (bx[:, None] + off_x[None, :]).reshape(-1) * bin_w
    yy = ys[:, None].expand(-1, xs.numel()).reshape(-1)
    xx = xs[None, :].expand(ys.numel(), -1).reshape(-1)
    return yy, xx


def _hat_weights(lo: float, hi: float, n: int, dtype, device) -> torch.Tensor:
    """Per-node averaging weights for the exact 1-D interpolant integral.

    In centered coordinates u = pos - 0.5, node i carries a hat basis on
    [i-1, i+1] extended constant past the border nodes (the clamp-to-border
    rule). weights[i] is the average of basis i over [lo, hi]; the weights
    sum to 1 because the hats form a partition of unity.
    """
    out = torch.zeros(n, dtype=dtype, device=device)
    span = hi - lo
    for i in range(n):
        total = 0.0
        if i == 0 and lo < 0.0:
            total += min(hi, 0.0) - lo
        if i == n - 1 and hi > n - 1.0:
            total += hi - max(lo, n - 1.0)
        if i > 0:
            a, b = max(lo, i - 1.0), min(hi, float(i))
            if b > a:
                total += (b * b - a * a) / 2.0 - (i - 1.0) * (b - a)
        if i < n - 1:
            a, b = max(lo, float(i)), min(hi, i + 1.0)
            if b > a:
                total += (i + 1.0) * (b - a) - (b * b - a * a) / 2.0
        out[i] = total / span
    return out


def roi_align(grid: torch.Tensor, box: Box, output_size=(2, 2),
              samples_per_bin=None) -> torch.Tensor:
    """Box average of the bilinear interpolant over the patch grid.

    The box is scaled to grid coordinates (x by W, y by H) with cell values
    centered at (i + 0.5). By default the interpolant is integrated in
    closed form, which is the limit of averaging ever-denser bilinear
    samples; the result is exactly linear in the grid values. Passing
    samples_per_bin=(sy, sx) switches to the classic finite scheme where
    each output bin averages sy*sx bilinear samples and the bins are then
    averaged into one vector.
    """
    _check_grid(grid)
    if not isinstance(box, Box):
        raise DegenerateBox(f"expected a Box, got {type(box).__name__}")
    h, w, _ = grid.shape
    if samples_per_bin is not None:
        ys, xs = _sample_coords(box, h, w, output_size, samples_per_bin,
                                grid.dtype, grid.device)
        return _bilinear_samples(grid, ys, xs).mean(dim=0)
    wy = _hat_weights(box.y_min * h - 0.5, box.y_max * h - 0.5, h,
                      grid.dtype, grid.device)
    wx = _hat_weights(box.x_min * w - 0.5, box.x_max * w - 0.5, w,
                      grid.dtype, grid.device)
    return torch.einsum("i,j,ijd->d", wy, wx, grid)


_EDGE_EPS = 1e-9   # intersections thinner than this (in cells) count as empty


def _cell_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Indices [first, last] of cells overlapping (lo, hi) with positive area."""
    first = int(math.floor(lo * n + _EDGE_EPS))
    last = int(math.ceil(hi * n - _EDGE_EPS)) - 1
    return max(first, 0), min(max(last, first), n - 1)


def roi_inclusion(grid: torch.Tensor, box: Box) -> torch.Tensor:
    """Mean of the patch vectors whose cells positively intersect the box."""
    _check_grid(grid)
    h, w, _ = grid.shape
    r0, r1 = _cell_span(box.y_min, box.y_max, h)
    c0, c1 = _cell_span(box.x_min, box.x_max, w)
    return grid[r0:r1 + 1, c0:c1 + 1].reshape(-1, grid.shape[-1]).mean(dim=0)


def roi_maxpool(grid: torch.Tensor, box: Box) -> torch.Tensor:
    """Quantized ROI pooling: snap to cells, 2x2 adaptive max, mean of bins."""
    _check_grid(grid)
    h, w, _ = grid.shape
    r0 = min(int(math.floor(box.y_min * h + _EDGE_EPS)), h - 1)
    r1 = max(int(math.ceil(box.y_max * h - _EDGE_EPS)), r0 + 1)
    c0 = min(int(math.floor(box.x_min * w + _EDGE_EPS)), w - 1)
    c1 = max(int(math.ceil(box.x_max * w - _EDGE_EPS)), c0 + 1)
    r1, c1 = min(r1, h), min(c1, w)
    rows = r1 - r0
    cols = c1 - c0
    bins = []
    for by in range(2):
        ra = r0 + (by * rows) // 2
        rb = r0 + -((-(by + 1) * rows) // 2)   # ceil((by+1)*rows/2)
        for bx in range(2):
            ca = c0 + (bx * cols) // 2
            cb = c0 + -((-(bx + 1) * cols) // 2)
            block = grid[ra:rb, ca:cb].reshape(-1, grid.shape[-1])
            bins.append(block.max(dim=0).values)
    return torch.stack(bins).mean(dim=0)


def pool_rois(grid: torch.Tensor, boxes, mode: str = "align") -> torch.Tensor:
    """Pool each box in ``boxes`` to one vector; returns (B, d)."""
    if mode not in ROI_MODES:
        raise InvariantViolation(f"unknown roi mode {mode!r}")
    fn = {"align": roi_align, "inclusion": roi_inclusion, "maxpool": roi_maxpool}[mode]
    if len(boxes) == 0:
        return grid.new_zeros((0, grid.shape[-1]))
    return torch.stack([fn(grid, b) for b in boxes])
