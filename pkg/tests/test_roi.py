import math

import numpy as np
import pytest
import torch

from detrefine import roi
from detrefine.errors import InvariantViolation
from detrefine.types import Box


def dense_align_oracle(grid_np, box, n=200):
    """Brute-force box average: bilinear values on an n x n lattice."""
    h, w, d = grid_np.shape
    y0, y1 = box.y_min * h, box.y_max * h
    x0, x1 = box.x_min * w, box.x_max * w
    ys = y0 + (np.arange(n) + 0.5) / n * (y1 - y0)
    xs = x0 + (np.arange(n) + 0.5) / n * (x1 - x0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    u, v = yy - 0.5, xx - 0.5
    i0 = np.floor(u).astype(int)
    j0 = np.floor(v).astype(int)
    wi = (u - i0)[..., None]
    wj = (v - j0)[..., None]
    i0c, i1c = np.clip(i0, 0, h - 1), np.clip(i0 + 1, 0, h - 1)
    j0c, j1c = np.clip(j0, 0, w - 1), np.clip(j0 + 1, 0, w - 1)
    top = grid_np[i0c, j0c] * (1 - wj) + grid_np[i0c, j1c] * wj
    bot = grid_np[i1c, j0c] * (1 - wj) + grid_np[i1c, j1c] * wj
    return (top * (1 - wi) + bot * wi).reshape(-1, d).mean(axis=0)


def inclusion_cells_oracle(box, h, w):
    """Cells whose rectangle intersects the box with positive area."""
    cells = []
    for r in range(h):
        for c in range(w):
            y_lo, y_hi = r / h, (r + 1) / h
            x_lo, x_hi = c / w, (c + 1) / w
            iy = min(y_hi, box.y_max) - max(y_lo, box.y_min)
            ix = min(x_hi, box.x_max) - max(x_lo, box.x_min)
            if iy > 1e-9 / h and ix > 1e-9 / w:
                cells.append((r, c))
    return cells


def maxpool_oracle(grid_np, box):
    """Explicit enumeration of the quantized 2x2 adaptive-max scheme."""
    h, w, d = grid_np.shape
    r0 = min(int(math.floor(box.y_min * h + 1e-9)), h - 1)
    r1 = max(int(math.ceil(box.y_max * h - 1e-9)), r0 + 1)
    c0 = min(int(math.floor(box.x_min * w + 1e-9)), w - 1)
    c1 = max(int(math.ceil(box.x_max * w - 1e-9)), c0 + 1)
    r1, c1 = min(r1, h), min(c1, w)
    rows, cols = r1 - r0, c1 - c0
    bins = []
    for by in range(2):
        ra, rb = (by * rows) // 2, math.ceil((by + 1) * rows / 2)
        for bx in range(2):
            ca, cb = (bx * cols) // 2, math.ceil((bx + 1) * cols / 2)
            block = grid_np[r0 + ra:r0 + rb, c0 + ca:c0 + cb].reshape(-1, d)
            bins.append(block.max(axis=0))
    return np.stack(bins).mean(axis=0)


def random_box(rng, margin=1e-3):
    while True:
        x = np.sort(rng.uniform(0, 1, 2))
        y = np.sort(rng.uniform(0, 1, 2))
        if x[1] - x[0] > margin and y[1] - y[0] > margin:
            return Box(x[0], y[0], x[1], y[1])


class TestRoiAlign:
    def test_constant_grid(self, rng):
        grid = torch.full((14, 14, 3), 2.5, dtype=torch.float64)
        for _ in range(10):
            box = random_box(rng)
            out = roi.roi_align(grid, box)
            assert torch.allclose(out, torch.full((3,), 2.5, dtype=torch.float64),
                                  atol=1e-12)

    def test_dense_oracle_100_random_pairs(self, rng):
        worst = 0.0
        for _ in range(100):
            grid_np = rng.standard_normal((14, 14, 3))
            box = random_box(rng, margin=0.02)
            mine = roi.roi_align(torch.from_numpy(grid_np), box).numpy()
            oracle = dense_align_oracle(grid_np, box)
            rel = np.linalg.norm(mine - oracle) / max(np.linalg.norm(oracle), 1e-12)
            worst = max(worst, rel)
        assert worst < 2e-2, f"worst relative error {worst}"

    def test_dense_oracle_reference_box(self, rng):
        grid_np = rng.standard_normal((14, 14, 3))
        box = Box(0.1, 0.2, 0.6, 0.9)
        mine = roi.roi_align(torch.from_numpy(grid_np), box).numpy()
        oracle = dense_align_oracle(grid_np, box)
        assert np.linalg.norm(mine - oracle) / np.linalg.norm(oracle) < 2e-2

    def test_one_hot_single_cell_box(self):
        # box over interior cell (3, 5); exact interpolant average puts
        # weight (integral of the cell's hat over its own cell)^2 = 0.75^2
        # on the hot cell and spreads the rest onto neighbors (value 0)
        grid = torch.zeros(14, 14, 2, dtype=torch.float64)
        grid[3, 5] = torch.tensor([1.0, -2.0], dtype=torch.float64)
        box = Box(5 / 14, 3 / 14, 6 / 14, 4 / 14)
        out = roi.roi_align(grid, box)
        assert torch.allclose(out, 0.5625 * grid[3, 5], atol=1e-12)

    def test_linear_in_grid(self, rng):
        g1 = torch.from_numpy(rng.standard_normal((14, 14, 4)))
        g2 = torch.from_numpy(rng.standard_normal((14, 14, 4)))
        box = random_box(rng)
        a = 3.7
        lhs = roi.roi_align(a * g1 + g2, box)
        rhs = a * roi.roi_align(g1, box) + roi.roi_align(g2, box)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        grid = torch.from_numpy(rng.standard_normal((4, 4, 2))).requires_grad_(True)
        box = Box(0.1, 0.3, 0.8, 0.9)
        w = torch.from_numpy(rng.standard_normal(2))
        loss = (roi.roi_align(grid, box) * w).sum()
        loss.backward()
        step = 1e-6
        for idx in [(0, 0, 0), (1, 2, 1), (3, 3, 0), (2, 1, 1)]:
            with torch.no_grad():
                orig = grid[idx].item()
                grid[idx] = orig + step
                up = (roi.roi_align(grid, box) * w).sum().item()
                grid[idx] = orig - step
                down = (roi.roi_align(grid, box) * w).sum().item()
                grid[idx] = orig
            fd = (up - down) / (2 * step)
            an = grid.grad[idx].item()
            assert abs(fd - an) < 1e-4 * max(1.0, abs(fd), abs(an))

    def test_sampled_scheme_converges_to_exact(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        box = Box(0.1, 0.2, 0.6, 0.9)
        exact = roi.roi_align(grid, box)
        coarse = roi.roi_align(grid, box, samples_per_bin=(2, 2))
        fine = roi.roi_align(grid, box, samples_per_bin=(64, 64))
        err_coarse = torch.norm(coarse - exact)
        err_fine = torch.norm(fine - exact)
        assert err_fine < err_coarse
        assert err_fine / torch.norm(exact) < 1e-3

    def test_bad_grid_shape(self):
        with pytest.raises(InvariantViolation):
            roi.roi_align(torch.zeros(14, 14), Box(0.1, 0.1, 0.5, 0.5))


class TestRoiInclusion:
    def test_full_image_box(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        out = roi.roi_inclusion(grid, Box(0, 0, 1, 1))
        expected = grid.reshape(-1, 3).mean(dim=0)
        assert torch.allclose(out, expected, atol=1e-9)

    def test_box_inside_one_cell(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        # strictly inside cell (2, 4)
        box = Box(4 / 14 + 0.01, 2 / 14 + 0.01, 5 / 14 - 0.01, 3 / 14 - 0.01)
        assert torch.equal(roi.roi_inclusion(grid, box), grid[2, 4])

    def test_two_cell_box(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        # spans cells (0,0) and (0,1) only
        box = Box(0.001, 0.001, 2 / 14 - 0.001, 1 / 14 - 0.001)
        expected = (grid[0, 0] + grid[0, 1]) / 2
        assert torch.allclose(roi.roi_inclusion(grid, box), expected, atol=1e-12)

    def test_exact_boundaries_excluded(self, rng):
        # power-of-two grid makes the boundaries exactly representable
        grid = torch.from_numpy(rng.standard_normal((4, 4, 2)))
        box = Box(0.25, 0.25, 0.75, 0.5)   # cols 1..2, row 1 exactly
        expected = grid[1, 1:3].mean(dim=0)
        assert torch.allclose(roi.roi_inclusion(grid, box), expected, atol=1e-12)

    def test_enumeration_oracle_random(self, rng):
        for _ in range(50):
            grid_np = rng.standard_normal((14, 14, 3))
            box = random_box(rng)
            cells = inclusion_cells_oracle(box, 14, 14)
            expected = np.stack([grid_np[r, c] for r, c in cells]).mean(axis=0)
            got = roi.roi_inclusion(torch.from_numpy(grid_np), box).numpy()
            assert got == pytest.approx(expected, rel=1e-10)

    def test_monotone_support(self, rng):
        for _ in range(30):
            outer = random_box(rng, margin=0.2)
            dx = (outer.x_max - outer.x_min) / 4
            dy = (outer.y_max - outer.y_min) / 4
            inner = Box(outer.x_min + dx, outer.y_min + dy,
                        outer.x_max - dx, outer.y_max - dy)
            inner_cells = set(inclusion_cells_oracle(inner, 14, 14))
            outer_cells = set(inclusion_cells_oracle(outer, 14, 14))
            assert inner_cells <= outer_cells


class TestRoiMaxpool:
    def test_constant_grid(self, rng):
        grid = torch.full((14, 14, 3), -1.25, dtype=torch.float64)
        for _ in range(10):
            box = random_box(rng)
            out = roi.roi_maxpool(grid, box)
            assert torch.allclose(out, torch.full((3,), -1.25, dtype=torch.float64))

    def test_hot_cell_dominates_its_bin(self, rng):
        grid = torch.zeros(14, 14, 1, dtype=torch.float64)
        grid[5, 5, 0] = 3.0
        box = Box(4 / 14, 4 / 14, 8 / 14, 8 / 14)   # hot cell inside
        out = roi.roi_maxpool(grid, box)
        # hot value wins one of the four bins, zeros win the others
        assert out.item() == pytest.approx(3.0 / 4.0)

    def test_three_cell_box_hand_case(self):
        grid = torch.zeros(4, 4, 1, dtype=torch.float64)
        grid[1, 0, 0], grid[1, 1, 0], grid[1, 2, 0] = 3.0, 1.0, 2.0
        box = Box(0.0, 0.25, 0.75, 0.5)   # row 1, cols 0..2
        # adaptive 2x2 over a 1x3 block: column bins [0,2) and [1,3),
        # row bins both the single row -> maxes (3, 2, 3, 2), mean 2.5
        assert roi.roi_maxpool(grid, box).item() == pytest.approx(2.5)

    def test_enumeration_oracle_random(self, rng):
        for _ in range(50):
            grid_np = rng.standard_normal((14, 14, 2))
            box = random_box(rng)
            expected = maxpool_oracle(grid_np, box)
            got = roi.roi_maxpool(torch.from_numpy(grid_np), box).numpy()
            assert got == pytest.approx(expected, rel=1e-12)

    def test_tiny_box_snaps_to_one_cell(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        box = Box(5 / 14 + 0.001, 7 / 14 + 0.001, 5 / 14 + 0.002, 7 / 14 + 0.002)
        assert torch.allclose(roi.roi_maxpool(grid, box), grid[7, 5], atol=1e-12)


class TestPoolRois:
    def test_dispatch_and_stack(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        boxes = [random_box(rng) for _ in range(4)]
        for mode in roi.ROI_MODES:
            out = roi.pool_rois(grid, boxes, mode)
            assert out.shape == (4, 3)

    def test_empty(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        assert roi.pool_rois(grid, [], "align").shape == (0, 3)

    def test_unknown_mode(self, rng):
        grid = torch.from_numpy(rng.standard_normal((14, 14, 3)))
        with pytest.raises(InvariantViolation):
            roi.pool_rois(grid, [], "avg")
