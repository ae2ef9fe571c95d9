import math

import numpy as np
import pytest
import torch

from detrefine.errors import BadDimension, DimensionMismatch
from detrefine.tokens import TokenBuilder, bundle_tensors, make_pos_emb

from .conftest import make_bundle


class TestPosEmb:
    def test_shape_and_range(self):
        pe = make_pos_emb(16, 14, 14)
        assert pe.shape == (196, 16)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_origin_cell(self):
        pe = make_pos_emb(16, 14, 14)
        expected = np.tile([0.0, 1.0], 8)
        assert pe[0] == pytest.approx(expected)

    def test_row_col_symmetry(self):
        d, gw = 16, 14
        pe = make_pos_emb(d, 14, gw)
        at_0_1 = pe[1]          # row 0, col 1
        at_1_0 = pe[gw]         # row 1, col 0
        assert at_0_1[: d // 2] == pytest.approx(at_1_0[d // 2:])
        assert at_0_1[d // 2:] == pytest.approx(at_1_0[: d // 2])

    def test_scalar_oracle_d8_cell_2_3(self):
        # independent double-precision evaluation of the sinusoid formula
        pe = make_pos_emb(8, 14, 14)
        got = pe[2 * 14 + 3]

        def sincos(pos, m):
            out = []
            for i in range(m // 2):
                omega = 1.0 / 10000.0 ** (2.0 * i / m)
                out += [math.sin(pos * omega), math.cos(pos * omega)]
            return out

        expected = sincos(2, 4) + sincos(3, 4)
        assert got == pytest.approx(expected, abs=1e-6)

    def test_deterministic(self):
        assert np.array_equal(make_pos_emb(12, 4, 5), make_pos_emb(12, 4, 5))

    def test_distinct_cells_distinct_rows(self):
        pe = make_pos_emb(8, 14, 14)
        assert np.unique(pe.round(6), axis=0).shape[0] == 196

    @pytest.mark.parametrize("d", [0, -4, 6, 10])
    def test_bad_width(self, d):
        with pytest.raises(BadDimension):
            make_pos_emb(d)


class TestTokenBuilder:
    def _zeroed(self, builder):
        with torch.no_grad():
            for p in builder.parameters():
                p.zero_()
        return builder

    def test_sequence_shape_and_segments(self, rng):
        torch.manual_seed(0)
        b = TokenBuilder(d=8, d_g=5, d_r=6, d_p=7, grid=(14, 14))
        assert b.seq_len == 202
        seg = b.segment_ids.tolist()
        assert seg == [0, 1, 2, 2, 2, 2] + [3] * 196

    def test_zero_params_leave_pos_emb(self, rng):
        torch.manual_seed(0)
        builder = self._zeroed(TokenBuilder(d=8, d_g=5, d_r=6, d_p=7))
        bundle = make_bundle(rng, d_g=5, d_r=6, d_p=7)
        g, r, p, _ = bundle_tensors(bundle)
        tokens = builder(g[None], r[None], p[None])[0]
        assert torch.equal(tokens[:6], torch.zeros(6, 8))
        assert torch.equal(tokens[6:], builder.pos_emb)

    def test_identity_projection(self, rng):
        torch.manual_seed(0)
        builder = self._zeroed(TokenBuilder(d=8, d_g=8, d_r=8, d_p=8))
        with torch.no_grad():
            builder.proj_p.weight.copy_(torch.eye(8))
            builder.pos_emb.zero_()
        bundle = make_bundle(rng, d_g=8, d_r=8, d_p=8)
        g, r, p, _ = bundle_tensors(bundle)
        tokens = builder(g[None], r[None], p[None])[0]
        assert torch.equal(tokens[6:], p)

    def test_affine_map_oracle(self, rng):
        torch.manual_seed(3)
        builder = TokenBuilder(d=8, d_g=5, d_r=6, d_p=7).double()
        bundle = make_bundle(rng, d_g=5, d_r=6, d_p=7)
        g, r, p, _ = bundle_tensors(bundle, dtype=torch.float64)
        tokens = builder(g[None], r[None], p[None])[0].detach().numpy()

        w_g = builder.proj_g.weight.detach().numpy()
        b_g = builder.proj_g.bias.detach().numpy()
        w_r = builder.proj_r.weight.detach().numpy()
        b_r = builder.proj_r.bias.detach().numpy()
        w_p = builder.proj_p.weight.detach().numpy()
        b_p = builder.proj_p.bias.detach().numpy()
        seg = builder.seg_emb.detach().numpy()
        pos = builder.pos_emb.detach().numpy()
        cls = builder.class_token.detach().numpy()

        gn, rn, pn = g.numpy(), r.numpy(), p.numpy()
        assert tokens[0] == pytest.approx(cls + seg[0], rel=1e-12)
        assert tokens[1] == pytest.approx(w_g @ gn + b_g + seg[1], rel=1e-12)
        for i in range(4):
            assert tokens[2 + i] == pytest.approx(w_r @ rn[i] + b_r + seg[2], rel=1e-12)
        for j in (0, 57, 195):
            assert tokens[6 + j] == pytest.approx(
                w_p @ pn[j] + b_p + seg[3] + pos[j], rel=1e-12
            )

    def test_affine_in_bundle(self, rng):
        torch.manual_seed(1)
        builder = TokenBuilder(d=8, d_g=5, d_r=5, d_p=5).double()
        b1 = make_bundle(rng, d_g=5, d_r=5, d_p=5)
        b2 = make_bundle(rng, d_g=5, d_r=5, d_p=5, image_id="img1")
        a = 2.5

        def run(g, r, p):
            return builder(g[None], r[None], p[None])[0]

        g1, r1, p1, _ = bundle_tensors(b1, torch.float64)
        g2, r2, p2, _ = bundle_tensors(b2, torch.float64)
        zero = run(torch.zeros_like(g1), torch.zeros_like(r1), torch.zeros_like(p1))
        lhs = run(a * g1 + g2, a * r1 + r2, a * p1 + p2) - run(g2, r2, p2)
        rhs = a * (run(g1, r1, p1) - zero)
        assert torch.allclose(lhs, rhs, atol=1e-10)

    def test_batched(self, rng):
        torch.manual_seed(0)
        builder = TokenBuilder(d=8, d_g=5, d_r=6, d_p=7, grid=(4, 4))
        bundles = [make_bundle(rng, image_id=f"i{k}", d_g=5, d_r=6, d_p=7, grid=(4, 4))
                   for k in range(3)]
        gs, rs, ps = (torch.stack(x) for x in zip(
            *[bundle_tensors(b)[:3] for b in bundles]
        ))
        batch = builder(gs, rs, ps)
        assert batch.shape == (3, 2 + 4 + 16, 8)
        single = builder(gs[1:2], rs[1:2], ps[1:2])
        assert torch.allclose(batch[1], single[0], atol=1e-6)

    def test_dimension_errors(self, rng):
        torch.manual_seed(0)
        builder = TokenBuilder(d=8, d_g=5, d_r=6, d_p=7)
        bundle = make_bundle(rng, d_g=5, d_r=6, d_p=7)
        g, r, p, _ = bundle_tensors(bundle)
        with pytest.raises(DimensionMismatch):
            builder(g[None], r[None, :3], p[None])
        with pytest.raises(DimensionMismatch):
            builder(g[None], r[None], p[None, :100])
        with pytest.raises(DimensionMismatch):
            builder(g, r, p)

    def test_pos_emb_not_trainable(self):
        torch.manual_seed(0)
        builder = TokenBuilder(d=8, d_g=5, d_r=6, d_p=7)
        names = [n for n, _ in builder.named_parameters()]
        assert "pos_emb" not in names
        assert len(names) == 8
