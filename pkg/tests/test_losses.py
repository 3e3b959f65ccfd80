import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from codaf import losses as L
from codaf import oracle
from codaf.primitives import ShapeError


def rand(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def unit_rows(n, d, seed=0):
    return F.normalize(rand(n, d, seed=seed), dim=1)


class TestInfoNCE:
    def test_single_pair_is_zero(self):
        v, i = unit_rows(1, 8), unit_rows(1, 8, seed=1)
        assert L.info_nce(v, i, 0.07).item() == 0.0

    @pytest.mark.parametrize("n", [2, 5, 16])
    def test_identical_batch_is_log_n(self, n):
        v = unit_rows(1, 8).expand(n, 8)
        assert L.info_nce(v, v, 0.07).item() == pytest.approx(math.log(n), abs=1e-6)

    def test_two_pairs_hand_value(self):
        v = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        # v_i . i_i = 1, v_i . i_j = -1  ->  log(1 + e^-2)
        assert L.info_nce(v, v.clone(), 1.0).item() == pytest.approx(0.126928, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive(self, seed):
        v, i = unit_rows(6, 5, seed), unit_rows(6, 5, seed + 50)
        assert L.info_nce(v, i, 0.2).item() == pytest.approx(oracle.naive_info_nce(v.numpy(), i.numpy(), 0.2), abs=1e-6)

    @given(seed=st.integers(0, 10_000), tau=st.floats(0.05, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_lower_bound(self, seed, tau):
        v, i = unit_rows(5, 4, seed), unit_rows(5, 4, seed + 1)
        sims = v @ i.t()
        bound = -((sims.max(dim=1).values - sims.diag()) / tau).mean()
        assert L.info_nce(v, i, tau).item() >= bound.item() - 1e-9

    def test_monotone_in_positive_similarity(self):
        # row 0's positive similarity sweeps s; every negative similarity stays fixed
        v = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
        i1 = torch.tensor([0.2, math.sqrt(1 - 0.04), 0.0], dtype=torch.float64)
        vals = []
        for s in np.linspace(-1, 1, 21):
            i0 = torch.tensor([s, 0.0, math.sqrt(max(0.0, 1 - s * s))], dtype=torch.float64)
            vals.append(L.info_nce(v, torch.stack([i0, i1]), 0.1).item())
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_errors(self):
        with pytest.raises(ValueError):
            L.info_nce(torch.zeros(0, 4), torch.zeros(0, 4))
        with pytest.raises(ValueError):
            L.info_nce(unit_rows(2, 4), unit_rows(2, 4), tau=0.0)


class TestSSIM:
    def test_self_is_zero(self):
        x = rand(2, 3, 9, 9)
        assert L.ssim_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        x, y = rand(2, 3, 9, 8), rand(2, 3, 9, 8, seed=1)
        assert L.ssim_loss(x, y).item() == pytest.approx(L.ssim_loss(y, x).item(), abs=1e-6)

    @pytest.mark.parametrize("shape", [(1, 2, 9, 10), (2, 1, 7, 7), (1, 3, 4, 4)])
    def test_matches_naive(self, shape):
        x, y = rand(*shape, seed=3), rand(*shape, seed=4)
        ref = 1 - oracle.naive_ssim(x.numpy(), y.numpy())
        assert L.ssim_loss(x, y).item() == pytest.approx(ref, abs=1e-6)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_range(self, seed):
        x, y = rand(1, 2, 8, 8, seed=seed), rand(1, 2, 8, 8, seed=seed + 1) * 3
        assert 0.0 <= L.ssim_loss(x, y).item() <= 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.ssim_loss(rand(1, 1, 8, 8), rand(1, 1, 8, 7))


class TestSpatialAlignment:
    def test_identical(self):
        x = rand(1, 2, 8, 8)
        sm, ssim, mae = L.spatial_alignment_loss(x, x)
        assert (sm.item(), mae.item()) == (0.0, 0.0)
        assert ssim.item() == pytest.approx(0.0, abs=1e-12)

    def test_constant_shift_mae(self):
        x = rand(1, 2, 8, 8)
        _, _, mae = L.spatial_alignment_loss(x, x + 1)
        assert mae.item() == pytest.approx(1.0, abs=1e-12)

    def test_composition(self):
        x, y = rand(2, 2, 8, 8), rand(2, 2, 8, 8, seed=9)
        sm, ssim, mae = L.spatial_alignment_loss(x, y)
        assert sm.item() == pytest.approx(0.3 * ssim.item() + 0.5 * mae.item(), abs=1e-7)


class TestAttentionLosses:
    def test_sparsity_zero_map(self):
        assert L.sparsity_loss(torch.zeros(2, 1, 4, 4)).item() == 0.0

    def test_sparsity_one_map(self):
        assert abs(L.sparsity_loss(torch.ones(2, 1, 4, 4, dtype=torch.float64)).item()) < 1e-7

    def test_sparsity_half(self):
        # -0.5 * ln(0.5 + 1e-8) = 0.5 ln 2 - 5e-9
        assert L.sparsity_loss(torch.full((2, 1, 5, 3), 0.5, dtype=torch.float64)).item() == pytest.approx(0.346574, abs=1e-6)

    def test_smoothness_constant(self):
        assert L.smoothness_loss(torch.full((2, 1, 4, 5), 0.3)).item() == 0.0

    @pytest.mark.parametrize("W", [2, 5, 9])
    def test_smoothness_single_step(self, W):
        m = torch.zeros(1, 1, 6, W, dtype=torch.float64)
        m[..., W // 2:] = 1.0
        assert L.smoothness_loss(m).item() == pytest.approx(1 / (W - 1))

    def test_smoothness_transpose(self):
        m = torch.rand(2, 1, 5, 7, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        assert L.smoothness_loss(m).item() == pytest.approx(L.smoothness_loss(m.transpose(2, 3)).item(), abs=1e-12)

    def test_smoothness_needs_two(self):
        with pytest.raises(ShapeError):
            L.smoothness_loss(torch.zeros(1, 1, 1, 5))

    def test_attention_loss(self):
        attn, sparse, smooth = L.attention_loss(torch.zeros(1, 1, 4, 4))
        assert attn.item() == 0.0
        attn, _, _ = L.attention_loss(torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64))
        assert attn.item() == pytest.approx(0.346574, abs=1e-6)
        m = torch.rand(2, 1, 6, 6, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        attn, sparse, smooth = L.attention_loss(m)
        assert attn.item() == pytest.approx(sparse.item() + 0.1 * smooth.item(), abs=1e-7)


class TestComposition:
    def test_total_alignment(self):
        assert L.total_alignment_loss([(0, 0, 0)]) == 0
        assert L.total_alignment_loss([(1, 2, 3)]) == 6
        assert L.total_alignment_loss([(1, 1, 1), (3, 3, 3)]) == 6
        with pytest.raises(ValueError):
            L.total_alignment_loss([])

    def test_total(self):
        assert L.total_loss(1.5, 0.0) == 1.5
        assert L.total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2)
        assert L.total_loss(1.0, 123.0, 0.0) == 1.0
        with pytest.raises(ValueError):
            L.total_loss(1.0, 1.0, -0.1)

    def test_compose_identities(self):
        g = torch.Generator().manual_seed(0)
        scales = [{k: torch.rand((), generator=g) for k in ("contrast", "ssim", "mae", "sparse", "smooth")}
                  for _ in range(3)]
        total, bd = L.compose(torch.tensor(2.5), scales, 0.1)
        assert all(err <= 1e-12 for err in bd.identity_errors(0.1).values())
        bd.check(0.1)
        assert total.item() == bd.total

    def test_compose_without_alignment(self):
        total, bd = L.compose(torch.tensor(1.25), [], 0.1)
        assert bd.align_total == 0.0 and bd.total == 1.25

    def test_breakdown_detects_violation(self):
        bd = L.LossBreakdown(ssim=1.0, mae=1.0, sm=0.9)
        with pytest.raises(ArithmeticError):
            bd.check(0.1)
