import math

import numpy as np
import pytest
import torch

from plgf.errors import ConfigurationError
from plgf.layers import (
    ContextGatedAttention,
    DensityRecovery,
    EnhancedFPN,
    FiLM,
    PixelShuffleUp,
    ResidualDenseBlock,
    eca_kernel_size,
    n2_normalize,
    pixel_shuffle,
)


class TestFiLM:
    def test_zero_init_is_identity(self):
        film = FiLM(8, 6)
        x = torch.randn(2, 6, 5, 5)
        assert torch.equal(film(x, torch.randn(2, 8)), x)

    def test_unit_gamma_doubles(self):
        film = FiLM(8, 6)
        with torch.no_grad():
            film.to_gamma.bias.fill_(1.0)
        x = torch.randn(2, 6, 5, 5)
        assert torch.equal(film(x, torch.randn(2, 8)), 2 * x)

    def test_matches_scalar_oracle(self):
        film = FiLM(5, 3)
        for p in film.parameters():
            torch.nn.init.normal_(p)
        x = torch.randn(1, 3, 4, 4)
        cond = torch.randn(1, 5)
        got = film(x, cond)
        W_g, b_g = film.to_gamma.weight.detach().numpy(), film.to_gamma.bias.detach().numpy()
        W_b, b_b = film.to_beta.weight.detach().numpy(), film.to_beta.bias.detach().numpy()
        e = cond[0].numpy().astype(np.float64)
        for c in range(3):
            g = sum(W_g[c, k] * e[k] for k in range(5)) + b_g[c]
            b = sum(W_b[c, k] * e[k] for k in range(5)) + b_b[c]
            for i in range(4):
                for j in range(4):
                    assert abs(got[0, c, i, j].item() - ((1 + g) * x[0, c, i, j].item() + b)) < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            FiLM(8, 6)(torch.randn(1, 4, 3, 3), torch.randn(1, 8))


class TestRDB:
    def test_alpha_zero_is_identity(self):
        rdb = ResidualDenseBlock(16, 8, 3)
        with torch.no_grad():
            rdb.alpha.zero_()
        x = torch.randn(2, 16, 6, 6)
        assert torch.equal(rdb(x), x)

    def test_zero_weights_is_identity(self):
        rdb = ResidualDenseBlock(16, 8, 3, alpha=0.1)
        with torch.no_grad():
            for name, p in rdb.named_parameters():
                if "conv" in name or "fusion" in name:
                    p.zero_()
        x = torch.randn(2, 16, 6, 6)
        assert torch.equal(rdb(x), x)

    def test_alpha_initialised(self):
        assert ResidualDenseBlock(8, 4, 2).alpha.item() == pytest.approx(0.1)

    def test_parameter_count_closed_form(self):
        C, G, L = 128, 32, 4
        dense = sum(9 * (C + l * G) * G + G for l in range(L))
        norms = L * 2 * G
        fusion = (C + L * G) * C + C
        eca = 5  # odd kernel for 128 channels
        alpha = 1
        expected = dense + norms + fusion + eca + alpha
        assert expected == 236038
        assert sum(p.numel() for p in ResidualDenseBlock(C, G, L).parameters()) == expected

    def test_shape(self):
        x = torch.randn(1, 16, 7, 9)
        assert ResidualDenseBlock(16, 8, 4)(x).shape == x.shape


@pytest.mark.parametrize("c,k", [(1, 3), (16, 3), (64, 3), (128, 5), (256, 5), (512, 5), (1024, 5), (1 << 14, 7)])
def test_eca_kernel(c, k):
    assert eca_kernel_size(c) == k


class TestFPN:
    def test_single_scale_degenerates(self):
        fpn = EnhancedFPN(4, 1)
        with torch.no_grad():
            fpn.level_logits.fill_(0.7)
        x = torch.randn(1, 4, 6, 6)
        expected = torch.sigmoid(torch.tensor(0.7)) * fpn.attention[0](fpn.smooth[0](fpn.lateral[0](x)))
        assert torch.allclose(fpn(x), expected, atol=1e-7)

    def test_closed_gates_give_zero(self):
        fpn = EnhancedFPN(4, 3)
        with torch.no_grad():
            fpn.level_logits.fill_(-20.0)
        x = torch.randn(1, 4, 8, 8)
        with torch.no_grad():
            out = fpn(x)
        assert float(out.abs().max()) < 1e-5

    def test_constant_input_gives_constant_output(self):
        fpn = EnhancedFPN(6, 4)
        x = torch.full((1, 6, 16, 16), 2.5)
        with torch.no_grad():
            out = fpn(x)
        spread = out - out.mean(dim=(2, 3), keepdim=True)
        assert float(spread.abs().max()) < 1e-5

    def test_pyramid_levels_are_block_means(self):
        fpn = EnhancedFPN(2, 3)
        x = torch.randn(1, 2, 8, 8)
        levels = fpn.pyramid(x)
        assert [tuple(p.shape[-2:]) for p in levels] == [(8, 8), (4, 4), (2, 2)]
        assert torch.allclose(levels[2][0, 1, 1, 0], x[0, 1, 4:8, 0:4].mean())

    def test_indivisible_input(self):
        with pytest.raises(ConfigurationError):
            EnhancedFPN(2, 3)(torch.randn(1, 2, 6, 6))

    def test_shape(self):
        x = torch.randn(2, 8, 16, 16)
        assert EnhancedFPN(8, 4)(x).shape == x.shape


def brute_force_cga(cga: ContextGatedAttention, h: torch.Tensor, cond: torch.Tensor) -> np.ndarray:
    """Single-head attention written with explicit loops, float64."""
    P = {k: v.detach().double().numpy() for k, v in cga.state_dict().items()}
    C, H, W = h.shape[1:]
    e = cond[0].double().numpy()
    q0 = [sum(P["query.weight"][c, k] * e[k] for k in range(len(e))) + P["query.bias"][c] for c in range(C)]
    Wi, bi = P["attn.in_proj_weight"], P["attn.in_proj_bias"]
    Wq, Wk, Wv = Wi[:C], Wi[C:2 * C], Wi[2 * C:]
    bq, bk, bv = bi[:C], bi[C:2 * C], bi[2 * C:]
    q = [sum(Wq[a, c] * q0[c] for c in range(C)) + bq[a] for a in range(C)]
    toks = [[float(h[0, c, i, j]) for c in range(C)] for i in range(H) for j in range(W)]
    keys = [[sum(Wk[a, c] * t[c] for c in range(C)) + bk[a] for a in range(C)] for t in toks]
    vals = [[sum(Wv[a, c] * t[c] for c in range(C)) + bv[a] for a in range(C)] for t in toks]
    scores = [sum(q[a] * k[a] for a in range(C)) / math.sqrt(C) for k in keys]
    mx = max(scores)
    ex = [math.exp(s - mx) for s in scores]
    z = sum(ex)
    att = [x / z for x in ex]
    v = [sum(att[n] * vals[n][a] for n in range(len(vals))) for a in range(C)]
    Wo, bo = P["attn.out_proj.weight"], P["attn.out_proj.bias"]
    v_agg = [sum(Wo[a, c] * v[c] for c in range(C)) + bo[a] for a in range(C)]
    gamma = [sum(P["to_gamma.weight"][a, c] * v_agg[c] for c in range(C)) + P["to_gamma.bias"][a] for a in range(C)]
    beta = [sum(P["to_beta.weight"][a, c] * v_agg[c] for c in range(C)) + P["to_beta.bias"][a] for a in range(C)]
    out = np.zeros((C, H, W))
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[c, i, j] = gamma[c] * float(h[0, c, i, j]) + beta[c]
    return out


class TestContextGatedAttention:
    def test_identity_at_init(self):
        cga = ContextGatedAttention(8, 4, 2)
        h = torch.randn(2, 4, 5, 5)
        assert torch.equal(cga(h, torch.randn(2, 8)), h)

    def test_constant_features_give_uniform_attention(self):
        cga = ContextGatedAttention(8, 4, 1)
        h = torch.ones(1, 4, 3, 3) * torch.tensor([1.0, -2.0, 0.5, 3.0])[None, :, None, None]
        q = cga.query(torch.randn(1, 8)).unsqueeze(1)
        kv = h.flatten(2).transpose(1, 2)
        _, weights = cga.attn(q, kv, kv, need_weights=True)
        assert torch.allclose(weights, torch.full_like(weights, 1 / 9), atol=1e-7)
        # v_agg does not depend on the condition
        a = cga.aggregate(h, torch.randn(1, 8))
        b = cga.aggregate(h, torch.randn(1, 8))
        assert torch.allclose(a, b, atol=1e-6)

    def test_matches_brute_force_single_head(self):
        torch.manual_seed(9)
        cga = ContextGatedAttention(5, 4, 1)
        with torch.no_grad():
            for p in cga.parameters():
                p.normal_(0, 0.5)
        h = torch.randn(1, 4, 3, 4)
        cond = torch.randn(1, 5)
        got = cga(h, cond)[0].detach().double().numpy()
        np.testing.assert_allclose(got, brute_force_cga(cga, h, cond), atol=1e-5)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            ContextGatedAttention(8, 6, 4)


class TestPixelShuffle:
    def test_index_contract(self):
        x = torch.randn(1, 12, 3, 3)
        out = pixel_shuffle(x)
        assert out.shape == (1, 3, 6, 6)
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    for di in (0, 1):
                        for dj in (0, 1):
                            assert out[0, c, 2 * i + di, 2 * j + dj] == x[0, 4 * c + 2 * di + dj, i, j]

    def test_identity_conv_is_permutation(self):
        up = PixelShuffleUp(3)
        with torch.no_grad():
            up.conv.weight.zero_()
            up.conv.bias.zero_()
            for o in range(12):
                up.conv.weight[o, o // 4, 1, 1] = 1.0  # each output channel copies one input channel
        x = torch.randn(1, 3, 4, 4)
        out = up(x)
        expected = torch.repeat_interleave(x, 4, dim=1).flatten().sort().values
        assert torch.equal(out.flatten().sort().values, expected)

    def test_zero_conv(self):
        up = PixelShuffleUp(5)
        with torch.no_grad():
            up.conv.weight.zero_()
            up.conv.bias.zero_()
        out = up(torch.randn(2, 5, 3, 3))
        assert out.shape == (2, 5, 6, 6)
        assert torch.equal(out, torch.zeros_like(out))

    def test_channels_not_divisible(self):
        with pytest.raises(ConfigurationError):
            pixel_shuffle(torch.randn(1, 6, 2, 2))


class TestDensityRecovery:
    def test_uniform_block_splits_evenly(self):
        raw = torch.full((1, 1, 4, 4), 0.3)
        coarse = torch.tensor([[[[8.0, 4.0], [0.0, 2.0]]]])
        head = DensityRecovery(1, 1, 2)
        out = head.distribute(raw, coarse)
        expected = coarse.repeat_interleave(2, -2).repeat_interleave(2, -1) / 4
        assert torch.allclose(out, expected)

    def test_dead_block_falls_back_to_uniform(self):
        raw = torch.zeros(1, 1, 4, 4)
        raw[..., :2, :2] = torch.tensor([[1.0, 3.0], [0.0, 0.0]])
        coarse = torch.tensor([[[[8.0, 4.0], [6.0, 2.0]]]])
        out = DensityRecovery(1, 1, 2).distribute(raw, coarse)
        assert torch.allclose(out[0, 0, :2, :2], torch.tensor([[2.0, 6.0], [0.0, 0.0]]))
        assert torch.allclose(out[0, 0, :2, 2:], torch.full((2, 2), 1.0))
        assert torch.allclose(out[0, 0, 2:, :2], torch.full((2, 2), 1.5))

    def test_random_blocks_match_scalar_oracle(self):
        g = torch.Generator().manual_seed(3)
        n = 4
        raw = torch.rand(1, 1, 12, 8, generator=g, dtype=torch.float64)
        coarse = torch.rand(1, 1, 3, 2, generator=g, dtype=torch.float64) * 50
        out = DensityRecovery(1, 1, n).double().distribute(raw, coarse)[0, 0].numpy()
        r = raw[0, 0].numpy()
        for bi in range(3):
            for bj in range(2):
                block = r[bi * n:(bi + 1) * n, bj * n:(bj + 1) * n]
                s = sum(float(v) for v in block.ravel())
                v = float(coarse[0, 0, bi, bj])
                for a in range(n):
                    for b in range(n):
                        assert out[bi * n + a, bj * n + b] == pytest.approx(block[a, b] / s * v, rel=1e-12)
                assert out[bi * n:(bi + 1) * n, bj * n:(bj + 1) * n].sum() == pytest.approx(v, rel=1e-12)

    def test_n2_normalize_sums_to_one(self):
        x = torch.rand(2, 1, 8, 8)
        x[0, 0, :4, :4] = 0
        s = n2_normalize(x, 4).reshape(2, 1, 2, 4, 2, 4).sum(dim=(3, 5))
        assert torch.allclose(s, torch.ones_like(s))

    def test_gradients_finite_through_dead_block(self):
        raw = torch.zeros(1, 1, 2, 2, requires_grad=True)
        out = n2_normalize(raw, 2).sum()
        out.backward()
        assert torch.isfinite(raw.grad).all()
