import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gradcheck import check_gradients
from ratgan.discriminator import (Discriminator, DiscriminatorConfig,
                                  desk_discriminator_config,
                                  full_discriminator_config, soft_threshold)
from ratgan.errors import InvalidConfigError, InvalidInputError


def tiny_config(**overrides):
    defaults = dict(resolution=8, sentence_width=3, base_channels=4,
                    max_channels=8, attention_size=4, energy_hidden=4)
    defaults.update(overrides)
    return DiscriminatorConfig(**defaults)


def zero_energy_mlp(d):
    with torch.no_grad():
        for p in d.energy_mlp.parameters():
            p.zero_()


class TestDownsampleEncode:
    def test_full_scale_attention_resolution(self):
        d = Discriminator(full_discriminator_config(base_channels=8,
                                                    max_channels=32))
        P = d.downsample_encode(torch.randn(3, 256, 256))
        assert P.shape[-2:] == (8, 8)

    def test_desk_scale_resolution(self):
        d = Discriminator(desk_discriminator_config())
        P = d.downsample_encode(torch.randn(3, 64, 64))
        assert P.shape[-2:] == (4, 4)

    def test_deterministic(self):
        d = Discriminator(tiny_config())
        img = torch.randn(3, 8, 8)
        assert torch.equal(d.downsample_encode(img), d.downsample_encode(img))

    def test_wrong_shape_rejected(self):
        d = Discriminator(tiny_config())
        with pytest.raises(InvalidInputError):
            d.downsample_encode(torch.randn(3, 16, 16))


class TestAttentionEnergy:
    def test_zero_mlp_gives_zero_energies(self):
        d = Discriminator(tiny_config())
        zero_energy_mlp(d)
        P = d.downsample_encode(torch.randn(3, 8, 8))
        x = d.attention_energy(P, torch.randn(3))
        assert torch.equal(x, torch.zeros(4, 4))

    def test_position_permutation_equivariance(self):
        d = Discriminator(tiny_config())
        P = torch.randn(d.feature_channels, 4, 4)
        s = torch.randn(3)
        x = d.attention_energy(P, s)
        perm = torch.randperm(16)
        P_perm = P.reshape(-1, 16)[:, perm].reshape(P.shape)
        x_perm = d.attention_energy(P_perm, s)
        assert torch.allclose(x.reshape(16)[perm], x_perm.reshape(16), atol=1e-6)

    def test_matches_per_position_oracle(self):
        d = Discriminator(tiny_config()).double()
        P = torch.randn(d.feature_channels, 4, 4, dtype=torch.float64)
        s = torch.randn(3, dtype=torch.float64)
        x = d.attention_energy(P, s)
        w1 = d.energy_mlp[0].weight.tolist()
        b1 = d.energy_mlp[0].bias.tolist()
        w2 = d.energy_mlp[2].weight.tolist()
        b2 = d.energy_mlp[2].bias.tolist()
        expected = oracles.per_position_mlp(P.tolist(), s.tolist(), w1, b1, w2, b2)
        assert torch.allclose(x, torch.tensor(expected, dtype=torch.float64),
                              atol=1e-10)

    def test_width_mismatch_rejected(self):
        d = Discriminator(tiny_config())
        P = torch.randn(d.feature_channels, 4, 4)
        with pytest.raises(InvalidInputError):
            d.attention_energy(P, torch.randn(5))


class TestSoftThreshold:
    def test_uniform_energies(self):
        p = soft_threshold(torch.zeros(4))
        assert torch.allclose(p, torch.full((4,), 0.25), atol=1e-7)

    def test_two_entry_example(self):
        p = soft_threshold(torch.tensor([0.0, 10.0]))
        assert p[0].item() == pytest.approx(0.33334, abs=1e-3)
        assert p[1].item() == pytest.approx(0.66666, abs=1e-3)

    def test_bounded_denominator_vs_softmax(self):
        x = torch.tensor([0.0, 20.0], dtype=torch.float64)
        p_soft = soft_threshold(x)
        p_softmax = torch.softmax(x, dim=-1)
        assert p_soft[0].item() >= 0.333
        assert p_softmax[0].item() <= 1e-8

    def test_matches_scalar_oracle(self):
        x = torch.randn(10, dtype=torch.float64) * 5
        expected = oracles.soft_threshold_loop(x.tolist())
        assert torch.allclose(soft_threshold(x),
                              torch.tensor(expected, dtype=torch.float64),
                              atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            soft_threshold(torch.tensor([0.0, float("nan")]))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_sum_and_lower_bound(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(12, generator=g, dtype=torch.float64) * 10
        p = soft_threshold(x)
        assert p.sum().item() == pytest.approx(1.0, abs=1e-6)
        lower = torch.sigmoid(x) / x.numel()
        assert (p * x.numel() >= torch.sigmoid(x) - 1e-9).all()
        assert (p > 0).all()
        assert (p >= lower - 1e-12).all()

    def test_gradient_matches_finite_differences(self):
        x = torch.randn(6, dtype=torch.float64, requires_grad=True)
        w = torch.randn(6, dtype=torch.float64)
        check_gradients(lambda: (soft_threshold(x) * w).sum(), [x], tol=1e-4)


class TestSpatialAttention:
    def test_uniform_attention_with_zero_mlp(self):
        d = Discriminator(tiny_config())
        zero_energy_mlp(d)
        P = d.downsample_encode(torch.randn(3, 8, 8))
        s = torch.randn(3)
        alpha, S = d.spatial_attention(P, s)
        assert torch.allclose(alpha, torch.full((4, 4), 1 / 16), atol=1e-7)
        assert torch.allclose(S, s[:, None, None].expand(3, 4, 4) / 16, atol=1e-7)

    def test_gating_identity(self):
        d = Discriminator(tiny_config())
        P = d.downsample_encode(torch.randn(3, 8, 8))
        s = torch.randn(3)
        alpha, S = d.spatial_attention(P, s)
        assert torch.allclose(S.sum(dim=(1, 2)), s, atol=1e-5)

    def test_matches_flatten_reshape_oracle(self):
        d = Discriminator(tiny_config()).double()
        P = d.downsample_encode(torch.randn(3, 8, 8, dtype=torch.float64))
        s = torch.randn(3, dtype=torch.float64)
        alpha, _ = d.spatial_attention(P, s)
        x = d.attention_energy(P, s)
        expected = oracles.soft_threshold_loop(x.reshape(-1).tolist())
        assert torch.allclose(alpha.reshape(-1),
                              torch.tensor(expected, dtype=torch.float64),
                              atol=1e-12)

    def test_normalization_over_random_inputs(self):
        d = Discriminator(tiny_config())
        for _ in range(50):
            P = torch.randn(d.feature_channels, 4, 4) * 5
            alpha, _ = d.spatial_attention(P, torch.randn(3))
            assert alpha.sum().item() == pytest.approx(1.0, abs=1e-6)
            assert (alpha > 0).all()

    def test_gradient_matches_finite_differences(self):
        d = Discriminator(tiny_config()).double()
        P = torch.randn(d.feature_channels, 4, 4, dtype=torch.float64,
                        requires_grad=True)
        s = torch.randn(3, dtype=torch.float64, requires_grad=True)
        w = torch.randn(4, 4, dtype=torch.float64)

        def loss_fn():
            alpha, S = d.spatial_attention(P, s)
            return (alpha * w).sum() + S.sum()

        check_gradients(loss_fn, [P, s], list(d.energy_mlp.parameters()),
                        tol=1e-4)


class TestDiscriminate:
    def test_finite_scalar(self):
        d = Discriminator(tiny_config())
        score = d(torch.randn(3, 8, 8), torch.randn(3))
        assert score.shape == ()
        assert torch.isfinite(score)

    def test_attention_modes_differ(self):
        d = Discriminator(tiny_config())
        img, s = torch.randn(3, 8, 8), torch.randn(3)
        on = d(img, s, attention_mode="soft_threshold")
        off = d(img, s, attention_mode="off")
        assert (on - off).abs() > 0

    def test_softmax_mode_runs(self):
        d = Discriminator(tiny_config())
        score = d(torch.randn(3, 8, 8), torch.randn(3),
                  attention_mode="softmax")
        assert torch.isfinite(score)

    def test_unknown_mode_rejected(self):
        d = Discriminator(tiny_config())
        with pytest.raises(InvalidInputError):
            d(torch.randn(3, 8, 8), torch.randn(3), attention_mode="hard")

    def test_gradient_matches_finite_differences(self):
        d = Discriminator(tiny_config()).double()
        img = torch.randn(3, 8, 8, dtype=torch.float64, requires_grad=True)
        s = torch.randn(3, dtype=torch.float64, requires_grad=True)
        check_gradients(lambda: d(img, s), [img, s], tol=1e-4)


class TestConfigValidation:
    def test_bad_attention_mode(self):
        with pytest.raises(InvalidConfigError):
            DiscriminatorConfig(attention_mode="hard")

    def test_resolution_attention_ratio(self):
        with pytest.raises(InvalidConfigError):
            DiscriminatorConfig(resolution=48, attention_size=8)
