"""Network shapes, determinism, presence handling, masking invariance."""

import numpy as np
import pytest
import torch

from modbalance.network import ModalityEncoder, MultiModalSegNet, NetConfig, PyramidDecoder


def small_config(**kwargs):
    defaults = dict(n_modalities=3, n_classes=3, n_levels=3, base_channels=8,
                    token_grid=(4, 4))
    defaults.update(kwargs)
    return NetConfig(**defaults)


def make_net(seed=0, **kwargs):
    torch.manual_seed(seed)
    return MultiModalSegNet(small_config(**kwargs))


def sample_input(config, seed=0, h=64, w=64):
    rng = np.random.default_rng(seed)
    images = torch.tensor(rng.standard_normal((config.n_modalities, h, w)))
    return images


class TestEncoder:
    def test_level_shapes_follow_config_arithmetic(self):
        torch.manual_seed(1)
        config = small_config()
        enc = ModalityEncoder(config).to(torch.float64)
        levels = enc(torch.zeros((1, 64, 64), dtype=torch.float64))
        expected = [(8, 64, 64), (16, 32, 32), (32, 16, 16)]
        assert [tuple(lvl.shape) for lvl in levels] == expected

    def test_zero_input_keeps_features_finite(self):
        torch.manual_seed(2)
        enc = ModalityEncoder(small_config()).to(torch.float64)
        for lvl in enc(torch.zeros((1, 32, 32), dtype=torch.float64)):
            assert bool(torch.isfinite(lvl).all())

    def test_identical_weights_produce_identical_pyramids(self):
        torch.manual_seed(3)
        config = small_config()
        enc_a = ModalityEncoder(config).to(torch.float64)
        enc_b = ModalityEncoder(config).to(torch.float64)
        enc_b.load_state_dict(enc_a.state_dict())
        image = torch.tensor(np.random.default_rng(4).standard_normal((1, 32, 32)))
        for a, b in zip(enc_a(image), enc_b(image)):
            assert torch.equal(a, b)


class TestDecoder:
    def test_deep_supervision_tap_shapes(self):
        torch.manual_seed(5)
        config = small_config()
        net = MultiModalSegNet(config)
        images = sample_input(config, seed=5)
        out = net(images, torch.tensor([True, True, True]))
        sizes = [tuple(t.shape) for t in out.fused_logits]
        assert sizes == [(3, 64, 64), (3, 32, 32), (3, 16, 16)]

    def test_forward_is_bitwise_reproducible(self):
        net = make_net(seed=6)
        images = sample_input(net.config, seed=6)
        presence = torch.tensor([True, False, True])
        out1 = net(images, presence)
        out2 = net(images, presence)
        for a, b in zip(out1.fused_logits, out2.fused_logits):
            assert torch.equal(a, b)


class TestUniDecoding:
    def test_presence_filtering(self):
        net = make_net(seed=7)
        images = sample_input(net.config, seed=7)
        out = net(images, torch.tensor([True, True, False]))
        assert set(out.uni_logits) == {0, 1}
        assert out.uni_logits[0].shape == (3, 64, 64)

    def test_shared_decoder_weight_sharing(self):
        net = make_net(seed=8)
        images = sample_input(net.config, seed=8)
        out = net(images, torch.tensor([True, True, True]))
        again = net.shared_decoder(out.uni_features[1])
        assert torch.equal(out.uni_logits[1], again)

    def test_swapping_identical_pyramids_preserves_output_multiset(self):
        net = make_net(seed=9)
        images = sample_input(net.config, seed=9)
        images[1] = images[0]  # identical inputs for modalities 0 and 1
        out = net(images, torch.tensor([True, True, False]))
        logits_a = net.shared_decoder(out.uni_features[0])
        logits_b = net.shared_decoder(out.uni_features[1])
        swapped = {0: logits_b, 1: logits_a}
        for m in (0, 1):
            match = any(torch.equal(swapped[m], other) for other in out.uni_logits.values())
            assert match

    def test_encoders_differ_across_modalities(self):
        net = make_net(seed=10)
        images = sample_input(net.config, seed=10)
        images[1] = images[0]
        out = net(images, torch.tensor([True, True, True]))
        # Same input, different encoder weights: pyramids differ.
        assert not torch.equal(out.uni_features[0][0], out.uni_features[1][0])


class TestMaskingInvariance:
    def test_absent_pixels_cannot_move_any_output(self):
        net = make_net(seed=11)
        images = sample_input(net.config, seed=11)
        presence = torch.tensor([True, False, True])
        base = net(images, presence)
        perturbed = images.clone()
        perturbed[1] = torch.tensor(
            np.random.default_rng(123).standard_normal((64, 64))
        ) * 100.0
        moved = net(perturbed, presence)
        for a, b in zip(base.fused_logits, moved.fused_logits):
            assert float((a - b).abs().max()) < 1e-5
        for m in base.uni_logits:
            assert float((base.uni_logits[m] - moved.uni_logits[m]).abs().max()) < 1e-5
        for a, b in zip(base.fusion_weights, moved.fusion_weights):
            assert float((a - b).abs().max()) < 1e-5

    def test_fusion_weight_invariants_at_every_level(self):
        net = make_net(seed=12)
        images = sample_input(net.config, seed=12)
        presence = torch.tensor([False, True, True])
        out = net(images, presence)
        for weights in out.fusion_weights:
            assert float((weights.sum(dim=0) - 1).abs().max()) < 1e-6
            assert float(weights[0].abs().max()) == 0.0


class TestValidation:
    def test_wrong_shapes_rejected(self):
        net = make_net(seed=13)
        with pytest.raises(ValueError):
            net(torch.zeros((2, 64, 64), dtype=torch.float64), torch.tensor([True, True]))
        with pytest.raises(ValueError):
            net(torch.zeros((3, 62, 62), dtype=torch.float64),
                torch.tensor([True, True, True]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetConfig(n_levels=1)
        with pytest.raises(ValueError):
            NetConfig(dtype="float16")

    def test_config_roundtrip(self):
        config = small_config(dtype="float32", head_dim=5)
        assert NetConfig.from_dict(config.to_dict()) == config

    def test_averaging_ablation_forward(self):
        net = make_net(seed=14, use_fusion_attention=False)
        images = sample_input(net.config, seed=14)
        out = net(images, torch.tensor([True, True, False]))
        stacked = torch.stack([out.uni_features[m][0] for m in range(3)])
        expected = (stacked[0] + stacked[1]) / 2
        assert torch.allclose(out.fused_features[0], expected, atol=1e-12)
