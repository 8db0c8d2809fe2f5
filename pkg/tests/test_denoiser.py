"""Denoiser contracts: shape/determinism, channel expansion algebra,
zero-control identity, LoRA attach/merge/SVD, parameter-set selection."""

import numpy as np
import pytest
from oracles import conv2d_reference

from hye.data_pipeline import build_condition
from hye.denoiser import (
    DenoiserConfig,
    attach_lora,
    attach_lora_to_attention,
    build_denoiser,
    expand_input_channels,
    merge_lora,
    predict_noise,
    trainable_parameters,
)
from hye.errors import ConfigurationError, DimensionError
from hye.nn import Conv2d, Linear
from hye.tensor import Tensor, conv2d, linear


SMALL = DenoiserConfig(base_channels=8, depth=2, time_embed_dim=16)


def small_model(seed=0):
    return build_denoiser(SMALL, np.random.default_rng(seed))


def random_cond(rng, n=1, size=16):
    emb = rng.uniform(-1, 1, 64).astype(np.float32)
    cond = build_condition(emb, np.full((size, size), 37.0, dtype=np.float32))
    return np.repeat(cond.data[None], n, axis=0)


class TestBuild:
    def test_forward_shape_and_finite(self):
        model = build_denoiser(DenoiserConfig(base_channels=8, depth=3,
                                              time_embed_dim=16),
                               np.random.default_rng(0))
        x = Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32))
        cond = np.zeros((1, 65, 32, 32), dtype=np.float32)
        out = predict_noise(x, 0, cond, model)
        assert out.shape == (1, 1, 32, 32)
        assert np.all(np.isfinite(out.data))

    def test_same_seed_identical_parameters(self):
        a, b = small_model(7), small_model(7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seeds_differ(self):
        a, b = small_model(1), small_model(2)
        diffs = sum(
            not np.array_equal(pa.data, pb.data)
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
        )
        assert diffs > 0

    def test_time_embedding_is_live(self):
        model = small_model(3)
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
        out_a = model(x, 0).data
        out_b = model(x, 50).data
        assert np.abs(out_a - out_b).max() > 0

    def test_indivisible_spatial_size_rejected(self):
        model = small_model(5)
        x = Tensor(np.zeros((1, 1, 18, 18), dtype=np.float32))
        with pytest.raises(ConfigurationError):
            model(x, 0)

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(depth=0)
        with pytest.raises(ConfigurationError):
            DenoiserConfig(attn_stages=(5,))


class TestExpandInputChannels:
    def test_single_channel_copies(self):
        rng = np.random.default_rng(0)
        layer = Conv2d(1, 4, 3, rng)
        original = layer.weight.data.copy()
        expand_input_channels(layer, 5)
        assert layer.weight.shape == (4, 5, 3, 3)
        for j in range(5):
            np.testing.assert_array_equal(layer.weight.data[:, j], original[:, 0])

    def test_zero_kernel_stays_zero(self):
        layer = Conv2d(3, 2, 3, np.random.default_rng(0), zero_init=True)
        expand_input_channels(layer, 65)
        assert not layer.weight.data.any()

    def test_shrink_rejected(self):
        layer = Conv2d(3, 2, 3, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            expand_input_channels(layer, 2)

    def test_mean_replication_identity_against_bruteforce(self):
        """Expanded layer on mean-replicated input = (c_new/c_old) x original
        on the mean-replicated 3-channel input, checked by the loop oracle."""
        rng = np.random.default_rng(1)
        c_old, c_new = 3, 65
        layer = Conv2d(c_old, 4, 3, rng, padding=1, bias=False)
        w_orig = layer.weight.data.astype(np.float64).copy()
        x = rng.standard_normal((1, c_old, 8, 8))
        mean_map = x.mean(axis=1, keepdims=True)

        expand_input_channels(layer, c_new)
        x65 = np.repeat(mean_map, c_new, axis=1).astype(np.float32)
        got = layer(Tensor(x65)).data

        z3 = np.repeat(mean_map, c_old, axis=1)
        want = (c_new / c_old) * conv2d_reference(z3, w_orig, padding=1)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_expanded_layer_matches_fast_conv(self):
        rng = np.random.default_rng(2)
        layer = Conv2d(3, 2, 3, rng, bias=False)
        expand_input_channels(layer, 7)
        x = rng.standard_normal((1, 7, 6, 6))
        got = layer(Tensor(x.astype(np.float32))).data
        want = conv2d_reference(x, layer.weight.data.astype(np.float64))
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6)


class TestPredictNoise:
    def test_zero_control_identity_at_init(self):
        """Zero-initialized control projections leave the backbone untouched."""
        model = small_model(11)
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32))
        cond = random_cond(rng, n=2)
        with_cond = predict_noise(x, 5, cond, model).data
        backbone_only = model(x, 5).data
        np.testing.assert_array_equal(with_cond, backbone_only)

    def test_control_changes_output_once_projections_move(self):
        model = small_model(13)
        rng = np.random.default_rng(14)
        for proj in model.control.projs:
            proj.weight.data[:] = rng.standard_normal(proj.weight.shape) * 0.1
        x = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
        a = predict_noise(x, 3, random_cond(rng), model).data
        b = model(x, 3).data
        assert np.abs(a - b).max() > 0

    def test_distinct_conditions_distinct_outputs_with_live_projections(self):
        model = small_model(15)
        rng = np.random.default_rng(16)
        for proj in model.control.projs:
            proj.weight.data[:] = rng.standard_normal(proj.weight.shape) * 0.1
        x = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
        c1 = random_cond(np.random.default_rng(1))
        c2 = random_cond(np.random.default_rng(2))
        a = predict_noise(x, 3, c1, model).data
        b = predict_noise(x, 3, c2, model).data
        assert float(np.sqrt(((a - b) ** 2).sum())) > 0

    def test_channel_mismatch_rejected(self):
        model = small_model(17)
        x = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
        with pytest.raises(DimensionError):
            predict_noise(x, 0, np.zeros((1, 64, 16, 16), dtype=np.float32), model)

    def test_spatial_mismatch_rejected(self):
        model = small_model(18)
        x = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
        with pytest.raises(DimensionError):
            predict_noise(x, 0, np.zeros((1, 65, 8, 8), dtype=np.float32), model)


class TestLora:
    def test_attach_is_bit_neutral(self):
        rng = np.random.default_rng(20)
        layer = Linear(12, 10, rng)
        x = Tensor(rng.standard_normal((3, 12)).astype(np.float32))
        before = layer(x).data.copy()
        attach_lora(layer, rank=4, rng=np.random.default_rng(21))
        after = layer(x).data
        np.testing.assert_array_equal(before, after)

    def test_model_attach_is_bit_neutral(self):
        model = small_model(22)
        rng = np.random.default_rng(23)
        x = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
        before = model(x, 7).data.copy()
        adapters = attach_lora_to_attention(model, rank=4,
                                            rng=np.random.default_rng(24))
        assert len(adapters) == len(model.attention_linears())
        np.testing.assert_array_equal(before, model(x, 7).data)

    def test_merge_equivalence(self):
        rng = np.random.default_rng(25)
        layer = Linear(16, 8, rng)
        adapter = attach_lora(layer, rank=3, rng=np.random.default_rng(26))
        adapter.B.data[:] = rng.standard_normal(adapter.B.shape) * 0.3
        x = Tensor(rng.standard_normal((5, 16)).astype(np.float32))
        adapted = layer(x).data.copy()
        merge_lora(layer)
        assert layer.adapter is None
        merged = layer(x).data
        np.testing.assert_allclose(merged, adapted, rtol=1e-6, atol=1e-6)

    def test_svd_reconstruction_at_full_rank(self):
        """Adapter built from SVD factors of a random increment reproduces
        the incremented weight exactly."""
        rng = np.random.default_rng(27)
        d, k = 10, 14
        layer = Linear(k, d, rng, bias=False)
        delta = rng.standard_normal((d, k)).astype(np.float64) * 0.5
        u, s, vt = np.linalg.svd(delta, full_matrices=False)
        r = min(d, k)
        adapter = attach_lora(layer, rank=r, rng=np.random.default_rng(28))
        adapter.B.data[:] = (u * np.sqrt(s)).astype(np.float32)
        adapter.A.data[:] = (np.sqrt(s)[:, None] * vt).astype(np.float32)
        x = Tensor(rng.standard_normal((6, k)).astype(np.float32))
        got = layer(x).data
        want = x.data @ (layer.weight.data + delta.astype(np.float32)).T
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_rank_validation(self):
        layer = Linear(8, 6, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            attach_lora(layer, rank=7)
        with pytest.raises(ConfigurationError):
            attach_lora(Conv2d(1, 1, 3, np.random.default_rng(0)), rank=1)


class TestTrainableParameters:
    def test_lora_and_control_exact_set(self):
        model = small_model(30)
        attach_lora_to_attention(model, rank=4, rng=np.random.default_rng(31))
        chosen = trainable_parameters(model, "lora_and_control")
        names = {n for n, _ in chosen}
        assert all(".adapter." in n or n.startswith("control.") for n in names)
        # every adapter tensor and every control parameter is present
        all_names = {n for n, _ in model.named_parameters()}
        expected = {n for n in all_names if ".adapter." in n or n.startswith("control.")}
        assert names == expected

    def test_lora_parameter_count_formula(self):
        model = small_model(32)
        rank = 4
        adapters = attach_lora_to_attention(model, rank=rank,
                                            rng=np.random.default_rng(33))
        lora_params = [p for n, p in trainable_parameters(model, "lora_and_control")
                       if ".adapter." in n]
        total = sum(p.size for p in lora_params)
        expected = sum(rank * l.d_in + l.d_out * rank
                       for _, l in model.attention_linears())
        assert total == expected
        assert len(adapters) * 2 == len(lora_params)

    def test_full_mode_is_superset(self):
        model = small_model(34)
        attach_lora_to_attention(model, rank=2, rng=np.random.default_rng(35))
        full = {n for n, _ in trainable_parameters(model, "full")}
        sub = {n for n, _ in trainable_parameters(model, "lora_and_control")}
        assert sub < full

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            trainable_parameters(small_model(36), "everything")
