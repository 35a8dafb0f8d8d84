"""Grad-CAM, overlay, and high-confidence selection tests."""

import numpy as np
import pytest

from protoshot import synth
from protoshot.data import EpisodeSampler
from protoshot.encoders import EncoderConfig
from protoshot.errors import ConfigError, DataError, ShapeError
from protoshot.explain import (
    SaliencyMap,
    gradcam,
    heat_ramp,
    overlay,
    select_high_confidence,
)
from protoshot.head import compute_prototypes
from protoshot.metrics import QueryOutcome
from protoshot.model import FewShotModel
from protoshot.train import TrainConfig, fit


def _conv_model(seed=0, size=32, blocks=2, channels=6, embed=8):
    config = EncoderConfig(archetype="conv-net", input_channels=1, input_size=size,
                           conv_blocks=blocks, channels_per_block=channels, embed_dim=embed)
    return FewShotModel.create(config, seed=seed)


def _protos_for(model, pools, shot=3, seed=0):
    sampler = EpisodeSampler(pools, way=len(pools), shot=shot, query=1, seed=seed)
    episode = sampler.sample()
    support = model.embed(episode.support_x)
    return compute_prototypes(support, episode.support_y, episode.way), episode


class TestGradcam:
    def test_constant_last_conv_gives_zero_map(self):
        model = _conv_model(seed=1)
        model.params["head.weight"].data[:] = 0.0  # embedding no longer depends on the image
        pools, _ = synth.planted_signal_pools(per_class=8, size=32, seed=2)
        protos, episode = _protos_for(model, pools)
        saliency = gradcam(model, episode.query_x[0], target_class=0, protos=protos)
        assert (saliency.grid == 0).all()

    def test_normalization_contract(self):
        model = _conv_model(seed=3)
        pools, _ = synth.planted_signal_pools(per_class=8, size=32, seed=4)
        protos, episode = _protos_for(model, pools)
        saliency = gradcam(model, episode.query_x[0], target_class=1, protos=protos)
        assert saliency.grid.min() >= 0.0
        assert saliency.grid.max() == pytest.approx(1.0)
        assert saliency.grid.shape == (32, 32)

    def test_deterministic(self):
        model = _conv_model(seed=5)
        pools, _ = synth.planted_signal_pools(per_class=8, size=32, seed=6)
        protos, episode = _protos_for(model, pools)
        a = gradcam(model, episode.query_x[0], 1, protos)
        b = gradcam(model, episode.query_x[0], 1, protos)
        np.testing.assert_array_equal(a.grid, b.grid)

    @pytest.mark.parametrize("size,blocks", [(16, 1), (16, 2), (32, 2), (64, 3)])
    def test_upsampled_size_matches_input(self, size, blocks):
        model = _conv_model(seed=7, size=size, blocks=blocks, channels=4, embed=4)
        pools, _ = synth.planted_signal_pools(per_class=6, size=size, block=size // 4, seed=8)
        protos, episode = _protos_for(model, pools, shot=2)
        saliency = gradcam(model, episode.query_x[0], 0, protos)
        assert saliency.grid.shape == (size, size)
        assert saliency.source_shape == (size // 2 ** (blocks - 1), size // 2 ** (blocks - 1))

    def test_rejects_frozen_embed(self):
        config = EncoderConfig(archetype="frozen-embed", frozen_dim=4, embed_dim=2)
        model = FewShotModel.create(config, seed=9)
        pools, _ = synth.blob_pools(way=2, dim=4, per_class=6, seed=10)
        protos, episode = _protos_for(model, pools, shot=2)
        with pytest.raises(ConfigError, match="conv-net"):
            gradcam(model, episode.query_x[0], 0, protos)

    def test_localizes_planted_signal_after_training(self):
        pools, quadrant = synth.planted_signal_pools(per_class=40, size=32, seed=11)
        model = _conv_model(seed=12, channels=8)
        sampler = EpisodeSampler(pools, way=2, shot=5, query=5, seed=13)
        config = TrainConfig(ways=2, shots=5, query=5, epochs=2, episodes_per_epoch=40)
        model, _ = fit(model, sampler, config)

        test_pools, _ = synth.planted_signal_pools(per_class=12, size=32, seed=14)
        protos, _ = _protos_for(model, test_pools, shot=5, seed=15)
        hits = 0
        checked = 0
        for img in test_pools[1][:8]:
            emb = model.embed(img[None])
            from protoshot.head import classify_batch

            scores = classify_batch(emb, protos, model.distance)
            if scores.predicted[0] != 1:
                continue
            checked += 1
            saliency = gradcam(model, img, 1, protos)
            total = saliency.grid.sum()
            frac = saliency.grid[quadrant].sum() / total if total > 0 else 0.0
            if frac >= 0.6:
                hits += 1
        assert checked >= 4
        assert hits / checked >= 0.8


class TestOverlay:
    def test_alpha_zero_keeps_image_bytes(self):
        rng = np.random.default_rng(15)
        img = (rng.random((8, 8)) * 255).astype(np.uint8)
        grid = rng.random((8, 8)).astype(np.float32)
        out = overlay(img, SaliencyMap(grid=grid, source_shape=(4, 4)), alpha=0.0)
        assert (out == np.repeat(img[:, :, None], 3, axis=2)).all()

    def test_alpha_one_zero_map_is_cold_color(self):
        img = (np.random.default_rng(16).random((8, 8)) * 255).astype(np.uint8)
        out = overlay(img, SaliencyMap(grid=np.zeros((8, 8), np.float32), source_shape=(4, 4)),
                      alpha=1.0)
        cold = heat_ramp(np.zeros((1, 1)))[0, 0]
        assert (out == cold).all()

    def test_checkerboard_matches_blend_oracle(self):
        img = (np.indices((8, 8)).sum(axis=0) * 30 % 255).astype(np.uint8)
        grid = ((np.indices((8, 8)).sum(axis=0) % 2)).astype(np.float32)
        alpha = 0.4
        out = overlay(img, SaliencyMap(grid=grid, source_shape=(8, 8)), alpha=alpha)
        heat = heat_ramp(grid).astype(np.float64)
        expected = (1 - alpha) * np.repeat(img[:, :, None], 3, axis=2).astype(np.float64) + alpha * heat
        assert np.abs(out.astype(np.float64) - expected).max() <= 1.0

    def test_rejects_size_mismatch(self):
        with pytest.raises(ShapeError, match="shape"):
            overlay(np.zeros((8, 8)), SaliencyMap(grid=np.zeros((4, 4), np.float32),
                                                  source_shape=(2, 2)), alpha=0.5)

    def test_heat_ramp_is_monotone_per_channel(self):
        v = np.linspace(0.0, 1.0, 64)
        ramp = heat_ramp(v).astype(np.int64)
        for c in range(3):
            diffs = np.diff(ramp[:, c])
            assert (diffs >= 0).all() or (diffs <= 0).all()


def _outcome(true, predicted, prob_true):
    return QueryOutcome(episode=0, true=true, predicted=predicted, prob_true=prob_true,
                        probabilities=np.array([prob_true, 1 - prob_true]))


class TestSelectHighConfidence:
    def test_threshold_keeps_only_confident_correct(self):
        outcomes = [
            _outcome(0, 0, 0.9995),
            _outcome(0, 0, 0.95),
            _outcome(1, 1, 0.9999),
        ]
        selected = select_high_confidence(outcomes, threshold=0.999)
        assert [s.outcome.prob_true for s in selected] == [0.9995, 0.9999]
        assert all(s.tag == "high-confidence" for s in selected)

    def test_zero_threshold_is_permissive(self):
        outcomes = [_outcome(0, 0, 0.4), _outcome(1, 1, 0.6)]
        assert len(select_high_confidence(outcomes, threshold=0.0)) == 2

    def test_misclassified_always_selected_and_tagged(self):
        outcomes = [_outcome(0, 1, 0.2), _outcome(1, 1, 0.5)]
        selected = select_high_confidence(outcomes, threshold=0.999)
        assert len(selected) == 1
        assert selected[0].tag == "misclassified"

    def test_matches_predicate_oracle(self):
        rng = np.random.default_rng(17)
        outcomes = [
            _outcome(int(rng.integers(0, 2)), int(rng.integers(0, 2)), float(rng.random()))
            for _ in range(200)
        ]
        threshold = 0.7
        selected = select_high_confidence(outcomes, threshold)
        expected = [o for o in outcomes
                    if (o.predicted == o.true and o.prob_true > threshold) or o.predicted != o.true]
        assert [s.outcome for s in selected] == expected

    def test_rejects_bad_threshold(self):
        with pytest.raises(DataError, match="threshold"):
            select_high_confidence([], threshold=1.0)


class TestNormalizationIdempotence:
    def test_renormalizing_a_map_changes_nothing(self):
        model = _conv_model(seed=40)
        pools, _ = synth.planted_signal_pools(per_class=6, size=32, seed=41)
        protos, episode = _protos_for(model, pools, shot=2)
        grid = gradcam(model, episode.query_x[0], 1, protos).grid
        peak = grid.max()
        renormalized = grid / peak if peak > 0 else grid
        np.testing.assert_array_equal(renormalized, grid)
