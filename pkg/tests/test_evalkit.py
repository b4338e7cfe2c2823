import csv

import numpy as np
import pytest

from pera.config import BackboneConfig, MaskRatios, Toggles, TrainConfig
from pera.data import Dataset, generate_synthetic_dataset
from pera.errors import CapabilityError, ContractError
from pera.evalkit import (
    FeatureMatrix,
    cost_account,
    embed_2d,
    extract_features,
    feature_stats,
    linear_probe,
    reconstruct,
    silhouette,
    stratified_split,
    write_cost_report,
    write_embedding,
    write_feature_stats,
)
from pera.objective import ema_update
from pera.trainer import init_state, pretrain, train_step
from pera.data import ImageBatch
from pera.views import part_sizes

from conftest import random_dataset, tiny_config

TABLE8_RATIOS = [(0.3, 0.2, 0.5), (0.2, 0.3, 0.5), (0.2, 0.2, 0.6), (0.3, 0.1, 0.6)]


def _trained_state(steps=3):
    state = init_state(tiny_config(), 4)
    rng = np.random.default_rng(0)
    for _ in range(steps):
        train_step(state, ImageBatch(rng.random((4, 16, 16, 3)).astype(np.float32), None, np.arange(4)))
    return state


class TestFeatures:
    def test_row_count(self):
        feats = extract_features(_trained_state(), random_dataset(10, 16))
        assert feats.rows.shape == (10, 8)
        assert np.isfinite(feats.rows).all()

    def test_momentum_zero_student_equals_teacher(self):
        state = _trained_state()
        ema_update(state.teacher, state.student, 0.0)
        ds = random_dataset(6, 16)
        np.testing.assert_array_equal(extract_features(state, ds, True).rows, extract_features(state, ds, False).rows)

    def test_size_mismatch(self):
        with pytest.raises(ContractError):
            extract_features(_trained_state(), random_dataset(3, 32))


class TestLinearProbe:
    def test_one_hot_is_perfect(self):
        labels = np.arange(200) % 4
        feats = FeatureMatrix(np.eye(4)[labels], labels, "one-hot")
        assert linear_probe(feats, 0.2, seed=0) == 100.0

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        labels = np.arange(120) % 3
        feats = FeatureMatrix(rng.normal(size=(120, 6)) + labels[:, None], labels, "x")
        assert linear_probe(feats, 0.2, seed=3) == linear_probe(feats, 0.2, seed=3)

    def test_stratified_split(self):
        labels = np.repeat(np.arange(4), 50)
        train, test = stratified_split(labels, 0.2, seed=0)
        np.testing.assert_array_equal(np.bincount(labels[train]), [10, 10, 10, 10])
        assert len(np.intersect1d(train, test)) == 0 and len(train) + len(test) == 200

    def test_errors(self):
        with pytest.raises(ContractError):
            linear_probe(FeatureMatrix(np.zeros((10, 2)), np.zeros(10, int), "x"))
        with pytest.raises(ContractError):
            linear_probe(FeatureMatrix(np.zeros((10, 2)), None, "x"))


class TestReconstruct:
    def test_zero_fraction_is_identity(self):
        images = np.random.default_rng(0).random((2, 16, 16, 3)).astype(np.float32)
        recon = reconstruct(_trained_state(), images, 0.0)
        np.testing.assert_array_equal(recon.composite, images)
        assert recon.mse == 0.0

    def test_seventy_percent(self):
        images = np.random.default_rng(1).random((3, 16, 16, 3)).astype(np.float32)
        recon = reconstruct(_trained_state(), images, 0.7)
        assert np.isfinite(recon.mse) and recon.mse > 0
        assert recon.composite.shape == images.shape
        # visible patches are passed through untouched; the error map is zero there
        masked = recon.error.reshape(3, -1).any(axis=1)
        assert masked.all()
        visible = recon.error == 0
        np.testing.assert_array_equal(recon.composite[visible], images[visible])
        # 11 of 16 patches masked at 70%
        grey = (recon.masked == 0.5).all(axis=-1).reshape(3, 4, 4, 4, 4).transpose(0, 1, 3, 2, 4).reshape(3, 16, 16).all(-1)
        np.testing.assert_array_equal(grey.sum(1), [11, 11, 11])

    def test_needs_pixel_prediction(self):
        state = init_state(tiny_config(toggles=Toggles(True, True, False)), 4)
        with pytest.raises(CapabilityError):
            reconstruct(state, np.zeros((1, 16, 16, 3), np.float32), 0.7)

    @pytest.mark.slow
    def test_constant_colour_images_are_learned(self):
        # the predictor can represent a constant colour exactly; 400 steps on the
        # desk backbone reach it once stochastic depth stops dropping the blocks
        # that carry colour into the mask tokens
        rng = np.random.default_rng(0)
        images = np.broadcast_to(rng.random((128, 1, 1, 3)).astype(np.float32), (128, 64, 64, 3)).copy()
        ds = Dataset(images, None, [str(i) for i in range(128)])
        cfg = TrainConfig(epochs=100, warmup_epochs=2, tpt_t_warmup_epochs=2, base_lr=1e-3)
        cfg.backbone.drop_path_rate = 0.0
        cfg.aug.jitter_p = 0.0
        cfg.aug.grayscale_p = 0.0
        state, records = pretrain(cfg, ds)
        assert len(records) == 400
        held_out = np.broadcast_to(rng.random((32, 1, 1, 3)).astype(np.float32), (32, 64, 64, 3)).copy()
        assert reconstruct(state, held_out, 0.7).mse < 1e-3


class TestFeatureStats:
    def test_momentum_zero_spike_at_zero(self):
        state = _trained_state()
        ema_update(state.teacher, state.student, 0.0)
        stats = feature_stats(state, random_dataset(12, 16), bins=10)
        assert stats.diff_counts[0] == 12 and stats.mean_abs_diff == 0.0
        assert stats.value_counts.sum() == 12 * 8

    def test_fixed_edges(self, tmp_path):
        a = feature_stats(_trained_state(2), random_dataset(5, 16), bins=7)
        b = feature_stats(_trained_state(4), random_dataset(5, 16, seed=3), bins=7)
        np.testing.assert_array_equal(a.diff_edges, b.diff_edges)
        np.testing.assert_array_equal(a.value_edges, np.linspace(-4, 4, 8))
        write_feature_stats(a, tmp_path / "h.csv")
        rows = list(csv.reader(open(tmp_path / "h.csv")))
        assert rows[0] == ["histogram", "bin_lo", "bin_hi", "count"] and len(rows) == 1 + 14


class TestEmbedding:
    def test_two_points(self):
        coords = embed_2d(FeatureMatrix(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]), None, "x"))
        np.testing.assert_allclose(np.sort(coords[:, 0]), [-2.5, 2.5], atol=1e-12)
        np.testing.assert_allclose(coords[:, 1], 0.0, atol=1e-12)

    def test_row_count_and_file(self, tmp_path):
        rows = np.random.default_rng(0).normal(size=(15, 6))
        coords = embed_2d(FeatureMatrix(rows, None, "x"))
        assert coords.shape == (15, 2)
        write_embedding(coords, np.arange(15) % 3, tmp_path / "e.csv")
        assert len(open(tmp_path / "e.csv").read().splitlines()) == 16

    def test_constant_features_warn(self):
        with pytest.warns(RuntimeWarning):
            coords = embed_2d(FeatureMatrix(np.ones((4, 3)), None, "x"))
        np.testing.assert_array_equal(coords, 0.0)

    def test_silhouette_orders_clusterings(self):
        rng = np.random.default_rng(0)
        labels = np.arange(60) % 3
        tight = np.eye(3)[labels] * 5 + rng.normal(0, 0.1, (60, 3))
        loose = rng.normal(0, 1, (60, 3))
        assert silhouette(tight, labels) > silhouette(loose, labels)


class TestCostAccount:
    def test_n196_closed_form(self):
        bb = BackboneConfig(image_size=224, patch_size=16, depth=2, embed_dim=32, heads=2)
        r = cost_account(bb, MaskRatios(0.3, 0.2, 0.5))
        tokens = {c.role: c.tokens for c in r.roles}
        assert tokens == {"student": 99, "teacher": 99, "dense_student": 197, "dense_teacher": 197}
        assert r.linear_ratio == pytest.approx(394 / 198, rel=1e-12)
        assert r.linear_ratio == pytest.approx(1.99, abs=0.01)

    def test_n1024_closed_form(self):
        bb = BackboneConfig(image_size=512, patch_size=16, depth=2, embed_dim=32, heads=2)
        r = cost_account(bb, MaskRatios(0.3, 0.2, 0.5))
        assert r.attention_ratio == pytest.approx(2 * 1025**2 / (513**2 + 513**2), rel=1e-12)
        assert r.attention_ratio == pytest.approx(3.99, abs=0.02)
        assert r.linear_ratio == pytest.approx(2050 / 1026, rel=1e-12)

    @pytest.mark.parametrize("ratios", TABLE8_RATIOS)
    @pytest.mark.parametrize("size,patch", [(64, 16), (64, 8), (224, 16), (512, 16)])
    def test_size_law(self, size, patch, ratios):
        bb = BackboneConfig(image_size=size, patch_size=patch, depth=1, embed_dim=8, heads=2)
        r = cost_account(bb, MaskRatios(*ratios))
        n_s, n_l, n_t = part_sizes(bb.num_patches, MaskRatios(*ratios))
        tokens = {c.role: c.tokens for c in r.roles}
        assert tokens["student"] == n_s + n_l + 1 and tokens["teacher"] == n_t + 1
        assert tokens["student"] + tokens["teacher"] == bb.num_patches + 2

    def test_flop_formula(self):
        bb = BackboneConfig(image_size=64, patch_size=16, depth=3, embed_dim=16, heads=2, mlp_ratio=4.0)
        r = cost_account(bb, MaskRatios())
        dense = [c for c in r.roles if c.role == "dense_teacher"][0]
        T, D, L = 17, 16, 3
        # per layer: qkv 3TD^2, proj TD^2, MLP 2*4*TD^2 MACs; scores and AV 2*T^2*D MACs
        assert dense.linear_flops == 2 * L * (3 + 1 + 8) * T * D * D
        assert dense.attention_flops == 2 * L * 2 * T * T * D

    def test_empirical_timing(self, tmp_path):
        cfg = tiny_config()
        images = generate_synthetic_dataset(4, 16, 4, 0).images
        r = cost_account(cfg.backbone, cfg.ratios, "empirical", cfg, images, repeats=2)
        assert r.step_time_ratio is not None and r.step_time_ratio > 0
        write_cost_report(r, tmp_path / "cost.csv")
        text = (tmp_path / "cost.csv").read_text()
        assert "step_time_ratio_dense_over_sparse" in text and text.startswith("role,tokens")
