import numpy as np
import pytest

from streetstudy.baselines import CountFeatures, fit_constant, fit_count_regressor, predict
from streetstudy.dataset import relative_area
from streetstudy.errors import ValidationError
from streetstudy.geo import match_images
from streetstudy.metrics import RegressionPairSet, rmse
from streetstudy.synth import (SynthConfig, class_probabilities, collision_rate,
                               generate, link_coefficients)

SMALL = dict(n_images=80, n_crossings=100, d_model=4, map_height=1, map_width=2,
             backbone_channels=4, boxes_per_image_mean=10.0)


def labels_array(ds):
    return np.array([ds.labels[im.image_id] for im in ds.images], dtype=float)


class TestDeterminism:
    def test_same_seed_identical(self):
        a = generate(SynthConfig(**SMALL, seed=3))
        b = generate(SynthConfig(**SMALL, seed=3))
        assert a.images == b.images
        assert a.crossings == b.crossings
        assert a.annotations == b.annotations
        assert a.labels == b.labels
        for ea, eb in zip(a.embeddings, b.embeddings):
            assert np.array_equal(ea.queries, eb.queries)
            assert np.array_equal(ea.noise_mask, eb.noise_mask)
            assert np.array_equal(ea.backbone_map, eb.backbone_map)
            assert np.array_equal(ea.coords, eb.coords)

    def test_different_seed_differs(self):
        a = generate(SynthConfig(**SMALL, seed=3))
        b = generate(SynthConfig(**SMALL, seed=4))
        assert a.labels != b.labels


class TestStructure:
    def test_boxes_inside_images_and_labels_non_negative(self):
        ds = generate(SynthConfig(**SMALL, seed=0))
        by_id = {im.image_id: im for im in ds.images}
        for ann in ds.annotations:
            rel = relative_area(ann, by_id[ann.image_id])  # raises if outside
            assert 0 < rel <= 1
        assert all(v >= 0 for v in ds.labels.values())

    def test_every_image_sits_on_a_crossing(self):
        ds = generate(SynthConfig(**SMALL, seed=1))
        out = match_images(ds.images, ds.crossings)
        assert out.rejected == []
        assert out.coverage == 1.0
        assert all(m.distance == 0.0 for m in out.matches)

    def test_matched_collisions_equal_labels(self):
        ds = generate(SynthConfig(**SMALL, seed=2))
        out = match_images(ds.images, ds.crossings)
        collisions = {c.crossing_id: c.collisions for c in ds.crossings}
        for m in out.matches:
            assert collisions[m.crossing_id] == ds.labels[m.image_id]

    def test_counts_align_with_annotations(self):
        ds = generate(SynthConfig(**SMALL, seed=5))
        per_image = {im.image_id: np.zeros(ds.config.n_classes) for im in ds.images}
        for ann in ds.annotations:
            per_image[ann.image_id][ann.category_id] += 1
        for i, im in enumerate(ds.images):
            assert np.array_equal(per_image[im.image_id], ds.counts[i])

    def test_masked_rows_present_and_coords_normalized(self):
        ds = generate(SynthConfig(**SMALL, seed=6))
        assert any(e.noise_mask.any() for e in ds.embeddings)
        for e in ds.embeddings:
            assert np.all(e.coords >= 0) and np.all(e.coords <= 1)

    def test_empty_generation(self):
        ds = generate(SynthConfig(**{**SMALL, "n_images": 0, "n_crossings": 0}))
        assert ds.images == [] and ds.annotations == [] and ds.labels == {}

    def test_bad_configs_rejected(self):
        with pytest.raises(ValidationError):
            SynthConfig(n_images=10, n_crossings=5)
        with pytest.raises(ValidationError):
            SynthConfig(zipf_s=0.0)
        with pytest.raises(ValidationError):
            SynthConfig(collision_dispersion=-1.0)


class TestLinkFunction:
    def test_noiseless_limit_is_deterministic_in_counts(self):
        # single class, no query noise, degenerate dispersion: the label is
        # a pure function of the count vector
        cfg = SynthConfig(n_images=60, n_crossings=80, n_classes=1, d_model=2,
                          map_height=1, map_width=2, backbone_channels=2,
                          noise_sigma=0.0, collision_dispersion=0.0,
                          bump_amplitude=0.0, boxes_per_image_mean=8.0, seed=9)
        ds = generate(cfg)
        seen = {}
        for i, im in enumerate(ds.images):
            key = tuple(ds.counts[i])
            label = ds.labels[im.image_id]
            assert label == int(np.floor(collision_rate(cfg, ds.counts[i], im.location) + 0.5))
            if key in seen:
                assert seen[key] == label
            seen[key] = label

    def test_empirical_mean_tracks_link_mean(self):
        cfg = SynthConfig(n_images=10_000, n_crossings=10_000, d_model=2,
                          map_height=1, map_width=2, backbone_channels=2,
                          boxes_per_image_mean=20.0, seed=7)
        ds = generate(cfg)
        y = labels_array(ds)
        lams = np.array([collision_rate(cfg, ds.counts[i], ds.images[i].location)
                         for i in range(cfg.n_images)])
        assert abs(y.mean() - lams.mean()) <= 0.10 * lams.mean()

    def test_beta_centered_against_class_distribution(self):
        cfg = SynthConfig()
        beta = link_coefficients(cfg)
        p = class_probabilities(cfg)
        assert abs(beta @ p) < 1e-12


class TestZipfOrdering:
    def test_class_frequency_ranks(self):
        cfg = SynthConfig(n_images=10_000, n_crossings=10_000, d_model=2,
                          map_height=1, map_width=2, backbone_channels=2,
                          boxes_per_image_mean=12.0, seed=7)
        ds = generate(cfg)
        totals = ds.counts.sum(axis=0)
        inversions = sum(1 for c in range(cfg.n_classes - 1) if totals[c] < totals[c + 1])
        assert inversions <= 2


class TestCalibrationContract:
    def test_oracle_ridge_beats_constant_mean_by_contracted_margin(self):
        # the generator's signal-to-noise contract at the default config:
        # ridge on true counts reaches <= 0.7x constant-mean validation RMSE
        ds = generate(SynthConfig())
        y = labels_array(ds)
        ids = [im.image_id for im in ds.images]
        model = fit_count_regressor(CountFeatures(ids[:2000], ds.counts[:2000]),
                                    y[:2000], l2=1.0)
        preds = predict(model, ds.counts[2000:])
        const = fit_constant(y[:2000], "mean")
        va = RegressionPairSet(ids[2000:], y[2000:], preds)
        va_const = RegressionPairSet(ids[2000:], y[2000:], const.predict(500))
        assert rmse(va) <= 0.7 * rmse(va_const)

    def test_default_label_distribution_shape(self):
        ds = generate(SynthConfig())
        y = labels_array(ds)
        assert 4.0 <= y.mean() <= 10.0
        assert y.std() ** 2 > 2 * y.mean()  # overdispersed vs Poisson
        assert y.max() >= 5 * y.mean()      # long tail
