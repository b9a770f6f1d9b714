"""Synthetic data generation, noise injection, and the CSV schema."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import chisquare

from noodle.datagen import (
    LabeledSet,
    NoiseSpec,
    inject_symmetric_noise,
    load_features_csv,
    load_ood_csv,
    make_gaussian_mixture,
    make_ood_set,
    save_features_csv,
    save_ood_csv,
)


def _mixture(seed, **kwargs):
    defaults = dict(num_classes=4, per_class=50, dim=8, separation=6.0, spread=1.0)
    defaults.update(kwargs)
    return make_gaussian_mixture(rng=np.random.default_rng(seed), **defaults)


class TestGaussianMixture:
    def test_zero_spread_limit_hits_means_exactly(self):
        # spread 1e-300 scales the noise below representability next to O(1)
        # means, so the additions round to the means themselves.
        data = _mixture(0, num_classes=2, per_class=1, spread=1e-300)
        means = data.meta["means"]
        np.testing.assert_array_equal(data.features, means[data.clean_labels])

    def test_separated_classes_are_nearest_neighbor_learnable(self):
        data = _mixture(1, per_class=500, dim=32, separation=8.0, spread=1.0)
        # Leave-one-out 1-NN on clean labels.
        gram = data.features @ data.features.T
        sq = np.diag(gram)
        dist2 = sq[:, None] + sq[None, :] - 2.0 * gram
        np.fill_diagonal(dist2, np.inf)
        predicted = data.clean_labels[np.argmin(dist2, axis=1)]
        assert (predicted == data.clean_labels).mean() >= 0.99

    def test_same_seed_is_bit_identical(self):
        a, b = _mixture(7), _mixture(7)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.clean_labels, b.clean_labels)

    def test_mean_separation_is_enforced(self):
        data = _mixture(3, num_classes=6, separation=9.0, dim=16)
        means = data.meta["means"]
        diffs = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        diffs[np.diag_indices(6)] = np.inf
        assert diffs.min() >= 9.0

    def test_noisy_labels_start_clean(self):
        data = _mixture(4)
        np.testing.assert_array_equal(data.clean_labels, data.noisy_labels)

    def test_parameter_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            make_gaussian_mixture(1, 5, 4, 1.0, 1.0, rng)
        with pytest.raises(ValueError):
            make_gaussian_mixture(2, 0, 4, 1.0, 1.0, rng)
        with pytest.raises(ValueError):
            make_gaussian_mixture(2, 5, 4, -1.0, 1.0, rng)


class TestOodSet:
    def test_far_cluster_keeps_margin_from_every_class_mean(self):
        data = _mixture(5, per_class=200)
        ood = make_ood_set(data, 500, "far_cluster", np.random.default_rng(6))
        means = np.stack(
            [data.features[data.clean_labels == c].mean(axis=0) for c in range(4)]
        )
        gaps = np.linalg.norm(ood[:, None, :] - means[None, :, :], axis=-1)
        assert gaps.min() >= 3.0  # >= 3 empirical spread units, spread == 1

    def test_uniform_shell_has_constant_radius(self):
        data = _mixture(8, per_class=200)
        ood = make_ood_set(data, 1000, "uniform_shell", np.random.default_rng(9))
        norms = np.linalg.norm(ood, axis=1)
        radius = np.median(norms)
        assert np.abs(norms - radius).max() <= 0.01 * radius
        means = np.stack(
            [data.features[data.clean_labels == c].mean(axis=0) for c in range(4)]
        )
        gaps = np.linalg.norm(ood[:, None, :] - means[None, :, :], axis=-1)
        assert gaps.min() >= 3.0

    def test_single_sample_and_mode_validation(self):
        data = _mixture(10)
        assert make_ood_set(data, 1, "far_cluster", np.random.default_rng(0)).shape == (1, 8)
        with pytest.raises(ValueError):
            make_ood_set(data, 1, "nearby", np.random.default_rng(0))
        with pytest.raises(ValueError):
            make_ood_set(data, 0, "far_cluster", np.random.default_rng(0))


class TestNoiseInjection:
    def test_zero_rate_is_identity(self):
        labels = np.array([0, 1, 2, 3, 2, 1])
        out = inject_symmetric_noise(labels, NoiseSpec("symmetric", 0.0), 4, np.random.default_rng(0))
        np.testing.assert_array_equal(out, labels)

    def test_full_rate_two_classes_flips_everything(self):
        labels = np.array([0, 1, 0, 1, 1, 0])
        out = inject_symmetric_noise(labels, NoiseSpec("symmetric", 1.0), 2, np.random.default_rng(1))
        np.testing.assert_array_equal(out, 1 - labels)

    def test_original_array_is_not_modified(self):
        labels = np.zeros(100, dtype=np.int64)
        snapshot = labels.copy()
        inject_symmetric_noise(labels, NoiseSpec("symmetric", 0.9), 5, np.random.default_rng(2))
        np.testing.assert_array_equal(labels, snapshot)

    def test_flip_statistics_at_forty_percent(self):
        labels = np.random.default_rng(3).integers(0, 10, size=50_000)
        noisy = inject_symmetric_noise(
            labels, NoiseSpec("symmetric", 0.4), 10, np.random.default_rng(4)
        )
        flipped = noisy != labels
        assert 0.39 <= flipped.mean() <= 0.41
        # Destinations, re-indexed to "which of the 9 alternatives", should be
        # uniform; chi-square at the 0.01 level.
        offset = (noisy[flipped] - labels[flipped]) % 10  # in 1..9
        counts = np.bincount(offset, minlength=10)[1:]
        assert chisquare(counts).pvalue >= 0.01

    def test_labels_stay_in_range_and_never_self_flip(self):
        # Seeded property loop over rates and class counts.
        rng = np.random.default_rng(5)
        for rate in (0.1, 0.5, 0.9):
            for k in (2, 3, 7):
                labels = rng.integers(0, k, size=2000)
                noisy = inject_symmetric_noise(
                    labels, NoiseSpec("symmetric", rate), k, np.random.default_rng(77)
                )
                assert noisy.min() >= 0 and noisy.max() < k
                changed = noisy != labels
                frac = changed.mean()
                assert abs(frac - rate) <= 3.0 * np.sqrt(rate * (1 - rate) / 2000)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            inject_symmetric_noise(
                np.array([0]), NoiseSpec("asymmetric", 0.1), 2, np.random.default_rng(0)
            )
        with pytest.raises(ValueError):
            inject_symmetric_noise(
                np.array([0]), NoiseSpec("symmetric", 1.5), 2, np.random.default_rng(0)
            )


class TestCsvRoundTrip:
    def test_round_trip_is_exact(self, tmp_path):
        data = _mixture(20, per_class=25, dim=16)
        path = tmp_path / "set.csv"
        save_features_csv(data, path)
        back = load_features_csv(path)
        np.testing.assert_array_equal(back.features, data.features)
        np.testing.assert_array_equal(back.clean_labels, data.clean_labels)
        np.testing.assert_array_equal(back.noisy_labels, data.noisy_labels)
        assert back.num_classes == data.num_classes

    def test_hand_written_file(self, tmp_path):
        path = tmp_path / "two.csv"
        path.write_text(
            "label,noisy_label,f0,f1\n0,1,1.5,-2.25\n1,1,0.0,3.0\n", encoding="utf-8"
        )
        data = load_features_csv(path)
        np.testing.assert_array_equal(data.features, [[1.5, -2.25], [0.0, 3.0]])
        np.testing.assert_array_equal(data.clean_labels, [0, 1])
        np.testing.assert_array_equal(data.noisy_labels, [1, 1])

    def test_empty_data_section_is_an_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("label,noisy_label,f0\n", encoding="utf-8")
        with pytest.raises(ValueError, match="no data rows"):
            load_features_csv(path)

    def test_malformed_rows_name_the_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("label,noisy_label,f0\n0,0,1.0\n0,0\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 3"):
            load_features_csv(path)
        path.write_text("label,noisy_label,f0\n0,0,abc\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2"):
            load_features_csv(path)
        path.write_text("label,noisy_label,f0\n0,0,inf\n", encoding="utf-8")
        with pytest.raises(ValueError, match="non-finite"):
            load_features_csv(path)

    def test_bad_header_is_an_error(self, tmp_path):
        path = tmp_path / "hdr.csv"
        path.write_text("noisy_label,label,f0\n0,0,1.0\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 1"):
            load_features_csv(path)

    def test_class_count_validation(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("label,noisy_label,f0\n3,0,1.0\n", encoding="utf-8")
        assert load_features_csv(path).num_classes == 4  # inferred
        with pytest.raises(ValueError):
            load_features_csv(path, num_classes=2)
        path.write_text("label,noisy_label,f0\n-1,0,1.0\n", encoding="utf-8")
        with pytest.raises(ValueError):
            load_features_csv(path)

    def test_ood_round_trip_uses_sentinel_labels(self, tmp_path):
        features = np.random.default_rng(21).standard_normal((10, 4))
        path = tmp_path / "ood.csv"
        save_ood_csv(features, path)
        first_row = path.read_text(encoding="utf-8").splitlines()[1]
        assert first_row.startswith("-1,-1,")
        np.testing.assert_array_equal(load_ood_csv(path), features)


class TestLabeledSetValidation:
    def test_rejects_inconsistent_fields(self):
        good = dict(
            features=np.ones((3, 2)),
            clean_labels=np.array([0, 1, 0]),
            noisy_labels=np.array([0, 1, 1]),
            num_classes=2,
        )
        LabeledSet(**good)
        with pytest.raises(ValueError):
            LabeledSet(**{**good, "clean_labels": np.array([0, 1])})
        with pytest.raises(ValueError):
            LabeledSet(**{**good, "noisy_labels": np.array([0, 1, 5])})
        with pytest.raises(ValueError):
            LabeledSet(**{**good, "num_classes": 1})
        with pytest.raises(ValueError):
            LabeledSet(**{**good, "features": np.array([[np.nan, 1], [0, 1], [0, 1]])})
