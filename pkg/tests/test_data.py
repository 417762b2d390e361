"""Sample sets, synthetic models, and the binary file formats."""

import struct

import numpy as np
import pytest

from nndiv.data import (DataError, SampleSet, SyntheticModel, load_idx, load_nnds,
                        sample, sample_labels, save_nnds, subset)
from nndiv.nn import ConfigError


def gaussian_1d(mean=0.0, std=1.0, seed=0):
    return SyntheticModel(kind="gaussian_mixture",
                          params={"means": [[mean]], "stds": [[std]]}, seed=seed)


def shapes(seed=0, **overrides):
    return SyntheticModel(kind="shapes_image", params=overrides, seed=seed)


class TestSampleSet:
    def test_empty_rejected(self):
        with pytest.raises(DataError):
            SampleSet(np.zeros((0, 3), dtype=np.float32))

    def test_fingerprint_is_order_sensitive(self):
        a = SampleSet(np.array([[1.0], [2.0]], dtype=np.float32))
        b = SampleSet(np.array([[2.0], [1.0]], dtype=np.float32))
        assert a.fingerprint != b.fingerprint

    def test_immutable(self):
        s = SampleSet(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            s.elements[0, 0] = 5.0


class TestSampling:
    def test_empirical_single_element(self):
        backing = SampleSet(np.full((1, 2), 3.5, dtype=np.float32))
        model = SyntheticModel(kind="empirical", backing=backing, seed=0)
        out = sample(model, 7, seed=1)
        assert len(out) == 7
        np.testing.assert_array_equal(out.elements, np.full((7, 2), 3.5, dtype=np.float32))

    def test_gaussian_mixture_mean(self):
        model = SyntheticModel(kind="gaussian_mixture",
                               params={"means": [[0.0, 0.0]], "stds": [[1.0, 1.0]]}, seed=0)
        out = sample(model, 10_000, seed=3)
        assert np.all(np.abs(out.elements.mean(axis=0)) < 0.05)
        assert np.all(np.abs(out.elements.std(axis=0) - 1.0) < 0.05)

    def test_mixture_weights_respected(self):
        model = SyntheticModel(kind="gaussian_mixture",
                               params={"means": [[-10.0], [10.0]],
                                       "stds": [[0.1], [0.1]],
                                       "weights": [0.25, 0.75]}, seed=0)
        out = sample(model, 8_000, seed=4)
        frac_high = float(np.mean(out.elements > 0))
        assert abs(frac_high - 0.75) < 0.02

    def test_determinism_and_prefix_consistency(self):
        model = shapes(seed=2)
        a = sample(model, 64, seed=9)
        b = sample(model, 64, seed=9)
        assert a.fingerprint == b.fingerprint
        longer = sample(model, 128, seed=9)
        np.testing.assert_array_equal(longer.elements[:64], a.elements)

    def test_seed_changes_draws(self):
        model = shapes(seed=2)
        assert sample(model, 16, seed=1).fingerprint != sample(model, 16, seed=2).fingerprint

    def test_shapes_pixel_range_and_diversity(self):
        out = sample(shapes(), 256, seed=5)
        assert out.element_shape == (8, 8, 1)
        assert out.elements.min() >= -1.0 - 1e-6
        assert out.elements.max() <= 1.0 + 1e-6
        # continuous parameters: no two renders identical
        flat = out.elements.reshape(256, -1)
        assert len(np.unique(flat, axis=0)) == 256

    def test_shapes_labels_match_kinds(self):
        model = shapes(ellipse_prob=0.5)
        out, labels = sample_labels(model, 2_000, seed=6)
        assert set(np.unique(labels)) <= {0, 1}
        assert abs(labels.mean() - 0.5) < 0.05

    def test_perturbed_zero_sigma_is_base(self):
        base = shapes(seed=3)
        wrapped = SyntheticModel(kind="perturbed", params={"sigma": 0.0}, base=base, seed=1)
        np.testing.assert_array_equal(sample(wrapped, 32, seed=7).elements,
                                      sample(base, 32, seed=7).elements)

    def test_perturbed_sigma_moves_distribution(self):
        base = shapes(seed=3)
        wrapped = SyntheticModel(kind="perturbed", params={"sigma": 0.5}, base=base, seed=1)
        a = sample(base, 128, seed=8).elements
        b = sample(wrapped, 128, seed=8).elements
        assert not np.array_equal(a, b)

    def test_invalid_params(self):
        with pytest.raises(ConfigError):
            SyntheticModel(kind="gaussian_mixture",
                           params={"means": [[0.0]], "stds": [[1.0, 2.0]]})
        with pytest.raises(ConfigError):
            SyntheticModel(kind="shapes_image", params={"bogus": 1})
        with pytest.raises(ConfigError):
            sample(shapes(), 0, seed=0)


class TestSubset:
    def test_full_subset_is_permutation(self):
        base = sample(gaussian_1d(), 32, seed=0)
        out = subset(base, 32, seed=5)
        assert sorted(map(tuple, out.elements.tolist())) == \
            sorted(map(tuple, base.elements.tolist()))

    def test_single_element_comes_from_set(self):
        base = sample(gaussian_1d(), 16, seed=1)
        out = subset(base, 1, seed=2)
        assert any(np.array_equal(out.elements[0], e) for e in base.elements)

    def test_selection_frequencies_uniform(self):
        base = SampleSet(np.arange(10, dtype=np.float32).reshape(10, 1))
        counts = np.zeros(10)
        trials = 10_000
        for s in range(trials):
            counts[int(subset(base, 1, seed=s).elements[0, 0])] += 1
        assert np.all(np.abs(counts / trials - 0.1) < 0.01)

    def test_range_check(self):
        base = sample(gaussian_1d(), 8, seed=0)
        with pytest.raises(ConfigError):
            subset(base, 0, seed=0)
        with pytest.raises(ConfigError):
            subset(base, 9, seed=0)


class TestNndsFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        original = sample(shapes(), 10, seed=4)
        path = tmp_path / "set.nnds"
        save_nnds(path, original)
        loaded = load_nnds(path)
        assert loaded.fingerprint == original.fingerprint
        np.testing.assert_array_equal(loaded.elements, original.elements)

    def test_truncation_names_byte_counts(self, tmp_path):
        path = tmp_path / "short.nnds"
        save_nnds(path, SampleSet(np.ones((4, 3), dtype=np.float32)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(DataError, match=r"expected 48"):
            load_nnds(path)

    def test_bad_magic_offset(self, tmp_path):
        path = tmp_path / "bad.nnds"
        path.write_bytes(b"JUNK" + b"\x00" * 20)
        with pytest.raises(DataError, match="offset 0"):
            load_nnds(path)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "layout.nnds"
        save_nnds(path, SampleSet(np.zeros((2, 3), dtype=np.float32)))
        blob = path.read_bytes()
        assert blob[:4] == b"NNDS"
        version, rank, d0, d1 = struct.unpack_from("<IIII", blob, 4)
        assert (version, rank, d0, d1) == (1, 2, 2, 3)
        assert len(blob) == 20 + 2 * 3 * 4


def write_idx_images(path, pixels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, *pixels.shape))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.tobytes())


class TestIdxFormat:
    def test_scaling_endpoints(self, tmp_path):
        pixels = np.zeros((1, 2, 2), dtype=np.uint8)
        pixels[0, 0, 0] = 255
        write_idx_images(tmp_path / "imgs", pixels)
        images, labels = load_idx(tmp_path / "imgs")
        assert labels is None
        assert images.element_shape == (2, 2, 1)
        assert images.elements[0, 0, 0, 0] == pytest.approx(1.0)
        assert images.elements[0, 1, 1, 0] == pytest.approx(-1.0)

    def test_labels_and_count_mismatch(self, tmp_path):
        pixels = np.zeros((3, 2, 2), dtype=np.uint8)
        write_idx_images(tmp_path / "imgs", pixels)
        write_idx_labels(tmp_path / "labels", np.array([1, 0, 1], dtype=np.uint8))
        images, labels = load_idx(tmp_path / "imgs", tmp_path / "labels")
        np.testing.assert_array_equal(labels, [1, 0, 1])

        write_idx_labels(tmp_path / "labels2", np.array([1, 0], dtype=np.uint8))
        with pytest.raises(DataError, match="count"):
            load_idx(tmp_path / "imgs", tmp_path / "labels2")

    def test_magic_mismatch(self, tmp_path):
        (tmp_path / "junk").write_bytes(struct.pack(">IIII", 0x999, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(DataError, match="magic"):
            load_idx(tmp_path / "junk")
