#!/usr/bin/env python3
"""Test volume preprocessing: normalization, resampling, one-hot"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from simreg.models.volumes import LabelMap, Volume
from simreg.services.preprocessing import (
    VolumePreprocessor, normalize, one_hot, resample_labels_to_spacing, resample_to_spacing,
)


def test_normalize_four_values():
    v = Volume(np.array([0.0, 1.0, 2.0, 3.0]).reshape(4, 1, 1))
    out = normalize(v)
    np.testing.assert_allclose(out.data.ravel(), [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], atol=1e-12)
    assert out.dims == v.dims and out.spacing == v.spacing


def test_normalize_clips_outlier():
    data = np.where(np.indices((10, 10, 10)).sum(axis=0) % 2 == 0, 0.4, 0.6)
    data[0, 0, 0] = 10.0
    mean, sigma = data.mean(), data.std()
    ceiling = mean + 6.0 * sigma
    assert ceiling < 10.0

    out = normalize(Volume(data))
    assert abs(out.data[0, 0, 0] - 1.0) < 1e-12
    expected = (0.6 - 0.4) / (ceiling - 0.4)
    assert abs(out.data[0, 0, 1] - expected) < 1e-12
    assert abs(out.data[1, 0, 0] - expected) < 1e-12
    assert out.data.min() == 0.0


def test_normalize_constant_volume_rejected():
    try:
        normalize(Volume(np.full((3, 3, 3), 7.0)))
    except ValueError as e:
        assert "degenerate intensity range" in str(e)
    else:
        raise AssertionError("constant volume accepted")


def test_resample_dims():
    v = Volume(np.random.default_rng(0).random((4, 4, 4)), (2.0, 2.0, 2.0))
    out = resample_to_spacing(v, (1.0, 1.0, 1.0))
    assert out.dims == (8, 8, 8)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_identity():
    v = Volume(np.random.default_rng(1).random((5, 6, 7)), (1.5, 1.5, 1.5))
    out = resample_to_spacing(v, (1.5, 1.5, 1.5))
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


def test_resample_linear_ramp():
    ramp = np.broadcast_to(np.arange(4, dtype=np.float64).reshape(4, 1, 1), (4, 3, 3))
    out = resample_to_spacing(Volume(ramp, (2.0, 1.0, 1.0)), (1.0, 1.0, 1.0))
    assert out.dims == (8, 3, 3)
    # output voxel j samples input coordinate j / 2, clamped at the last voxel
    expected = np.minimum(np.arange(8) / 2.0, 3.0)
    np.testing.assert_allclose(out.data[:, 1, 1], expected, atol=1e-12)


def test_resample_empty_grid_rejected():
    try:
        resample_to_spacing(Volume(np.ones((2, 2, 2)), (1.0, 1.0, 1.0)), (10.0, 1.0, 1.0))
    except ValueError as e:
        assert "empty grid" in str(e)
    else:
        raise AssertionError("empty grid accepted")


def test_resample_labels_nearest():
    labels = LabelMap(np.arange(4).reshape(4, 1, 1), 4)
    out = resample_labels_to_spacing(labels, (2.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    assert out.dims == (8, 1, 1)
    assert out.alphabet() <= labels.alphabet()
    assert list(out.labels.ravel()) == [0, 1, 1, 2, 2, 3, 3, 3]


def test_preprocessor_pair():
    rng = np.random.default_rng(2)
    image = Volume(rng.random((4, 4, 4)) * 50.0, (2.0, 2.0, 2.0))
    labels = LabelMap(rng.integers(0, 3, (4, 4, 4)), 3)
    v, s = VolumePreprocessor().process_pair(image, labels)
    assert v.dims == s.dims == (8, 8, 8)
    assert v.data.min() == 0.0 and v.data.max() == 1.0


def test_one_hot_single_voxel():
    p = one_hot(LabelMap(np.full((1, 1, 1), 2), 3))
    assert list(p.values[:, 0, 0, 0]) == [0.0, 0.0, 1.0]


def test_one_hot_background():
    p = one_hot(LabelMap(np.zeros((2, 3, 4), dtype=np.int64), 3))
    assert np.all(p.values[0] == 1.0)
    assert np.all(p.values[1:] == 0.0)
    np.testing.assert_array_equal(p.values.sum(axis=0), 1.0)


def test_one_hot_argmax_round_trip():
    rng = np.random.default_rng(11)
    for classes in (2, 3, 7):
        labels = LabelMap(rng.integers(0, classes, (5, 6, 4)), classes)
        back = one_hot(labels).argmax()
        np.testing.assert_array_equal(back.labels, labels.labels)
        assert back.num_classes == classes


def test_normalize_idempotent():
    rng = np.random.default_rng(12)
    for data in (rng.random((6, 6, 6)), rng.normal(3.0, 2.0, (8, 7, 6))):
        once = normalize(Volume(data, (1.0, 2.0, 3.0)))
        # second pass must not clip
        mean, sigma = once.data.mean(), once.data.std()
        assert once.data.max() <= mean + 6.0 * sigma and once.data.min() >= mean - 6.0 * sigma
        twice = normalize(once)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
        assert twice.spacing == once.spacing


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
    print("\n✅ All preprocessing tests passed!")
