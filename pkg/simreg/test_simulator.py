#!/usr/bin/env python3
"""Test the registration simulator"""
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from simreg.models.configs import SampledTransform, SimulatorConfig
from simreg.models.volumes import LabelMap, Volume
from simreg.services.resampler import warp_nearest
from simreg.services.simulator import (
    RegistrationSimulator, build_affine_field, build_elastic_field, gaussian_kernel,
    generate_pair, make_rng, sample_transform, smooth_component,
)


def _transform(angles=(0.0, 0.0, 0.0), scales=(1.0, 1.0, 1.0), translation=(0.0, 0.0, 0.0),
               gamma=0.0, sigma=10.0) -> SampledTransform:
    return SampledTransform(angles=angles, scales=scales, translation=translation,
                            elastic_gamma=gamma, smoothing_sigma=sigma)


def _ramp(dims) -> Volume:
    return Volume(np.broadcast_to(np.arange(dims[0], dtype=np.float64).reshape(-1, 1, 1), dims))


def test_config_aliases():
    cfg = SimulatorConfig.model_validate({"Gamma": 500, "Sigma_min": 8, "Sigma_max": 10, "L": [0.1, 0.1, 0.1]})
    assert cfg.elastic_gamma_max == 500.0
    assert cfg.sigma_min == 8.0 and cfg.sigma_max == 10.0
    assert cfg.translation_max == (0.1, 0.1, 0.1)


def test_config_rejects_bad_bounds():
    for bad in ({"C_min": [1.5, 1, 1], "C_max": [1, 1, 1]}, {"Sigma_min": 0, "Sigma_max": 1},
                {"Sigma_min": 5, "Sigma_max": 4}, {"Gamma": -1}):
        try:
            SimulatorConfig.model_validate(bad)
        except ValueError:
            continue
        raise AssertionError(f"accepted {bad}")


def test_zero_width_sample():
    cfg = SimulatorConfig.identity(10.0)
    t = sample_transform(cfg, make_rng(3))
    assert t.angles == (0.0, 0.0, 0.0)
    assert t.scales == (1.0, 1.0, 1.0)
    assert t.translation == (0.0, 0.0, 0.0)
    assert t.elastic_gamma == 0.0
    assert t.smoothing_sigma == 10.0


def test_same_seed_same_transform():
    cfg = SimulatorConfig()
    assert sample_transform(cfg, make_rng(11)) == sample_transform(cfg, make_rng(11))


def test_sample_means():
    cfg = SimulatorConfig()
    rng = make_rng(0)
    n = 10_000
    draws = [sample_transform(cfg, rng) for _ in range(n)]

    def check(values, lo, hi):
        values = np.asarray(values)
        mean = (lo + hi) / 2.0
        standard_error = (hi - lo) / math.sqrt(12.0) / math.sqrt(n)
        assert abs(values.mean() - mean) < 3.0 * standard_error, (values.mean(), mean)
        assert values.min() >= lo and values.max() <= hi

    for a in range(3):
        check([d.angles[a] for d in draws], 0.0, cfg.rotation_max[a])
        check([d.scales[a] for d in draws], cfg.scale_min[a], cfg.scale_max[a])
        check([d.translation[a] for d in draws], -cfg.translation_max[a], cfg.translation_max[a])
    check([d.elastic_gamma for d in draws], 0.0, cfg.elastic_gamma_max)
    check([d.smoothing_sigma for d in draws], cfg.sigma_min, cfg.sigma_max)


def test_identity_affine_field():
    field = build_affine_field(_transform(), (4, 5, 6))
    assert np.all(field.vectors == 0.0)


def test_translation_field():
    field = build_affine_field(_transform(translation=(0.2, 0.0, 0.0)), (5, 5, 5))
    np.testing.assert_allclose(field.vectors[0], 1.0, atol=1e-12)
    np.testing.assert_allclose(field.vectors[1:], 0.0, atol=1e-12)


def test_scale_field():
    field = build_affine_field(_transform(scales=(2.0, 1.0, 1.0)), (5, 5, 5))
    np.testing.assert_allclose(field.vectors[:, 2, 2, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(field.vectors[:, 4, 2, 2], [2.0, 0.0, 0.0], atol=1e-12)


def test_rotation_about_center():
    field = build_affine_field(_transform(angles=(0.3, 0.2, 0.1)), (5, 5, 5))
    np.testing.assert_allclose(field.vectors[:, 2, 2, 2], 0.0, atol=1e-12)


def test_elastic_zero_gamma():
    field = build_elastic_field(_transform(gamma=0.0), (6, 6, 6), make_rng(0))
    assert np.all(field.vectors == 0.0)


def test_elastic_smoothing_reduces_spread():
    field = build_elastic_field(_transform(gamma=10.0, sigma=2.0), (16, 16, 16), make_rng(0))
    assert 0.0 < field.vectors.std() < 10.0


def test_gaussian_kernel():
    kernel = gaussian_kernel(2.5)
    assert kernel.size == 2 * math.ceil(7.5) + 1
    assert abs(kernel.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(kernel, kernel[::-1])


def test_identity_pair():
    m = Volume(np.random.default_rng(0).random((8, 8, 8)))
    labels = LabelMap(np.random.default_rng(1).integers(0, 3, (8, 8, 8)), 3)
    pair = generate_pair(m, labels, SimulatorConfig.identity(), make_rng(0))
    assert np.all(pair.field.vectors == 0.0)
    np.testing.assert_allclose(pair.fixed.data, m.data, atol=1e-6)
    np.testing.assert_array_equal(pair.fixed_labels.labels, labels.labels)


def test_translation_pair_on_ramp():
    dims = (8, 6, 6)
    cfg = SimulatorConfig(
        rotation_max=(0.0, 0.0, 0.0), scale_min=(1.0, 1.0, 1.0), scale_max=(1.0, 1.0, 1.0),
        translation_max=(0.2, 0.0, 0.0), elastic_gamma_max=0.0,
    )
    pair = generate_pair(_ramp(dims), None, cfg, make_rng(5))
    shift = pair.transform.translation[0] * dims[0]
    np.testing.assert_allclose(pair.field.vectors[0], shift, atol=1e-12)
    # interior voxels whose sampling position stays inside the grid
    for x in range(dims[0]):
        if 0.0 <= x + shift <= dims[0] - 1:
            np.testing.assert_allclose(pair.fixed.data[x], x + shift, atol=1e-9)
    assert pair.fixed_labels is None


def test_simulator_deterministic():
    m = Volume(np.random.default_rng(0).random((16, 16, 16)))
    a = RegistrationSimulator(SimulatorConfig(seed=7)).generate(m)
    b = RegistrationSimulator(SimulatorConfig(seed=7)).generate(m)
    np.testing.assert_array_equal(a.field.vectors, b.field.vectors)
    np.testing.assert_array_equal(a.fixed.data, b.fixed.data)
    assert a.transform == b.transform


def test_fixed_image_is_convex_combination():
    m = Volume(np.random.default_rng(0).random((16, 16, 16)))
    pair = RegistrationSimulator(SimulatorConfig(seed=1)).generate(m)
    assert pair.fixed.data.min() >= m.data.min() - 1e-12
    assert pair.fixed.data.max() <= m.data.max() + 1e-12


def test_impulse_reproduces_truncated_gaussian():
    sigma, radius = 2.0, 6
    impulse = np.zeros((2 * radius + 3, 1, 1))
    center = radius + 1
    impulse[center, 0, 0] = 1.0
    smoothed = smooth_component(impulse, sigma)[:, 0, 0]
    norm = sum(math.exp(-j * j / (2 * sigma * sigma)) for j in range(-radius, radius + 1))
    for d in range(radius + 1):
        expected = math.exp(-d * d / (2 * sigma * sigma)) / norm
        assert abs(smoothed[center + d] - expected) < 1e-12
        assert abs(smoothed[center - d] - expected) < 1e-12
    # beyond the truncation radius
    assert smoothed[center + radius + 1] == 0.0 and smoothed[center - radius - 1] == 0.0


def test_elastic_field_smoothness_bound():
    cfg = SimulatorConfig()
    dims = (32, 32, 32)
    for seed in range(20):
        rng = make_rng(seed)
        t = sample_transform(cfg, rng)
        field = build_elastic_field(t, dims, rng)
        jacobian = np.stack([np.stack(np.gradient(field.vectors[a])) for a in range(3)])
        mean_gradient = float(np.sqrt(np.sum(jacobian ** 2, axis=(0, 1))).mean())
        assert mean_gradient < t.elastic_gamma / t.smoothing_sigma, (seed, mean_gradient)


def test_translation_preserves_label_multiset():
    dims = (8, 5, 5)
    labels = LabelMap(np.random.default_rng(2).integers(0, 4, dims), 4)
    for voxels in (2, -1):
        field = build_affine_field(_transform(translation=(voxels / dims[0], 0.0, 0.0)), dims)
        warped = warp_nearest(labels, field)
        if voxels > 0:
            inner_warped, inner_source = warped.labels[:-voxels], labels.labels[voxels:]
        else:
            inner_warped, inner_source = warped.labels[-voxels:], labels.labels[:voxels]
        np.testing.assert_array_equal(inner_warped, inner_source)
        np.testing.assert_array_equal(np.bincount(inner_warped.ravel(), minlength=4),
                                      np.bincount(inner_source.ravel(), minlength=4))


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
    print("\n✅ All simulator tests passed!")
