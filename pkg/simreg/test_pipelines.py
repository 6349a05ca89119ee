#!/usr/bin/env python3
"""Test training, registration and atlas-based segmentation pipelines"""
import csv
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from simreg.models.configs import SimulatorConfig, TrainConfig, TrainingMode
from simreg.models.datasets import AtlasSet, TrainSample
from simreg.models.volumes import DisplacementField, LabelMap, Volume
from simreg.services import metrics
from simreg.services.evaluation import evaluate_dataset, summarize
from simreg.services.network import NetworkParameters, init_network
from simreg.services.resampler import warp_nearest
from simreg.services.segmentation import (
    atlas_segment, backproject_prediction, foreground_agreement, multi_atlas_segment,
    register, segment_mtl,
)
from simreg.services.simulator import RegistrationSimulator
from simreg.services.synthetic import NUM_CLASSES, make_synthetic_dataset
from simreg.services.trainer import _dual_target, train, write_loss_history

RUN_SLOW = os.getenv("SIMREG_RUN_SLOW") == "1"
DIMS = (16, 16, 16)


def _dataset(n=3, seed=0):
    return make_synthetic_dataset(n, DIMS, seed)


def _zero_seg_head(num_classes=NUM_CLASSES) -> NetworkParameters:
    arrays = init_network(seed=0, num_classes=num_classes).as_arrays()
    arrays["seg_head.weight"] = np.zeros_like(arrays["seg_head.weight"])
    return NetworkParameters.from_arrays(arrays)


# ============= SYNTHETIC DATA =============

def test_synthetic_dataset_deterministic():
    a, b = make_synthetic_dataset(2, DIMS, seed=4), make_synthetic_dataset(2, DIMS, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.moving.data, y.moving.data)
        np.testing.assert_array_equal(x.moving_labels.labels, y.moving_labels.labels)
    c = make_synthetic_dataset(1, DIMS, seed=5)
    assert not np.array_equal(a[0].moving.data, c[0].moving.data)


def test_synthetic_class_fractions():
    for sample in make_synthetic_dataset(5, (32, 32, 32), seed=0):
        assert sample.moving.data.min() >= 0.0 and sample.moving.data.max() <= 1.0
        assert sample.moving_labels.num_classes == NUM_CLASSES
        for class_id in (1, 2):
            fraction = float(np.mean(sample.moving_labels.labels == class_id))
            assert 0.01 < fraction < 0.5, (class_id, fraction)


def test_synthetic_rejects_bad_arguments():
    for kwargs in ({"n": 0}, {"n": 1, "dims": (4, 16, 16)}):
        try:
            make_synthetic_dataset(**kwargs)
        except ValueError:
            continue
        raise AssertionError(f"accepted {kwargs}")


# ============= TRAINING =============

def test_zero_epochs_returns_initialization():
    dataset = _dataset(2)
    result = train(dataset, SimulatorConfig(), TrainConfig(epochs=0, seed=3))
    assert result.steps == 0
    assert result.params.equals(init_network(3))

    start = init_network(9)
    result = train(dataset, SimulatorConfig(), TrainConfig(epochs=0), params=start)
    assert result.params.equals(start)
    assert result.params is not start


def test_reg_identity_simulator():
    sample = _dataset(1)[0]
    cfg = TrainConfig(steps=3, seed=0, log_every=0)
    result = train([sample], SimulatorConfig.identity(), cfg)
    assert result.steps == 3
    first = result.history[0]
    assert first.L_F == 0.0
    assert first.L_sim0 == -metrics.nlcc(sample.moving, sample.moving, cfg.nlcc_window)
    for record in result.history:
        assert record.L_sim1 == 0.0 and record.L_seg == 0.0
        assert record.L_F < 0.2
        assert abs(record.L_sim0 - first.L_sim0) < 0.05


def test_training_is_reproducible():
    dataset = _dataset(2)
    cfg = TrainConfig(steps=2, seed=1, log_every=0)
    a = train(dataset, SimulatorConfig(seed=2), cfg)
    b = train(dataset, SimulatorConfig(seed=2), cfg)
    assert a.params.equals(b.params)
    assert [r.total for r in a.history] == [r.total for r in b.history]


def test_mtl_and_feat_steps_are_finite():
    dataset = _dataset(3)
    mtl = train(dataset, SimulatorConfig(seed=1), TrainConfig(mode=TrainingMode.MTL, steps=2, log_every=0))
    assert all(r.is_finite() for r in mtl.history)
    assert all(r.L_sim1 < 0.0 and r.L_seg < 0.0 for r in mtl.history)
    assert not mtl.params.has_seg_head

    feat = train(dataset, SimulatorConfig(seed=1), TrainConfig(mode=TrainingMode.FEAT, steps=1, log_every=0))
    assert feat.params.has_seg_head and feat.params.num_classes == NUM_CLASSES
    assert feat.history[0].is_finite()
    # dropping the warped-label term removes one negative Dice term
    ablated = train(dataset, SimulatorConfig(seed=1),
                    TrainConfig(mode=TrainingMode.FEAT, steps=1, log_every=0, feat_keep_warped_term=False))
    assert ablated.history[0].L_seg > feat.history[0].L_seg


def test_training_input_errors():
    cases = [
        ([], TrainConfig(), "empty dataset"),
        ([TrainSample(moving=_dataset(1)[0].moving)], TrainConfig(mode=TrainingMode.MTL), "missing labels"),
    ]
    for dataset, cfg, message in cases:
        try:
            train(dataset, SimulatorConfig(), cfg)
        except ValueError as e:
            assert message in str(e), str(e)
        else:
            raise AssertionError(f"accepted {message}")
    try:
        train(_dataset(1), SimulatorConfig(), TrainConfig(mode=TrainingMode.FEAT, steps=1), params=init_network(0))
    except ValueError as e:
        assert "segmentation head parameters absent" in str(e)
    else:
        raise AssertionError("FEAT without head accepted")


def test_dual_target_excludes_self():
    dataset = _dataset(3)
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(100):
        image, _ = _dual_target(dataset, 1, rng)
        assert image is not dataset[1].moving
        seen.add(id(image))
    assert seen == {id(dataset[0].moving), id(dataset[2].moving)}

    explicit = TrainSample(dataset[0].moving, dataset[0].moving_labels, dataset[1].moving, dataset[1].moving_labels)
    assert _dual_target([explicit], 0, rng)[0] is dataset[1].moving
    assert _dual_target(dataset[:1], 0, rng)[0] is dataset[0].moving


def test_loss_history_csv():
    result = train(_dataset(1), SimulatorConfig(seed=0), TrainConfig(steps=2, log_every=0))
    with tempfile.TemporaryDirectory() as tmp:
        path = write_loss_history(os.path.join(tmp, "loss_history.csv"), result.history)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    assert rows[0] == ["step", "L_F", "L_sim0", "L_sim1", "L_seg", "total"]
    assert len(rows) == 3 and rows[2][0] == "1"


def test_reg_training_beats_zero_field():
    if not RUN_SLOW:
        return
    dataset = make_synthetic_dataset(20, (32, 32, 32), seed=0)
    result = train(dataset, SimulatorConfig(seed=0), TrainConfig(steps=500, log_every=50))
    assert all(r.is_finite() for r in result.history)
    first = np.mean([r.L_F for r in result.history[:10]])
    last = np.mean([r.L_F for r in result.history[-10:]])
    assert last < first

    held_out = make_synthetic_dataset(5, (32, 32, 32), seed=100)
    images = [(f"held_{k}", s.moving) for k, s in enumerate(held_out)]
    reports = evaluate_dataset(result.params, images, SimulatorConfig(seed=100))
    baseline = evaluate_dataset(init_network(0), images, SimulatorConfig(seed=100))
    assert summarize(reports)["epe_mm"][0] < 0.5 * summarize(baseline)["epe_mm"][0]


def test_losses_finite_across_seeds():
    if not RUN_SLOW:
        return
    dataset = _dataset(3)
    for seed in range(5):
        for mode in TrainingMode:
            result = train(dataset, SimulatorConfig(seed=seed), TrainConfig(mode=mode, seed=seed, steps=5, log_every=0))
            assert all(r.is_finite() for r in result.history)


# ============= INFERENCE =============

def test_register_zero_head():
    sample = _dataset(1)[0]
    target = _dataset(1, seed=1)[0].moving
    field, recon = register(init_network(0), sample.moving, target)
    assert np.all(field.vectors == 0.0)
    np.testing.assert_array_equal(recon.data, sample.moving.data)
    assert metrics.nlcc(recon, target, 5) >= metrics.nlcc(sample.moving, target, 5) - 1e-6


def test_register_keeps_identical_pair():
    sample = _dataset(1)[0]
    params = train(_dataset(2), SimulatorConfig(seed=0), TrainConfig(steps=2, log_every=0)).params
    field, recon = register(params, sample.moving, sample.moving)
    assert float(field.magnitude().mean()) < 0.1
    assert metrics.mse(recon, sample.moving) < 1e-3
    assert metrics.nlcc(recon, sample.moving, 5) >= metrics.nlcc(sample.moving, sample.moving, 5) - 0.05


def test_register_keeps_identical_pair_after_training():
    if not RUN_SLOW:
        return
    params = train(make_synthetic_dataset(20, (32, 32, 32), seed=0), SimulatorConfig(seed=0),
                   TrainConfig(steps=500, log_every=50)).params
    for sample in make_synthetic_dataset(3, (32, 32, 32), seed=200):
        _, recon = register(params, sample.moving, sample.moving)
        assert metrics.mse(recon, sample.moving) < 5e-3
        assert metrics.nlcc(recon, sample.moving, 5) >= 0.9


def _mean_pair_dice(held_out, segment) -> float:
    """Mean foreground Dice of segmenting sample k+1 through sample k"""
    scores = []
    for source, target in zip(held_out[:-1], held_out[1:]):
        predicted = segment((source.moving, source.moving_labels), target.moving)
        scores.extend(metrics.dice_per_class(predicted, target.moving_labels))
    return metrics.summarize_dice(scores)[0]


def _zero_field_dice(held_out) -> float:
    return _mean_pair_dice(held_out, lambda moving, target: moving[1])


def test_mtl_and_feat_beat_zero_field_dice():
    if not RUN_SLOW:
        return
    dims = (32, 32, 32)
    dataset = make_synthetic_dataset(20, dims, seed=0)
    held_out = make_synthetic_dataset(6, dims, seed=300)
    mtl = train(dataset, SimulatorConfig(seed=0), TrainConfig(mode=TrainingMode.MTL, steps=500, log_every=50))
    feat = train(dataset, SimulatorConfig(seed=0), TrainConfig(mode=TrainingMode.FEAT, steps=500, log_every=50))

    baseline = _zero_field_dice(held_out)
    mtl_dice = _mean_pair_dice(held_out, lambda m, t: segment_mtl(mtl.params, m, t))
    feat_dice = _mean_pair_dice(held_out, lambda m, t: segment_mtl(feat.params, m, t, mode=TrainingMode.FEAT))
    assert mtl_dice >= baseline + 0.10, (mtl_dice, baseline)
    assert abs(feat_dice - mtl_dice) <= 0.05, (feat_dice, mtl_dice)


def test_atlas_segment_beats_zero_field_dice():
    if not RUN_SLOW:
        return
    dims = (32, 32, 32)
    params = train(make_synthetic_dataset(20, dims, seed=0), SimulatorConfig(seed=0),
                   TrainConfig(steps=500, log_every=50)).params
    held_out = make_synthetic_dataset(6, dims, seed=400)
    atlas_dice = _mean_pair_dice(held_out, lambda m, t: atlas_segment(params, m, t))
    assert atlas_dice >= _zero_field_dice(held_out), atlas_dice


def test_register_dims_mismatch():
    try:
        register(init_network(0), Volume(np.zeros(DIMS)), Volume(np.zeros((16, 16, 32))))
    except ValueError as e:
        assert "dims mismatch" in str(e)
    else:
        raise AssertionError("dims mismatch accepted")


def test_atlas_segment_plumbing():
    sample = _dataset(1)[0]
    atlas = (sample.moving, sample.moving_labels)
    out = atlas_segment(init_network(0), atlas, sample.moving)
    np.testing.assert_array_equal(out.labels, sample.moving_labels.labels)

    pair = RegistrationSimulator(SimulatorConfig(seed=3)).generate(sample.moving, sample.moving_labels)
    out = atlas_segment(init_network(0), atlas, pair.fixed, field=pair.field)
    np.testing.assert_array_equal(out.labels, warp_nearest(sample.moving_labels, pair.field).labels)
    np.testing.assert_array_equal(out.labels, pair.fixed_labels.labels)


def test_multi_atlas_single_atlas():
    dataset = _dataset(2)
    target = dataset[1].moving
    entry = (dataset[0].moving, dataset[0].moving_labels)
    result = multi_atlas_segment(init_network(0), AtlasSet([entry]), target)
    np.testing.assert_array_equal(result.labels.labels, atlas_segment(init_network(0), entry, target).labels)
    assert np.all(result.uncertainty.data == 0.0)
    assert result.selected == [0]


def test_multi_atlas_vote_and_uncertainty():
    image = _dataset(1)[0].moving
    base = np.zeros(DIMS, dtype=np.int64)
    votes = []
    for label in (2, 2, 1):
        labels = base.copy()
        labels[5, 5, 5] = label
        votes.append((image, LabelMap(labels, 3)))
    result = multi_atlas_segment(init_network(0), AtlasSet(votes), image, top_k=3)
    assert result.labels.labels[5, 5, 5] == 2
    assert abs(result.uncertainty.data[5, 5, 5] - 1.0 / 3.0) < 1e-12
    mask = np.ones(DIMS, dtype=bool)
    mask[5, 5, 5] = False
    assert np.all(result.uncertainty.data[mask] == 0.0)
    assert np.all(result.labels.labels[mask] == 0)


def test_multi_atlas_selection():
    dataset = make_synthetic_dataset(21, DIMS, seed=7)
    target = dataset[0].moving
    atlases = AtlasSet([(s.moving, s.moving_labels) for s in dataset[1:]], selection_fraction=0.1)
    params = init_network(0)
    result = multi_atlas_segment(params, atlases, target, workers=4)
    assert len(result.selected) == 2

    oracle = [metrics.nlcc(image, target, 5) for image, _ in atlases.entries]
    np.testing.assert_allclose(result.scores, oracle, atol=1e-12)
    ranked = sorted(range(len(oracle)), key=lambda k: -oracle[k])
    assert result.selected == ranked[:2]

    # consensus matches each selected atlas wherever the selected atlases agree
    a, b = (atlases.entries[k][1].labels for k in result.selected)
    agree = a == b
    np.testing.assert_array_equal(result.labels.labels[agree], a[agree])


def test_empty_atlas_set():
    try:
        AtlasSet([])
    except ValueError as e:
        assert "empty atlas set" in str(e)
    else:
        raise AssertionError("empty atlas set accepted")


def test_segment_mtl_zero_cases():
    sample = _dataset(1)[0]
    target = _dataset(1, seed=2)[0].moving
    moving = (sample.moving, sample.moving_labels)

    out = segment_mtl(init_network(0), moving, target)
    np.testing.assert_array_equal(out.labels, sample.moving_labels.labels)
    assert out.alphabet() <= sample.moving_labels.alphabet()

    out = segment_mtl(_zero_seg_head(), moving, target, mode=TrainingMode.FEAT)
    assert out.alphabet() == {0}

    try:
        segment_mtl(init_network(0), moving, target, mode=TrainingMode.FEAT)
    except ValueError as e:
        assert "segmentation head parameters absent" in str(e)
    else:
        raise AssertionError("FEAT without head accepted")


def test_backproject_zero_and_translation():
    labels = LabelMap(np.random.default_rng(0).integers(0, 3, (10, 6, 6)), 3)
    same, report = backproject_prediction(DisplacementField.zeros(labels.dims), labels)
    np.testing.assert_array_equal(same.labels, labels.labels)
    assert report.converged

    shifted, report = backproject_prediction(DisplacementField.constant(labels.dims, (2.0, 0.0, 0.0)), labels)
    np.testing.assert_array_equal(shifted.labels[2:], labels.labels[:-2])
    assert report.iterations == 1


def test_foreground_agreement():
    a = LabelMap(np.array([0, 1, 2, 2]).reshape(4, 1, 1), 3)
    b = LabelMap(np.array([1, 1, 2, 0]).reshape(4, 1, 1), 3)
    assert abs(foreground_agreement(a, b) - 2.0 / 3.0) < 1e-12
    assert foreground_agreement(a, LabelMap(np.zeros((4, 1, 1), dtype=np.int64), 3)) == 1.0


def test_backproject_round_trip():
    if not RUN_SLOW:
        return
    sample = make_synthetic_dataset(1, (32, 32, 32), seed=0)[0]
    simulator = RegistrationSimulator(SimulatorConfig(seed=0))
    for _ in range(5):
        pair = simulator.generate(sample.moving, sample.moving_labels)
        back, report = backproject_prediction(pair.field, pair.fixed_labels)
        assert report.mean_residual < 0.1
        assert foreground_agreement(warp_nearest(back, pair.field), pair.fixed_labels) > 0.95


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
    print("\n✅ All pipeline tests passed!")
