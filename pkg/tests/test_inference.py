import csv

import numpy as np
import pytest

from bicrcl.errors import EmptyBatchError, ShapeError
from bicrcl.inference import (FusionConfig, confidence, divergence_threshold, fuse, fuse_batch,
                              fuse_stream, prediction_record, write_prediction_records)
from bicrcl.numerics import softmax_temp, sym_kl


def test_threshold_examples():
    assert divergence_threshold([0.3, 0.3, 0.3], 0.5) == pytest.approx(0.3)
    assert divergence_threshold([0.0, 2.0], 0.5) == 1.5
    assert divergence_threshold([0.7], 2.0) == 0.7


def test_threshold_matches_two_pass_oracle():
    values = np.random.default_rng(0).exponential(size=50)
    mean = sum(values) / len(values)
    std = (sum((v - mean) ** 2 for v in values) / len(values)) ** 0.5
    assert divergence_threshold(values, 0.5) == pytest.approx(mean + 0.5 * std, rel=1e-12)


def test_threshold_empty_batch():
    with pytest.raises(EmptyBatchError):
        divergence_threshold([], 0.5)


def test_confidence_examples():
    assert confidence(np.full(4, 0.25)) == 0.25
    assert confidence([0.0, 1.0]) == 1.0
    assert confidence([0.2, 0.5, 0.3]) == 0.5


def test_agreement_returns_conservative_logits():
    z = np.array([0.5, 2.0, -1.0])
    fused = fuse(z, z.copy(), FusionConfig(), threshold=0.0)
    assert fused.gate == 0
    assert fused.divergence == 0.0
    assert np.array_equal(fused.z_cr, z)
    assert fused.y_star == 1


def test_disagreement_hand_example():
    fused = fuse([2.0, 0.0], [0.0, 2.0], FusionConfig(tau=0.1), threshold=0.0)
    assert fused.gate == 1
    assert fused.alpha_c == fused.alpha_r == 0.5
    assert np.array_equal(fused.z_cr, [1.0, 1.0])
    assert fused.y_star == 0


def test_forced_gate_with_equal_confidence_averages():
    z_c = np.array([3.0, 1.0, 0.0])
    z_r = np.array([0.0, 1.0, 3.0])
    fused = fuse(z_c, z_r, FusionConfig(), threshold=-1.0)
    assert fused.gate == 1
    assert np.allclose(fused.z_cr, (z_c + z_r) / 2)


def test_more_confident_learner_wins_below_threshold():
    z_c = np.array([1.0, 0.9])
    z_r = np.array([0.0, 3.0])
    fused = fuse(z_c, z_r, FusionConfig(), threshold=1e9)
    assert fused.gate == 0
    assert np.array_equal(fused.z_cr, z_r)
    assert fused.alpha_c + fused.alpha_r == pytest.approx(1.0)


def test_fuse_length_mismatch():
    with pytest.raises(ShapeError):
        fuse([1.0, 2.0], [1.0, 2.0, 3.0], FusionConfig(), 0.0)


def test_fusion_properties_on_random_pairs():
    rng = np.random.default_rng(0)
    config = FusionConfig(tau=0.1)
    checked = 0
    for _ in range(10_000):
        size = int(rng.integers(2, 8))
        # quarter-integer logits and integer shifts keep every sum exact
        z_c = rng.integers(-40, 41, size=size) / 4.0
        z_r = rng.integers(-40, 41, size=size) / 4.0
        shift = float(rng.integers(-20, 21))
        threshold = float(rng.uniform(0.0, 2.0))

        fused = fuse(z_c, z_r, config, threshold)
        divergence = sym_kl(softmax_temp(z_c, 0.1), softmax_temp(z_r, 0.1))
        assert divergence >= 0.0
        if np.array_equal(z_c, z_r):
            assert divergence == 0.0 and fused.gate == 0

        if fused.gate == 0:
            assert np.array_equal(fused.z_cr, z_c) or np.array_equal(fused.z_cr, z_r)
        else:
            assert np.all(fused.z_cr >= np.minimum(z_c, z_r))
            assert np.all(fused.z_cr <= np.maximum(z_c, z_r))
        assert fused.y_star == int(np.argmax(fused.z_cr))

        shifted = fuse(z_c + shift, z_r + shift, config, threshold)
        top_two = np.sort(fused.z_cr)[-2:]
        near_tie = (abs(fused.divergence - threshold) < 1e-9
                    or abs(fused.confidence_c - fused.confidence_r) < 1e-9
                    or top_two[1] - top_two[0] < 1e-9)
        if near_tie:
            continue
        assert shifted.gate == fused.gate
        assert shifted.y_star == fused.y_star
        checked += 1
    assert checked > 5_000


def test_fuse_batch_updates_running_stats():
    rng = np.random.default_rng(1)
    z_c, z_r = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
    config = FusionConfig()
    predictions = fuse_batch(z_c, z_r, config)
    divergences = np.array([p.divergence for p in predictions])
    assert config.running_count == 20
    assert config.running_mean == pytest.approx(divergences.mean(), rel=1e-12)
    assert config.running_std == pytest.approx(divergences.std(), rel=1e-9)
    threshold = divergence_threshold(divergences, config.lam)
    assert [p.gate for p in predictions] == [int(d > threshold) for d in divergences]


def test_fuse_stream_uses_running_threshold():
    config = FusionConfig()
    z = np.array([1.0, 0.0])
    first = fuse_stream(z, z, config)
    assert first.gate == 0 and config.running_count == 1
    fuse_stream([3.0, 0.0], [0.0, 3.0], config)
    assert config.running_count == 2
    config.reset_running()
    assert (config.running_mean, config.running_std, config.running_count) == (0.0, 0.0, 0)


def test_single_row_batch_is_gated_against_running_stats():
    config = FusionConfig()
    agreeing = np.tile([1.0, 0.0, -1.0], (50, 1))
    assert not any(p.gate for p in fuse_batch(agreeing, agreeing.copy(), config))
    assert config.running_count == 50 and config.running_mean == 0.0

    single = fuse_batch(np.array([[3.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 3.0]]), config)
    assert len(single) == 1
    assert single[0].gate == 1
    assert config.running_count == 51
    assert config.running_threshold() < single[0].divergence


def test_single_row_batch_matches_fuse_stream():
    rng = np.random.default_rng(3)
    z_c, z_r = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
    batched, streamed = FusionConfig(), FusionConfig()
    for row in range(12):
        left = fuse_batch(z_c[row:row + 1], z_r[row:row + 1], batched)[0]
        right = fuse_stream(z_c[row], z_r[row], streamed)
        assert (left.gate, left.y_star) == (right.gate, right.y_star)
    assert batched.running_mean == streamed.running_mean
    assert batched.running_count == streamed.running_count == 12


def test_fusion_config_violations():
    assert FusionConfig().violations() == []
    errors = FusionConfig(tau=0.0, lam=-1.0, mode="vote").violations()
    assert [e.split(":")[0] for e in errors] == ["FusionConfig.tau", "FusionConfig.lambda",
                                                 "FusionConfig.mode"]


def test_prediction_records_csv(tmp_path):
    fused = fuse([2.0, 0.0], [0.0, 2.0], FusionConfig(), threshold=0.0)
    path = str(tmp_path / "predictions.csv")
    write_prediction_records(path, [prediction_record(7, fused)])
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert rows[0]['sample_id'] == "7"
    assert rows[0]['gate'] == "1"
    assert float(rows[0]['alpha_c']) == 0.5
