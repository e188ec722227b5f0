from dataclasses import replace

import numpy as np
import pytest

from bicrcl.analytic import AnalyticConfig
from bicrcl.backbone import BackboneConfig, FrozenBackbone
from bicrcl.checkpoint import load_checkpoint, save_checkpoint
from bicrcl.config import ExperimentConfig
from bicrcl.engine import BiCRCL, eval_threads
from bicrcl.errors import CheckpointError, EmptyTaskError, StateError
from bicrcl.inference import FusionConfig, batch_divergences, fuse_stream
from bicrcl.learners import ConsolidationConfig, TrainConfig
from bicrcl.stream import TaskData
from conftest import TINY_BACKBONE, make_task


def tiny_config(**consolidation):
    return ExperimentConfig(
        seed=3,
        eval_batch_size=4,
        backbone=BackboneConfig(**TINY_BACKBONE),
        train=TrainConfig(batch_size=8, epochs_first=2, epochs_later=2, augment=False),
        consolidation=ConsolidationConfig(**consolidation),
        analytic=AnalyticConfig(beta=1.0),
    )


def sessions():
    first = make_task(num_classes=3, per_class=8, seed=1)
    second = make_task(num_classes=2, per_class=8, first_label=3, seed=2, id_offset=100)
    test = make_task(num_classes=5, per_class=3, seed=3, id_offset=200)
    return first, second, test


def engine_for(config):
    return BiCRCL(FrozenBackbone.from_config(config.backbone), config)


def test_single_session_has_no_radical_learner():
    first, _, test = sessions()
    engine = engine_for(tiny_config())
    engine.learn_session(first)
    seen = test.y < 3
    record, predictions = engine.evaluate(TaskData(test.x[seen], test.y[seen], test.ids[seen]))
    assert engine.radical is None
    assert record['accuracy_radical'] is None
    assert record['accuracy'] == record['accuracy_conservative']
    assert record['gate_rate'] == 0.0
    assert set(predictions[0]) == {"sample_id", "y_star"}


def test_second_session_builds_both_learners():
    first, second, test = sessions()
    engine = engine_for(tiny_config())
    engine.learn_session(first)
    engine.learn_session(second)
    assert engine.session == 2
    assert engine.num_classes == engine.radical.num_classes == 5
    assert engine.stats_c.count == engine.stats_r.count == 40

    record, predictions = engine.evaluate(test)
    assert record['classes_seen'] == 5
    assert record['divergence_count'] == len(test)
    assert 0.0 <= record['gate_rate'] <= 1.0
    assert [p['sample_id'] for p in predictions] == test.ids.tolist()
    assert engine.predict(test.x).shape == (len(test),)


def test_sessions_must_add_classes():
    first, _, _ = sessions()
    engine = engine_for(tiny_config())
    with pytest.raises(StateError):
        engine.logits(first.x)
    engine.learn_session(first)
    with pytest.raises(StateError):
        engine.learn_session(first)
    with pytest.raises(EmptyTaskError):
        engine.learn_session(TaskData(first.x[:0], first.y[:0], first.ids[:0]))


def test_same_seed_same_predictions():
    first, second, test = sessions()
    outcomes = []
    for _ in range(2):
        engine = engine_for(tiny_config())
        engine.learn_session(first)
        engine.learn_session(second)
        outcomes.append(engine.evaluate(test))
    assert outcomes[0] == outcomes[1]


def test_thread_count_does_not_change_results(monkeypatch):
    first, second, test = sessions()
    engine = engine_for(tiny_config())
    engine.learn_session(first)
    engine.learn_session(second)
    monkeypatch.setenv("CRCL_THREADS", "1")
    serial = engine.evaluate(test)
    monkeypatch.setenv("CRCL_THREADS", "3")
    assert eval_threads() == 3
    assert engine.evaluate(test) == serial


def test_eval_threads_ignores_garbage(monkeypatch):
    monkeypatch.setenv("CRCL_THREADS", "lots")
    assert eval_threads() == 1
    monkeypatch.setenv("CRCL_THREADS", "0")
    assert eval_threads() == 1


def test_forward_transfer_copies_conservative_adapters():
    first, second, _ = sessions()
    config = tiny_config(alpha=1.0)
    config.train = replace(config.train, epochs_later=0)
    engine = engine_for(config)
    engine.learn_session(first)
    engine.learn_session(second)
    assert engine.radical.adapters.max_abs_diff(engine.conservative.adapters) == 0.0


def test_without_forward_transfer_radical_starts_fresh():
    first, second, _ = sessions()
    config = tiny_config(alpha=1.0, forward_transfer=False)
    config.train = replace(config.train, epochs_later=0)
    engine = engine_for(config)
    engine.learn_session(first)
    engine.learn_session(second)
    assert engine.radical.adapters.max_abs_diff(engine.conservative.adapters) > 0.0
    assert all(not np.any(adapter.w_up) for adapter in engine.radical.adapters)


def test_without_domain_alignment_conservative_matches_frozen_backbone():
    first, _, _ = sessions()
    config = tiny_config()
    config.train = replace(config.train, domain_alignment=False)
    engine = engine_for(config)
    engine.learn_session(first)
    frozen = engine.backbone.embed_batched(first.x)
    adapted = engine.backbone.embed_batched(first.x, engine.conservative.adapters)
    assert np.array_equal(frozen, adapted)


def test_resume_from_state_matches_uninterrupted(tmp_path):
    first, second, test = sessions()
    uninterrupted = engine_for(tiny_config())
    uninterrupted.learn_session(first)
    header, arrays = uninterrupted.state_dict()
    path = str(tmp_path / "session1.crclck")
    save_checkpoint(path, {'engine': header}, arrays)
    uninterrupted.learn_session(second)

    loaded_header, loaded_arrays = load_checkpoint(path)
    resumed = engine_for(tiny_config())
    resumed.load_state_dict(loaded_header['engine'], loaded_arrays)
    resumed.learn_session(second)

    expected_c, expected_r = uninterrupted.logits(test.x)
    resumed_c, resumed_r = resumed.logits(test.x)
    assert np.array_equal(resumed_c, expected_c)
    assert np.array_equal(resumed_r, expected_r)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    path = str(tmp_path / "state.crclck")
    arrays = {'b': np.arange(6, dtype=np.float64).reshape(2, 3), 'a': np.array([1.5])}
    save_checkpoint(path, {'session': 4}, arrays)
    header, loaded = load_checkpoint(path)
    assert header['session'] == 4
    assert [entry['name'] for entry in header['arrays']] == ["a", "b"]
    assert np.array_equal(loaded['b'], arrays['b'])

    with open(path, "rb") as f:
        payload = f.read()
    (tmp_path / "magic.crclck").write_bytes(b"XXXXXXX" + payload[7:])
    (tmp_path / "short.crclck").write_bytes(payload[:-8])
    for name in ("magic.crclck", "short.crclck", "absent.crclck"):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / name))


def test_state_dict_requires_a_session():
    with pytest.raises(StateError):
        engine_for(tiny_config()).state_dict()


def test_sample_order_within_a_session_does_not_matter():
    first, second, test = sessions()
    rng = np.random.default_rng(8)
    outcomes = []
    for permute in (False, True):
        engine = engine_for(tiny_config())
        for data in (first, second):
            if permute:
                order = rng.permutation(len(data))
                data = TaskData(data.x[order], data.y[order], data.ids[order])
            engine.learn_session(data)
        outcomes.append(engine.evaluate(test))
    assert outcomes[0] == outcomes[1]


def test_one_sample_batches_fuse_against_running_stats():
    first, second, test = sessions()
    config = replace(tiny_config(), eval_batch_size=1)
    engine = engine_for(config)
    engine.learn_session(first)
    engine.learn_session(second)
    record, predictions = engine.evaluate(test)

    z_c, z_r = engine.logits(test.x)
    running = FusionConfig(tau=config.fusion.tau, lam=config.fusion.lam)
    gates = []
    for row in range(len(test)):
        divergence = batch_divergences(z_c[row:row + 1], z_r[row:row + 1], running.tau)[0]
        gates.append(fuse_stream(z_c[row], z_r[row], running, divergence=float(divergence)).gate)

    assert record['divergence_count'] == len(test)
    assert record['gate_rate'] == pytest.approx(float(np.mean(gates)))
    assert [p['gate'] for p in predictions] == gates
    assert record['divergence_mean'] == pytest.approx(running.running_mean)


def test_one_class_per_session_stays_finite():
    config = tiny_config()
    engine = engine_for(config)
    accuracies = []
    for label in range(4):
        engine.learn_session(make_task(num_classes=1, per_class=12, first_label=label,
                                       seed=10 + label, id_offset=100 * label))
        seen = make_task(num_classes=label + 1, per_class=3, seed=20, id_offset=1000)
        record, _ = engine.evaluate(seen)
        accuracies.append(record['accuracy'])
        assert np.all(np.isfinite(engine.stats_c.gram))
        assert np.all(np.isfinite(engine.stats_r.gram if engine.stats_r is not None else 0.0))
        assert np.isfinite(record['divergence_mean'])
    assert engine.num_classes == 4
    assert all(0.0 <= value <= 100.0 for value in accuracies)
    for adapter in engine.radical.adapters:
        assert np.all(np.isfinite(adapter.w_down)) and np.all(np.isfinite(adapter.w_up))
    assert np.all(np.isfinite(engine.radical.classifier))


def test_checkpoint_without_array_table_is_rejected(tmp_path):
    encoded = b'{"version": 1}'
    path = tmp_path / "headless.crclck"
    path.write_bytes(b"CRCLCK1" + np.array([len(encoded)], dtype="<i8").tobytes() + encoded)
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    assert "arrays" in str(info.value)

    listed = b'[1, 2]'
    (tmp_path / "list.crclck").write_bytes(
        b"CRCLCK1" + np.array([len(listed)], dtype="<i8").tobytes() + listed)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "list.crclck"))
