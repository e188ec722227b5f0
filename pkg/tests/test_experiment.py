import csv
import json
import os

import pytest

from bicrcl.checkpoint import save_checkpoint
from bicrcl.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main
from bicrcl.config import validate_config
from bicrcl.errors import CheckpointError, ShapeError
from bicrcl.stream import split_tasks
from bicrcl.experiment import (ECHO_NAME, checkpoint_path, config_fingerprint, run_experiment,
                               session_line)
from conftest import write_tiny_config


def config_for(directory, **overrides):
    sections = {}
    for key, value in overrides.items():
        section, name = key.split("__")
        sections.setdefault(section, {})[name] = str(value)
    return validate_config(os.path.join(directory, "experiment.ini"), overrides=sections)


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_run_writes_report_table_and_echo(tiny_dataset):
    config = config_for(tiny_dataset)
    seen = []
    outcome = run_experiment(config, on_session=lambda t, total, record: seen.append((t, total)))
    assert seen == [(1, 2), (2, 2)]

    with open(outcome.report_path) as f:
        report = json.load(f)
    assert report['method'] == "bicrcl"
    assert report['tasks'] == [["0", "1"], ["2", "3"]]
    assert len(report['accuracies']) == 2
    assert report['acc_last'] == report['accuracies'][-1]
    assert report['sessions'][1]['accuracy_radical'] is not None

    with open(outcome.table_path) as f:
        rows = list(csv.DictReader(f))
    assert [row['classes_seen'] for row in rows] == ["2", "4"]

    echoed = validate_config(os.path.join(config.output, ECHO_NAME))
    assert echoed == config
    assert os.path.isfile(checkpoint_path(config.output, 2))


def test_single_task_run_has_no_radical(tiny_dataset):
    config = config_for(tiny_dataset, stream__tasks=1)
    outcome = run_experiment(config)
    with open(outcome.report_path) as f:
        report = json.load(f)
    session = report['sessions'][0]
    assert session['accuracy_radical'] is None
    assert session['accuracy'] == session['accuracy_conservative']
    assert session['gate_rate'] == 0.0


def test_reports_are_byte_identical_across_runs(tiny_dataset):
    config = config_for(tiny_dataset)
    first = read_bytes(run_experiment(config).report_path)
    second = read_bytes(run_experiment(config).report_path)
    assert first == second


def test_resume_matches_uninterrupted_run(tiny_dataset):
    full = run_experiment(config_for(tiny_dataset))
    resumed_config = config_for(tiny_dataset, experiment__output=os.path.join(tiny_dataset, "b"))
    resumed = run_experiment(resumed_config,
                             resume=checkpoint_path(os.path.join(tiny_dataset, "out"), 1))
    assert resumed.result.sessions == full.result.sessions
    assert resumed.result.accuracies == full.result.accuracies


def test_resume_rejects_other_configuration(tiny_dataset):
    run_experiment(config_for(tiny_dataset))
    other = config_for(tiny_dataset, experiment__seed=8)
    with pytest.raises(CheckpointError):
        run_experiment(other, resume=checkpoint_path(other.output, 1))


def test_fingerprint_ignores_output_location(tiny_dataset):
    config = config_for(tiny_dataset)
    moved = config_for(tiny_dataset, experiment__output="/tmp/elsewhere")
    assert config_fingerprint(config) == config_fingerprint(moved)
    assert config_fingerprint(config) != config_fingerprint(config_for(tiny_dataset,
                                                                        fusion__lambda=1.0))


def test_emit_predictions(tiny_dataset):
    config = config_for(tiny_dataset, experiment__emit_predictions="true")
    run_experiment(config)
    with open(os.path.join(config.output, "predictions_session2.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 12
    assert set(rows[0]) >= {"sample_id", "y_star", "gate", "d_sym"}


def test_width_mismatch_names_operation(tiny_dataset):
    config = config_for(tiny_dataset)
    config.backbone.input_dim = 17
    with pytest.raises(ShapeError) as info:
        run_experiment(config)
    assert info.value.context['operation'] == "load_dataset"


@pytest.mark.parametrize("method", ["finetune", "joint"])
def test_baseline_methods(tiny_dataset, method):
    outcome = run_experiment(config_for(tiny_dataset, experiment__method=method))
    with open(outcome.report_path) as f:
        report = json.load(f)
    assert report['method'] == method
    assert (report['acc_avg'] is None) == (method == "joint")


def test_session_line():
    record = {'classes_seen': 4, 'accuracy': 87.5, 'accuracy_conservative': 80.0,
              'accuracy_radical': None, 'gate_rate': 0.25}
    assert session_line(2, 5, record) == \
        "✓ Session 2/5  classes=4  acc=87.50  cons=80.00  gate=0.250"


def test_cli_run(tiny_dataset, capsys):
    code = main(["-q", "run", os.path.join(tiny_dataset, "experiment.ini"), "--seed", "2"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "✓ Session 1/2" in out and "✓ Session 2/2" in out
    assert "Acc_Last:" in out


def test_cli_validate(tiny_dataset, capsys):
    assert main(["validate", os.path.join(tiny_dataset, "experiment.ini")]) == EXIT_OK
    assert "is valid" in capsys.readouterr().out


def test_cli_invalid_config_exits_two(tmp_path, capsys):
    directory = str(tmp_path)
    path = write_tiny_config(directory, extra="\n[fusion]\ntau = 0\n")
    assert main(["-q", "validate", path]) == EXIT_CONFIG
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == "invalid_config"
    assert any(error.startswith("FusionConfig.tau") for error in record['errors'])


def test_cli_runtime_failure_exits_one(tiny_dataset, capsys):
    missing = os.path.join(tiny_dataset, "nothing.crclck")
    code = main(["-q", "run", os.path.join(tiny_dataset, "experiment.ini"), "--resume", missing])
    assert code == EXIT_FAILURE
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == "checkpoint_error"


def test_resume_requires_engine_state(tiny_dataset, capsys):
    config = config_for(tiny_dataset)
    path = os.path.join(tiny_dataset, "partial.crclck")
    save_checkpoint(path, {'sessions': [], 'config_fingerprint': config_fingerprint(config)}, {})
    with pytest.raises(CheckpointError) as info:
        run_experiment(config, resume=path)
    assert "engine" in info.value.message

    code = main(["-q", "run", os.path.join(tiny_dataset, "experiment.ini"), "--resume", path])
    assert code == EXIT_FAILURE
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == "checkpoint_error"


def test_resume_rejects_malformed_engine_state(tiny_dataset):
    config = config_for(tiny_dataset)
    path = os.path.join(tiny_dataset, "hollow.crclck")
    save_checkpoint(path, {'engine': {}, 'sessions': [],
                           'config_fingerprint': config_fingerprint(config)}, {})
    with pytest.raises(CheckpointError) as info:
        run_experiment(config, resume=path)
    assert info.value.message.startswith("incomplete checkpoint")


def test_shuffled_order_follows_seeded_partition(tiny_dataset):
    config = config_for(tiny_dataset, stream__order="shuffled")
    outcome = run_experiment(config)
    expected = split_tasks(4, 2, order="shuffled", seed=config.seed)
    assert outcome.spec == expected
    with open(outcome.report_path) as f:
        report = json.load(f)
    assert report['tasks'] == [[str(c) for c in group] for group in expected.class_partition]
