"""
Experiment Runner
Loads the dataset, runs the selected method session by session and writes
the JSON report, CSV session table, config echo and per-session checkpoints
"""

import csv
import hashlib
import json
import logging
import os
import subprocess
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from .backbone import FrozenBackbone
from .checkpoint import load_checkpoint, require_keys, save_checkpoint
from .config import ExperimentConfig
from .engine import BiCRCL
from .errors import CheckpointError, CRCLError, ShapeError
from .inference import write_prediction_records
from .stream import (Dataset, SessionResult, TaskSpec, TaskStream, load_dataset,
                     run_baseline_finetune, run_baseline_joint, split_tasks)

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
TABLE_NAME = "sessions.csv"
ECHO_NAME = "config_echo.ini"
TABLE_FIELDS = ("session", "classes_seen", "accuracy", "accuracy_conservative",
                "accuracy_radical", "gate_rate", "divergence_mean", "divergence_std",
                "test_samples")


@dataclass
class ExperimentResult:
    """Outcome of one run and where its artifacts went"""

    result: SessionResult
    spec: TaskSpec
    report_path: str
    table_path: str


def git_describe() -> str:
    """git describe of the source tree, or 'unknown' outside a repository"""
    try:
        completed = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    described = completed.stdout.strip()
    return described if completed.returncode == 0 and described else "unknown"


def config_fingerprint(config: ExperimentConfig) -> str:
    """Hash of every setting that influences results (output location excluded)"""
    settings = config.to_dict()
    settings['experiment'].pop('output', None)
    settings['experiment'].pop('emit_predictions', None)
    return hashlib.sha256(json.dumps(settings, sort_keys=True).encode("utf-8")).hexdigest()


def checkpoint_path(output: str, session: int) -> str:
    return os.path.join(output, f"checkpoint_session{session}.crclck")


def run_experiment(config: ExperimentConfig, resume: Optional[str] = None,
                   progress: bool = False,
                   on_session: Optional[Callable[[int, int, Dict], None]] = None
                   ) -> ExperimentResult:
    """
    Run one configured experiment end to end

    Args:
        config: Validated experiment configuration
        resume: Checkpoint to continue from (bicrcl only)
        progress: Show progress bars
        on_session: Called as on_session(t, T, record) after every session

    Returns:
        ExperimentResult
    """
    operation = "load_dataset"
    try:
        dataset = load_dataset(config.stream.manifest, config.stream.max_train_per_class)
        if dataset.input_dim != config.backbone.input_dim:
            raise ShapeError(f"dataset width {dataset.input_dim} does not match "
                             f"backbone input_dim {config.backbone.input_dim}")
        operation = "split_tasks"
        spec = split_tasks(dataset.num_classes, config.stream.tasks, config.stream.order,
                           seed=config.seed)
    except CRCLError as error:
        raise error.with_context(operation=operation)

    os.makedirs(config.output, exist_ok=True)
    stream = TaskStream(dataset, spec)
    logger.info("method=%s tasks=%s order=%s", config.method, spec.sizes, spec.order)

    if config.method == "bicrcl":
        result = _run_bicrcl(config, stream, resume, progress, on_session)
    else:
        try:
            if config.method == "finetune":
                result = run_baseline_finetune(stream, config, progress=progress)
            else:
                result = run_baseline_joint(dataset, config, progress=progress)
        except CRCLError as error:
            raise error.with_context(operation=f"run_baseline_{config.method}")
        if on_session is not None:
            for record in result.sessions:
                on_session(record['session'], len(result.sessions), record)

    return _write_reports(config, dataset, spec, result)


def _run_bicrcl(config: ExperimentConfig, stream: TaskStream, resume: Optional[str],
                progress: bool, on_session) -> SessionResult:
    backbone = FrozenBackbone.from_config(config.backbone)
    engine = BiCRCL(backbone, config, progress=progress)
    result = SessionResult(method="bicrcl")
    fingerprint = config_fingerprint(config)

    if resume:
        header, arrays = load_checkpoint(resume)
        require_keys(header, ("engine", "sessions", "config_fingerprint"), resume)
        if header['config_fingerprint'] != fingerprint:
            raise CheckpointError("checkpoint was written by a different configuration",
                                  path=resume)
        try:
            engine.load_state_dict(header['engine'], arrays)
            result.sessions = list(header['sessions'])
            result.accuracies = [record['accuracy'] for record in result.sessions]
        except (KeyError, TypeError, ValueError) as error:
            raise CheckpointError(f"incomplete checkpoint: missing or malformed {error}",
                                  path=resume)
        logger.info("resumed after session %d from %s", engine.session, resume)

    for t in range(engine.session + 1, stream.tasks + 1):
        operation = "learn_session"
        try:
            engine.learn_session(stream.session(t))
            operation = "evaluate"
            record, predictions = engine.evaluate(stream.cumulative_test(t))
            record = {'session': t, **record}
            result.sessions.append(record)
            result.accuracies.append(record['accuracy'])

            operation = "checkpoint"
            engine_header, arrays = engine.state_dict()
            save_checkpoint(checkpoint_path(config.output, t), {
                'engine': engine_header,
                'sessions': result.sessions,
                'config_fingerprint': fingerprint,
            }, arrays)
            if config.emit_predictions:
                write_prediction_records(
                    os.path.join(config.output, f"predictions_session{t}.csv"), predictions)
        except CRCLError as error:
            raise error.with_context(session=t, operation=operation)

        logger.info("session %d/%d accuracy %.2f", t, stream.tasks, record['accuracy'])
        if on_session is not None:
            on_session(t, stream.tasks, record)

    return result


def _write_reports(config: ExperimentConfig, dataset: Dataset, spec: TaskSpec,
                   result: SessionResult) -> ExperimentResult:
    report = {
        'method': result.method,
        'seed': config.seed,
        'git_describe': git_describe(),
        'config': config.to_dict(),
        'tasks': [[dataset.class_names[c] for c in group] for group in spec.class_partition],
        'sessions': result.sessions,
        'accuracies': result.accuracies,
        'acc_avg': result.acc_avg,
        'acc_last': result.acc_last,
    }
    report_path = os.path.join(config.output, REPORT_NAME)
    with open(report_path, "w") as handle:
        json.dump(report, handle, sort_keys=True, indent=2)
        handle.write("\n")

    table_path = os.path.join(config.output, TABLE_NAME)
    with open(table_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TABLE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for record in result.sessions:
            writer.writerow({key: "" if record.get(key) is None else record[key]
                             for key in TABLE_FIELDS})

    with open(os.path.join(config.output, ECHO_NAME), "w") as handle:
        handle.write(config.to_ini())

    return ExperimentResult(result=result, spec=spec, report_path=report_path,
                            table_path=table_path)


def session_line(t: int, total: int, record: Dict) -> str:
    """One-line stdout summary of a finished session"""
    parts = [f"✓ Session {t}/{total}", f"classes={record['classes_seen']}",
             f"acc={record['accuracy']:.2f}"]
    if record.get('accuracy_conservative') is not None:
        parts.append(f"cons={record['accuracy_conservative']:.2f}")
    if record.get('accuracy_radical') is not None:
        parts.append(f"rad={record['accuracy_radical']:.2f}")
    if 'gate_rate' in record:
        parts.append(f"gate={record['gate_rate']:.3f}")
    return "  ".join(parts)


def summary_lines(result: SessionResult) -> List[str]:
    lines = [f"Method:   {result.method}"]
    if result.acc_avg is not None:
        lines.append(f"Acc_Avg:  {result.acc_avg:.2f}")
    lines.append(f"Acc_Last: {result.acc_last:.2f}")
    return lines
