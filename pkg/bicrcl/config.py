"""
Configuration
INI experiment files mapped onto the engine's config dataclasses

Each [section] maps to one dataclass. validate_config collects every
violation (parse failures, unknown keys, range checks, missing paths) and
raises them together as one ConfigError. to_ini() writes the canonical echo
that parses back to an equal config.
"""

import configparser
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .analytic import AnalyticConfig
from .backbone import BackboneConfig
from .errors import ConfigError
from .inference import FusionConfig
from .learners import ConsolidationConfig, TrainConfig
from .stream import ORDERS

METHODS = ("bicrcl", "finetune", "joint")


@dataclass
class StreamConfig:
    """Dataset manifest and task split"""

    manifest: str = ""
    tasks: int = 5
    order: str = "shuffled"
    max_train_per_class: int = 0

    def violations(self, prefix: str = "StreamConfig") -> List[str]:
        errors = []
        if not self.manifest:
            errors.append(f"{prefix}.manifest: required")
        if self.tasks < 1:
            errors.append(f"{prefix}.tasks: must be >= 1, got {self.tasks}")
        if self.order not in ORDERS:
            errors.append(f"{prefix}.order: must be one of {', '.join(ORDERS)}, got {self.order!r}")
        if self.max_train_per_class < 0:
            errors.append(f"{prefix}.max_train_per_class: must be >= 0, "
                          f"got {self.max_train_per_class}")
        return errors


@dataclass
class ExperimentConfig:
    """Everything one run needs; defaults are the published settings"""

    method: str = "bicrcl"
    seed: int = 0
    output: str = "results"
    emit_predictions: bool = False
    eval_batch_size: int = 256
    stream: StreamConfig = field(default_factory=StreamConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    consolidation: ConsolidationConfig = field(default_factory=ConsolidationConfig)
    analytic: AnalyticConfig = field(default_factory=AnalyticConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def violations(self) -> List[str]:
        errors = []
        if self.method not in METHODS:
            errors.append(f"ExperimentConfig.method: must be one of {', '.join(METHODS)}, "
                          f"got {self.method!r}")
        if self.seed < 0:
            errors.append(f"ExperimentConfig.seed: must be >= 0, got {self.seed}")
        if not self.output:
            errors.append("ExperimentConfig.output: required")
        if self.eval_batch_size < 1:
            errors.append(f"ExperimentConfig.eval_batch_size: must be >= 1, "
                          f"got {self.eval_batch_size}")
        errors.extend(self.stream.violations())
        errors.extend(self.backbone.violations())
        errors.extend(self.train.violations())
        errors.extend(self.consolidation.violations())
        errors.extend(self.analytic.violations(self.backbone.embed_dim))
        errors.extend(self.fusion.violations())
        return errors

    def to_ini(self) -> str:
        """Canonical INI echo (every key, fixed order)"""
        lines = []
        for section, keys in SCHEMA.items():
            owner = _owner(self, section)
            lines.append(f"[{section}]")
            for key, (attr, _, fmt) in keys.items():
                lines.append(f"{key} = {fmt(getattr(owner, attr))}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> Dict[str, Dict[str, str]]:
        """Echo as nested string mapping (used in JSON reports)"""
        return {section: {key: fmt(getattr(_owner(self, section), attr))
                          for key, (attr, _, fmt) in keys.items()}
                for section, keys in SCHEMA.items()}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
        raise ValueError(text)
    return configparser.ConfigParser.BOOLEAN_STATES[lowered]


def _format_bool(value: bool) -> str:
    return "true" if value else "false"


def _parse_beta(text: str) -> Optional[float]:
    return None if text.strip().lower() == "auto" else float(text)


def _format_beta(value: Optional[float]) -> str:
    return "auto" if value is None else repr(float(value))


def _parse_grid(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _format_grid(values: Tuple[float, ...]) -> str:
    return ", ".join(repr(float(v)) for v in values)


def _format_float(value: float) -> str:
    return repr(float(value))


Field = Tuple[str, Callable[[str], object], Callable[[object], str]]
INT: Tuple[Callable, Callable] = (int, str)
FLOAT: Tuple[Callable, Callable] = (float, _format_float)
TEXT: Tuple[Callable, Callable] = (str.strip, str)
BOOL: Tuple[Callable, Callable] = (_parse_bool, _format_bool)

SCHEMA: Dict[str, Dict[str, Field]] = {
    "experiment": {
        "method": ("method", *TEXT),
        "seed": ("seed", *INT),
        "output": ("output", *TEXT),
        "emit_predictions": ("emit_predictions", *BOOL),
        "eval_batch_size": ("eval_batch_size", *INT),
    },
    "stream": {
        "manifest": ("manifest", *TEXT),
        "tasks": ("tasks", *INT),
        "order": ("order", *TEXT),
        "max_train_per_class": ("max_train_per_class", *INT),
    },
    "backbone": {
        "input_dim": ("input_dim", *INT),
        "hidden_dim": ("hidden_dim", *INT),
        "embed_dim": ("embed_dim", *INT),
        "num_blocks": ("num_blocks", *INT),
        "adapter_dim": ("adapter_dim", *INT),
        "seed": ("seed", *INT),
        "weights_path": ("weights_path", *TEXT),
    },
    "train": {
        "batch_size": ("batch_size", *INT),
        "epochs_first": ("epochs_first", *INT),
        "epochs_later": ("epochs_later", *INT),
        "lr_init": ("lr_init", *FLOAT),
        "momentum": ("momentum", *FLOAT),
        "schedule": ("schedule", *TEXT),
        "augment": ("augment", *BOOL),
        "domain_alignment": ("domain_alignment", *BOOL),
        "logit_scale": ("logit_scale", *FLOAT),
        "max_grad_norm": ("max_grad_norm", *FLOAT),
    },
    "consolidation": {
        "alpha": ("alpha", *FLOAT),
        "forward_transfer": ("forward_transfer", *BOOL),
    },
    "analytic": {
        "expansion_dim": ("expansion_dim", *INT),
        "beta": ("beta", _parse_beta, _format_beta),
        "beta_grid": ("beta_grid", _parse_grid, _format_grid),
        "cv_folds": ("cv_folds", *INT),
    },
    "fusion": {
        "tau": ("tau", *FLOAT),
        "lambda": ("lam", *FLOAT),
        "mode": ("mode", *TEXT),
    },
}

TYPE_NAMES = {
    "experiment": "ExperimentConfig",
    "stream": "StreamConfig",
    "backbone": "BackboneConfig",
    "train": "TrainConfig",
    "consolidation": "ConsolidationConfig",
    "analytic": "AnalyticConfig",
    "fusion": "FusionConfig",
}
PATH_KEYS = (("stream", "manifest"), ("backbone", "weights_path"))


def _owner(config: ExperimentConfig, section: str):
    return config if section == "experiment" else getattr(config, section)


def parse_config(text: str, base_dir: str = ".",
                 overrides: Optional[Dict[str, Dict[str, str]]] = None
                 ) -> Tuple[ExperimentConfig, List[str]]:
    """
    Build a config from INI text without raising on bad values

    Args:
        text: INI content
        base_dir: Directory relative paths are resolved against
        overrides: {section: {key: value}} applied on top of the file

    Returns:
        (config with defaults for anything missing or unparseable, parse errors)
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as error:
        return ExperimentConfig(), [f"ExperimentConfig: {error.message}"]

    for section, values in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for key, value in values.items():
            parser.set(section, key, str(value))

    config = ExperimentConfig()
    errors = []
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"ExperimentConfig: unknown section [{section}]")
            continue
        owner = _owner(config, section)
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                errors.append(f"{TYPE_NAMES[section]}.{key}: unknown key")
                continue
            attr, parse, _ = SCHEMA[section][key]
            try:
                value = parse(raw)
            except ValueError:
                errors.append(f"{TYPE_NAMES[section]}.{key}: cannot parse {raw!r}")
                continue
            if (section, key) in PATH_KEYS and value and not os.path.isabs(value):
                value = os.path.normpath(os.path.join(os.path.abspath(base_dir), value))
            setattr(owner, attr, value)

    return config, errors


def validate_config(path: str, overrides: Optional[Dict[str, Dict[str, str]]] = None,
                    check_paths: bool = True) -> ExperimentConfig:
    """
    Parse, apply defaults and check a config file

    Args:
        path: INI file
        overrides: Command-line overrides {section: {key: value}}
        check_paths: Require referenced files to exist

    Returns:
        ExperimentConfig (raises ConfigError listing every violation)
    """
    if not os.path.isfile(path):
        raise ConfigError([f"ExperimentConfig: config file not found: {path}"])
    with open(path) as handle:
        text = handle.read()

    config, errors = parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)),
                                  overrides=overrides)
    errors.extend(config.violations())
    if check_paths:
        for section, key in PATH_KEYS:
            value = getattr(_owner(config, section), SCHEMA[section][key][0])
            if value and not os.path.isfile(value):
                errors.append(f"{TYPE_NAMES[section]}.{key}: file not found: {value}")

    if errors:
        raise ConfigError(errors, path=path)
    return config
