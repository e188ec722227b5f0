"""
Stream Module
Dataset ingestion, class-incremental task splits, evaluation and metrics

Datasets are described by a small manifest (key=value lines) that points at
IDX tensors, CSV rows or CRCLEM1 embedding files. Classes are partitioned
into disjoint task groups; a TaskStream relabels classes in incremental
order so session t always covers labels [0, |Y_t|) cumulatively.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.preprocessing import StandardScaler

from .backbone import FrozenBackbone, read_embeddings
from .errors import (EmptyEvalError, InvalidInputError, InvalidParameterError,
                     InvalidSplitError, LabelGapError, ParseError)
from .learners import predict_head, train_finetune, train_session_one

if TYPE_CHECKING:
    from .config import ExperimentConfig

logger = logging.getLogger(__name__)

ORDERS = ("shuffled", "reversed", "given")
REVERSED_ORDERS = {"shuffled": "reversed", "reversed": "shuffled"}
FORMATS = ("idx", "csv", "crclem")
MANIFEST_KEYS = ("train_images", "train_labels", "test_images", "test_labels",
                 "format", "image_shape", "class_names")
REQUIRED_KEYS = ("train_images", "train_labels", "test_images", "test_labels")

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {dtype.str: code for code, dtype in IDX_DTYPES.items()}


@dataclass(frozen=True)
class Dataset:
    """Normalized train/test splits; sample ids are unique across both splits"""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray
    class_names: Tuple[str, ...]
    image_shape: Optional[Tuple[int, int, int]] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


@dataclass
class TaskData:
    """One split of one session: inputs, incremental labels, sample ids"""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    image_shape: Optional[Tuple[int, int, int]] = None

    def __len__(self) -> int:
        return len(self.y)

    def canonical(self) -> "TaskData":
        """The same samples sorted by id (self when already sorted)"""
        if len(self.ids) < 2 or np.all(self.ids[1:] >= self.ids[:-1]):
            return self
        order = np.argsort(self.ids, kind="stable")
        return TaskData(self.x[order], self.y[order], self.ids[order], self.image_shape)


@dataclass(frozen=True)
class TaskSpec:
    """Disjoint class groups Y_1..Y_T (original class ids) in session order"""

    tasks: int
    class_partition: Tuple[Tuple[int, ...], ...]
    order: str = "given"

    @property
    def sizes(self) -> List[int]:
        return [len(group) for group in self.class_partition]

    @property
    def class_order(self) -> List[int]:
        return [c for group in self.class_partition for c in group]

    def reversed(self) -> "TaskSpec":
        """Same groups in reverse session order"""
        return TaskSpec(self.tasks, tuple(reversed(self.class_partition)),
                        REVERSED_ORDERS.get(self.order, self.order))


@dataclass
class SessionResult:
    """Per-session accuracies (percent) and the per-session report records"""

    method: str
    accuracies: List[float] = field(default_factory=list)
    sessions: List[Dict] = field(default_factory=list)
    final_only: bool = False

    @property
    def acc_avg(self) -> Optional[float]:
        if self.final_only:
            return None
        return metrics(self.accuracies)[0]

    @property
    def acc_last(self) -> float:
        return metrics(self.accuracies)[1]


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def read_manifest(path: str) -> Dict[str, str]:
    """
    Parse a key=value manifest; file paths are resolved against its directory

    Args:
        path: Manifest file

    Returns:
        Dictionary of manifest entries
    """
    if not os.path.isfile(path):
        raise InvalidInputError(f"manifest not found: {path}", path=path)

    entries = {}
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", path=path, line=number)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in MANIFEST_KEYS:
                raise ParseError(f"unknown manifest key {key!r}", path=path, line=number)
            entries[key] = value

    missing = [key for key in REQUIRED_KEYS if key not in entries]
    if missing:
        raise ParseError(f"manifest is missing {', '.join(missing)}", path=path)
    for key in REQUIRED_KEYS:
        entries[key] = os.path.join(base, entries[key])
    entries.setdefault("format", "idx")
    if entries["format"] not in FORMATS:
        raise ParseError(f"format must be one of {', '.join(FORMATS)}, got {entries['format']!r}",
                         path=path)
    return entries


def read_idx(path: str) -> np.ndarray:
    """
    Read an IDX tensor (big-endian header and data)

    Args:
        path: IDX file

    Returns:
        Array with the header's dims and dtype (native byte order)
    """
    payload = _read_bytes(path)
    if len(payload) < 4 or payload[0] != 0 or payload[1] != 0:
        raise ParseError("bad IDX magic", path=path, offset=0)
    code, ndim = payload[2], payload[3]
    if code not in IDX_DTYPES:
        raise ParseError(f"unknown IDX dtype code 0x{code:02X}", path=path, offset=2)
    if len(payload) < 4 + 4 * ndim:
        raise ParseError("truncated IDX header", path=path, offset=4)

    dims = tuple(int(d) for d in np.frombuffer(payload, dtype=">u4", count=ndim, offset=4))
    dtype = IDX_DTYPES[code]
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise ParseError(f"IDX body has {len(payload) - offset} bytes, header implies {expected}",
                         path=path, offset=offset)
    return np.frombuffer(payload, dtype=dtype, offset=offset).reshape(dims).astype(
        dtype.newbyteorder("="))


def write_idx(path: str, array: np.ndarray):
    """Write an array as an IDX tensor"""
    array = np.asarray(array)
    big_endian = array.dtype.newbyteorder(">")
    code = IDX_CODES.get(big_endian.str)
    if code is None:
        raise InvalidInputError(f"dtype {array.dtype} has no IDX code")
    with open(path, "wb") as handle:
        handle.write(bytes([0, 0, code, array.ndim]))
        handle.write(np.array(array.shape, dtype=">u4").tobytes())
        handle.write(np.ascontiguousarray(array, dtype=big_endian).tobytes())


def read_csv_rows(path: str) -> np.ndarray:
    """Comma-separated numeric rows, one sample per line"""
    rows = []
    width = None
    with open(_existing(path)) as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                values = [float(v) for v in line.split(",")]
            except ValueError:
                raise ParseError(f"non-numeric value in {line!r}", path=path, line=number)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(f"expected {width} values, got {len(values)}",
                                 path=path, line=number)
            rows.append(values)
    return np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)


def read_csv_labels(path: str) -> np.ndarray:
    labels = []
    with open(_existing(path)) as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise ParseError(f"label must be an integer, got {line!r}", path=path, line=number)
    return np.array(labels, dtype=np.int64)


def load_dataset(manifest_path: str, max_train_per_class: int = 0) -> Dataset:
    """
    Load and normalize the dataset a manifest describes

    Integer (unsigned byte) inputs are scaled by 1/255, others min-max scaled
    with train-split bounds. Images are then standardized with a scalar
    train mean/std, vectors per feature.

    Args:
        manifest_path: Manifest file
        max_train_per_class: Keep only the first N train samples of each class
            in file order (0 = all)

    Returns:
        Dataset
    """
    entries = read_manifest(manifest_path)
    fmt = entries["format"]

    if fmt == "idx":
        raw_train, raw_test = read_idx(entries["train_images"]), read_idx(entries["test_images"])
        y_train, y_test = read_idx(entries["train_labels"]), read_idx(entries["test_labels"])
    else:
        reader = read_csv_rows if fmt == "csv" else read_embeddings
        raw_train = reader(_existing(entries["train_images"]))
        raw_test = reader(_existing(entries["test_images"]))
        y_train = read_csv_labels(entries["train_labels"])
        y_test = read_csv_labels(entries["test_labels"])

    image_shape = _image_shape(entries.get("image_shape"), raw_train, manifest_path)
    x_train = raw_train.reshape(len(raw_train), -1)
    x_test = raw_test.reshape(len(raw_test), -1)
    y_train = np.asarray(y_train, dtype=np.int64).ravel()
    y_test = np.asarray(y_test, dtype=np.int64).ravel()

    for split, x, y in (("train", x_train, y_train), ("test", x_test, y_test)):
        if len(x) != len(y):
            raise ParseError(f"{split} split has {len(x)} samples but {len(y)} labels",
                             path=manifest_path)
    if x_train.shape[1] != x_test.shape[1]:
        raise ParseError(f"train width {x_train.shape[1]} differs from test width "
                         f"{x_test.shape[1]}", path=manifest_path)
    if image_shape is not None and int(np.prod(image_shape)) != x_train.shape[1]:
        raise ParseError(f"image_shape {image_shape} does not match sample width "
                         f"{x_train.shape[1]}", path=manifest_path)

    num_classes = _check_labels(y_train, y_test)

    if max_train_per_class > 0:
        keep = _first_per_class(y_train, max_train_per_class)
        x_train, y_train = x_train[keep], y_train[keep]

    x_train, x_test = _normalize(x_train, x_test, raw_train.dtype == np.uint8, image_shape)

    names = entries.get("class_names")
    class_names = tuple(n.strip() for n in names.split(",")) if names else tuple(
        str(c) for c in range(num_classes))
    if len(class_names) != num_classes:
        raise ParseError(f"{len(class_names)} class names for {num_classes} classes",
                         path=manifest_path)

    logger.info("loaded %s: %d train / %d test samples, %d classes, width %d",
                manifest_path, len(y_train), len(y_test), num_classes, x_train.shape[1])
    return Dataset(
        x_train=x_train, y_train=y_train, x_test=x_test, y_test=y_test,
        train_ids=np.arange(len(y_train), dtype=np.int64),
        test_ids=np.arange(len(y_train), len(y_train) + len(y_test), dtype=np.int64),
        class_names=class_names, image_shape=image_shape,
    )


def _read_bytes(path: str) -> bytes:
    with open(_existing(path), "rb") as handle:
        return handle.read()


def _existing(path: str) -> str:
    if not os.path.isfile(path):
        raise InvalidInputError(f"file not found: {path}", path=path)
    return path


def _image_shape(text: Optional[str], raw: np.ndarray,
                 manifest_path: str) -> Optional[Tuple[int, int, int]]:
    if text:
        try:
            dims = tuple(int(v) for v in text.lower().split("x"))
        except ValueError:
            dims = ()
        if len(dims) != 3 or min(dims) < 1:
            raise ParseError(f"image_shape must be HxWxC, got {text!r}", path=manifest_path)
        return dims
    if raw.ndim == 3:
        return (raw.shape[1], raw.shape[2], 1)
    if raw.ndim == 4:
        return tuple(raw.shape[1:])
    return None


def _check_labels(y_train: np.ndarray, y_test: np.ndarray) -> int:
    if len(y_train) == 0:
        raise InvalidInputError("train split is empty")
    if y_train.min() < 0:
        raise LabelGapError(f"negative label {int(y_train.min())} in train split")
    num_classes = int(y_train.max()) + 1
    missing = sorted(set(range(num_classes)) - set(np.unique(y_train).tolist()))
    if missing:
        raise LabelGapError(f"train labels are not dense, missing {missing}", missing=missing)
    if len(y_test) and (y_test.min() < 0 or y_test.max() >= num_classes):
        raise LabelGapError(f"test labels fall outside [0, {num_classes})")
    return num_classes


def _first_per_class(labels: np.ndarray, limit: int) -> np.ndarray:
    seen: Dict[int, int] = {}
    keep = []
    for index, label in enumerate(labels.tolist()):
        if seen.get(label, 0) < limit:
            seen[label] = seen.get(label, 0) + 1
            keep.append(index)
    return np.array(keep, dtype=np.int64)


def _normalize(x_train: np.ndarray, x_test: np.ndarray, unsigned_byte: bool,
               image_shape) -> Tuple[np.ndarray, np.ndarray]:
    x_train = x_train.astype(np.float64)
    x_test = x_test.astype(np.float64)
    if unsigned_byte:
        x_train, x_test = x_train / 255.0, x_test / 255.0
    else:
        low, high = x_train.min(), x_train.max()
        span = high - low if high > low else 1.0
        x_train, x_test = (x_train - low) / span, (x_test - low) / span

    if image_shape is not None:
        mean, std = x_train.mean(), x_train.std()
        std = std if std > 0 else 1.0
        return (x_train - mean) / std, (x_test - mean) / std

    scaler = StandardScaler().fit(x_train)
    return scaler.transform(x_train), scaler.transform(x_test) if len(x_test) else x_test


# ---------------------------------------------------------------------------
# Task splits
# ---------------------------------------------------------------------------

def split_tasks(num_classes: int, tasks: int, order: str = "shuffled", seed: int = 0) -> TaskSpec:
    """
    Partition classes into disjoint task groups

    Group sizes are num_classes // tasks with the remainder going to the
    earliest tasks.

    Args:
        num_classes: Number of classes K
        tasks: Number of tasks T (<= K)
        order: shuffled (class ids permuted with the seed before grouping),
            reversed (the shuffled groups in reverse session order) or given
            (contiguous class ids in file order)
        seed: Seed for the class permutation

    Returns:
        TaskSpec
    """
    if order not in ORDERS:
        raise InvalidParameterError(f"order must be one of {', '.join(ORDERS)}, got {order!r}")
    if tasks < 1 or num_classes < 1:
        raise InvalidSplitError(f"need at least one class and one task, got K={num_classes}, "
                                f"T={tasks}")
    if tasks > num_classes:
        raise InvalidSplitError(f"cannot split {num_classes} classes into {tasks} tasks")

    classes = list(range(num_classes))
    if order != "given":
        classes = np.random.default_rng(seed).permutation(num_classes).tolist()

    base, remainder = divmod(num_classes, tasks)
    groups, start = [], 0
    for index in range(tasks):
        size = base + (1 if index < remainder else 0)
        groups.append(tuple(int(c) for c in classes[start:start + size]))
        start += size

    if order == "reversed":
        return TaskSpec(tasks, tuple(groups), "shuffled").reversed()
    return TaskSpec(tasks=tasks, class_partition=tuple(groups), order=order)


class TaskStream:
    """
    Session-by-session view of a dataset under a task split

    Original class ids are relabelled in the order they are introduced.
    """

    def __init__(self, dataset: Dataset, spec: TaskSpec):
        covered = sorted(spec.class_order)
        if covered != list(range(dataset.num_classes)):
            raise InvalidSplitError("task groups must cover every class exactly once")
        self.dataset = dataset
        self.spec = spec
        self.remap = np.empty(dataset.num_classes, dtype=np.int64)
        self.remap[spec.class_order] = np.arange(dataset.num_classes)
        self._boundaries = np.cumsum([0] + spec.sizes)

    @property
    def tasks(self) -> int:
        return self.spec.tasks

    def classes_seen(self, t: int) -> int:
        self._check_session(t)
        return int(self._boundaries[t])

    def session(self, t: int) -> TaskData:
        """Training split of session t (1-based) with incremental labels"""
        self._check_session(t)
        labels = self.remap[self.dataset.y_train]
        mask = (labels >= self._boundaries[t - 1]) & (labels < self._boundaries[t])
        return TaskData(self.dataset.x_train[mask], labels[mask], self.dataset.train_ids[mask],
                        self.dataset.image_shape)

    def cumulative_test(self, t: int) -> TaskData:
        """Test samples of every class introduced up to session t"""
        self._check_session(t)
        labels = self.remap[self.dataset.y_test]
        mask = labels < self._boundaries[t]
        return TaskData(self.dataset.x_test[mask], labels[mask], self.dataset.test_ids[mask],
                        self.dataset.image_shape)

    def class_names(self, t: int) -> List[str]:
        return [self.dataset.class_names[c] for c in self.spec.class_order[:self.classes_seen(t)]]

    def _check_session(self, t: int):
        if not 1 <= t <= self.tasks:
            raise InvalidParameterError(f"session must lie in [1, {self.tasks}], got {t}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(predict_fn: Callable[[np.ndarray], np.ndarray], test: TaskData) -> float:
    """
    Top-1 accuracy in percent over a test split

    Args:
        predict_fn: Maps an input batch to predicted labels
        test: Cumulative test split

    Returns:
        Accuracy in [0, 100]
    """
    if len(test) == 0:
        raise EmptyEvalError("test split is empty")
    predicted = np.asarray(predict_fn(test.x))
    return accuracy(predicted, test.y)


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise EmptyEvalError("no labels to score")
    return 100.0 * float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def metrics(acc_list: Sequence[float]) -> Tuple[float, float]:
    """(Acc_Avg, Acc_Last) of a list of session accuracies"""
    if len(acc_list) == 0:
        raise EmptyEvalError("no session accuracies")
    return float(np.mean(acc_list)), float(acc_list[-1])


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def run_baseline_finetune(stream: TaskStream, config: "ExperimentConfig",
                          progress: bool = False) -> SessionResult:
    """
    Sequential finetuning of one adapter + CE-head learner (lower bound)

    No consolidation, analytic classifier or fusion; evaluated on the same
    cumulative test splits as Bi-CRCL.

    Args:
        stream: Task stream
        config: Experiment configuration (backbone, train, seed)
        progress: Show progress bars

    Returns:
        SessionResult
    """
    backbone = FrozenBackbone.from_config(config.backbone)
    rng = np.random.default_rng(config.seed)
    result = SessionResult(method="finetune")
    state = None

    for t in range(1, stream.tasks + 1):
        data = stream.session(t)
        if state is None:
            state = train_session_one(backbone, data, config.train, config.backbone.adapter_dim,
                                      rng=rng, progress=progress)
        else:
            train_finetune(backbone, state, data, config.train, rng=rng, progress=progress)
        acc = evaluate(lambda x: predict_head(backbone, state, x), stream.cumulative_test(t))
        result.accuracies.append(acc)
        result.sessions.append({'session': t, 'accuracy': acc,
                                'classes_seen': stream.classes_seen(t)})
        logger.info("finetune session %d/%d accuracy %.2f", t, stream.tasks, acc)

    return result


def run_baseline_joint(dataset: Dataset, config: "ExperimentConfig",
                       progress: bool = False) -> SessionResult:
    """
    One learner trained on all classes at once (upper bound); final accuracy only
    """
    single = TaskStream(dataset, split_tasks(dataset.num_classes, 1, order="given"))
    result = run_baseline_finetune(single, config, progress=progress)
    result.method = "joint"
    result.final_only = True
    return result
