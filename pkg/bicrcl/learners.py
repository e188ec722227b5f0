"""
Learners Module
Dual-learner state and the Bi-CRCL training procedure

- Domain alignment: session-1 adapter tuning of the conservative learner
- Forward transfer: radical adapters start as a copy of the conservative ones
- Radical training with L_R = CE(W_R^T phi_R) + CE(W_R^T phi_C)
- Backward consolidation: elementwise EMA of radical into conservative

Classifier heads are imprinted with normalized class prototypes when classes
arrive. The conservative head is re-imprinted at every epoch end of session 1;
the radical head is gradient-trained after imprinting, on cosine logits
s * cos(phi, w) so its loss stays bounded when a task holds a single class.
Every learner reads its task split in canonical sample-id order.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax
from tqdm import tqdm

from .augment import weak_augment
from .backbone import AdapterSet, FrozenBackbone
from .errors import (EmptyTaskError, LabelError, MissingPrototypeError, ShapeError,
                     StateError)
from .numerics import as_float_array

if TYPE_CHECKING:
    from .stream import TaskData

logger = logging.getLogger(__name__)


class Role(str, Enum):
    CONSERVATIVE = "conservative"
    RADICAL = "radical"


@dataclass
class TrainConfig:
    """SGD schedule shared by every gradient-trained session"""

    batch_size: int = 48
    epochs_first: int = 20
    epochs_later: int = 15
    lr_init: float = 0.01
    momentum: float = 0.9
    schedule: str = "cosine"
    seed: int = 0
    augment: bool = True
    domain_alignment: bool = True
    # radical head: s * cos(phi, w); 0 falls back to raw W^T phi
    logit_scale: float = 16.0
    # global gradient-norm clip per step; 0 disables
    max_grad_norm: float = 5.0

    def violations(self, prefix: str = "TrainConfig") -> List[str]:
        errors = []
        if self.batch_size < 1:
            errors.append(f"{prefix}.batch_size: must be >= 1, got {self.batch_size}")
        for name in ("epochs_first", "epochs_later"):
            if getattr(self, name) < 0:
                errors.append(f"{prefix}.{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("logit_scale", "max_grad_norm"):
            if not getattr(self, name) >= 0:
                errors.append(f"{prefix}.{name}: must be >= 0, got {getattr(self, name)}")
        if not self.lr_init > 0:
            errors.append(f"{prefix}.lr_init: must be > 0, got {self.lr_init}")
        if not 0 <= self.momentum < 1:
            errors.append(f"{prefix}.momentum: must lie in [0, 1), got {self.momentum}")
        if self.schedule not in ("cosine", "constant"):
            errors.append(f"{prefix}.schedule: must be 'cosine' or 'constant', got {self.schedule!r}")
        return errors


@dataclass
class ConsolidationConfig:
    """EMA decay for backward consolidation"""

    alpha: float = 0.99
    forward_transfer: bool = True

    def violations(self, prefix: str = "ConsolidationConfig") -> List[str]:
        if not 0.0 <= self.alpha <= 1.0:
            return [f"{prefix}.alpha: must lie in [0, 1], got {self.alpha}"]
        return []


@dataclass
class LearnerState:
    """One learner: adapters plus an expandable imprinted classifier (d x classes)"""

    adapters: AdapterSet
    classifier: np.ndarray
    role: Role
    history: List[float] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]


class CELoss:
    """Mean cross-entropy and its gradients"""

    def __init__(self, loss: float, grad_embeddings: np.ndarray, grad_classifier: np.ndarray):
        self.loss = loss
        self.grad_embeddings = grad_embeddings
        self.grad_classifier = grad_classifier


class RadicalLoss:
    """
    L_R = L_cls-R + L_CR with gradients

    There is no gradient field for the conservative embeddings; they are
    constants of the radical objective.
    """

    def __init__(self, loss: float, loss_cls: float, loss_cr: float,
                 grad_embeddings: np.ndarray, grad_classifier: np.ndarray):
        self.loss = loss
        self.loss_cls = loss_cls
        self.loss_cr = loss_cr
        self.grad_embeddings = grad_embeddings
        self.grad_classifier = grad_classifier


class SGDMomentum:
    """
    SGD with heavy-ball momentum over named numpy arrays (updated in place)
    """

    def __init__(self, params: Dict[str, np.ndarray], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float):
        for name, param in self.params.items():
            buffer = self.velocity[name]
            buffer *= self.momentum
            buffer += grads[name]
            param -= lr * buffer


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most max_norm"""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for grad in grads.values():
            grad *= factor
    return total


def learning_rate(config: TrainConfig, epoch: int, epochs: int) -> float:
    """Cosine annealing from lr_init towards 0 over one session's epochs"""
    if config.schedule == "constant" or epochs <= 0:
        return config.lr_init
    return 0.5 * config.lr_init * (1.0 + math.cos(math.pi * epoch / epochs))


def l2_normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)


def imprint_classifier(per_class: Sequence[np.ndarray],
                       class_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Imprinted weights from class embeddings

    Column j = normalize(mean(normalize(embeddings of class j))).

    Args:
        per_class: One (n_j x d) embedding array per class
        class_ids: Class ids used in error messages (default 0..n-1)

    Returns:
        Classifier columns (d x number of classes)
    """
    if class_ids is None:
        class_ids = list(range(len(per_class)))
    columns = []
    for class_id, embeddings in zip(class_ids, per_class):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or len(embeddings) == 0:
            raise MissingPrototypeError(f"class {class_id} has no embeddings to imprint",
                                        class_id=int(class_id))
        columns.append(l2_normalize(l2_normalize(embeddings).mean(axis=0)))
    if not columns:
        raise MissingPrototypeError("no classes to imprint")
    return np.stack(columns, axis=1)


def imprint_from_data(backbone: FrozenBackbone, adapters: AdapterSet, data: "TaskData",
                      classes: Sequence[int]) -> np.ndarray:
    """Imprint columns for the given labels using un-augmented task embeddings"""
    data = data.canonical()
    embeddings = backbone.embed_batched(data.x, adapters)
    return imprint_classifier([embeddings[data.y == c] for c in classes], classes)


def _normalize_backward(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray,
                        axis: int) -> np.ndarray:
    """Pull a gradient w.r.t. unit vectors back through x / ||x||"""
    radial = np.sum(grad * unit, axis=axis, keepdims=True)
    return np.divide(grad - unit * radial, norms, out=np.zeros_like(grad), where=norms > 0)


def loss_ce(classifier, embeddings, labels, scale: Optional[float] = None) -> CELoss:
    """
    Mean cross-entropy of softmax(W^T phi(x)) over a batch

    With a positive scale the logits are s * cos(phi, w_k): embeddings and
    classifier columns are L2-normalized first, so every logit lies in
    [-s, s] and the loss cannot be lowered by growing norms.

    Args:
        classifier: W (d x K)
        embeddings: Embedding batch (N x d)
        labels: Integer labels in [0, K)
        scale: Cosine logit scale s (None or 0 for raw logits)

    Returns:
        CELoss with dL/dEmbeddings (N x d) and dL/dW (d x K)
    """
    classifier = as_float_array(classifier, "classifier", ndim=2)
    embeddings = as_float_array(embeddings, "embeddings", ndim=2)
    labels = np.asarray(labels)
    if embeddings.shape[1] != classifier.shape[0]:
        raise ShapeError(
            f"embedding width {embeddings.shape[1]} does not match classifier {classifier.shape}")
    if labels.shape != (len(embeddings),):
        raise ShapeError(f"expected {len(embeddings)} labels, got shape {labels.shape}")
    num_classes = classifier.shape[1]
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    if len(labels) == 0:
        return CELoss(0.0, np.zeros_like(embeddings), np.zeros_like(classifier))

    rows = np.arange(len(labels))
    if scale:
        row_norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        col_norms = np.linalg.norm(classifier, axis=0, keepdims=True)
        inputs = l2_normalize(embeddings)
        weights = np.divide(classifier, col_norms, out=np.zeros_like(classifier),
                            where=col_norms > 0)
    else:
        inputs, weights, scale = embeddings, classifier, 1.0

    logits = scale * (inputs @ weights)
    per_sample = logsumexp(logits, axis=1) - logits[rows, labels]

    grad_logits = softmax(logits, axis=1)
    grad_logits[rows, labels] -= 1.0
    grad_logits *= scale
    grad_logits /= len(labels)

    grad_embeddings = grad_logits @ weights.T
    grad_classifier = inputs.T @ grad_logits
    if weights is not classifier:
        grad_embeddings = _normalize_backward(grad_embeddings, inputs, row_norms, axis=1)
        grad_classifier = _normalize_backward(grad_classifier, weights, col_norms, axis=0)

    return CELoss(
        loss=float(per_sample.mean()),
        grad_embeddings=grad_embeddings,
        grad_classifier=grad_classifier,
    )


def loss_radical(state: LearnerState, embeddings_radical, embeddings_conservative,
                 labels, scale: Optional[float] = None) -> RadicalLoss:
    """
    Combined radical objective CE(W_R^T phi_R, y) + CE(W_R^T phi_C, y)

    The first term reaches the radical adapters (through the embedding
    gradient) and W_R; the cross-classification term reaches W_R only.

    Args:
        state: Radical learner
        embeddings_radical: phi_R(x) (N x d)
        embeddings_conservative: phi_C(x) for the same inputs (N x d)
        labels: Integer labels
        scale: Cosine logit scale for both terms (None for raw logits)

    Returns:
        RadicalLoss
    """
    embeddings_radical = np.asarray(embeddings_radical, dtype=np.float64)
    embeddings_conservative = np.asarray(embeddings_conservative, dtype=np.float64)
    if embeddings_radical.shape != embeddings_conservative.shape:
        raise ShapeError(
            f"radical batch {embeddings_radical.shape} and conservative batch "
            f"{embeddings_conservative.shape} are not aligned")

    cls_term = loss_ce(state.classifier, embeddings_radical, labels, scale)
    cr_term = loss_ce(state.classifier, embeddings_conservative, labels, scale)
    return RadicalLoss(
        loss=cls_term.loss + cr_term.loss,
        loss_cls=cls_term.loss,
        loss_cr=cr_term.loss,
        grad_embeddings=cls_term.grad_embeddings,
        grad_classifier=cls_term.grad_classifier + cr_term.grad_classifier,
    )


def _run_epochs(state: LearnerState, data: "TaskData", config: TrainConfig, epochs: int,
                rng: np.random.Generator,
                batch_step: Callable[[np.ndarray, np.ndarray], Tuple[float, Dict[str, np.ndarray]]],
                train_classifier: bool,
                epoch_end: Optional[Callable[[], None]] = None,
                progress: bool = False):
    """
    Shared SGD loop: seeded shuffling, weak augmentation, gradient clipping,
    cosine schedule

    data must already be in canonical id order (TaskData.canonical) so the
    result depends only on the sample set and the generator state.
    """
    params = dict(state.adapters.parameters())
    if train_classifier:
        params["classifier"] = state.classifier
    optimizer = SGDMomentum(params, momentum=config.momentum)
    state.history = []

    for epoch in tqdm(range(epochs), desc=f"{state.role.value}", leave=False,
                      disable=not progress):
        lr = learning_rate(config, epoch, epochs)
        order = rng.permutation(len(data))
        total = 0.0

        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            inputs = data.x[batch]
            if config.augment:
                inputs = weak_augment(inputs, data.image_shape, rng)
            loss, grads = batch_step(inputs, data.y[batch])
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads, lr)
            state.adapters.mark_updated()
            total += loss * len(batch)

        state.history.append(total / len(order))
        logger.info("%s epoch %d/%d lr=%.5f loss=%.4f", state.role.value, epoch + 1, epochs,
                    lr, state.history[-1])
        if epoch_end is not None:
            epoch_end()


def train_session_one(backbone: FrozenBackbone, data: "TaskData", config: TrainConfig,
                      adapter_dim: int, adapters: Optional[AdapterSet] = None,
                      rng: Optional[np.random.Generator] = None,
                      progress: bool = False) -> LearnerState:
    """
    Initialized domain alignment of the conservative learner (t = 1)

    Adapters are trained on mean CE with SGD + momentum; W_C is imprinted from
    the current adapters before training and re-imprinted after every epoch.
    No EMA or other constraint is applied.

    Args:
        backbone: Frozen backbone
        data: Task-1 training split (labels 0..K1-1)
        config: Training configuration
        adapter_dim: Bottleneck width for fresh adapters
        adapters: Freshly initialized adapters (created from rng if None)
        rng: Generator (default: seeded from config.seed)
        progress: Show a progress bar

    Returns:
        Conservative LearnerState
    """
    if len(data.y) == 0:
        raise EmptyTaskError("task 1 has no training samples")
    data = data.canonical()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if adapters is None:
        adapters = backbone.init_adapters(adapter_dim, rng)

    classes = list(range(int(data.y.max()) + 1))
    state = LearnerState(adapters=adapters,
                         classifier=imprint_from_data(backbone, adapters, data, classes),
                         role=Role.CONSERVATIVE)
    epochs = config.epochs_first if config.domain_alignment else 0

    def step(inputs, labels):
        embeddings, trace = backbone.embed(inputs, state.adapters)
        ce = loss_ce(state.classifier, embeddings, labels)
        grads = backbone.backward_adapters(trace, ce.grad_embeddings)
        return ce.loss, dict(grads.parameters())

    def reimprint():
        state.classifier = imprint_from_data(backbone, state.adapters, data, classes)

    _run_epochs(state, data, config, epochs, rng, step, train_classifier=False,
                epoch_end=reimprint, progress=progress)
    return state


def forward_transfer(conservative: LearnerState) -> AdapterSet:
    """Radical adapters initialized as a deep copy of the conservative adapters"""
    return conservative.adapters.copy()


def expand_learner(backbone: FrozenBackbone, state: LearnerState,
                   data: "TaskData") -> LearnerState:
    """
    Append imprinted columns for the new classes of a task

    Existing columns are left untouched.

    Args:
        backbone: Frozen backbone
        state: Learner to expand (modified in place)
        data: Task split whose labels continue the learner's class range

    Returns:
        The expanded learner
    """
    if len(data.y) == 0:
        raise EmptyTaskError("task has no training samples")
    data = data.canonical()
    new_total = int(data.y.max()) + 1
    if new_total <= state.num_classes:
        return state
    new_classes = list(range(state.num_classes, new_total))
    columns = imprint_from_data(backbone, state.adapters, data, new_classes)
    state.classifier = np.concatenate([state.classifier, columns], axis=1)
    return state


def train_radical(backbone: FrozenBackbone, state: LearnerState, conservative: LearnerState,
                  data: "TaskData", config: TrainConfig,
                  rng: Optional[np.random.Generator] = None,
                  progress: bool = False) -> LearnerState:
    """
    Radical update on L_R for epochs_later epochs

    Both A_R and W_R are trained; the conservative learner is only read.

    Args:
        backbone: Frozen backbone
        state: Radical learner, already expanded for this task
        conservative: Frozen conservative learner
        data: Task-t training split
        config: Training configuration
        rng: Generator (default: seeded from config.seed)
        progress: Show a progress bar

    Returns:
        The updated radical learner
    """
    if len(data.y) == 0:
        raise EmptyTaskError("task has no training samples")
    if int(data.y.max()) >= state.num_classes:
        raise StateError(
            f"radical classifier has {state.num_classes} columns but task labels reach "
            f"{int(data.y.max())}; expand the learner before training")
    data = data.canonical()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    frozen_adapters = conservative.adapters

    def step(inputs, labels):
        embeddings_radical, trace = backbone.embed(inputs, state.adapters)
        embeddings_conservative, _ = backbone.embed(inputs, frozen_adapters)
        radical = loss_radical(state, embeddings_radical, embeddings_conservative, labels,
                               scale=config.logit_scale)
        grads = dict(backbone.backward_adapters(trace, radical.grad_embeddings).parameters())
        grads["classifier"] = radical.grad_classifier
        return radical.loss, grads

    _run_epochs(state, data, config, config.epochs_later, rng, step, train_classifier=True,
                progress=progress)
    return state


def train_finetune(backbone: FrozenBackbone, state: LearnerState, data: "TaskData",
                   config: TrainConfig, rng: Optional[np.random.Generator] = None,
                   progress: bool = False) -> LearnerState:
    """
    Plain sequential finetuning on the current task (lower-bound baseline)

    Expands the head with imprinted prototypes, then trains adapters and head
    on CE over the current task only.
    """
    data = data.canonical()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    expand_learner(backbone, state, data)

    def step(inputs, labels):
        embeddings, trace = backbone.embed(inputs, state.adapters)
        ce = loss_ce(state.classifier, embeddings, labels)
        grads = dict(backbone.backward_adapters(trace, ce.grad_embeddings).parameters())
        grads["classifier"] = ce.grad_classifier
        return ce.loss, grads

    _run_epochs(state, data, config, config.epochs_later, rng, step, train_classifier=True,
                progress=progress)
    return state


def consolidate_ema(conservative: AdapterSet, radical: AdapterSet,
                    config: ConsolidationConfig) -> AdapterSet:
    """
    Backward consolidation theta_C = alpha * theta_C + (1 - alpha) * theta_R

    Each result is clamped into the interval spanned by its two sources so
    rounding can never leave the convex hull.

    Args:
        conservative: Previous conservative adapters
        radical: Just-trained radical adapters
        config: Holds alpha in [0, 1]

    Returns:
        New consolidated AdapterSet
    """
    if not conservative.same_shape(radical):
        raise ShapeError("conservative and radical adapters differ in shape")
    alpha = config.alpha

    def blend(old: np.ndarray, new: np.ndarray) -> np.ndarray:
        mixed = alpha * old + (1.0 - alpha) * new
        return np.clip(mixed, np.minimum(old, new), np.maximum(old, new))

    consolidated = AdapterSet.zeros_like(conservative)
    for target, old, new in zip(consolidated, conservative, radical):
        target.w_down[...] = blend(old.w_down, new.w_down)
        target.w_up[...] = blend(old.w_up, new.w_up)
    return consolidated


def predict_head(backbone: FrozenBackbone, state: LearnerState, x) -> np.ndarray:
    """Argmax of the learner's own head W^T phi(x)"""
    return np.argmax(backbone.embed_batched(x, state.adapters) @ state.classifier, axis=1)
