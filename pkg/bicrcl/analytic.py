"""
Analytic Module
Random-feature ridge classifier with recursive sufficient statistics

Embeddings are lifted by a fixed random projection followed by ReLU,
h = ReLU(phi^T W_rand). Each learner accumulates G = H^T H and C = H^T Y
over sessions and solves (G + beta*I) W = C afresh after every session, which
equals a batch ridge fit on all data seen so far without revisiting it.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .errors import InvalidExpansionError, InvalidParameterError, LabelError, ShapeError
from .numerics import as_float_array, solve_ridge

logger = logging.getLogger(__name__)

DEFAULT_BETA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
FALLBACK_BETA = 1.0


@dataclass
class AnalyticConfig:
    """Random projection width and ridge parameter selection"""

    expansion_dim: int = 0  # 0 -> 4 * embed_dim
    beta: Optional[float] = None  # None -> cross-validated on session 1
    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    cv_folds: int = 5

    def resolve_dim(self, embed_dim: int) -> int:
        return self.expansion_dim or 4 * embed_dim

    def violations(self, embed_dim: int, prefix: str = "AnalyticConfig") -> List[str]:
        errors = []
        if self.expansion_dim and self.expansion_dim <= embed_dim:
            errors.append(f"{prefix}.expansion_dim: must exceed embed_dim {embed_dim}, "
                          f"got {self.expansion_dim}")
        if self.expansion_dim < 0:
            errors.append(f"{prefix}.expansion_dim: must be >= 0, got {self.expansion_dim}")
        if self.beta is not None and not self.beta > 0:
            errors.append(f"{prefix}.beta: must be > 0, got {self.beta}")
        if not self.beta_grid:
            errors.append(f"{prefix}.beta_grid: must not be empty")
        elif any(not b > 0 for b in self.beta_grid):
            errors.append(f"{prefix}.beta_grid: values must be > 0")
        if self.cv_folds < 2:
            errors.append(f"{prefix}.cv_folds: must be >= 2, got {self.cv_folds}")
        return errors


@dataclass(frozen=True)
class ProjectionHead:
    """Fixed random projection W_rand (d x M), shared by both learners"""

    w_rand: np.ndarray

    @classmethod
    def create(cls, embed_dim: int, expansion_dim: Optional[int] = None,
               seed: int = 0) -> "ProjectionHead":
        """
        Draw W_rand from N(0, 1)

        Args:
            embed_dim: Embedding width d
            expansion_dim: Projected width M (> d, default 4d)
            seed: Seed for the draw

        Returns:
            Immutable ProjectionHead
        """
        expansion_dim = expansion_dim or 4 * embed_dim
        if expansion_dim <= embed_dim:
            raise InvalidParameterError(
                f"expansion dim M={expansion_dim} must exceed embed dim d={embed_dim}")
        w_rand = np.random.default_rng(seed).standard_normal((embed_dim, expansion_dim))
        w_rand.setflags(write=False)
        return cls(w_rand)

    @property
    def embed_dim(self) -> int:
        return self.w_rand.shape[0]

    @property
    def expansion_dim(self) -> int:
        return self.w_rand.shape[1]


@dataclass
class SuffStats:
    """Accumulated Gram matrix G (M x M), cross-correlation C (M x K), sample count"""

    gram: np.ndarray
    cross: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, expansion_dim: int, num_classes: int) -> "SuffStats":
        return cls(np.zeros((expansion_dim, expansion_dim)),
                   np.zeros((expansion_dim, num_classes)), 0)

    @property
    def num_classes(self) -> int:
        return self.cross.shape[1]

    def copy(self) -> "SuffStats":
        return SuffStats(self.gram.copy(), self.cross.copy(), self.count)


@dataclass
class AnalyticClassifier:
    """Closed-form ridge weights W_hat (M x K)"""

    weights: np.ndarray
    beta: float

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


def project(embeddings, head: ProjectionHead) -> np.ndarray:
    """
    Random ReLU features h = ReLU(phi^T W_rand)

    Args:
        embeddings: Embedding batch (N x d)
        head: Projection head

    Returns:
        Feature batch (N x M)
    """
    embeddings = as_float_array(embeddings, "embeddings", ndim=2)
    if embeddings.shape[1] != head.embed_dim:
        raise ShapeError(f"embedding width {embeddings.shape[1]} does not match "
                         f"projection head d={head.embed_dim}")
    return np.maximum(embeddings @ head.w_rand, 0.0)


def accumulate(stats: SuffStats, features, labels) -> SuffStats:
    """
    Add a batch to the sufficient statistics

    G += H^T H, C += H^T Y (one-hot Y built here), count += N. Existing entries
    are never rescaled.

    Args:
        stats: Current statistics
        features: Projected batch H (N x M)
        labels: Integer labels in [0, K)

    Returns:
        New SuffStats
    """
    features = as_float_array(features, "features", ndim=2)
    labels = np.asarray(labels, dtype=np.int64)
    expansion_dim = stats.gram.shape[0]
    if len(features) == 0:
        return stats.copy()
    if features.shape[1] != expansion_dim:
        raise ShapeError(f"feature width {features.shape[1]} does not match M={expansion_dim}")
    if labels.shape != (len(features),):
        raise ShapeError(f"expected {len(features)} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= stats.num_classes:
        raise LabelError(f"labels must lie in [0, {stats.num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")

    gram = features.T @ features
    targets = np.zeros((len(labels), stats.num_classes))
    targets[np.arange(len(labels)), labels] = 1.0

    return SuffStats(
        gram=stats.gram + 0.5 * (gram + gram.T),
        cross=stats.cross + features.T @ targets,
        count=stats.count + len(labels),
    )


def expand_classes(stats: SuffStats, classifier: Optional[AnalyticClassifier],
                   new_total: int) -> Tuple[SuffStats, Optional[AnalyticClassifier]]:
    """
    Grow C (and W_hat) with zero columns for new classes; G and count unchanged

    Args:
        stats: Current statistics
        classifier: Current classifier or None if not fitted yet
        new_total: New total class count (> current)

    Returns:
        (expanded stats, expanded classifier or None)
    """
    if new_total <= stats.num_classes:
        raise InvalidExpansionError(
            f"class count must increase, got {stats.num_classes} -> {new_total}")
    extra = new_total - stats.num_classes
    expanded = SuffStats(stats.gram.copy(),
                         np.hstack([stats.cross, np.zeros((stats.cross.shape[0], extra))]),
                         stats.count)
    if classifier is None:
        return expanded, None
    weights = np.hstack([classifier.weights,
                         np.zeros((classifier.weights.shape[0], new_total - classifier.num_classes))])
    return expanded, AnalyticClassifier(weights, classifier.beta)


def fit(stats: SuffStats, beta: float) -> AnalyticClassifier:
    """Closed-form ridge solution W_hat = (G + beta*I)^-1 C"""
    return AnalyticClassifier(solve_ridge(stats.gram, stats.cross, beta), float(beta))


def logits(features, classifier: AnalyticClassifier) -> np.ndarray:
    """z = h W_hat"""
    features = as_float_array(features, "features", ndim=2)
    if features.shape[1] != classifier.weights.shape[0]:
        raise ShapeError(f"feature width {features.shape[1]} does not match classifier "
                         f"rows {classifier.weights.shape[0]}")
    return features @ classifier.weights


def select_beta(embeddings, labels, head: ProjectionHead,
                grid: Sequence[float] = DEFAULT_BETA_GRID, folds: int = 5,
                seed: int = 0) -> float:
    """
    Pick beta by stratified k-fold accuracy on session-1 features

    Ties in mean held-out accuracy go to the larger beta.

    Args:
        embeddings: Session-1 embeddings (N x d)
        labels: Session-1 labels
        head: Projection head
        grid: Candidate betas
        folds: Number of folds
        seed: Seed for the fold assignment

    Returns:
        Selected beta (FALLBACK_BETA when a class has fewer than `folds` samples)
    """
    grid = sorted(float(b) for b in grid)
    if len(grid) == 1:
        return grid[0]

    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels)
    present = counts[counts > 0]
    if len(present) == 0 or present.min() < folds:
        logger.warning("beta selection needs >= %d samples per class (smallest class has %d); "
                       "falling back to beta=%g", folds, int(present.min()) if len(present) else 0,
                       FALLBACK_BETA)
        return FALLBACK_BETA

    features = project(embeddings, head)
    num_classes = int(labels.max()) + 1
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = np.zeros(len(grid))

    for train_index, test_index in splitter.split(features, labels):
        stats = accumulate(SuffStats.empty(head.expansion_dim, num_classes),
                           features[train_index], labels[train_index])
        for position, beta in enumerate(grid):
            predicted = np.argmax(logits(features[test_index], fit(stats, beta)), axis=1)
            scores[position] += np.mean(predicted == labels[test_index])

    scores /= folds
    best = 0
    for position in range(len(grid)):
        if scores[position] >= scores[best]:
            best = position
    logger.info("beta selection: %s -> beta=%g",
                ", ".join(f"{b:g}:{s:.4f}" for b, s in zip(grid, scores)), grid[best])
    return grid[best]
