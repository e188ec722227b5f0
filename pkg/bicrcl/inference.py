"""
Inference Module
KL-gated collaborative prediction from the conservative and radical learners

For each sample both analytic logit vectors are turned into sharpened
distributions. Their symmetric KL divergence is compared against a dynamic
threshold (mean + lambda * std of the divergences in the evaluation batch, or
of every divergence seen this session when a sample arrives on its own):
- below the threshold the more confident learner's logits are used as-is
- above it the logits are blended with normalized max-probability weights
"""

import csv
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import EmptyBatchError, ShapeError
from .numerics import as_float_array, softmax_temp, sym_kl

FUSION_MODES = ("fused", "conservative", "radical")


@dataclass
class FusionConfig:
    """
    Fusion parameters plus running divergence statistics

    The running statistics (Welford mean and population variance) serve
    single-sample inference, where a batch threshold is undefined.
    """

    tau: float = 0.1
    lam: float = 0.5
    mode: str = "fused"
    running_mean: float = 0.0
    running_m2: float = 0.0
    running_count: int = 0

    @property
    def running_std(self) -> float:
        if self.running_count == 0:
            return 0.0
        return math.sqrt(max(self.running_m2 / self.running_count, 0.0))

    def update_running(self, divergences: Iterable[float]):
        for value in divergences:
            self.running_count += 1
            delta = value - self.running_mean
            self.running_mean += delta / self.running_count
            self.running_m2 += delta * (value - self.running_mean)

    def running_threshold(self) -> float:
        return self.running_mean + self.lam * self.running_std

    def reset_running(self):
        self.running_mean = 0.0
        self.running_m2 = 0.0
        self.running_count = 0

    def violations(self, prefix: str = "FusionConfig") -> List[str]:
        errors = []
        if not self.tau > 0:
            errors.append(f"{prefix}.tau: must be > 0, got {self.tau}")
        if not self.lam >= 0:
            errors.append(f"{prefix}.lambda: must be >= 0, got {self.lam}")
        if self.mode not in FUSION_MODES:
            errors.append(f"{prefix}.mode: must be one of {', '.join(FUSION_MODES)}, "
                          f"got {self.mode!r}")
        return errors


@dataclass
class FusedPrediction:
    """Outcome of fusing one sample"""

    z_cr: np.ndarray
    y_star: int
    gate: int
    divergence: float
    alpha_c: float
    alpha_r: float
    confidence_c: float = 0.0
    confidence_r: float = 0.0


def divergence_threshold(divergences, lam: float) -> float:
    """
    theta_div = mean(D) + lambda * std(D), population std

    Args:
        divergences: Batch of symmetric KL values
        lam: Threshold multiplier lambda

    Returns:
        Threshold
    """
    divergences = np.asarray(divergences, dtype=np.float64).ravel()
    if len(divergences) == 0:
        raise EmptyBatchError("cannot threshold an empty batch of divergences")
    return float(np.mean(divergences) + lam * np.std(divergences))


def confidence(probs) -> float:
    """Learner confidence = maximum class probability"""
    return float(np.max(probs))


def fuse(z_c, z_r, config: FusionConfig, threshold: float) -> FusedPrediction:
    """
    Gate and fuse one pair of logit vectors

    Args:
        z_c: Conservative logits
        z_r: Radical logits
        config: Holds tau
        threshold: theta_div

    Returns:
        FusedPrediction
    """
    z_c = as_float_array(z_c, "z_C", ndim=1)
    z_r = as_float_array(z_r, "z_R", ndim=1)
    if z_c.shape != z_r.shape:
        raise ShapeError(f"logit length mismatch: {len(z_c)} vs {len(z_r)}")

    pi_c = softmax_temp(z_c, config.tau)
    pi_r = softmax_temp(z_r, config.tau)
    divergence = sym_kl(pi_c, pi_r)
    conf_c, conf_r = confidence(pi_c), confidence(pi_r)
    alpha_c = conf_c / (conf_c + conf_r)
    alpha_r = conf_r / (conf_c + conf_r)

    gate = int(divergence > threshold)
    if gate:
        z_cr = np.clip(alpha_c * z_c + alpha_r * z_r, np.minimum(z_c, z_r), np.maximum(z_c, z_r))
    elif conf_c >= conf_r:
        z_cr = z_c.copy()
    else:
        z_cr = z_r.copy()

    return FusedPrediction(z_cr=z_cr, y_star=int(np.argmax(z_cr)), gate=gate,
                           divergence=divergence, alpha_c=alpha_c, alpha_r=alpha_r,
                           confidence_c=conf_c, confidence_r=conf_r)


def batch_divergences(z_c: np.ndarray, z_r: np.ndarray, tau: float) -> np.ndarray:
    """Symmetric KL for every row pair of two logit batches"""
    if z_c.shape != z_r.shape:
        raise ShapeError(f"logit batch mismatch: {z_c.shape} vs {z_r.shape}")
    return np.atleast_1d(sym_kl(softmax_temp(z_c, tau), softmax_temp(z_r, tau)))


def fuse_batch(z_c: np.ndarray, z_r: np.ndarray, config: FusionConfig,
               divergences: Optional[np.ndarray] = None) -> List[FusedPrediction]:
    """
    Fuse an evaluation batch: divergences first, then threshold, then fusion

    The batch divergences are also folded into the running statistics. A
    single-row batch has no batch spread and is fused as a stream sample.

    Args:
        z_c: Conservative logits (N x K)
        z_r: Radical logits (N x K)
        config: Fusion configuration
        divergences: Precomputed divergences (optional)

    Returns:
        One FusedPrediction per row
    """
    if divergences is None:
        divergences = batch_divergences(z_c, z_r, config.tau)
    if len(z_c) == 1:
        return [fuse_stream(z_c[0], z_r[0], config, divergence=float(divergences[0]))]
    threshold = divergence_threshold(divergences, config.lam)
    config.update_running(divergences)
    return [fuse(z_c[i], z_r[i], config, threshold) for i in range(len(z_c))]


def fuse_stream(z_c, z_r, config: FusionConfig,
                divergence: Optional[float] = None) -> FusedPrediction:
    """
    Fuse one sample using the running divergence statistics of this session

    The sample's own divergence is folded in before the threshold is read.
    """
    if divergence is None:
        divergence = sym_kl(softmax_temp(z_c, config.tau), softmax_temp(z_r, config.tau))
    config.update_running([divergence])
    return fuse(z_c, z_r, config, config.running_threshold())


PREDICTION_FIELDS = ("sample_id", "y_star", "gate", "d_sym", "alpha_c", "alpha_r",
                     "top1_c", "top1_r")


def prediction_record(sample_id: int, prediction: FusedPrediction) -> Dict:
    return {
        'sample_id': int(sample_id),
        'y_star': prediction.y_star,
        'gate': prediction.gate,
        'd_sym': repr(float(prediction.divergence)),
        'alpha_c': repr(float(prediction.alpha_c)),
        'alpha_r': repr(float(prediction.alpha_r)),
        'top1_c': repr(float(prediction.confidence_c)),
        'top1_r': repr(float(prediction.confidence_r)),
    }


def write_prediction_records(path: str, records: Iterable[Dict]):
    """Write per-sample prediction records as CSV"""
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=PREDICTION_FIELDS)
        writer.writeheader()
        for record in records:
            writer.writerow(record)
