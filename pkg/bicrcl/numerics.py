"""
Numerics
Dense linear-algebra and probability primitives shared by every module

- Ridge solves through a symmetric positive-definite (Cholesky) factorization
- Temperature-scaled softmax
- Symmetric KL divergence with epsilon clamping

All arrays are float64 and every entry point rejects NaN/Inf.
"""

import logging

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.special import softmax

from .errors import InvalidInputError, InvalidParameterError, ShapeError, SingularityError

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-12
RESIDUAL_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-9


def as_float_array(values, name: str, ndim: int = None) -> np.ndarray:
    """
    Convert input to a finite float64 array

    Args:
        values: Array-like input
        name: Name used in error messages
        ndim: Required number of dimensions (None = any)

    Returns:
        float64 ndarray
    """
    array = np.asarray(values, dtype=np.float64)
    if ndim is not None and array.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{name} contains NaN or Inf entries")
    return array


def solve_ridge(gram, cross, beta: float) -> np.ndarray:
    """
    Solve (G + beta*I) W = C for W

    Args:
        gram: Symmetric positive semi-definite matrix G (M x M)
        cross: Right-hand side C (M x K)
        beta: Non-negative ridge parameter

    Returns:
        Solution W (M x K)
    """
    gram = as_float_array(gram, "G", ndim=2)
    cross = as_float_array(cross, "C")
    if not np.isfinite(beta):
        raise InvalidInputError("beta must be finite")
    if beta < 0:
        raise InvalidParameterError(f"beta must be non-negative, got {beta}")

    size = gram.shape[0]
    if gram.shape != (size, size):
        raise ShapeError(f"G must be square, got shape {gram.shape}")
    vector_rhs = cross.ndim == 1
    rhs = cross.reshape(-1, 1) if vector_rhs else cross
    if rhs.ndim != 2 or rhs.shape[0] != size:
        raise ShapeError(f"C must have {size} rows, got shape {cross.shape}")
    if size == 0:
        return np.zeros_like(cross)

    scale = max(1.0, float(np.max(np.abs(gram))))
    if np.max(np.abs(gram - gram.T)) > SYMMETRY_TOLERANCE * scale:
        raise InvalidInputError("G must be symmetric")

    system = gram + beta * np.eye(size)
    factor, info = lapack.dpotrf(system, lower=1, clean=1)
    if info > 0:
        raise SingularityError(
            f"G + beta*I is not positive definite (leading minor {info}, beta={beta}); "
            "increase beta",
            pivot=int(info),
        )
    if info < 0:
        raise InvalidInputError(f"Cholesky factorization rejected argument {-info}")

    weights = linalg.cho_solve((factor, True), rhs, check_finite=False)

    rhs_norm = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    if rhs_norm > 0:
        residual = float(np.max(np.abs(system @ weights - rhs)))
        if residual >= RESIDUAL_TOLERANCE * rhs_norm:
            logger.warning(
                "Ridge residual %.3e exceeds %.0e relative tolerance (beta=%g); "
                "system is ill-conditioned", residual, RESIDUAL_TOLERANCE, beta)

    return weights.ravel() if vector_rhs else weights


def softmax_temp(logits, tau: float) -> np.ndarray:
    """
    Temperature-scaled softmax along the last axis

    Args:
        logits: Logit vector, or batch of logit rows
        tau: Positive temperature (smaller = sharper)

    Returns:
        Probabilities with the same shape as logits
    """
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    logits = as_float_array(logits, "logits")
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise ShapeError("logits must have at least one class")
    # scipy subtracts the row maximum before exponentiating
    return softmax(logits / tau, axis=-1)


def clamp_probabilities(probs, eps: float = KL_EPSILON) -> np.ndarray:
    """
    Clamp probabilities to >= eps and renormalize along the last axis

    Args:
        probs: Probability vector(s)
        eps: Lower clamp

    Returns:
        Clamped, renormalized probabilities
    """
    probs = as_float_array(probs, "probabilities")
    if np.any(probs < 0):
        raise InvalidInputError("probabilities must be non-negative")
    clamped = np.maximum(probs, eps)
    return clamped / clamped.sum(axis=-1, keepdims=True)


def sym_kl(p, q, eps: float = KL_EPSILON):
    """
    Symmetric KL divergence 0.5 * (KL(p||q) + KL(q||p))

    Computed as 0.5 * sum((p - q) * (log p - log q)), which is the same
    quantity written so that swapping p and q gives a bitwise-identical
    result and every summand is non-negative.

    Args:
        p: Probability vector, or batch of rows
        q: Probability vector(s) with the same shape as p
        eps: Clamp applied before the logarithm

    Returns:
        Divergence (float for vectors, array for batches)
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {p.shape} vs {q.shape}")

    p = clamp_probabilities(p, eps)
    q = clamp_probabilities(q, eps)
    divergence = 0.5 * np.sum((p - q) * (np.log(p) - np.log(q)), axis=-1)

    if np.ndim(divergence) == 0:
        return float(divergence)
    return divergence
