"""
Weak data augmentation for image-shaped inputs

Random horizontal flip and small rotation, done with OpenCV affine warps.
Vector inputs (no image shape) pass through unchanged.
"""

from typing import Optional, Tuple

import cv2
import numpy as np

FLIP_PROBABILITY = 0.5
MAX_ROTATION_DEGREES = 10.0


def weak_augment(batch: np.ndarray, image_shape: Optional[Tuple[int, int, int]],
                 rng: np.random.Generator,
                 max_degrees: float = MAX_ROTATION_DEGREES) -> np.ndarray:
    """
    Augment a batch of flattened images

    Args:
        batch: Input batch (N x H*W*C), float64
        image_shape: (H, W, C) or None for vector data
        rng: Random generator (all randomness comes from here)
        max_degrees: Rotation angle is drawn from [-max_degrees, max_degrees]

    Returns:
        Augmented batch with the same shape
    """
    if image_shape is None or len(batch) == 0:
        return batch

    height, width, channels = image_shape
    flips = rng.random(len(batch)) < FLIP_PROBABILITY
    angles = rng.uniform(-max_degrees, max_degrees, size=len(batch))
    center = ((width - 1) / 2.0, (height - 1) / 2.0)

    out = np.empty_like(batch)
    for i, row in enumerate(batch):
        image = row.reshape(height, width, channels).astype(np.float32)
        if channels == 1:
            image = image[:, :, 0]
        if flips[i]:
            image = cv2.flip(image, 1)
        matrix = cv2.getRotationMatrix2D(center, float(angles[i]), 1.0)
        image = cv2.warpAffine(image, matrix, (width, height),
                               flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_REPLICATE)
        out[i] = image.reshape(-1)

    return out
