#!/usr/bin/env python3
"""
Desk Dataset Generator
Render a 10-class 28x28 digit-glyph dataset with OpenCV and write it as IDX
files, together with a manifest and a ready-to-run experiment config
"""

import argparse
import os
import sys

import cv2
import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from bicrcl.stream import write_idx  # noqa: E402

IMAGE_SIZE = 28
NUM_CLASSES = 10
FONTS = (
    cv2.FONT_HERSHEY_SIMPLEX,
    cv2.FONT_HERSHEY_PLAIN,
    cv2.FONT_HERSHEY_DUPLEX,
    cv2.FONT_HERSHEY_COMPLEX,
    cv2.FONT_HERSHEY_TRIPLEX,
)
NOISE_STD = 8.0

CONFIG_TEMPLATE = """[experiment]
method = bicrcl
seed = {seed}
output = results

[stream]
manifest = manifest.txt
tasks = 5
order = shuffled

[backbone]
input_dim = {input_dim}
"""


def render_glyph(digit: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw one digit with random font, scale, thickness, offset, rotation and noise

    Args:
        digit: Class label 0-9
        rng: Random generator

    Returns:
        28x28 uint8 image
    """
    font = FONTS[int(rng.integers(len(FONTS)))]
    scale = float(rng.uniform(0.7, 1.0)) * (1.6 if font == cv2.FONT_HERSHEY_PLAIN else 1.0)
    thickness = int(rng.integers(1, 3))
    text = str(digit)

    (width, height), _ = cv2.getTextSize(text, font, scale, thickness)
    x = (IMAGE_SIZE - width) // 2 + int(rng.integers(-2, 3))
    y = (IMAGE_SIZE + height) // 2 + int(rng.integers(-2, 3))

    canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    cv2.putText(canvas, text, (x, y), font, scale, 255, thickness, cv2.LINE_AA)

    angle = float(rng.uniform(-12.0, 12.0))
    center = ((IMAGE_SIZE - 1) / 2.0, (IMAGE_SIZE - 1) / 2.0)
    matrix = cv2.getRotationMatrix2D(center, angle, 1.0)
    canvas = cv2.warpAffine(canvas, matrix, (IMAGE_SIZE, IMAGE_SIZE), flags=cv2.INTER_LINEAR)

    noisy = canvas.astype(np.float64) + rng.normal(0.0, NOISE_STD, size=canvas.shape)
    return np.clip(noisy, 0, 255).astype(np.uint8)


def generate_split(per_class: int, rng: np.random.Generator):
    """Images (N x 28 x 28) and labels with classes interleaved in file order"""
    labels = np.tile(np.arange(NUM_CLASSES, dtype=np.uint8), per_class)
    images = np.stack([render_glyph(int(label), rng) for label in labels])
    return images, labels


def make_desk_dataset(output_dir: str, train_per_class: int = 1000, test_per_class: int = 200,
                      seed: int = 0) -> str:
    """
    Write the dataset, manifest.txt and experiment.ini into output_dir

    Args:
        output_dir: Target directory (created if missing)
        train_per_class: Training samples per class
        test_per_class: Test samples per class
        seed: Seed for every random choice

    Returns:
        Path of the manifest
    """
    print("=" * 50)
    print("Desk Dataset Generator")
    print("=" * 50)
    print(f"  Classes: {NUM_CLASSES}")
    print(f"  Train per class: {train_per_class}")
    print(f"  Test per class: {test_per_class}")
    print(f"  Output: {output_dir}/")
    print()

    os.makedirs(output_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    files = {}
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        images, labels = generate_split(per_class, rng)
        files[f"{split}_images"] = f"{split}-images.idx3-ubyte"
        files[f"{split}_labels"] = f"{split}-labels.idx1-ubyte"
        write_idx(os.path.join(output_dir, files[f"{split}_images"]), images)
        write_idx(os.path.join(output_dir, files[f"{split}_labels"]), labels)
        print(f"✓ Wrote {len(labels)} {split} samples")

    manifest_path = os.path.join(output_dir, "manifest.txt")
    with open(manifest_path, "w") as f:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            f.write(f"{key}={files[key]}\n")
        f.write("format=idx\n")
        f.write(f"image_shape={IMAGE_SIZE}x{IMAGE_SIZE}x1\n")
        f.write("class_names=" + ",".join(str(c) for c in range(NUM_CLASSES)) + "\n")

    with open(os.path.join(output_dir, "experiment.ini"), "w") as f:
        f.write(CONFIG_TEMPLATE.format(seed=seed, input_dim=IMAGE_SIZE * IMAGE_SIZE))

    print(f"✓ Manifest: {manifest_path}")
    print(f"\nRun: python -m bicrcl run {os.path.join(output_dir, 'experiment.ini')}")
    return manifest_path


def main(argv=None):
    parser = argparse.ArgumentParser(
        description='Generate the 28x28 digit-glyph desk dataset'
    )
    parser.add_argument(
        '-o', '--output',
        type=str,
        default='data/desk',
        help='Output directory (default: data/desk)'
    )
    parser.add_argument(
        '--train-per-class',
        type=int,
        default=1000,
        help='Training samples per class (default: 1000)'
    )
    parser.add_argument(
        '--test-per-class',
        type=int,
        default=200,
        help='Test samples per class (default: 200)'
    )
    parser.add_argument(
        '--seed',
        type=int,
        default=0,
        help='Random seed (default: 0)'
    )

    args = parser.parse_args(argv)
    if args.train_per_class < 1 or args.test_per_class < 1:
        print("ERROR: sample counts must be positive")
        return 1

    make_desk_dataset(args.output, args.train_per_class, args.test_per_class, args.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
