"""Shared pytest fixtures: tiny backbone, toy task data, tiny IDX dataset"""

import os

import numpy as np
import pytest

from bicrcl.backbone import BackboneConfig, FrozenBackbone
from bicrcl.stream import TaskData, write_idx

TINY_BACKBONE = dict(input_dim=16, hidden_dim=12, embed_dim=8, num_blocks=2, adapter_dim=4)


def make_task(num_classes=3, per_class=10, dim=16, first_label=0, seed=0, image_shape=None,
              id_offset=0):
    """Well-separated Gaussian blobs, classes interleaved"""
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(1000).normal(0.0, 3.0, size=(first_label + num_classes, dim))
    labels = np.tile(np.arange(first_label, first_label + num_classes), per_class)
    x = centers[labels] + rng.normal(0.0, 0.3, size=(len(labels), dim))
    return TaskData(x=x, y=labels.astype(np.int64),
                    ids=np.arange(id_offset, id_offset + len(labels), dtype=np.int64),
                    image_shape=image_shape)


def write_tiny_dataset(directory, classes=4, train_per_class=8, test_per_class=3, seed=0):
    """4x4 single-channel IDX images: class c lights up its own pixel block"""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)

    def split(per_class):
        labels = np.tile(np.arange(classes, dtype=np.uint8), per_class)
        images = rng.integers(0, 40, size=(len(labels), 4, 4)).astype(np.uint8)
        for index, label in enumerate(labels):
            row, col = divmod(int(label) % 8, 4)
            images[index, row * 2:row * 2 + 2, col:col + 1] = 220
        return images, labels

    for name, per_class in (("train", train_per_class), ("test", test_per_class)):
        images, labels = split(per_class)
        write_idx(os.path.join(directory, f"{name}-images.idx"), images)
        write_idx(os.path.join(directory, f"{name}-labels.idx"), labels)

    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("train_images=train-images.idx\ntrain_labels=train-labels.idx\n")
        f.write("test_images=test-images.idx\ntest_labels=test-labels.idx\n")
        f.write("format=idx\nimage_shape=4x4x1\n")
    return manifest


def write_tiny_config(directory, tasks=2, method="bicrcl", order="given", extra=""):
    """Experiment INI sized for the tiny dataset"""
    path = os.path.join(directory, "experiment.ini")
    with open(path, "w") as f:
        f.write(f"""[experiment]
method = {method}
seed = 7
output = {os.path.join(directory, 'out')}
eval_batch_size = 5

[stream]
manifest = manifest.txt
tasks = {tasks}
order = {order}

[backbone]
input_dim = 16
hidden_dim = 12
embed_dim = 8
num_blocks = 2
adapter_dim = 4

[train]
batch_size = 8
epochs_first = 2
epochs_later = 2

[analytic]
cv_folds = 2
{extra}""")
    return path


@pytest.fixture
def tiny_backbone():
    return FrozenBackbone.from_config(BackboneConfig(seed=0, **TINY_BACKBONE))


@pytest.fixture
def toy_task():
    return make_task()


@pytest.fixture
def tiny_dataset(tmp_path):
    """Directory holding a tiny IDX dataset, its manifest and an experiment config"""
    directory = str(tmp_path / "tiny")
    write_tiny_dataset(directory)
    write_tiny_config(directory)
    return directory
