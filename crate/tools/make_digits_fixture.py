#!/usr/bin/env python3
"""Build the bundled handwritten-digits fixture under data/digits/.

Exports scikit-learn's bundled UCI handwritten-digits set (1797 samples,
8x8 grayscale) as IDX files at 28x28 so the fixture matches the geometry
the fully connected architecture expects. Images are upsampled bilinearly
and rescaled from 0..16 to 0..255 bytes. The split is a fixed-seed shuffle:
1437 train / 360 test.

Run from the repository root:  python3 tools/make_digits_fixture.py
"""

import os
import struct

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "digits")
SEED = 0
TEST_COUNT = 360


def write_idx_images(path: str, images: np.ndarray) -> None:
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    digits = load_digits()
    images = digits.images  # (1797, 8, 8), values 0..16
    labels = digits.target.astype(np.uint8)

    upsampled = np.stack([zoom(img, 28 / 8, order=1) for img in images])
    upsampled = np.clip(np.round(upsampled * (255.0 / 16.0)), 0, 255).astype(np.uint8)

    rng = np.random.RandomState(SEED)
    order = rng.permutation(len(labels))
    train_idx, test_idx = order[:-TEST_COUNT], order[-TEST_COUNT:]

    os.makedirs(OUT_DIR, exist_ok=True)
    write_idx_images(os.path.join(OUT_DIR, "train-images-idx3-ubyte"), upsampled[train_idx])
    write_idx_labels(os.path.join(OUT_DIR, "train-labels-idx1-ubyte"), labels[train_idx])
    write_idx_images(os.path.join(OUT_DIR, "t10k-images-idx3-ubyte"), upsampled[test_idx])
    write_idx_labels(os.path.join(OUT_DIR, "t10k-labels-idx1-ubyte"), labels[test_idx])

    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {OUT_DIR}")


if __name__ == "__main__":
    main()
