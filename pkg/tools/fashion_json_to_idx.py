"""Convert the per-class JSON dump of Fashion-MNIST (npm package ``fashion-mnist``)
into the four standard IDX files.

The dump stores 7000 images per class with the train images first, so the
last 1000 of every class form the test split (6000/1000 per class, matching
the official split sizes). Empty rows in the dump are dropped.

    python tools/fashion_json_to_idx.py <clothes-dir> <out-dir>
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np

TEST_PER_CLASS = 1000


def write_idx_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", 2051, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(10):
        rows = [r for r in json.loads((src / f"{c}.json").read_text())["data"] if len(r) == 784]
        arr = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        train_x.append(arr[:-TEST_PER_CLASS])
        test_x.append(arr[-TEST_PER_CLASS:])
        train_y.append(np.full(len(arr) - TEST_PER_CLASS, c))
        test_y.append(np.full(TEST_PER_CLASS, c))
    write_idx_images(dst / "train-images-idx3-ubyte", np.concatenate(train_x))
    write_idx_labels(dst / "train-labels-idx1-ubyte", np.concatenate(train_y))
    write_idx_images(dst / "t10k-images-idx3-ubyte", np.concatenate(test_x))
    write_idx_labels(dst / "t10k-labels-idx1-ubyte", np.concatenate(test_y))


if __name__ == "__main__":
    main(*sys.argv[1:3])
