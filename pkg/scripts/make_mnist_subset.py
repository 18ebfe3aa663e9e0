"""Build the bundled MNIST subset (data/mnist5k) as gzipped IDX files.

The source is the 5000-image MNIST sample (500 per digit) shipped inside the
``mlxtend`` wheel as ``mlxtend/data/data/mnist_5k.csv.gz``.  The script
downloads the wheel with pip (no install), splits the images per class into
400 training and 100 evaluation images with a fixed seed, and writes

    data/mnist5k/train-images-idx3-ubyte.gz  (4000)
    data/mnist5k/train-labels-idx1-ubyte.gz
    data/mnist5k/t10k-images-idx3-ubyte.gz   (1000)
    data/mnist5k/t10k-labels-idx1-ubyte.gz

Usage: python scripts/make_mnist_subset.py [--wheel PATH] [--out DIR]
"""

import argparse
import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", dest, "-q"],
        check=True,
    )
    return glob.glob(str(Path(dest) / "mlxtend-*.whl"))[0]


def idx_bytes(images, labels):
    n, rows, cols = images.shape
    head_i = np.array([0x803, n, rows, cols], dtype=">u4").tobytes()
    head_l = np.array([0x801, n], dtype=">u4").tobytes()
    return head_i + images.astype(np.uint8).tobytes(), head_l + labels.astype(np.uint8).tobytes()


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--wheel")
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mnist5k"))
    parser.add_argument("--per-class-test", type=int, default=100)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        raw = zipfile.ZipFile(wheel).read(MEMBER)
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    images = table[:, :784].reshape(-1, 28, 28)
    labels = table[:, 784]
    assert images.min() >= 0 and images.max() <= 255

    rng = np.random.Generator(np.random.Philox(20220))
    train_idx, test_idx = [], []
    for digit in range(10):
        members = rng.permutation(np.flatnonzero(labels == digit))
        test_idx.extend(members[: args.per_class_test])
        train_idx.extend(members[args.per_class_test :])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        img, lab = idx_bytes(images[idx], labels[idx])
        # mtime=0 keeps the archives byte-identical across runs
        (out / f"{prefix}-images-idx3-ubyte.gz").write_bytes(gzip.compress(img, mtime=0))
        (out / f"{prefix}-labels-idx1-ubyte.gz").write_bytes(gzip.compress(lab, mtime=0))
        print(f"{prefix}: {len(idx)} images -> {out}")


if __name__ == "__main__":
    main()
