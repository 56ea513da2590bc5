"""Build IDX files from the 5000-image MNIST sample shipped inside the mlxtend wheel.

The sample holds 500 digits per class.  The first ``--train-per-class``
images of each digit (in file order) go to the train pair, the rest to the
test pair.  Usage::

    pip download --no-deps mlxtend -d /tmp/wheels
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist-subset
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from muso.data import Dataset, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--train-per-class", type=int, default=300)
    args = parser.parse_args(argv)

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(np.int64)

    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.append(idx[: args.train_per_class])
        test_idx.append(idx[args.train_per_class :])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.sort(np.concatenate(train_idx))), ("test", np.sort(np.concatenate(test_idx)))):
        ds = Dataset(
            X=pixels[idx].T / 255.0,
            labels=labels[idx],
            n_classes=10,
            split=split,
            image_shape=(28, 28),
        )
        write_idx(
            ds,
            args.out_dir / f"{split}-images-idx3-ubyte.gz",
            args.out_dir / f"{split}-labels-idx1-ubyte.gz",
        )
        print(f"{split}: {ds.N} images")


if __name__ == "__main__":
    main()
