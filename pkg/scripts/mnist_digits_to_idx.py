"""Convert the 10,000 MNIST digits bundled in the ``mnist`` npm package to IDX files.

The package (``npm pack mnist@1.1.0``) stores ``src/digits/<d>.json`` as
``{"data": [...]}``, pixels of every image of digit ``d`` scaled to [0, 1]
and rounded to three decimals; ``rint(v * 255)`` recovers the original bytes.
Digits are split per class into disjoint train and test sets and written
under the standard MNIST file names, gzipped::

    python scripts/mnist_digits_to_idx.py mnist-1.1.0.tgz data/mnist --test-per-class 100
"""

import argparse
import json
import tarfile
from pathlib import Path

import numpy as np

from nmil.bagdata import MNIST_FILES, write_idx


def read_digits(source):
    """(pixels uint8 (n, 28, 28), labels uint8 (n,)) from the .tgz or an unpacked digits directory."""
    source = Path(source)
    if source.is_dir():
        docs = {d: json.loads((source / f"{d}.json").read_text()) for d in range(10)}
    else:
        with tarfile.open(source) as tar:
            docs = {d: json.load(tar.extractfile(f"package/src/digits/{d}.json")) for d in range(10)}
    images, labels = [], []
    for d in range(10):
        a = np.asarray(docs[d]["data"], dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.rint(a * 255).astype(np.uint8))
        labels.append(np.full(len(a), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="mnist-<version>.tgz or its src/digits directory")
    ap.add_argument("out_dir")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    pixels, labels = read_digits(args.source)
    rng = np.random.default_rng(args.seed)
    test = []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.extend(idx[: args.test_per_class].tolist())
    test = np.sort(np.array(test))
    train = np.setdiff1d(np.arange(labels.size), test)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, rows in (("train", train), ("test", test)):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(pixels[rows], labels[rows], out / f"{img_name}.gz", out / f"{lab_name}.gz")
        print(f"{split}: {rows.size} digits -> {out}")


if __name__ == "__main__":
    main()
