"""Build gzip IDX files from the digit JSON shipped in the npm ``mnist`` package.

The npm package (https://www.npmjs.com/package/mnist) bundles roughly 10k
MNIST training digits as grayscale values divided by 255 and rounded to three
decimals, which is enough resolution to recover the original bytes exactly.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(digits_dir, out_dir, seed=0):
    images, labels = [], []
    for c in range(10):
        raw = np.asarray(json.loads(Path(digits_dir, f"{c}.json").read_text())["data"])
        pix = np.rint(raw * 255.0).astype(np.uint8).reshape(-1, 784)
        images.append(pix)
        labels.append(np.full(len(pix), c, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
