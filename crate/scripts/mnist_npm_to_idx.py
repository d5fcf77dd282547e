#!/usr/bin/env python3
"""Convert the 10k-digit MNIST subset shipped in the `mnist` npm package to IDX.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist10k

The package stores each digit as 784 floats (byte / 255, rounded to three
decimals); rounding `v * 255` recovers the original byte exactly.  Digits are
interleaved by class (0, 1, ..., 9, 0, 1, ...) so any prefix is near-balanced.
"""

import gzip
import json
import struct
import sys
from pathlib import Path


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    per_class = []
    for d in range(10):
        flat = json.loads((src / f"{d}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        per_class.append([flat[i : i + 784] for i in range(0, len(flat), 784)])

    images, labels = [], []
    for i in range(max(len(c) for c in per_class)):
        for d, digits in enumerate(per_class):
            if i < len(digits):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in digits[i]))
                labels.append(d)

    dst.mkdir(parents=True, exist_ok=True)
    n = len(images)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(labels))
    print(f"wrote {n} digits to {dst}")


if __name__ == "__main__":
    main()
