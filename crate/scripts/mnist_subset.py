#!/usr/bin/env python3
"""Rebuild data/mnist10k from the 10,000 MNIST digits bundled in the npm `mnist` package.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist10k

Pixels are stored in the package as floats in [0, 1] with three decimals; they are
mapped back to bytes with round(255 * v). Samples are shuffled with a fixed seed so
that class order is mixed, then written as gzipped big-endian IDX files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        per = SIDE * SIDE
        for i in range(len(raw) // per):
            pix = bytes(min(255, max(0, round(v * 255))) for v in raw[i * per:(i + 1) * per])
            samples.append((pix, digit))
    random.Random(20190609).shuffle(samples)
    n = len(samples)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        for pix, _ in samples:
            f.write(pix)
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
