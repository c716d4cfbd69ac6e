#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package (10,000 MNIST
samples stored as JSON) into gzip-compressed IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            images.append(bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784]))
            labels.append(digit)
    # interleave classes deterministically so prefixes are class-balanced
    first = {d: labels.index(d) for d in range(10)}
    order = sorted(range(len(labels)), key=lambda i: (i - first[labels[i]], labels[i]))
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(order), 28, 28))
        for i in order:
            f.write(images[i])
    with gzip.GzipFile(dst / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(order)))
        f.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
