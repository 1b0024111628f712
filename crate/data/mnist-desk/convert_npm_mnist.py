#!/usr/bin/env python3
"""Rebuild the desk-scale MNIST subset from the `mnist` npm package.

The package (https://www.npmjs.com/package/mnist, v1.1.0) ships 10,000 digits
drawn from the original MNIST set as JSON arrays of pixel intensities rounded
to three decimals. Multiplying by 255 and rounding recovers the original bytes.

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 convert_npm_mnist.py package/src/digits .
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_COUNT = 8000


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        raw = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        for start in range(0, len(raw) - 783, 784):
            pixels = [min(255, max(0, round(v * 255))) for v in raw[start:start + 784]]
            samples.append((pixels, digit))
    random.Random(20191011).shuffle(samples)
    train, test = samples[:TRAIN_COUNT], samples[TRAIN_COUNT:]
    write_idx_images(out_dir / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_idx_labels(out_dir / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_idx_images(out_dir / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_idx_labels(out_dir / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
