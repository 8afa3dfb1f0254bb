#!/usr/bin/env python3
"""Build a 10,000-digit MNIST subset in gzipped IDX format.

Source: the `mnist` npm package (src/digits/<d>.json), which ships 10,000
MNIST digits as flat arrays of 784 grayscale values in [0, 1].

usage: make_mnist_subset.py <npm-package-dir> <out-dir>
"""
import gzip
import json
import os
import struct
import sys


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as fh:
            values = json.load(fh)["data"]
        assert len(values) % 784 == 0
        for i in range(len(values) // 784):
            images.append(bytes(round(v * 255) for v in values[i * 784:(i + 1) * 784]))
            labels.append(digit)
    os.makedirs(out, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(os.path.join(out, "images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            fh.write(img)
    with gzip.GzipFile(os.path.join(out, "labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(bytes(labels))
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main()
