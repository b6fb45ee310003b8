#!/usr/bin/env python3
"""Rebuild the gzipped IDX fixtures under data/ from the npm `fashion-mnist`
and `mnist` packages.

    npm pack fashion-mnist@1.1.0 mnist@1.1.0
    tar xzf fashion-mnist-1.1.0.tgz && mv package fmnist
    tar xzf mnist-1.1.0.tgz && mv package mnist
    python3 scripts/build_idx_fixtures.py <dir containing fmnist/ and mnist/> data/

fashion-mnist stores 7000 images per class as 0..255 integers (the first 6000
of each class come from the official training split). mnist stores the digit
test split as value/255 rounded to three decimals, which round(v * 255)
inverts exactly.
"""
import gzip
import json
import os
import struct
import sys


def write_idx(path, images, labels, rows=28, cols=28):
    with gzip.GzipFile(path + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(path + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def interleave(per_class, lo, hi):
    images, labels = [], []
    for i in range(lo, hi):
        for c, rows in enumerate(per_class):
            images.append(rows[i])
            labels.append(c)
    return images, labels


def main(src, dst):
    fm = [json.load(open(os.path.join(src, f"fmnist/src/clothes/{c}.json")))["data"] for c in range(10)]
    write_idx(os.path.join(dst, "fmnist-train-5k"), *interleave(fm, 0, 500))
    write_idx(os.path.join(dst, "fmnist-test-1k"), *interleave(fm, 6000, 6100))

    digits = []
    for c in range(10):
        flat = json.load(open(os.path.join(src, f"mnist/src/digits/{c}.json")))["data"]
        digits.append([[int(round(v * 255)) for v in flat[i:i + 784]] for i in range(0, len(flat), 784)])
    write_idx(os.path.join(dst, "mnist-test-1k"), *interleave(digits, 0, 100))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
