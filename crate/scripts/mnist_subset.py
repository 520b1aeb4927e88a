#!/usr/bin/env python3
"""Rebuild data/mnist-subset/ from the 10,000-digit MNIST sample in the npm `mnist` package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist-subset

Pixels in the npm JSON are rounded to three decimals; round(v * 255) recovers the
original byte exactly. Digits are shuffled with a fixed seed and split 8000/2000.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            px = [int(round(v * 255)) for v in data[i : i + 784]]
            samples.append((px, digit))
    random.Random(20201).shuffle(samples)
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:8000]), ("t10k", samples[8000:])):
        images = [b for px, _ in part for b in px]
        labels = [y for _, y in part]
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803, [len(part), 28, 28], images)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801, [len(part)], labels)
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
