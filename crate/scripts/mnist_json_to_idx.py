#!/usr/bin/env python3
"""Convert the per-digit JSON files shipped in the `mnist` npm package into
IDX files (a 10k-sample MNIST subset).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist

Writes an 8000-sample train split and a 2000-sample test split, stratified
per digit and shuffled with a fixed seed.
"""
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
PIXELS = SIDE * SIDE


def read_digits(src: Path):
    samples = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        count = len(flat) // PIXELS
        for i in range(count):
            img = bytes(
                min(255, max(0, round(v * 255))) for v in flat[i * PIXELS:(i + 1) * PIXELS]
            )
            samples.append((label, img))
    return samples


def write_idx(dst: Path, stem: str, samples):
    with open(dst / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), SIDE, SIDE))
        for _, img in samples:
            f.write(img)
    with open(dst / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for label, _ in samples))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20240101)
    by_label = {}
    for label, img in read_digits(src):
        by_label.setdefault(label, []).append((label, img))
    train, test = [], []
    for label in range(10):
        group = by_label[label]
        rng.shuffle(group)
        cut = len(group) - len(group) // 5
        train.extend(group[:cut])
        test.extend(group[cut:])
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(dst, "train", train)
    write_idx(dst, "t10k", test)
    print(f"train={len(train)} test={len(test)} -> {dst}")


if __name__ == "__main__":
    main()
