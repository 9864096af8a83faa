#!/usr/bin/env python3
"""Convert the per-digit JSON files of the npm `mnist` package to IDX.

Each `<digit>.json` holds {"data": [...]}, a flat list of 784-pixel images
with intensities in [0, 1]. Images are shuffled with a fixed seed and split
into train and test sets written as the four standard IDX files.

    python3 scripts/mnist_json_to_idx.py node_modules/mnist/src/digits data/mnist-subset
"""

import argparse
import json
import random
import struct
from pathlib import Path

PIXELS = 28 * 28


def load(src: Path):
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for k in range(len(flat) // PIXELS):
            img = flat[k * PIXELS:(k + 1) * PIXELS]
            samples.append((bytes(round(v * 255) for v in img), digit))
    return samples


def write(out: Path, prefix: str, samples):
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for img, _ in samples:
            f.write(img)
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path, help="directory with 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test", type=int, default=2000, help="test-set size")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = load(args.src)
    random.Random(args.seed).shuffle(samples)
    if not 0 < args.test < len(samples):
        ap.error(f"--test must lie in 1..{len(samples) - 1}")
    args.out.mkdir(parents=True, exist_ok=True)
    write(args.out, "train", samples[args.test:])
    write(args.out, "t10k", samples[:args.test])
    print(f"{len(samples) - args.test} train / {args.test} test images -> {args.out}")


if __name__ == "__main__":
    main()
