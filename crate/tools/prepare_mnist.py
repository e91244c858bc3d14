#!/usr/bin/env python3
"""Convert the bundled MNIST digit JSON files (npm `mnist` package) into
IDX image/label files.

Usage: prepare_mnist.py <package-src-digits-dir> <output-dir>

Writes train-images-idx3-ubyte / train-labels-idx1-ubyte (~80% of each
digit) and test-images-idx3-ubyte / test-labels-idx1-ubyte (the rest).
Samples are interleaved round-robin across digits so any prefix of a file
is approximately class-balanced.
"""
import json
import struct
import sys
from pathlib import Path


def load_digit(digits_dir: Path, digit: int):
    flat = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
    assert len(flat) % 784 == 0
    images = []
    for i in range(len(flat) // 784):
        px = flat[i * 784 : (i + 1) * 784]
        images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
    return images


def interleave(per_digit):
    out = []
    cursors = [0] * 10
    remaining = sum(len(v) for v in per_digit)
    while remaining:
        for d in range(10):
            if cursors[d] < len(per_digit[d]):
                out.append((d, per_digit[d][cursors[d]]))
                cursors[d] += 1
                remaining -= 1
    return out


def write_idx(out_dir: Path, prefix: str, samples):
    images = out_dir / f"{prefix}-images-idx3-ubyte"
    labels = out_dir / f"{prefix}-labels-idx1-ubyte"
    with open(images, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for _, px in samples:
            f.write(px)
    with open(labels, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(d for d, _ in samples))
    print(f"{prefix}: {len(samples)} samples -> {images.name}, {labels.name}")


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    train_split, test_split = [], []
    for d in range(10):
        images = load_digit(digits_dir, d)
        cut = round(len(images) * 0.8)
        train_split.append(images[:cut])
        test_split.append(images[cut:])
    write_idx(out_dir, "train", interleave(train_split))
    write_idx(out_dir, "test", interleave(test_split))


if __name__ == "__main__":
    main()
