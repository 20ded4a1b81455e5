#!/usr/bin/env python3
"""Convert the JSON digit/clothing samples shipped in the `mnist` and
`fashion-mnist` npm packages into IDX files.

Usage: npm pack mnist fashion-mnist, extract both tarballs, then
    python3 scripts/npm_to_idx.py <mnist-pkg-dir> <fashion-mnist-pkg-dir> <out-dir>
"""
import json
import os
import struct
import sys

SIDE = 28
PIXELS = SIDE * SIDE


def load_classes(root, sub, scale):
    per_class = []
    for label in range(10):
        with open(os.path.join(root, "src", sub, f"{label}.json")) as fh:
            data = json.load(fh)["data"]
        if data and isinstance(data[0], list):
            flat = [v for row in data for v in row]
        else:
            flat = data
        samples = []
        for k in range(len(flat) // PIXELS):
            chunk = flat[k * PIXELS:(k + 1) * PIXELS]
            samples.append(bytes(max(0, min(255, int(round(v * scale)))) for v in chunk))
        per_class.append(samples)
    return per_class


def interleave(per_class, limit_per_class=None):
    images, labels = [], []
    depth = max(len(s) for s in per_class)
    if limit_per_class is not None:
        depth = min(depth, limit_per_class)
    for k in range(depth):
        for label, samples in enumerate(per_class):
            if k < len(samples):
                images.append(samples[k])
                labels.append(label)
    return images, labels


def write_idx(prefix, images, labels):
    with open(prefix + "-images-idx3-ubyte", "wb") as fh:
        fh.write(bytes([0, 0, 0x08, 3]))
        fh.write(struct.pack(">III", len(images), SIDE, SIDE))
        for img in images:
            fh.write(img)
    with open(prefix + "-labels-idx1-ubyte", "wb") as fh:
        fh.write(bytes([0, 0, 0x08, 1]))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(bytes(labels))


def main():
    mnist_dir, fashion_dir, out = sys.argv[1:4]
    os.makedirs(out, exist_ok=True)
    digits = load_classes(mnist_dir, "digits", 255.0)
    write_idx(os.path.join(out, "digits"), *interleave(digits))
    clothes = load_classes(fashion_dir, "clothes", 1.0)
    write_idx(os.path.join(out, "clothing"), *interleave(clothes, limit_per_class=300))


if __name__ == "__main__":
    main()
