#!/usr/bin/env python3
"""Build a local MNIST subset and background textures under ./data.

Digits come from the npm `mnist` package (10,000 MNIST digits shipped as
JSON). Textures are the two sample photographs bundled with scikit-learn.
Output:
  data/train-images-idx3-ubyte, data/train-labels-idx1-ubyte
  data/textures/*.pgm
"""
import argparse
import json
import os
import struct
import subprocess
import tarfile
import tempfile

import numpy as np


def write_idx(out_dir, images, labels):
    with open(os.path.join(out_dir, "train-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(os.path.join(out_dir, "train-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def npm_digits(tmp):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
        tar.extractall(tmp)
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(tmp, "package", "src", "digits", f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        block = np.rint(flat.reshape(-1, 784) * 255.0).clip(0, 255)
        images.append(block)
        labels.append(np.full(len(block), digit))
    return np.concatenate(images), np.concatenate(labels)


def write_textures(out_dir):
    from sklearn.datasets import load_sample_images

    os.makedirs(out_dir, exist_ok=True)
    for name, img in zip(["china", "flower"], load_sample_images().images):
        gray = np.rint(img.astype(np.float64) @ [0.299, 0.587, 0.114]).clip(0, 255)
        h, w = gray.shape
        with open(os.path.join(out_dir, f"{name}.pgm"), "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(gray.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data"))
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        images, labels = npm_digits(tmp)
    write_idx(args.out, images, labels)
    write_textures(os.path.join(args.out, "textures"))
    print(f"wrote {len(labels)} digits and textures to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
