"""Convert the digit JSON files of the ``mnist`` npm package into IDX files.

The package ships 1000 real MNIST digits per class as flat lists of 784 floats
in [0, 1]. They are rescaled to bytes, shuffled with a fixed seed so classes are
interleaved, and written as ``train-images-idx3-ubyte.gz`` / ``train-labels-idx1-ubyte.gz``.

    python3 tools/npm_mnist_to_idx.py path/to/package/src/digits data/mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from srnn_lab.tasks import ImageDataset, write_idx


def convert(digits_dir: Path, out_dir: Path, seed: int = 0) -> ImageDataset:
    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.loads((digits_dir / f"{d}.json").read_text())["data"], dtype=np.float64)
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), d, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    ds = ImageDataset(images[order], labels[order], "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(ds, out_dir / "train-images-idx3-ubyte.gz", out_dir / "train-labels-idx1-ubyte.gz", compress=True)
    return ds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    ds = convert(args.digits_dir, args.out_dir, args.seed)
    print(f"wrote {ds.N} images to {args.out_dir}")


if __name__ == "__main__":
    main()
