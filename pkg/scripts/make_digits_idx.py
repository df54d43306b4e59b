"""Write scikit-learn's handwritten digits as a 28x28 IDX dataset.

The 8x8 images are bilinearly upsampled to 20x20 and centered in a 28x28
frame. Output uses the usual MNIST file names so ``load_dataset(.., "IDX")``
finds them.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

from bnnkit.harness.data import IDX_FILES, write_idx


def build(out: Path, test_fraction: float = 0.2, seed: int = 0) -> tuple[int, int]:
    digits = load_digits()
    small = digits.images / 16.0
    big = np.stack([np.clip(zoom(im, 2.5, order=1), 0, 1) for im in small])
    frame = np.zeros((len(big), 28, 28))
    frame[:, 4:24, 4:24] = big
    images = np.rint(frame * 255).astype(np.uint8)
    labels = digits.target.astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(test_fraction * len(labels)))
    splits = {"test": order[:n_test], "train": order[n_test:]}
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in splits.items():
        img_name, lab_name = IDX_FILES[split]
        write_idx(out / img_name, images[idx])
        write_idx(out / lab_name, labels[idx])
    return len(splits["train"]), len(splits["test"])


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("data/digits28"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    n_train, n_test = build(args.out, seed=args.seed)
    print(f"wrote {n_train} train / {n_test} test images to {args.out}")


if __name__ == "__main__":
    main()
