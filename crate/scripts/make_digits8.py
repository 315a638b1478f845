"""Write the 8x8 digits set from scikit-learn as IDX files.

Usage: python3 scripts/make_digits8.py [out_dir]   (default data/digits8)
"""
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/digits8")
    out.mkdir(parents=True, exist_ok=True)
    d = load_digits()
    x = np.round(d.data * 255.0 / 16.0).astype(np.uint8).reshape(-1, 8, 8)
    y = d.target.astype(np.uint8)
    perm = np.random.RandomState(8).permutation(len(y))
    splits = {"test": perm[:360], "train": perm[360:]}
    for name, idx in splits.items():
        with open(out / f"{name}-images.idx3-ubyte", "wb") as f:
            f.write(struct.pack(">IIII", 0x803, len(idx), 8, 8))
            f.write(x[idx].tobytes())
        with open(out / f"{name}-labels.idx1-ubyte", "wb") as f:
            f.write(struct.pack(">II", 0x801, len(idx)))
            f.write(y[idx].tobytes())


if __name__ == "__main__":
    main()
