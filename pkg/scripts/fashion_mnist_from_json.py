"""Write Fashion-MNIST IDX files from the per-class JSON dumps of the `fashion-mnist` npm package.

Each ``<class>.json`` holds ``{"data": [[784 bytes], ...]}``. Per class the
first 6000 valid rows go to the train split and the next 1000 to the test split.

    python scripts/fashion_mnist_from_json.py path/to/package/src/clothes $FGRAD_DATA_ROOT/fashion-mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from fgrad.data import encode_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    ap.add_argument("--train-per-class", type=int, default=6000)
    ap.add_argument("--test-per-class", type=int, default=1000)
    args = ap.parse_args()
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(10):
        rows = [r for r in json.loads((args.src / f"{c}.json").read_text())["data"] if len(r) == 784]
        a = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        k, m = args.train_per_class, args.test_per_class
        if len(a) < k + m:
            raise SystemExit(f"class {c}: only {len(a)} rows")
        tr_x.append(a[:k]); tr_y.append(np.full(k, c))
        te_x.append(a[k:k + m]); te_y.append(np.full(m, c))
    args.dst.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for prefix, xs, ys in (("train", tr_x, tr_y), ("t10k", te_x, te_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        (args.dst / f"{prefix}-images-idx3-ubyte").write_bytes(encode_idx(x[order]))
        (args.dst / f"{prefix}-labels-idx1-ubyte").write_bytes(encode_idx(y[order]))
        print(prefix, x.shape)


if __name__ == "__main__":
    main()
