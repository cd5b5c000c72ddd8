"""Convert a CSV of MNIST digits (784 pixel columns + label) to an IDX pair.

Useful when only a digit subset is at hand, e.g. the 5000-row ``mnist_5k.csv.gz``
shipped inside the mlxtend wheel::

    python scripts/mnist_csv_to_idx.py mnist_5k.csv.gz out_dir/
    advunmix synth --profile mnist --data out_dir --out data --set n_train=5000 --set n_val=1000
"""

import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from advunmix.data import write_idx


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("csv", help="CSV or CSV.gz, one digit per row")
    p.add_argument("out_dir")
    p.add_argument("--label-column", choices=["first", "last"], default="last")
    p.add_argument("--shuffle-seed", type=int, default=0,
                   help="rows are shuffled so a label-sorted file still yields a mixed holdout")
    args = p.parse_args()
    raw = Path(args.csv).read_bytes()
    if args.csv.endswith(".gz"):
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.float64)
    if table.shape[1] != 785:
        raise SystemExit(f"expected 785 columns, found {table.shape[1]}")
    if args.label_column == "last":
        pixels, labels = table[:, :784], table[:, 784]
    else:
        pixels, labels = table[:, 1:], table[:, 0]
    order = np.random.default_rng(args.shuffle_seed).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(pixels.reshape(-1, 28, 28).astype(np.uint8), labels.astype(np.uint8),
              out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main()
