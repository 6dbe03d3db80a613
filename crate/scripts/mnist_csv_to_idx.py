#!/usr/bin/env python3
"""Convert an MNIST CSV (784 pixel columns then the label, optionally gzipped)
into train/t10k IDX files readable by `featdyn`.

The first --train-per-class rows of each digit (file order) go to the train
split, the remaining rows to t10k.

    python3 scripts/mnist_csv_to_idx.py mnist_5k.csv.gz /path/to/mnist
"""

import argparse
import csv
import gzip
import struct
from pathlib import Path


def write_idx(path, dims, payload):
    magic = 0x0800 | len(dims)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()

    opener = gzip.open if args.csv.suffix == ".gz" else open
    splits = {"train": ([], []), "t10k": ([], [])}
    seen = [0] * 10
    with opener(args.csv, "rt") as f:
        for row in csv.reader(f):
            if len(row) != 785:
                raise SystemExit(f"expected 785 columns, got {len(row)}")
            label = int(row[-1])
            pixels = [int(v) for v in row[:-1]]
            name = "train" if seen[label] < args.train_per_class else "t10k"
            seen[label] += 1
            splits[name][0].extend(pixels)
            splits[name][1].append(label)

    args.out.mkdir(parents=True, exist_ok=True)
    for name, (images, labels) in splits.items():
        write_idx(args.out / f"{name}-images-idx3-ubyte", [len(labels), 28, 28], images)
        write_idx(args.out / f"{name}-labels-idx1-ubyte", [len(labels)], labels)
        print(f"{name}: {len(labels)} images")


if __name__ == "__main__":
    main()
