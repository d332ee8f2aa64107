"""Convert the per-class JSON Fashion-MNIST bundle to the four IDX files the loader expects.

The bundle stores 7000 images per class (``<class>.json``, each ``{"data": [[784 ints], ...]}``)
without the official train/test split. The first 6000 images of every class
become the training set and the next 1000 the test set, giving 60000/10000 in
class-interleaved order. Empty records (class 0 has two) are skipped first.

    python tools/fmnist_to_idx.py --src /root/data/fmnist_raw/package/src/clothes --dst /root/data/fmnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from zskd.data import FILES, write_idx

TRAIN_PER_CLASS, TEST_PER_CLASS = 6000, 1000


def convert(src: Path, dst: Path) -> dict:
    parts = {"train": ([], []), "test": ([], [])}
    for k in range(10):
        records = [r for r in json.loads((src / f"{k}.json").read_text())["data"] if len(r)]
        if any(len(r) != 784 for r in records):
            raise ValueError(f"{k}.json: a record does not have 784 pixels")
        data = np.asarray(records, dtype=np.int64)
        if data.min() < 0 or data.min() < 0 or data.max() > 255:
            raise ValueError(f"{k}.json: pixel values outside [0, 255]")
        if len(data) < TRAIN_PER_CLASS + TEST_PER_CLASS:
            raise ValueError(f"{k}.json has only {len(data)} records")
        for split, rows in (("train", data[:TRAIN_PER_CLASS]),
                            ("test", data[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS])):
            parts[split][0].append(rows.reshape(-1, 28, 28))
            parts[split][1].append(np.full(len(rows), k))
    dst.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, (imgs, labels) in parts.items():
        images = np.concatenate(imgs).astype(np.uint8)
        write_idx(dst / FILES[split][0], images)
        write_idx(dst / FILES[split][1], np.concatenate(labels).astype(np.uint8))
        counts[split] = len(images)
    return counts


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--src", type=Path, default=Path("/root/data/fmnist_raw/package/src/clothes"))
    ap.add_argument("--dst", type=Path, default=Path("/root/data/fmnist"))
    args = ap.parse_args(argv)
    print(convert(args.src, args.dst))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
