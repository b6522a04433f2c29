"""Download Frappe or MovieLens and convert them to headered CSV triplets.

Sources (the benchmark's pre-made 7:2:1 splits, libFM sparse format):

  frappe     https://raw.githubusercontent.com/WeiyuCheng/AFN-AAAI-20/master/data/frappe/frappe.{train,validation,test}.libfm
  movielens  https://raw.githubusercontent.com/WeiyuCheng/AFN-AAAI-20/master/data/movielens/ml-tag.{train,validation,test}.libfm

The same splits are mirrored as CSV under the reczoo/Frappe_x1 and
reczoo/MovielensLatest_x1 dataset repositories on the Hugging Face hub;
pass those files with --from-dir and they are copied through unchanged.

Conversion of one libFM line ``-1 12:1 973:1 ...``:
  * the label -1 becomes 0, +1 stays 1;
  * the k-th ``index:1`` pair is the token of the k-th field, written as the
    integer index (indices are already globally unique, so no collisions);
  * the output header is ``label`` followed by the field names below.

Usage:
  python3 scripts/fetch_datasets.py frappe --out data/frappe
  python3 scripts/fetch_datasets.py frappe --from-dir ~/Downloads/frappe --out data/frappe
  cetn prepare --schema schemas/frappe.json --train data/frappe/train.csv \\
      --valid data/frappe/valid.csv --test data/frappe/test.csv --out data/frappe/prepared
"""
from __future__ import annotations

import argparse
import csv
import shutil
import sys
import urllib.request
from pathlib import Path

BASE = "https://raw.githubusercontent.com/WeiyuCheng/AFN-AAAI-20/master/data"
DATASETS = {
    "frappe": {
        "stem": "frappe/frappe",
        "fields": ["user", "item", "daytime", "weekday", "isweekend", "homework", "cost", "weather", "country", "city"],
    },
    "movielens": {
        "stem": "movielens/ml-tag",
        "fields": ["user_id", "item_id", "tag_id"],
    },
}
SPLITS = {"train": "train", "valid": "validation", "test": "test"}


def convert_libfm(src: Path, dst: Path, fields) -> int:
    n = 0
    with open(src, encoding="utf-8") as fin, open(dst, "w", newline="", encoding="utf-8") as fout:
        w = csv.writer(fout)
        w.writerow(["label", *fields])
        for line in fin:
            parts = line.split()
            if not parts:
                continue
            label = "1" if float(parts[0]) > 0 else "0"
            tokens = [p.split(":", 1)[0] for p in parts[1:]]
            if len(tokens) != len(fields):
                raise ValueError(f"{src}: line {n + 1} has {len(tokens)} features, expected {len(fields)}")
            w.writerow([label, *tokens])
            n += 1
    return n


def fetch(name: str, out: Path, from_dir: Path = None) -> None:
    spec = DATASETS[name]
    out.mkdir(parents=True, exist_ok=True)
    stem = spec["stem"].split("/")[-1]
    for split, remote in SPLITS.items():
        csv_in = from_dir / f"{split}.csv" if from_dir else None
        if csv_in is not None and csv_in.exists():
            shutil.copyfile(csv_in, out / f"{split}.csv")
            print(f"copied {csv_in}")
            continue
        raw = (from_dir or out) / f"{stem}.{remote}.libfm"
        if not raw.exists():
            url = f"{BASE}/{spec['stem']}.{remote}.libfm"
            print(f"downloading {url}")
            urllib.request.urlretrieve(url, raw)
        n = convert_libfm(raw, out / f"{split}.csv", spec["fields"])
        print(f"{split}: {n} rows -> {out / f'{split}.csv'}")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("dataset", choices=sorted(DATASETS))
    p.add_argument("--out", required=True)
    p.add_argument("--from-dir", help="directory already holding the libFM or CSV files")
    args = p.parse_args(argv)
    try:
        fetch(args.dataset, Path(args.out), Path(args.from_dir) if args.from_dir else None)
    except OSError as exc:
        print(f"fetch failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
