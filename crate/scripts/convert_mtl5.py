#!/usr/bin/env python3
"""Convert MTL5-style CSV dumps (AGNews, Amazon, DBPedia, Yahoo) into a moecl
dataset directory: <out>/<task>/{train,val,test}.jsonl plus tasks.json.

Each input CSV has a 1-based label in the first column followed by text
columns. Sampling is class-balanced and seeded.

    python3 scripts/convert_mtl5.py --src data/mtl5 --out data/mtl5-small \\
        --train-per-class 200 --val-per-class 50 --test-per-class 100
"""

import argparse
import csv
import json
import random
import sys
from pathlib import Path

TASKS = {
    "agnews": ("ag_news_csv", 4),
    "amazon": ("amazon_review_full_csv", 5),
    "dbpedia": ("dbpedia_csv", 14),
    "yahoo": ("yahoo_answers_csv", 10),
}


def read_rows(path, classes):
    by_class = [[] for _ in range(classes)]
    with open(path, newline="", encoding="utf-8") as f:
        for line_no, row in enumerate(csv.reader(f), 1):
            if len(row) < 2:
                continue
            try:
                label = int(row[0]) - 1
            except ValueError:
                sys.exit(f"{path}:{line_no}: label {row[0]!r} is not an integer")
            if not 0 <= label < classes:
                sys.exit(f"{path}:{line_no}: label {row[0]} outside 1..{classes}")
            text = " ".join(c.replace("\\n", " ") for c in row[1:]).strip()
            if text:
                by_class[label].append(text)
    return by_class


def sample(by_class, per_class, rng):
    out = []
    for label, texts in enumerate(by_class):
        if len(texts) < per_class:
            sys.exit(f"class {label} has {len(texts)} rows, need {per_class}")
        out.extend({"text": t, "label": label} for t in rng.sample(texts, per_class))
    rng.shuffle(out)
    return out


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--src", type=Path, required=True, help="directory holding the <name>_csv folders")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--tasks", default="agnews,amazon,dbpedia,yahoo")
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--val-per-class", type=int, default=50)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    manifest = {"tasks": []}
    for name in args.tasks.split(","):
        if name not in TASKS:
            sys.exit(f"unknown task {name!r}; choose from {', '.join(TASKS)}")
        folder, classes = TASKS[name]
        rng = random.Random(f"{args.seed}/{name}")
        train_pool = read_rows(args.src / folder / "train.csv", classes)
        test_pool = read_rows(args.src / folder / "test.csv", classes)

        # val comes out of the official train split, disjoint from train
        for texts in train_pool:
            rng.shuffle(texts)
        val_pool = [t[: args.val_per_class] for t in train_pool]
        train_pool = [t[args.val_per_class :] for t in train_pool]

        splits = {
            "train": sample(train_pool, args.train_per_class, rng),
            "val": sample(val_pool, args.val_per_class, rng),
            "test": sample(test_pool, args.test_per_class, rng),
        }
        (args.out / name).mkdir(parents=True, exist_ok=True)
        for split, records in splits.items():
            write_jsonl(args.out / name / f"{split}.jsonl", records)
        manifest["tasks"].append(
            {"name": name, "classes": classes, **{s: f"{name}/{s}.jsonl" for s in splits}}
        )
        print(f"{name}: {classes} classes, " + ", ".join(f"{s} {len(r)}" for s, r in splits.items()))

    with open(args.out / "tasks.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
