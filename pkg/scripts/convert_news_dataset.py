#!/usr/bin/env python3
"""Convert a GoodNews / NYTimes800k style export into rulecap's split layout.

Input is a JSON list or JSONL file of records with at least ``id`` (or
``image_id``), ``article`` and ``caption`` and optionally ``split`` and a
precomputed situation ``frame`` ({"verb": ..., "roles": [[role, obj], ...]}).
Image features come from an ``.npz`` whose keys are the record ids, produced
by whatever visual encoder you use offline. Nothing is downloaded here.

    python3 scripts/convert_news_dataset.py records.jsonl feats.npz out/
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from rulecap.data import Sample, write_split


def read_records(path: Path) -> list[dict]:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    data = json.loads(text)
    return data if isinstance(data, list) else list(data.values())


def convert(records: list[dict], features, default_split: str, max_article_chars: int | None) -> dict[str, list[Sample]]:
    splits: dict[str, list[Sample]] = {}
    skipped = 0
    for rec in records:
        sid = str(rec.get("id", rec.get("image_id")))
        if sid not in features or not rec.get("article") or not rec.get("caption"):
            skipped += 1
            continue
        article = rec["article"] if max_article_chars is None else rec["article"][:max_article_chars]
        sample = Sample(sid, article, rec["caption"], features[sid], frame=rec.get("frame"))
        splits.setdefault(rec.get("split", default_split), []).append(sample)
    if skipped:
        print(f"skipped {skipped} records without features, article or caption", file=sys.stderr)
    return splits


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("records", type=Path)
    ap.add_argument("features", type=Path, help=".npz keyed by record id")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--default-split", default="train")
    ap.add_argument("--max-article-chars", type=int, default=None)
    args = ap.parse_args(argv)

    with np.load(args.features) as feats:
        splits = convert(read_records(args.records), feats, args.default_split, args.max_article_chars)
    for name, samples in sorted(splits.items()):
        samples.sort(key=lambda s: s.id)
        write_split(args.out_dir, name, samples, extra={"source": args.records.name})
        print(f"{name}: {len(samples)} samples")
    return 0


if __name__ == "__main__":
    sys.exit(main())
