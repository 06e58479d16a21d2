"""Command-line entry point: ``rulecap <verb> [options]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
any other failure. Global flags (``--config``, ``--seed``, ``--out-dir``)
are accepted before or after the verb.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import atomic_write_text, gen_synthetic_dataset, read_jsonl, read_split, write_jsonl
from .entities import (
    EntitySet,
    EntityType,
    GazetteerRecognizer,
    TypedEntityPartition,
    extract_entities,
    partition_by_type,
    select_top_k,
    slice_article,
)
from .errors import ConfigError, RuleCapError
from .metrics import evaluate, markdown_table
from .model import Variant, load_checkpoint, save_checkpoint
from .pipeline import (
    ExperimentConfig,
    RuleBuilder,
    build_scorer,
    derive_seed,
    load_dataset,
    rule_texts,
    run_ablation_grid,
    run_experiment,
    run_pipeline,
    train_variant,
)
from .rules import GenericObjectVocabulary, build_frame, replace_entities, serialize_rule
from .scoring import BilinearScorer, ImageRef, StubScorer
from .text import Vocab, tokenize

log = logging.getLogger("rulecap")


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    cfg.validate()
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.out_dir:
        raise ConfigError("an output directory is required (--out-dir or out_dir in the config)")
    return Path(cfg.out_dir)


def _load_scorer(path: str | None, seed: int):
    return BilinearScorer.load(path) if path else StubScorer(derive_seed(seed, "stub-scorer"))


def _load_image_feature(path: str, image_id: str) -> np.ndarray:
    """Feature for ``image_id`` from a JSON object, a samples JSONL or an ``.npz``."""
    p = Path(path)
    if p.suffix == ".npz":
        with np.load(p, allow_pickle=False) as data:
            if image_id not in data:
                raise ConfigError(f"image {image_id!r} not found in {path}")
            return np.asarray(data[image_id], dtype=np.float64)
    if p.suffix == ".jsonl":
        for rec in read_jsonl(p):
            if str(rec.get("id")) == image_id:
                return np.asarray(rec["image_feature"], dtype=np.float64)
        raise ConfigError(f"image {image_id!r} not found in {path}")
    table = _read_json(path)
    if image_id not in table:
        raise ConfigError(f"image {image_id!r} not found in {path}")
    return np.asarray(table[image_id], dtype=np.float64)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    n = args.n if args.n is not None else cfg.n_train + cfg.n_test
    frac = args.test_fraction if args.test_fraction is not None else (cfg.n_test / n if n else 0.0)
    data_seed = args.seed if args.seed is not None else cfg.data_seed
    splits = gen_synthetic_dataset(n, out, cfg.data_vocab_size, cfg.entity_pool, data_seed, cfg.d_img,
                                   cfg.image_noise, cfg.type_proportions, frac)
    print(f"wrote {len(splits['train'])} train / {len(splits['test'])} test samples to {out}")
    return 0


def cmd_extract_entities(args) -> int:
    seed = args.seed if args.seed is not None else 0
    recognizer = GazetteerRecognizer.from_tsv(args.gazetteer)
    tokens = tokenize(Path(args.article).read_text(encoding="utf-8"))
    windows = slice_article(tokens, args.window, args.stride)
    ents = extract_entities(windows, recognizer)
    image = ImageRef(args.image_id, _load_image_feature(args.image_features, args.image_id))
    top = select_top_k(image, ents, _load_scorer(args.scorer, seed), args.top_k)
    result = {
        "image_id": args.image_id,
        "entities": ents.to_list(),
        "top_k": top.to_list(),
        "partition": partition_by_type(top).to_dict(),
    }
    if args.out:
        _write_json(args.out, result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _partition_from_json(obj) -> TypedEntityPartition:
    if isinstance(obj, list):
        return partition_by_type(EntitySet.from_list(obj))
    if "partition" in obj:
        return TypedEntityPartition.from_dict(obj["partition"])
    if "top_k" in obj:
        return partition_by_type(EntitySet.from_list(obj["top_k"]))
    return TypedEntityPartition.from_dict(obj)


def cmd_build_rule(args) -> int:
    frame = build_frame(_read_json(args.frame))
    vocab = GenericObjectVocabulary.from_tsv(args.vocab) if args.vocab else GenericObjectVocabulary.default()
    variant = Variant(args.variant)
    if variant == Variant.NON_RULE:
        raise ConfigError("NON_RULE has no rule")
    if variant == Variant.NON_ENTITY:
        rule = frame.as_rule()
    else:
        part = _partition_from_json(_read_json(args.entities)) if args.entities else TypedEntityPartition()
        if variant == Variant.PER_RULE:
            part = part.only(EntityType.PER)
        rule = replace_entities(frame, part, vocab)
    text = serialize_rule(rule)
    if args.out:
        _write_json(args.out, {"rule": text, "verb": rule.verb, "pairs": [[r, list(f)] for r, f in rule.pairs]})
    print(text)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    ds = load_dataset(cfg)
    seed = cfg.seeds[0]
    vocab = Vocab.build([s.article for s in ds.train] + [s.caption for s in ds.train])
    scorer = build_scorer(cfg, ds.train, seed)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(scorer, BilinearScorer):
        scorer.save(out / "scorer.json")
    builder = RuleBuilder(ds.recognizer, scorer, ds.object_vocab, cfg.top_k, cfg.window, cfg.stride)
    variants = [args.variant] if args.variant else cfg.variants
    for name in variants:
        variant = Variant(name)
        model = train_variant(cfg, variant, ds, vocab, rule_texts(builder, ds.train, variant), seed)
        extra = {"seed": seed, "inject_layers": list(cfg.layers()), "experiment": cfg.to_dict()}
        save_checkpoint(out / f"{variant.value}.npz", model, vocab, extra)
        print(f"saved {out / (variant.value + '.npz')}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    model, vocab, _ = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise ConfigError(f"{args.checkpoint} carries no vocabulary")
    if args.data:
        samples, _ = read_split(args.data, args.split)
        gaz = args.gazetteer or str(Path(args.data) / "gazetteer.tsv")
        recognizer = GazetteerRecognizer.from_tsv(gaz)
        objects = GenericObjectVocabulary.from_tsv(cfg.object_vocab) if cfg.object_vocab else GenericObjectVocabulary.default()
    else:
        ds = load_dataset(cfg)
        samples, recognizer, objects = ds.test, ds.recognizer, ds.object_vocab
    scorer = _load_scorer(args.scorer, cfg.seeds[0])
    builder = RuleBuilder(recognizer, scorer, objects, cfg.top_k, cfg.window, cfg.stride)
    records = []
    for s in samples:
        trace = run_pipeline(s, builder, model, vocab, beam_size=args.beam_size or cfg.beam_size)
        records.append({"id": s.id, "caption": trace.caption, "rule": trace.rule_text, "top_k": trace.top_k})
    out = Path(args.out) if args.out else _out_dir(cfg) / "hypotheses.jsonl"
    write_jsonl(out, records)
    print(f"wrote {len(records)} captions to {out}")
    return 0


def _captions_by_id(path: str) -> dict[str, list[str]]:
    table = {}
    for rec in read_jsonl(path):
        if "references" in rec:
            table[str(rec["id"])] = list(rec["references"])
        else:
            table[str(rec["id"])] = [rec["caption"]]
    return table


def cmd_evaluate(args) -> int:
    hyps = _captions_by_id(args.hyp)
    refs = _captions_by_id(args.ref)
    missing = sorted(set(hyps) - set(refs))
    if missing:
        raise ConfigError(f"{len(missing)} hypothesis ids have no reference, e.g. {missing[0]!r}")
    ids = sorted(hyps)
    recognizer = GazetteerRecognizer.from_tsv(args.gazetteer) if args.gazetteer else GazetteerRecognizer()
    train_refs = [r["caption"] for r in read_jsonl(args.train_ref)] if args.train_ref else None
    report = evaluate([hyps[i][0] for i in ids], [refs[i] for i in ids], recognizer, args.rarity_threshold, train_refs)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(markdown_table([(Path(args.hyp).stem, report)]), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _out_dir(cfg)
    placements = [p.strip() for p in args.placements.split(",") if p.strip()]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    run_ablation_grid(cfg, variants, placements)
    print(f"wrote {Path(cfg.out_dir) / 'grid.md'}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    _out_dir(cfg)
    report = run_experiment(cfg)
    print(Path(cfg.out_dir, "report.md").read_text(), end="")
    return 0 if report else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (.toml or .json)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="rulecap", parents=[common], description="Rule-driven news captioning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n", type=int, default=None, help="total samples (default n_train + n_test)")
    p.add_argument("--test-fraction", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract-entities", parents=[common], help="extract and rank entities of one article")
    p.add_argument("--article", required=True)
    p.add_argument("--gazetteer", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--image-features", required=True, help="JSON {id: vector}, samples .jsonl or .npz")
    p.add_argument("--scorer", default=None, help="trained scorer JSON (default: hashed stub scorer)")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_extract_entities)

    p = sub.add_parser("build-rule", parents=[common], help="turn a frame and ranked entities into a rule")
    p.add_argument("--frame", required=True)
    p.add_argument("--entities", default=None, help="extract-entities output, a partition or a mention list")
    p.add_argument("--vocab", default=None, help="generic-object TSV (default: bundled vocabulary)")
    p.add_argument("--variant", default="FULL", choices=[v.value for v in Variant])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_build_rule)

    p = sub.add_parser("train", parents=[common], help="train the scorer and captioning models")
    p.add_argument("--variant", default=None, choices=[v.value for v in Variant])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="caption a split with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scorer", default=None)
    p.add_argument("--data", default=None, help="dataset directory (default: the config's data)")
    p.add_argument("--split", default="test")
    p.add_argument("--gazetteer", default=None)
    p.add_argument("--beam-size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--gazetteer", default=None)
    p.add_argument("--train-ref", default=None, help="training captions JSONL for rare-entity counts")
    p.add_argument("--rarity-threshold", type=int, default=5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="variant x placement grid")
    p.add_argument("--variants", default="FULL,NON_RULE,NON_ENTITY,PER_RULE")
    p.add_argument("--placements", default="P1,P2,P3,P4")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", parents=[common], help="train and evaluate every configured variant")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out_dir", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"rulecap: config error: {exc}", file=sys.stderr)
        return 2
    except (RuleCapError, OSError, ValueError, KeyError) as exc:
        print(f"rulecap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
