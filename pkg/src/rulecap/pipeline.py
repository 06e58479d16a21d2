"""Per-sample pipeline, experiment runner and ablation grid.

Stage order for one sample: slice -> extract -> top-k -> partition -> frame
-> replace -> serialize -> encode -> decode. Every stage result is plain
JSON (see :class:`PipelineTrace`) and a run can resume from any cached stage.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Sample, atomic_write_text, gen_synthetic_dataset, read_split
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
from .errors import ConfigError, StageError
from .metrics import EvalReport, evaluate, markdown_table
from .model import (
    ModelConfig,
    RuleCapModel,
    Variant,
    collate,
    decode_beam,
    decode_greedy,
    fit,
    placement_layers,
    rule_features,
    set_variant,
)
from .rules import GenericObjectVocabulary, SituationFrame, build_frame, replace_entities, serialize_rule
from .scoring import BilinearScorer, ImageRef, StubScorer, train_scorer_contrastive
from .text import Vocab, tokenize

log = logging.getLogger(__name__)


def derive_seed(master: int, name: str) -> int:
    """Per-stage seed derived from the master seed and a stage name."""
    digest = hashlib.blake2b(f"{master}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**31 - 1)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list = field(default_factory=lambda: [0])
    variants: list = field(default_factory=lambda: ["FULL", "NON_RULE"])
    placement: str = "P4"
    inject_layers: list = field(default_factory=list)
    top_k: int = 3
    window: int = 512
    stride: int = 0
    # data
    data_dir: str = ""
    n_train: int = 2000
    n_test: int = 300
    data_seed: int = 0
    entity_pool: int = 120
    data_vocab_size: int = 500
    d_img: int = 64
    image_noise: float = 0.5
    type_proportions: dict = field(default_factory=lambda: {"PER": 0.5, "ORG": 0.2, "LOC": 0.3})
    gazetteer: str = ""
    object_vocab: str = ""
    # scorer
    scorer: str = "trained"
    scorer_epochs: int = 20
    scorer_lr: float = 1e-2
    scorer_batch: int = 32
    d_txt: int = 256
    # model
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    d_ff: int = 128
    prefix_len: int = 2
    d_rule_txt: int = 512
    rule_segments: int = 1
    rule_input: bool = True
    rule_injection: bool = True
    max_src_len: int = 96
    max_tgt_len: int = 20
    max_gen_len: int = 32
    dropout: float = 0.1
    tie_embeddings: bool = True
    init_std: float = 0.1
    # training
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    beam_size: int = 1
    rarity_threshold: int = 5
    out_dir: str = ""

    def __post_init__(self):
        self.variants = [Variant(v).value for v in self.variants]
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.scorer not in ("trained", "stub"):
            raise ConfigError("scorer must be 'trained' or 'stub'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} does not exist")
        text = path.read_text()
        if path.suffix == ".toml":
            import toml

            return cls.from_dict(toml.loads(text))
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Check that every referenced file exists."""
        for key in ("data_dir", "gazetteer", "object_vocab"):
            value = getattr(self, key)
            if value and not Path(value).exists():
                raise ConfigError(f"{key} {value!r} does not exist")

    def layers(self) -> tuple[int, ...]:
        if self.inject_layers:
            return tuple(int(i) for i in self.inject_layers)
        return placement_layers(self.placement, self.n_enc_layers)

    def model_config(self, vocab_size: int, use_rule: bool = True) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads, n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers, d_ff=self.d_ff, inject_layers=self.layers(), prefix_len=self.prefix_len,
            d_img=self.d_img, d_rule_txt=self.d_rule_txt, rule_segments=self.rule_segments,
            max_src_len=self.max_src_len, max_tgt_len=self.max_gen_len, dropout=self.dropout, use_rule=use_rule,
            rule_input=self.rule_input, rule_injection=self.rule_injection, tie_embeddings=self.tie_embeddings,
            init_std=self.init_std,
        )


@dataclass
class PipelineTrace:
    """JSON-serializable outputs of each pipeline stage for one sample."""

    sample_id: str
    entities: list | None = None
    top_k: list | None = None
    partition: dict | None = None
    frame: dict | None = None
    rule_text: str | None = None
    caption: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineTrace":
        return cls(**d)


class RuleBuilder:
    """Stages slice .. serialize for one variant."""

    def __init__(self, recognizer, scorer, object_vocab: GenericObjectVocabulary, top_k: int = 3,
                 window: int = 512, stride: int | None = None):
        self.recognizer = recognizer
        self.scorer = scorer
        self.object_vocab = object_vocab
        self.top_k = top_k
        self.window = window
        self.stride = stride or None

    def _stage(self, name, sample_id, fn, *args):
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, sample_id, exc) from exc

    def trace(self, sample: Sample, variant: Variant | str = Variant.FULL, cached: PipelineTrace | None = None) -> PipelineTrace:
        variant = Variant(variant)
        t = PipelineTrace(sample.id) if cached is None else replace(cached)
        if variant == Variant.NON_RULE:
            return t
        if t.rule_text is not None:
            return t
        sid = sample.id
        frame = self._stage("frame", sid, build_frame, t.frame if t.frame is not None else (sample.frame or {}))
        t.frame = frame.to_annotation()
        if variant == Variant.NON_ENTITY:
            t.rule_text = serialize_rule(frame.as_rule())
            return t
        if t.partition is None:
            if t.top_k is None:
                if t.entities is None:
                    if sample.entities is not None:
                        ents = sample.entities
                    else:
                        windows = self._stage("slice", sid, slice_article, tokenize(sample.article), self.window, self.stride)
                        ents = self._stage("extract", sid, extract_entities, windows, self.recognizer)
                    t.entities = ents.to_list()
                image = ImageRef(sid, sample.image_feature)
                top = self._stage("top-k", sid, select_top_k, image, EntitySet.from_list(t.entities), self.scorer, self.top_k)
                t.top_k = top.to_list()
            part = self._stage("partition", sid, partition_by_type, EntitySet.from_list(t.top_k))
            t.partition = part.to_dict()
        part = TypedEntityPartition.from_dict(t.partition)
        if variant == Variant.PER_RULE:
            part = part.only(EntityType.PER)
        rule = self._stage("replace", sid, replace_entities, frame, part, self.object_vocab)
        t.rule_text = self._stage("serialize", sid, serialize_rule, rule)
        return t


def encode_sample(sample: Sample, vocab: Vocab, rule_text: str | None, cfg: ModelConfig, with_target=True) -> dict:
    item = {"id": sample.id, "image": sample.image_feature, "src": vocab.encode(sample.article)}
    if cfg.use_rule:
        item["rule"], item["rule_pad"] = rule_features(rule_text, cfg.d_rule_txt, cfg.rule_segments, cfg.text_seed)
    if with_target:
        item["tgt"] = vocab.encode(sample.caption)
    return item


def make_batches(items: Sequence[dict], batch_size: int, cfg: ModelConfig, max_tgt_len: int, shuffle_seed=None):
    order = list(range(len(items)))
    if shuffle_seed is not None:
        order = torch.randperm(len(items), generator=torch.Generator().manual_seed(shuffle_seed)).tolist()
    for start in range(0, len(order), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        yield collate(chunk, Vocab.pad_id, Vocab.bos_id, Vocab.eos_id, cfg.max_src_len, max_tgt_len)


def generate_captions(model: RuleCapModel, items: Sequence[dict], vocab: Vocab, batch_size: int = 64,
                      beam_size: int = 1, max_len: int | None = None) -> list[str]:
    out = []
    for batch in make_batches(items, batch_size, model.cfg, model.cfg.max_tgt_len):
        if beam_size > 1:
            gens = decode_beam(model, batch, beam_size, max_len)
        else:
            gens = decode_greedy(model, batch, max_len)
        out.extend(vocab.decode(g.tokens) for g in gens)
    return out


def rule_texts(builder: RuleBuilder, samples: Sequence[Sample], variant: Variant | str) -> list[str | None]:
    if Variant(variant) == Variant.NON_RULE:
        return [None] * len(samples)
    return [builder.trace(s, variant).rule_text for s in samples]


def run_pipeline(sample: Sample, builder: RuleBuilder, model: RuleCapModel, vocab: Vocab,
                 cached: PipelineTrace | None = None, beam_size: int = 1) -> PipelineTrace:
    """Full pipeline for one sample; returns the trace including the caption."""
    trace = builder.trace(sample, model.variant, cached)
    try:
        item = encode_sample(sample, vocab, trace.rule_text, model.cfg, with_target=False)
        trace.caption = generate_captions(model, [item], vocab, beam_size=beam_size)[0]
    except Exception as exc:
        raise StageError("generate", sample.id, exc) from exc
    return trace


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    recognizer: GazetteerRecognizer
    object_vocab: GenericObjectVocabulary
    source: str


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    cfg.validate()
    if cfg.data_dir:
        train, _ = read_split(cfg.data_dir, "train")
        test, _ = read_split(cfg.data_dir, "test")
        gaz = cfg.gazetteer or str(Path(cfg.data_dir) / "gazetteer.tsv")
        source = cfg.data_dir
    else:
        n = cfg.n_train + cfg.n_test
        splits = gen_synthetic_dataset(n, None, cfg.data_vocab_size, cfg.entity_pool, cfg.data_seed, cfg.d_img,
                                       cfg.image_noise, cfg.type_proportions, cfg.n_test / n if n else 0.0)
        train, test = splits["train"], splits["test"]
        from .data import make_entity_pool

        pool = make_entity_pool(cfg.entity_pool, cfg.type_proportions, cfg.data_seed)
        recognizer = GazetteerRecognizer(pool)
        gaz = None
        source = f"synthetic(seed={cfg.data_seed})"
    if gaz is not None:
        recognizer = GazetteerRecognizer.from_tsv(gaz)
    objects = GenericObjectVocabulary.from_tsv(cfg.object_vocab) if cfg.object_vocab else GenericObjectVocabulary.default()
    return Dataset(train, test, recognizer, objects, source)


def build_scorer(cfg: ExperimentConfig, train: Sequence[Sample], seed: int):
    if cfg.scorer == "stub":
        return StubScorer(derive_seed(seed, "stub-scorer"))
    pairs = [(ImageRef(s.id, s.image_feature), s.caption) for s in train]
    return train_scorer_contrastive(pairs, cfg.scorer_epochs, cfg.scorer_lr, cfg.scorer_batch, cfg.d_txt,
                                    seed=derive_seed(seed, "scorer"), text_seed=derive_seed(seed, "scorer-text"))


def topk_hit_rate(traces: Sequence[PipelineTrace], samples: Sequence[Sample]) -> float:
    """Fraction of depicted (caption) entities that made it into the top-k."""
    hit = total = 0
    for t, s in zip(traces, samples):
        gold = {n for n, _ in s.meta.get("caption_entities", [])}
        chosen = {m["surface"] for m in (t.top_k or [])}
        hit += len(gold & chosen)
        total += len(gold)
    return hit / total if total else float("nan")


def train_variant(cfg: ExperimentConfig, variant: Variant, ds: Dataset, vocab: Vocab, train_rules: list[str | None],
                  seed: int) -> RuleCapModel:
    mcfg = cfg.model_config(len(vocab), use_rule=variant != Variant.NON_RULE)
    torch.manual_seed(derive_seed(seed, "model-init"))
    model = set_variant(RuleCapModel(mcfg), variant)
    items = [encode_sample(s, vocab, r, mcfg) for s, r in zip(ds.train, train_rules)]
    shuffle = derive_seed(seed, "shuffle")
    fit(model, lambda epoch: make_batches(items, cfg.batch_size, mcfg, cfg.max_tgt_len, shuffle + epoch), cfg.epochs,
        cfg.lr, cfg.weight_decay, cfg.warmup_steps)
    return model


def _mean_report(reports: Sequence[EvalReport]) -> dict:
    keys = [f.name for f in fields(EvalReport) if f.name != "n_samples"]
    return {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in keys} | {
        "n_samples": reports[0].n_samples
    }


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None, write: bool = True) -> dict:
    """Train and evaluate every requested variant for every seed.

    Returns the report dict; when ``cfg.out_dir`` is set and ``write`` is
    true, also writes ``report.json``, ``report.md`` and ``metadata.json``.
    """
    ds = dataset or load_dataset(cfg)
    vocab = Vocab.build([s.article for s in ds.train] + [s.caption for s in ds.train])
    refs = [s.caption for s in ds.test]
    train_refs = [s.caption for s in ds.train]
    results: dict[str, dict] = {v: {"per_seed": []} for v in cfg.variants}
    diagnostics = []
    for seed in cfg.seeds:
        torch.manual_seed(derive_seed(seed, "global"))
        scorer = build_scorer(cfg, ds.train, seed) if any(v != "NON_RULE" for v in cfg.variants) else None
        builder = RuleBuilder(ds.recognizer, scorer, ds.object_vocab, cfg.top_k, cfg.window, cfg.stride)
        cache_train = [None] * len(ds.train)
        cache_test = [None] * len(ds.test)
        for name in cfg.variants:
            variant = Variant(name)
            if variant == Variant.NON_RULE:
                train_rules, test_rules = [None] * len(ds.train), [None] * len(ds.test)
            else:
                tr = [builder.trace(s, variant, _strip_rule(c)) for s, c in zip(ds.train, cache_train)]
                te = [builder.trace(s, variant, _strip_rule(c)) for s, c in zip(ds.test, cache_test)]
                if variant == Variant.FULL or cache_train[0] is None:
                    cache_train, cache_test = tr, te
                train_rules = [t.rule_text for t in tr]
                test_rules = [t.rule_text for t in te]
                if variant == Variant.FULL and ds.test and ds.test[0].meta.get("caption_entities") is not None:
                    diagnostics.append({"seed": seed, "test_topk_hit_rate": topk_hit_rate(te, ds.test)})
            model = train_variant(cfg, variant, ds, vocab, train_rules, seed)
            items = [encode_sample(s, vocab, r, model.cfg, with_target=False) for s, r in zip(ds.test, test_rules)]
            hyps = generate_captions(model, items, vocab, beam_size=cfg.beam_size, max_len=cfg.max_gen_len)
            report = evaluate(hyps, refs, ds.recognizer, cfg.rarity_threshold, train_refs)
            results[name]["per_seed"].append({"seed": seed, **report.to_dict()})
            results[name].setdefault("examples", [])
            if seed == cfg.seeds[0]:
                results[name]["examples"] = [
                    {"id": s.id, "rule": r, "hypothesis": h, "reference": s.caption}
                    for s, r, h in list(zip(ds.test, test_rules, hyps))[:5]
                ]
            log.info("seed %d %s: %s", seed, name, report.percent())
    for name in cfg.variants:
        per = [EvalReport(**{k: v for k, v in r.items() if k != "seed"}) for r in results[name]["per_seed"]]
        results[name]["mean"] = _mean_report(per)
    report = {
        "name": cfg.name,
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"},
        "inject_layers": list(cfg.layers()),
        "dataset": {"source": ds.source, "n_train": len(ds.train), "n_test": len(ds.test), "vocab_size": len(vocab)},
        "results": results,
        "diagnostics": diagnostics,
    }
    if write and cfg.out_dir:
        write_report(cfg.out_dir, report)
    return report


def _strip_rule(trace: PipelineTrace | None) -> PipelineTrace | None:
    return None if trace is None else replace(trace, rule_text=None, caption=None)


def write_report(out_dir: str | Path, report: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    rows = [(name, EvalReport(**res["mean"])) for name, res in report["results"].items()]
    md = f"# {report['name']}\n\nInjected layers: {report['inject_layers']}, seeds: {report['config']['seeds']}\n\n"
    atomic_write_text(out / "report.md", md + markdown_table(rows))
    meta = {
        "variants": report["config"]["variants"],
        "inject_layers": report["inject_layers"],
        "seeds": report["config"]["seeds"],
        "derived_seeds": {
            str(s): {k: derive_seed(s, k) for k in ("global", "scorer", "scorer-text", "model-init", "shuffle")}
            for s in report["config"]["seeds"]
        },
        "schedule": {"optimizer": "AdamW", "lr": report["config"]["lr"], "warmup_steps": report["config"]["warmup_steps"],
                     "decay": "linear", "epochs": report["config"]["epochs"]},
        "metrics": {name: res["mean"] for name, res in report["results"].items()},
    }
    atomic_write_text(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def run_ablation_grid(base: ExperimentConfig, variants: Sequence[str] = ("FULL", "NON_RULE", "NON_ENTITY", "PER_RULE"),
                      placements: Sequence[str] = ("P4",), dataset: Dataset | None = None) -> dict:
    """Every variant at every placement, sharing seeds and data.

    ``NON_RULE`` ignores placement, so it is trained once.
    """
    ds = dataset or load_dataset(base)
    reports = {}
    for placement in placements:
        vs = [v for v in variants if v != "NON_RULE" or placement == placements[0]]
        cfg = replace(base, placement=placement, inject_layers=[], variants=list(vs),
                      out_dir=str(Path(base.out_dir) / placement) if base.out_dir else "")
        reports[placement] = run_experiment(cfg, ds)
    grid = {"name": base.name, "placements": list(placements), "variants": list(variants), "reports": reports}
    if base.out_dir:
        out = Path(base.out_dir)
        atomic_write_text(out / "grid.json", json.dumps(grid, indent=2, sort_keys=True) + "\n")
        rows = []
        for placement, rep in reports.items():
            for name, res in rep["results"].items():
                rows.append((f"{name} @ {placement} {rep['inject_layers']}", EvalReport(**res["mean"])))
        atomic_write_text(out / "grid.md", f"# {base.name}: ablation grid\n\n" + markdown_table(rows, "Variant @ placement"))
    return grid
