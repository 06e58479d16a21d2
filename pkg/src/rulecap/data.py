"""Dataset records, JSONL I/O and the synthetic news-caption corpus.

A dataset split is ``<split>.jsonl`` (one sample per line) plus a sidecar
``<split>.manifest.json`` with ``d_img``, counts and the split name. Real
GoodNews / NYTimes800k data can be converted into the same layout; see
``scripts/convert_news_dataset.py``.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .entities import EntitySet, EntityType, write_type_table
from .errors import ConfigError, InvalidInputError
from .text import tokenize

MANIFEST_VERSION = 1


@dataclass
class Sample:
    id: str
    article: str
    caption: str
    image_feature: np.ndarray
    frame: dict | None = None
    entities: EntitySet | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image_feature = np.asarray(self.image_feature, dtype=np.float64).reshape(-1)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "article": self.article,
            "caption": self.caption,
            "image_feature": [float(x) for x in self.image_feature],
            "frame": self.frame,
            "entities": self.entities.to_list() if self.entities is not None else None,
        }
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        ents = d.get("entities")
        return cls(
            id=str(d["id"]),
            article=d["article"],
            caption=d.get("caption", ""),
            image_feature=np.asarray(d["image_feature"], dtype=np.float64),
            frame=d.get("frame"),
            entities=EntitySet.from_list(ents) if ents is not None else None,
            meta=d.get("meta", {}),
        )


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_split(directory: str | Path, split: str, samples: Sequence[Sample], extra: dict | None = None) -> None:
    directory = Path(directory)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"duplicate sample ids in split {split!r}")
    dims = {s.image_feature.shape[0] for s in samples}
    if len(dims) > 1:
        raise InvalidInputError(f"split {split!r} mixes image feature dimensions {sorted(dims)}")
    write_jsonl(directory / f"{split}.jsonl", (s.to_dict() for s in samples))
    manifest = {"version": MANIFEST_VERSION, "split": split, "count": len(samples),
                "d_img": dims.pop() if dims else None, **(extra or {})}
    atomic_write_text(directory / f"{split}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_split(directory: str | Path, split: str) -> tuple[list[Sample], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / f"{split}.manifest.json").read_text())
    samples = [Sample.from_dict(d) for d in read_jsonl(directory / f"{split}.jsonl")]
    if len(samples) != manifest["count"]:
        raise InvalidInputError(f"{split}: manifest says {manifest['count']} samples, found {len(samples)}")
    for s in samples:
        if manifest["d_img"] is not None and s.image_feature.shape[0] != manifest["d_img"]:
            raise InvalidInputError(f"sample {s.id}: image dim {s.image_feature.shape[0]} != {manifest['d_img']}")
    return samples, manifest


# ---------------------------------------------------------------------------
# synthetic corpus

_FIRST = ["Anna", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas", "Karin",
          "Lars", "Mira", "Nils", "Olga", "Pedro", "Rosa", "Stefan", "Tara", "Ulrich", "Vera", "Walter"]
_SYL = ["bel", "cor", "dan", "fen", "gal", "har", "kel", "lom", "mar", "nor", "pel", "quin", "ros", "sav",
        "tor", "val", "wen", "yar", "zel", "ash", "bri", "cas", "dov", "eld"]
_ORG_SUFFIX = ["Group", "Council", "Union", "Society", "Institute", "Partners"]

# verb (present participle, past tense, tool objects)
_VERBS = [
    ("performing", "performed", ["guitar", "piano", "violin"]),
    ("speaking", "spoke", ["microphone", "podium"]),
    ("playing", "played", ["ball", "cards"]),
    ("signing", "signed", ["contract", "letter"]),
    ("protesting", "protested", ["banner", "sign"]),
    ("celebrating", "celebrated", ["trophy", "cake"]),
    ("running", "ran", ["torch", "flag"]),
    ("painting", "painted", ["mural", "canvas"]),
    ("cooking", "cooked", ["meal", "soup"]),
    ("building", "built", ["wall", "bridge"]),
    ("teaching", "taught", ["lesson", "class"]),
    ("voting", "voted", ["ballot", "measure"]),
]
_ROLES = {
    EntityType.PER: ["Agent", "Coagent", "Companion"],
    EntityType.ORG: ["Organization", "Partner", "Rival"],
    EntityType.LOC: ["Place", "Destination", "Origin"],
}
_OBJECTS = {
    EntityType.PER: ["man", "woman", "person", "people", "player", "singer"],
    EntityType.ORG: ["team", "company", "group", "club"],
    EntityType.LOC: ["city", "stadium", "theater", "park"],
}
_DAYS = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"]
_MENTIONS = {
    EntityType.PER: [
        "{e} said the season had been difficult .",
        "According to {e} , the plan was announced last week .",
        "{e} , who arrived last year , declined to comment .",
        "Friends of {e} described a long and busy month .",
    ],
    EntityType.ORG: [
        "{e} released a statement about the plan .",
        "Members of {e} met with local officials .",
        "A spokesman for {e} said the budget was approved .",
    ],
    EntityType.LOC: [
        "Residents of {e} welcomed the news .",
        "The weather in {e} was cold and wet .",
        "Officials in {e} expect more visitors next year .",
    ],
}
_FILLER = [
    "The event drew a large crowd .",
    "Tickets sold out within hours .",
    "Several reporters attended the event .",
    "The organizers thanked the volunteers .",
    "Critics praised the performance .",
    "The schedule was changed twice .",
    "Many visitors traveled from nearby towns .",
    "Local shops stayed open late .",
]
DEFAULT_TYPE_PROPORTIONS = {"PER": 0.5, "ORG": 0.2, "LOC": 0.3}


def _named_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def appearance(name: str, d_img: int, seed: int) -> np.ndarray:
    """Fixed random visual signature of a verb, object or entity."""
    return _named_rng(seed, "appearance/" + name).standard_normal(d_img) / np.sqrt(d_img)


def make_entity_pool(n: int, proportions: dict[str, float], seed: int) -> dict[str, EntityType]:
    """``n`` unique invented names, split across types by ``proportions``."""
    rng = _named_rng(seed, "entity-pool")
    counts = _split_counts(n, proportions)
    pool: dict[str, EntityType] = {}
    used_tokens: set[str] = set()

    def word(min_syl=2, max_syl=2):
        for _ in range(10_000):
            w = "".join(rng.choice(_SYL, size=rng.integers(min_syl, max_syl + 1))).capitalize()
            if w not in used_tokens:
                used_tokens.add(w)
                return w
        raise ConfigError("entity pool exhausted the syllable space")

    for etype, count in counts.items():
        made = 0
        while made < count:
            if etype == EntityType.PER:
                name = f"{rng.choice(_FIRST)} {word()}"
            elif etype == EntityType.ORG:
                name = f"{word()} {rng.choice(_ORG_SUFFIX)}"
            else:
                name = word()
            if name not in pool:
                pool[name] = etype
                made += 1
    return pool


def _split_counts(n: int, proportions: dict[str, float]) -> dict[EntityType, int]:
    probs = _normalized_proportions(proportions)
    raw = {t: n * p for t, p in probs.items()}
    counts = {t: int(np.floor(v)) for t, v in raw.items()}
    for t in sorted(raw, key=lambda t: -(raw[t] - counts[t]))[: n - sum(counts.values())]:
        counts[t] += 1
    return counts


def _normalized_proportions(proportions: dict[str, float]) -> dict[EntityType, float]:
    probs = {EntityType.parse(k): float(v) for k, v in proportions.items()}
    total = sum(probs.values())
    if total <= 0 or any(v < 0 for v in probs.values()):
        raise ConfigError("type proportions must be non-negative and sum to a positive value")
    return {t: probs.get(t, 0.0) / total for t in EntityType}


def _join(names: Sequence[str]) -> str:
    if len(names) <= 1:
        return "".join(names)
    return " , ".join(names[:-1]) + " and " + names[-1]


def generate_sample(i: int, pool_by_type: dict[EntityType, list[str]], probs: dict[EntityType, float],
                    d_img: int, image_noise: float, seed: int) -> Sample:
    rng = _named_rng(seed, f"sample/{i}")
    verb, past, tools = _VERBS[rng.integers(len(_VERBS))]
    n_slots = int(rng.choice([1, 2, 3], p=[0.3, 0.4, 0.3]))
    types = [EntityType.PER, EntityType.ORG, EntityType.LOC]
    slot_types = [types[rng.choice(3, p=[probs[t] for t in types])] for _ in range(n_slots)]
    chosen: dict[EntityType, list[str]] = {t: [] for t in types}
    for t in slot_types:
        options = [e for e in pool_by_type[t] if e not in chosen[t]]
        chosen[t].append(options[rng.integers(len(options))])

    pairs = []
    visual = [verb]
    for t in types:
        for k, name in enumerate(chosen[t]):
            obj = _OBJECTS[t][rng.integers(len(_OBJECTS[t]))]
            pairs.append((_ROLES[t][k], obj))
            visual.append(name)
    agent_obj = None
    if not chosen[EntityType.PER]:
        agent_obj = _OBJECTS[EntityType.PER][rng.integers(len(_OBJECTS[EntityType.PER]))]
        pairs.insert(0, ("Agent", agent_obj))
        visual.append(agent_obj)
    tool = None
    if rng.random() < 0.5:
        tool = tools[rng.integers(len(tools))]
        pairs.append(("Tool", tool))
        visual.append(tool)
    day = _DAYS[rng.integers(len(_DAYS))]

    words = [_join(chosen[EntityType.PER]) if chosen[EntityType.PER] else f"The {agent_obj}", past]
    if tool:
        words.append(f"the {tool}")
    if chosen[EntityType.ORG]:
        words.append(f"with {_join(chosen[EntityType.ORG])}")
    if chosen[EntityType.LOC]:
        words.append(f"in {_join(chosen[EntityType.LOC])}")
    words.append(f"on {day} .")
    caption = " ".join(words)

    caption_entities = [(n, t) for t in types for n in chosen[t]]
    n_total = int(rng.integers(max(2, n_slots), 6))
    distractors: list[tuple[str, EntityType]] = []
    taken = {n for n, _ in caption_entities}
    while len(caption_entities) + len(distractors) < n_total:
        t = types[rng.choice(3, p=[probs[t] for t in types])]
        name = pool_by_type[t][rng.integers(len(pool_by_type[t]))]
        if name not in taken:
            taken.add(name)
            distractors.append((name, t))
    mentions = caption_entities + distractors
    order = rng.permutation(len(mentions))
    sentences = []
    for j in order:
        name, t = mentions[j]
        templates = _MENTIONS[t]
        sentences.append(templates[rng.integers(len(templates))].format(e=name))
    for _ in range(int(rng.integers(1, 3))):
        sentences.insert(int(rng.integers(len(sentences) + 1)), _FILLER[rng.integers(len(_FILLER))])
    sentences.insert(int(rng.integers(len(sentences) + 1)), f"The event took place on {day} .")
    article = " ".join(sentences)

    feature = sum(appearance(v, d_img, seed) for v in visual)
    feature = feature + image_noise * rng.standard_normal(d_img) / np.sqrt(d_img)
    return Sample(
        id=f"syn-{i:06d}",
        article=article,
        caption=caption,
        image_feature=np.round(feature, 8),
        frame={"verb": verb, "roles": [{"role": r, "object": o} for r, o in pairs]},
        meta={
            "caption_entities": [[n, t.value] for n, t in caption_entities],
            "distractors": [[n, t.value] for n, t in distractors],
        },
    )


def gen_synthetic_dataset(
    n: int,
    out_dir: str | Path | None = None,
    vocab_size: int = 500,
    entity_pool: int = 120,
    seed: int = 0,
    d_img: int = 64,
    image_noise: float = 0.5,
    type_proportions: dict[str, float] | None = None,
    test_fraction: float = 0.0,
) -> dict[str, list[Sample]]:
    """Generate ``n`` templated samples, optionally writing them to ``out_dir``.

    Every article mentions 2-5 typed entities. The caption realizes a
    situation frame whose named slots are filled by 1-3 of those entities;
    the rest are distractors. The image feature is the sum of fixed random
    signatures of the verb, the depicted entities and objects, plus noise,
    so it identifies the event without naming anyone.

    Writes ``train``/``test`` splits, their manifests and ``gazetteer.tsv``.
    Raises ``ConfigError`` if the corpus vocabulary exceeds ``vocab_size``.
    """
    if n < 0:
        raise ConfigError("n must be >= 0")
    proportions = type_proportions or DEFAULT_TYPE_PROPORTIONS
    probs = _normalized_proportions(proportions)
    pool = make_entity_pool(entity_pool, proportions, seed)
    pool_by_type = {t: [e for e, et in pool.items() if et == t] for t in EntityType}
    for t, p in probs.items():
        if p > 0 and len(pool_by_type[t]) < 4:
            raise ConfigError(f"entity pool has too few {t.value} entities for the configured proportions")
    samples = [generate_sample(i, pool_by_type, probs, d_img, image_noise, seed) for i in range(n)]
    vocab = corpus_vocabulary(samples)
    if len(vocab) > vocab_size:
        raise ConfigError(f"synthetic corpus uses {len(vocab)} token types, above vocab_size={vocab_size}")
    n_test = int(round(n * test_fraction))
    splits = {"train": samples[: n - n_test], "test": samples[n - n_test :]}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"generator": "rulecap-synthetic", "seed": seed, "entity_pool": entity_pool,
                 "image_noise": image_noise, "type_proportions": {t.value: probs[t] for t in EntityType}}
        for split, items in splits.items():
            write_split(out_dir, split, items, extra)
        write_type_table(out_dir / "gazetteer.tsv", pool, header="synthetic entity pool: surface<TAB>etype")
    return splits


def corpus_vocabulary(samples: Iterable[Sample]) -> set[str]:
    vocab: set[str] = set()
    for s in samples:
        vocab.update(tokenize(s.article))
        vocab.update(tokenize(s.caption))
    return vocab


def caption_type_histogram(samples: Iterable[Sample]) -> dict[str, float]:
    counts: Counter = Counter()
    for s in samples:
        counts.update(t for _, t in s.meta.get("caption_entities", []))
    total = sum(counts.values())
    return {t.value: counts[t.value] / total if total else 0.0 for t in EntityType}
