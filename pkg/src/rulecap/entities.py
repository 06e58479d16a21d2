"""Named-entity extraction, image-guided top-k selection and type partitioning.

The recognizer and scorer are pluggable. ``GazetteerRecognizer`` is a
deterministic gazetteer + capitalization tagger; anything implementing
``recognize(tokens)`` can replace it (e.g. an adapter around a neural NER
model). Both bundled implementations are stateless after construction and
therefore thread-safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Protocol, Sequence

from .errors import InvalidInputError, RecognizerError, ScorerError
from .text import detokenize, normalize_surface, tokenize


class EntityType(str, Enum):
    PER = "PER"
    ORG = "ORG"
    LOC = "LOC"

    @classmethod
    def parse(cls, value: "str | EntityType") -> "EntityType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise InvalidInputError(f"unknown entity type {value!r}; expected PER, ORG or LOC") from None


@dataclass(frozen=True)
class EntityMention:
    surface: str
    etype: EntityType
    span: tuple[int, int]
    score: float = 0.0

    def __post_init__(self):
        if not self.surface or not self.surface.strip():
            raise InvalidInputError("entity surface must be non-empty")
        if not isinstance(self.etype, EntityType):
            object.__setattr__(self, "etype", EntityType.parse(self.etype))
        start, end = self.span
        if not start < end:
            raise InvalidInputError(f"entity span start must be < end, got {self.span}")
        object.__setattr__(self, "span", (int(start), int(end)))

    @property
    def key(self) -> tuple[str, EntityType]:
        return normalize_surface(self.surface), self.etype

    def to_dict(self) -> dict:
        return {"surface": self.surface, "etype": self.etype.value, "span": list(self.span), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "EntityMention":
        return cls(d["surface"], EntityType.parse(d["etype"]), tuple(d["span"]), float(d.get("score", 0.0)))


@dataclass(frozen=True)
class EntitySet:
    """Ordered, deduplicated collection of mentions.

    Use :meth:`from_mentions` to build one from raw recognizer output; the
    constructor itself only validates.
    """

    mentions: tuple[EntityMention, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mentions", tuple(self.mentions))
        keys = [m.key for m in self.mentions]
        if len(set(keys)) != len(keys):
            raise InvalidInputError("EntitySet contains duplicate (surface, type) mentions")

    @classmethod
    def from_mentions(cls, mentions: Iterable[EntityMention]) -> "EntitySet":
        """Dedup by (normalized surface, type), keeping the first article occurrence."""
        ordered = sorted(mentions, key=lambda m: (m.span[0], m.span[1]))
        seen: set = set()
        kept = []
        for m in ordered:
            if m.key not in seen:
                seen.add(m.key)
                kept.append(m)
        return cls(tuple(kept))

    def __len__(self) -> int:
        return len(self.mentions)

    def __iter__(self) -> Iterator[EntityMention]:
        return iter(self.mentions)

    def __getitem__(self, i):
        return self.mentions[i]

    def surfaces(self) -> list[str]:
        return [m.surface for m in self.mentions]

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self.mentions]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "EntitySet":
        return cls(tuple(EntityMention.from_dict(d) for d in items))


@dataclass(frozen=True)
class TypedEntityPartition:
    per: tuple[EntityMention, ...] = ()
    org: tuple[EntityMention, ...] = ()
    loc: tuple[EntityMention, ...] = ()

    def of_type(self, etype: EntityType) -> tuple[EntityMention, ...]:
        return {EntityType.PER: self.per, EntityType.ORG: self.org, EntityType.LOC: self.loc}[etype]

    def all(self) -> list[EntityMention]:
        return [*self.per, *self.org, *self.loc]

    def only(self, *types: EntityType) -> "TypedEntityPartition":
        keep = set(types)
        return TypedEntityPartition(
            per=self.per if EntityType.PER in keep else (),
            org=self.org if EntityType.ORG in keep else (),
            loc=self.loc if EntityType.LOC in keep else (),
        )

    def to_dict(self) -> dict:
        return {k: [m.to_dict() for m in getattr(self, k)] for k in ("per", "org", "loc")}

    @classmethod
    def from_dict(cls, d: dict) -> "TypedEntityPartition":
        return cls(**{k: tuple(EntityMention.from_dict(m) for m in d.get(k, ())) for k in ("per", "org", "loc")})


class Window(NamedTuple):
    start: int
    tokens: list[str]


class EntityRecognizer(Protocol):
    def recognize(self, tokens: Sequence[str]) -> list[tuple[str, EntityType, tuple[int, int]]]:
        """Return (surface, type, local token span) triples for one window."""
        ...


class SimilarityScorer(Protocol):
    def score(self, image, text: str) -> float: ...


def slice_article(article: Sequence[str], window: int = 512, stride: int | None = None) -> list[Window]:
    """Cut a token sequence into windows of ``window`` tokens advancing by ``stride``.

    The last window may be shorter. ``stride`` defaults to ``window``
    (non-overlapping slices).
    """
    if stride is None:
        stride = window
    if window < 1:
        raise InvalidInputError("window must be >= 1")
    if not 1 <= stride <= window:
        raise InvalidInputError("stride must satisfy 1 <= stride <= window")
    tokens = list(article)
    if not tokens:
        raise InvalidInputError("cannot slice an empty article")
    windows = []
    start = 0
    while True:
        windows.append(Window(start, tokens[start : start + window]))
        if start + window >= len(tokens):
            return windows
        start += stride


_HONORIFICS = {"Mr", "Ms", "Mrs", "Dr", "St", "Sen", "Gov", "Rep", "Gen", "Prof"}
_LEADING_DROP = {"The", "A", "An"}


def _is_cap(tok: str) -> bool:
    return tok[:1].isupper()


class GazetteerRecognizer:
    """Longest-match gazetteer lookup plus a capitalization fallback.

    Gazetteer matches are exact on token sequences. Remaining runs of two or
    more capitalized tokens (honorifics like ``Ms.`` may carry their period)
    are tagged with ``default_type``.
    """

    def __init__(self, entries: dict[str, EntityType] | None = None, default_type: EntityType | None = EntityType.PER):
        self.entries: dict[tuple[str, ...], EntityType] = {}
        for surface, etype in (entries or {}).items():
            toks = tuple(tokenize(surface))
            if toks:
                self.entries[toks] = EntityType.parse(etype)
        self.max_len = max((len(k) for k in self.entries), default=0)
        self.default_type = default_type

    @classmethod
    def from_tsv(cls, path: str | Path, **kwargs) -> "GazetteerRecognizer":
        return cls(load_type_table(path), **kwargs)

    def recognize(self, tokens: Sequence[str]) -> list[tuple[str, EntityType, tuple[int, int]]]:
        out = []
        n = len(tokens)
        i = 0
        covered = [False] * n
        while i < n:
            hit = None
            for length in range(min(self.max_len, n - i), 0, -1):
                etype = self.entries.get(tuple(tokens[i : i + length]))
                if etype is not None:
                    hit = (length, etype)
                    break
            if hit:
                length, etype = hit
                out.append((detokenize(tokens[i : i + length]), etype, (i, i + length)))
                for j in range(i, i + length):
                    covered[j] = True
                i += length
            else:
                i += 1
        if self.default_type is not None:
            out.extend(self._capitalized_runs(tokens, covered))
        out.sort(key=lambda t: t[2])
        return out

    def _capitalized_runs(self, tokens, covered):
        n = len(tokens)
        i = 0
        while i < n:
            if covered[i] or not _is_cap(tokens[i]):
                i += 1
                continue
            j = i + 1
            while j < n and not covered[j]:
                if _is_cap(tokens[j]):
                    j += 1
                elif tokens[j] == "." and tokens[j - 1] in _HONORIFICS and j + 1 < n and _is_cap(tokens[j + 1]):
                    j += 1
                else:
                    break
            start = i
            while start < j and tokens[start] in _LEADING_DROP:
                start += 1
            if sum(1 for t in tokens[start:j] if t != ".") >= 2:
                yield detokenize(tokens[start:j]), self.default_type, (start, j)
            i = j


def load_type_table(path: str | Path) -> dict[str, EntityType]:
    """Read a ``surface<TAB>type`` TSV; ``#`` starts a comment line."""
    table: dict[str, EntityType] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip():
                raise InvalidInputError(f"{path}:{lineno}: expected 'surface<TAB>etype'")
            table[parts[0].strip()] = EntityType.parse(parts[1])
    return table


def write_type_table(path: str | Path, table: dict[str, "EntityType | str"], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for surface, etype in table.items():
            fh.write(f"{surface}\t{EntityType.parse(etype).value}\n")


def extract_entities(windows: Sequence[Window], recognizer: EntityRecognizer) -> EntitySet:
    mentions = []
    for idx, win in enumerate(windows):
        try:
            found = recognizer.recognize(win.tokens)
        except Exception as exc:
            raise RecognizerError(idx, exc) from exc
        for surface, etype, (s, e) in found:
            mentions.append(EntityMention(surface, EntityType.parse(etype), (s + win.start, e + win.start)))
    return EntitySet.from_mentions(mentions)


def _rank_key(m: EntityMention):
    return (-m.score, m.span[0], m.surface)


def select_top_k(image, entities: EntitySet, scorer: SimilarityScorer, k: int = 3) -> EntitySet:
    """Keep the ``k`` mentions the scorer rates most similar to ``image``.

    Ties are broken by earlier article position, then by surface string.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    scored = []
    for m in entities:
        s = float(scorer.score(image, m.surface))
        if not math.isfinite(s):
            raise ScorerError(f"non-finite similarity {s} for entity {m.surface!r}", entity=m)
        scored.append(replace(m, score=s))
    scored.sort(key=_rank_key)
    return EntitySet(tuple(scored[:k]))


def partition_by_type(entities: Iterable[EntityMention]) -> TypedEntityPartition:
    buckets: dict[EntityType, list[EntityMention]] = {t: [] for t in EntityType}
    for m in entities:
        buckets[m.etype].append(m)
    return TypedEntityPartition(
        *(tuple(sorted(buckets[t], key=_rank_key)) for t in (EntityType.PER, EntityType.ORG, EntityType.LOC))
    )
