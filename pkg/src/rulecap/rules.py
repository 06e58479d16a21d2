"""Situation frames, generic-object vocabulary and entity replacement.

A frame is a verb plus ordered (role, generic object) pairs as emitted by a
situation-recognition model. Replacing the in-vocabulary objects with the
selected named entities of the matching type yields the semantic rule that
conditions the caption generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .entities import EntityType, TypedEntityPartition, load_type_table
from .errors import InvalidFrameError, RuleParseError
from .text import normalize_surface


@dataclass(frozen=True)
class SituationFrame:
    verb: str
    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.verb or not self.verb.strip():
            raise InvalidFrameError("frame verb must be non-empty")
        pairs = tuple((str(r), str(o)) for r, o in self.pairs)
        roles = [r for r, _ in pairs]
        if len(set(roles)) != len(roles):
            dup = next(r for r in roles if roles.count(r) > 1)
            raise InvalidFrameError(f"duplicate role {dup!r} in frame")
        for role, obj in pairs:
            if not role.strip() or not obj.strip():
                raise InvalidFrameError("every role and object must be non-empty")
        object.__setattr__(self, "pairs", pairs)

    @property
    def n(self) -> int:
        return len(self.pairs)

    def to_annotation(self) -> dict:
        return {"verb": self.verb, "roles": [{"role": r, "object": o} for r, o in self.pairs]}

    def as_rule(self) -> "SemanticRule":
        """The frame read as a rule with every generic object left in place."""
        return SemanticRule(self.verb, tuple((r, (o,)) for r, o in self.pairs))


def build_frame(annotation: Mapping | str) -> SituationFrame:
    """Validate a FrameAnnotation (dict or JSON text) into a SituationFrame."""
    if isinstance(annotation, str):
        annotation = json.loads(annotation)
    try:
        verb = annotation["verb"]
        roles = annotation.get("roles", [])
        pairs = tuple((item["role"], item["object"]) for item in roles)
    except (KeyError, TypeError) as exc:
        raise InvalidFrameError(f"malformed frame annotation: {exc}") from exc
    return SituationFrame(verb, pairs)


def _check_field(text: str, what: str) -> None:
    if not isinstance(text, str) or not text or text != text.strip() or "\n" in text or "\r" in text:
        raise ValueError(f"{what} must be a non-empty single-line string without surrounding whitespace: {text!r}")


@dataclass(frozen=True)
class SemanticRule:
    verb: str
    pairs: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        pairs = tuple((r, tuple(f)) for r, f in self.pairs)
        _check_field(self.verb, "verb")
        roles = [r for r, _ in pairs]
        if len(set(roles)) != len(roles):
            raise InvalidFrameError("duplicate role in rule")
        for role, fillers in pairs:
            _check_field(role, "role")
            if not fillers:
                raise ValueError(f"role {role!r} has no fillers")
            for f in fillers:
                _check_field(f, "filler")
        object.__setattr__(self, "pairs", pairs)

    def fillers(self) -> list[str]:
        return [f for _, fs in self.pairs for f in fs]

    def segments(self) -> list[str]:
        """Verb followed by one ``role: fillers`` string per pair."""
        return [self.verb] + [f"{r}: {', '.join(fs)}" for r, fs in self.pairs]


class GenericObjectVocabulary:
    """Maps generic object nouns (``people``, ``city``...) to an entity type."""

    def __init__(self, entries: Mapping[str, "EntityType | str"]):
        self.entries: dict[str, EntityType] = {}
        for obj, etype in entries.items():
            key = normalize_surface(obj)
            if not key:
                raise ValueError("vocabulary keys must be non-empty")
            self.entries[key] = EntityType.parse(etype)

    def lookup(self, obj: str) -> EntityType | None:
        return self.entries.get(normalize_surface(obj))

    def __contains__(self, obj: str) -> bool:
        return self.lookup(obj) is not None

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "GenericObjectVocabulary":
        return cls(load_type_table(path))

    @classmethod
    def default(cls) -> "GenericObjectVocabulary":
        with resources.as_file(resources.files("rulecap") / "resources" / "generic_objects.tsv") as p:
            return cls.from_tsv(p)


def replace_entities(
    frame: SituationFrame, partition: TypedEntityPartition, vocab: GenericObjectVocabulary
) -> SemanticRule:
    """Fill every in-vocabulary generic object with the entities of its type.

    One deterministic pass over the role pairs. A slot whose type has no
    selected entities keeps its generic object.
    """
    pairs = []
    for role, obj in frame.pairs:
        etype = vocab.lookup(obj)
        candidates = partition.of_type(etype) if etype is not None else ()
        if candidates:
            pairs.append((role, tuple(m.surface for m in candidates)))
        else:
            pairs.append((role, (obj,)))
    return SemanticRule(frame.verb, tuple(pairs))


_SPECIAL = "\\|:,"


def _escape(text: str) -> str:
    return "".join("\\" + ch if ch in _SPECIAL else ch for ch in text)


def serialize_rule(rule: SemanticRule) -> str:
    """Canonical single-line form ``verb | role: a, b | role2: c``."""
    parts = [_escape(rule.verb)]
    for role, fillers in rule.pairs:
        parts.append(f"{_escape(role)}: {', '.join(_escape(f) for f in fillers)}")
    return " | ".join(parts)


def _split(text: str, sep: str, offset: int, maxsplit: int = -1) -> list[tuple[str, int]]:
    """Split on unescaped ``sep``; returns raw (still escaped) chunks with their column."""
    chunks = []
    buf_start = 0
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if i + 1 >= len(text):
                raise RuleParseError("dangling escape character", offset + i + 1)
            i += 2
            continue
        if ch == sep and (maxsplit < 0 or len(chunks) < maxsplit):
            chunks.append((text[buf_start:i], offset + buf_start))
            buf_start = i + 1
        i += 1
    chunks.append((text[buf_start:], offset + buf_start))
    return chunks


def _unescape_field(raw: str, col: int, what: str) -> str:
    lead = len(raw) - len(raw.lstrip(" "))
    stripped = raw.strip(" ")
    if not stripped:
        raise RuleParseError(f"empty {what}", col + 1)
    out = []
    i = 0
    while i < len(stripped):
        ch = stripped[i]
        if ch == "\\":
            out.append(stripped[i + 1])
            i += 2
        elif ch in _SPECIAL:
            raise RuleParseError(f"unexpected {ch!r} in {what}", col + lead + i + 1)
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def parse_rule(text: str) -> SemanticRule:
    """Inverse of :func:`serialize_rule`. Columns in errors are 1-based."""
    if "\n" in text or "\r" in text:
        raise RuleParseError("rule text must be a single line", text.find("\n" if "\n" in text else "\r") + 1)
    segments = _split(text, "|", 0)
    verb = _unescape_field(*segments[0], "verb")
    pairs = []
    for raw, col in segments[1:]:
        role_part = _split(raw, ":", col, maxsplit=1)
        if len(role_part) != 2:
            raise RuleParseError("expected 'role: fillers'", col + 1)
        (role_raw, role_col), (fill_raw, fill_col) = role_part
        role = _unescape_field(role_raw, role_col, "role")
        fillers = tuple(_unescape_field(f, c, "filler") for f, c in _split(fill_raw, ",", fill_col))
        pairs.append((role, fillers))
    try:
        return SemanticRule(verb, tuple(pairs))
    except (ValueError, InvalidFrameError) as exc:
        raise RuleParseError(str(exc), 1) from exc
