"""Caption metrics: BLEU-4, ROUGE-L, CIDEr and entity precision/recall.

Text metrics work on lower-cased tokens with punctuation-only tokens removed.
Every function takes ``hypotheses`` as a list of strings and ``references``
as a list of reference lists (one list per hypothesis); a bare string is
accepted as a single reference. Corpus sums use ``math.fsum`` so results do
not depend on sample order.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

from .entities import EntityRecognizer, EntityType
from .text import normalize_surface, tokenize


def metric_tokens(text: str) -> list[str]:
    return [t.lower() for t in tokenize(text) if any(ch.isalnum() for ch in t)]


def _as_ref_lists(references) -> list[list[str]]:
    return [[r] if isinstance(r, str) else list(r) for r in references]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_lengths(hypotheses, references):
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")


def bleu4(hypotheses: Sequence[str], references, max_n: int = 4) -> float:
    """Corpus BLEU with clipped n-gram precision, uniform weights and brevity penalty."""
    refs = _as_ref_lists(references)
    _check_lengths(hypotheses, refs)
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, rset in zip(hypotheses, refs):
        h = metric_tokens(hyp)
        rs = [metric_tokens(r) for r in rset]
        hyp_len += len(h)
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1] if rs else 0
        for n in range(1, max_n + 1):
            hc = ngrams(h, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
    if hyp_len == 0 or min(matched) == 0:
        return 0.0
    log_p = math.fsum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: str, refs: Sequence[str], beta: float = 1.2) -> float:
    h = metric_tokens(hyp)
    if not h:
        return 0.0
    precs, recs = [], []
    for ref in refs:
        r = metric_tokens(ref)
        lcs = lcs_length(h, r)
        precs.append(lcs / len(h))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(hypotheses: Sequence[str], references, beta: float = 1.2) -> float:
    """Mean sentence-level LCS F-measure (recall weighted by ``beta``)."""
    refs = _as_ref_lists(references)
    _check_lengths(hypotheses, refs)
    if not hypotheses:
        return 0.0
    return math.fsum(rouge_l_sentence(h, r, beta) for h, r in zip(hypotheses, refs)) / len(hypotheses)


def document_frequency(references, max_n: int = 4) -> tuple[Counter, int]:
    """n-gram document frequencies over reference sets; each set counts once per n-gram."""
    refs = _as_ref_lists(references)
    df: Counter = Counter()
    for rset in refs:
        seen = set()
        for r in rset:
            toks = metric_tokens(r)
            for n in range(1, max_n + 1):
                seen.update(ngrams(toks, n))
        df.update(seen)
    return df, len(refs)


def _tfidf(tokens, n, df, log_n):
    vec = {}
    for g, c in ngrams(tokens, n).items():
        vec[g] = c * (log_n - math.log(max(1.0, df.get(g, 0))))
    return vec


def _cos(a: dict, b: dict) -> float:
    na = math.sqrt(math.fsum(v * v for v in a.values()))
    nb = math.sqrt(math.fsum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return math.fsum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_per_sample(hypotheses: Sequence[str], references, idf_corpus=None, max_n: int = 4) -> list[float]:
    refs = _as_ref_lists(references)
    _check_lengths(hypotheses, refs)
    df, n_docs = document_frequency(refs if idf_corpus is None else idf_corpus, max_n)
    log_n = math.log(max(1, n_docs))
    scores = []
    for hyp, rset in zip(hypotheses, refs):
        h = metric_tokens(hyp)
        rs = [metric_tokens(r) for r in rset]
        per_n = []
        for n in range(1, max_n + 1):
            hv = _tfidf(h, n, df, log_n)
            per_n.append(math.fsum(_cos(hv, _tfidf(r, n, df, log_n)) for r in rs) / max(1, len(rs)))
        scores.append(math.fsum(per_n) / max_n)
    return scores


def cider(hypotheses: Sequence[str], references, idf_corpus=None, max_n: int = 4) -> float:
    """CIDEr: mean over n = 1..4 of tf-idf cosine similarity, averaged over references.

    Document frequencies come from ``idf_corpus`` (defaults to ``references``),
    never from the hypotheses. This is the un-scaled, un-clipped form, bounded
    by [0, 1].
    """
    scores = cider_per_sample(hypotheses, references, idf_corpus, max_n)
    return math.fsum(scores) / len(scores) if scores else 0.0


def recognize_text(text: str, recognizer: EntityRecognizer) -> list[tuple[str, EntityType]]:
    return [(surface, EntityType.parse(etype)) for surface, etype, _ in recognizer.recognize(tokenize(text))]


@dataclass
class PRCounts:
    matched: int = 0
    predicted: int = 0
    gold: int = 0

    @property
    def precision(self) -> float:
        return self.matched / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return self.matched / self.gold if self.gold else 0.0

    def add(self, hyp: Counter, ref: Counter) -> None:
        self.matched += sum((hyp & ref).values())
        self.predicted += sum(hyp.values())
        self.gold += sum(ref.values())


def entity_frequencies(texts: Iterable[str], recognizer: EntityRecognizer) -> Counter:
    freq: Counter = Counter()
    for text in texts:
        freq.update(normalize_surface(s) for s, _ in recognize_text(text, recognizer))
    return freq


def entity_prf(hypotheses: Sequence[str], references, recognizer: EntityRecognizer, rarity_threshold: int = 5,
               train_references: Iterable[str] | None = None) -> dict[str, tuple[float, float]]:
    """Micro precision/recall for all entities, people's names and rare proper nouns.

    Entities match on case-folded surface, as multisets per sample. Only the
    first reference of each sample is used. An entity is rare when its
    frequency among ``train_references`` (default: the references) is at
    most ``rarity_threshold``. Precision with nothing predicted is 0.
    """
    refs = _as_ref_lists(references)
    _check_lengths(hypotheses, refs)
    gold_texts = [r[0] if r else "" for r in refs]
    freq = entity_frequencies(train_references if train_references is not None else gold_texts, recognizer)
    rare = lambda s: freq[s] <= rarity_threshold
    counts = {"entity": PRCounts(), "people": PRCounts(), "rare": PRCounts()}
    for hyp, ref in zip(hypotheses, gold_texts):
        h_ents = [(normalize_surface(s), t) for s, t in recognize_text(hyp, recognizer)]
        r_ents = [(normalize_surface(s), t) for s, t in recognize_text(ref, recognizer)]
        counts["entity"].add(Counter(s for s, _ in h_ents), Counter(s for s, _ in r_ents))
        counts["people"].add(Counter(s for s, t in h_ents if t == EntityType.PER),
                             Counter(s for s, t in r_ents if t == EntityType.PER))
        counts["rare"].add(Counter(s for s, _ in h_ents if rare(s)), Counter(s for s, _ in r_ents if rare(s)))
    return {k: (c.precision, c.recall) for k, c in counts.items()}


@dataclass
class EvalReport:
    bleu4: float
    rouge_l: float
    cider: float
    entity_p: float
    entity_r: float
    people_p: float
    people_r: float
    rare_p: float
    rare_r: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("EvalReport needs at least one sample")
        for f in fields(self):
            if f.name != "n_samples" and not 0.0 <= getattr(self, f.name) <= 1.0 + 1e-12:
                raise ValueError(f"{f.name}={getattr(self, f.name)} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def percent(self) -> dict:
        return {k: (round(v * 100, 2) if k != "n_samples" else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(hypotheses: Sequence[str], references, recognizer: EntityRecognizer, rarity_threshold: int = 5,
             train_references: Iterable[str] | None = None) -> EvalReport:
    refs = _as_ref_lists(references)
    prf = entity_prf(hypotheses, refs, recognizer, rarity_threshold, train_references)
    return EvalReport(
        bleu4=bleu4(hypotheses, refs),
        rouge_l=rouge_l(hypotheses, refs),
        cider=cider(hypotheses, refs),
        entity_p=prf["entity"][0],
        entity_r=prf["entity"][1],
        people_p=prf["people"][0],
        people_r=prf["people"][1],
        rare_p=prf["rare"][0],
        rare_r=prf["rare"][1],
        n_samples=len(hypotheses),
    )


REPORT_COLUMNS = [
    ("BLEU-4", "bleu4"),
    ("ROUGE-L", "rouge_l"),
    ("CIDEr", "cider"),
    ("NE P", "entity_p"),
    ("NE R", "entity_r"),
    ("PER P", "people_p"),
    ("PER R", "people_r"),
    ("Rare P", "rare_p"),
    ("Rare R", "rare_r"),
]


def markdown_table(rows: Sequence[tuple[str, EvalReport]], first_column: str = "Method") -> str:
    """Reports as a markdown table, values as percentages."""
    head = "| " + " | ".join([first_column] + [c for c, _ in REPORT_COLUMNS]) + " |"
    sep = "|" + "---|" * (len(REPORT_COLUMNS) + 1)
    lines = [head, sep]
    for name, rep in rows:
        lines.append("| " + " | ".join([name] + [f"{getattr(rep, k) * 100:.2f}" for _, k in REPORT_COLUMNS]) + " |")
    return "\n".join(lines) + "\n"
