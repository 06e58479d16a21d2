"""Image-text similarity for entity selection.

Two scorers share the ``score(image, text)`` interface: a parameter-free
cosine stub over hashed bag-of-words embeddings, and a bilinear scorer
fine-tuned with a symmetric in-batch InfoNCE loss.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, InvalidInputError, ScorerError
from .text import tokenize

log = logging.getLogger(__name__)

SCORER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ImageRef:
    id: str
    feature: np.ndarray

    def __post_init__(self):
        feat = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(feat)):
            raise InvalidInputError(f"image {self.id!r} has non-finite feature entries")
        object.__setattr__(self, "feature", feat)

    def __eq__(self, other):
        return isinstance(other, ImageRef) and self.id == other.id and np.array_equal(self.feature, other.feature)

    def __hash__(self):
        return hash(self.id)


def token_bucket(token: str, dim: int, seed: int) -> int:
    digest = hashlib.blake2b(token.casefold().encode("utf-8"), digest_size=8, key=str(seed).encode()).digest()
    return int.from_bytes(digest, "little") % dim


def embed_text_hashed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Sum of one-hot hash buckets over the (case-folded) tokens, L2-normalized."""
    if dim < 1:
        raise InvalidInputError("dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        vec[token_bucket(tok, dim, seed)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def stub_score(image: ImageRef, text: str, seed: int = 42) -> float:
    return _cosine(image.feature, embed_text_hashed(text, image.feature.shape[0], seed))


class StubScorer:
    def __init__(self, seed: int = 42):
        self.seed = seed

    def score(self, image: ImageRef, text: str) -> float:
        return stub_score(image, text, self.seed)


class BilinearScorer(torch.nn.Module):
    """``score = featureᵀ · W · embed(text) / temperature`` with a learnable temperature."""

    def __init__(self, d_img: int, d_txt: int, temperature: float = 0.07, text_seed: int = 0, init_seed: int = 0):
        super().__init__()
        if temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        gen = torch.Generator().manual_seed(init_seed)
        self.d_img, self.d_txt, self.text_seed = d_img, d_txt, text_seed
        self.W = torch.nn.Parameter(torch.randn(d_img, d_txt, generator=gen, dtype=torch.float64) / math.sqrt(d_img * d_txt))
        self.log_temperature = torch.nn.Parameter(torch.tensor(math.log(temperature), dtype=torch.float64))

    @property
    def temperature(self) -> float:
        return float(self.log_temperature.detach().exp())

    def embed_texts(self, texts: Sequence[str]) -> torch.Tensor:
        return torch.from_numpy(np.stack([embed_text_hashed(t, self.d_txt, self.text_seed) for t in texts])).to(self.W.dtype)

    def logits(self, images: torch.Tensor, texts: torch.Tensor) -> torch.Tensor:
        """Pairwise score matrix, rows = images, columns = texts."""
        return images @ self.W @ texts.T / self.log_temperature.exp()

    def score(self, image: ImageRef, text: str) -> float:
        if image.feature.shape[0] != self.d_img:
            raise InvalidInputError(f"image feature has dim {image.feature.shape[0]}, scorer expects {self.d_img}")
        with torch.no_grad():
            f = torch.from_numpy(image.feature).to(self.W.dtype)
            t = torch.from_numpy(embed_text_hashed(text, self.d_txt, self.text_seed)).to(self.W.dtype)
            value = float(f @ self.W @ t / self.log_temperature.exp())
        if not math.isfinite(value):
            raise ScorerError(f"non-finite score for {text!r}")
        return value

    def save(self, path: str | Path) -> None:
        payload = {
            "format": "rulecap-bilinear-scorer",
            "version": SCORER_FORMAT_VERSION,
            "d_img": self.d_img,
            "d_txt": self.d_txt,
            "temperature": self.temperature,
            "log_temperature": float(self.log_temperature.detach()),
            "text_seed": self.text_seed,
            "W": self.W.detach().tolist(),
        }
        path = Path(path)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(payload))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "BilinearScorer":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "rulecap-bilinear-scorer" or payload.get("version") != SCORER_FORMAT_VERSION:
            raise CheckpointError(f"{path}: not a version-{SCORER_FORMAT_VERSION} scorer checkpoint")
        scorer = cls(payload["d_img"], payload["d_txt"], payload["temperature"], payload["text_seed"])
        W = torch.tensor(payload["W"], dtype=torch.float64)
        if tuple(W.shape) != (scorer.d_img, scorer.d_txt):
            raise CheckpointError(f"{path}: W has shape {tuple(W.shape)}, header says {(scorer.d_img, scorer.d_txt)}")
        with torch.no_grad():
            scorer.W.copy_(W)
            if "log_temperature" in payload:
                scorer.log_temperature.fill_(payload["log_temperature"])
        return scorer


def contrastive_loss(logits: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE over a square image x text logit matrix (diagonal = positives)."""
    target = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def train_scorer_contrastive(
    pairs: Sequence[tuple[ImageRef, str]],
    epochs: int = 20,
    lr: float = 1e-2,
    batch: int = 32,
    d_txt: int = 256,
    temperature: float = 0.07,
    seed: int = 0,
    text_seed: int = 0,
) -> BilinearScorer:
    """Fine-tune a bilinear scorer on matched (image, caption) pairs.

    Other captions in the same batch are the negatives, so every batch needs
    at least two pairs; a trailing singleton batch is merged into the
    previous one.
    """
    if len(pairs) < 2:
        raise InvalidInputError("contrastive training needs at least 2 pairs")
    if batch < 2:
        raise InvalidInputError("batch size must be >= 2 (in-batch negatives)")
    d_img = pairs[0][0].feature.shape[0]
    scorer = BilinearScorer(d_img, d_txt, temperature, text_seed=text_seed, init_seed=seed)
    if epochs <= 0:
        return scorer
    images = torch.from_numpy(np.stack([p[0].feature for p in pairs]))
    texts = scorer.embed_texts([p[1] for p in pairs])
    opt = torch.optim.Adam(scorer.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = len(pairs)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        bounds = list(range(0, n, batch))
        if n - bounds[-1] < 2:
            bounds.pop()
        total = 0.0
        for i, start in enumerate(bounds):
            stop = bounds[i + 1] if i + 1 < len(bounds) else n
            idx = order[start:stop]
            loss = contrastive_loss(scorer.logits(images[idx], texts[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                scorer.log_temperature.clamp_(math.log(1e-3), math.log(10.0))
            total += loss.item() * len(idx)
        log.info("scorer epoch %d loss %.4f", epoch + 1, total / n)
    return scorer


def score(scorer, image: ImageRef, text: str) -> float:
    value = float(scorer.score(image, text))
    if not math.isfinite(value):
        raise ScorerError(f"non-finite score for {text!r}")
    return value


def mean_matched_rank(scorer: BilinearScorer, pairs: Sequence[tuple[ImageRef, str]]) -> float:
    """Average 0-based rank of the true caption among all captions, per image."""
    images = torch.from_numpy(np.stack([p[0].feature for p in pairs]))
    texts = scorer.embed_texts([p[1] for p in pairs])
    with torch.no_grad():
        s = scorer.logits(images, texts)
    diag = s.diagonal().unsqueeze(1)
    return float((s > diag).sum(dim=1).double().mean())
