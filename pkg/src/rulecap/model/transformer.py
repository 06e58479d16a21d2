"""Encoder-decoder transformer conditioned on a rule vector.

Encoder input is ``[rule; visual; article]``. At the configured injection
layers the rule vector is also appended to the self-attention keys/values
together with a learnable prefix. Layers are post-norm with GELU
feed-forward blocks.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError
from ..scoring import embed_text_hashed
from ..rules import parse_rule
from .attention import PrefixMultiheadAttention


class Variant(str, Enum):
    FULL = "FULL"
    NON_RULE = "NON_RULE"
    NON_ENTITY = "NON_ENTITY"
    PER_RULE = "PER_RULE"


def placement_layers(name: str, n_layers: int) -> tuple[int, ...]:
    """Layers (1-based) for placement ``P1``..``P4``: four contiguous, near-equal parts."""
    name = name.upper()
    if name not in ("P1", "P2", "P3", "P4"):
        raise ConfigError(f"unknown placement {name!r}")
    part = int(name[1]) - 1
    bounds = np.linspace(0, n_layers, 5).round().astype(int)
    layers = tuple(range(bounds[part] + 1, bounds[part + 1] + 1))
    if not layers:
        raise ConfigError(f"placement {name} is empty for a {n_layers}-layer encoder")
    return layers


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_ff: int = 256
    inject_layers: tuple[int, ...] = (4,)
    prefix_len: int = 2
    d_img: int = 64
    d_rule_txt: int = 512
    rule_segments: int = 1
    max_src_len: int = 96
    max_tgt_len: int = 32
    dropout: float = 0.1
    use_rule: bool = True
    rule_input: bool = True
    rule_injection: bool = True
    text_seed: int = 0
    init_std: float = 0.02
    layer_norm_eps: float = 1e-5
    tie_embeddings: bool = True

    def __post_init__(self):
        self.inject_layers = tuple(sorted(int(i) for i in self.inject_layers))
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if any(not 1 <= i <= self.n_enc_layers for i in self.inject_layers):
            raise ConfigError(f"inject_layers {self.inject_layers} outside [1, {self.n_enc_layers}]")
        if len(set(self.inject_layers)) != len(self.inject_layers):
            raise ConfigError("inject_layers contains duplicates")
        if self.prefix_len < 0 or self.rule_segments < 1:
            raise ConfigError("prefix_len must be >= 0 and rule_segments >= 1")

    @property
    def n_injected(self) -> int:
        return len(self.inject_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inject_layers"] = list(self.inject_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def rule_features(rule_text: str | None, d_rule_txt: int, segments: int = 1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Hashed text features for a serialized rule.

    With ``segments == 1`` the whole rule is pooled into one vector. Otherwise
    the verb and each ``role: fillers`` pair become separate rows, padded (and
    truncated) to ``segments`` rows. Returns ``(features, pad_mask)``.
    """
    feats = np.zeros((segments, d_rule_txt))
    pad = np.ones(segments, dtype=bool)
    pad[0] = False
    if not rule_text:
        return feats, pad
    if segments == 1:
        feats[0] = embed_text_hashed(rule_text, d_rule_txt, seed)
        return feats, pad
    parts = parse_rule(rule_text).segments()[:segments]
    for i, part in enumerate(parts):
        feats[i] = embed_text_hashed(part, d_rule_txt, seed)
        pad[i] = False
    return feats, pad


@dataclass
class Batch:
    image: torch.Tensor
    src: torch.Tensor
    src_pad: torch.Tensor
    rule: torch.Tensor | None = None
    rule_pad: torch.Tensor | None = None
    tgt_in: torch.Tensor | None = None
    tgt_out: torch.Tensor | None = None
    ids: list = field(default_factory=list)

    def to(self, dtype) -> "Batch":
        return Batch(
            self.image.to(dtype),
            self.src,
            self.src_pad,
            None if self.rule is None else self.rule.to(dtype),
            self.rule_pad,
            self.tgt_in,
            self.tgt_out,
            self.ids,
        )

    def select(self, idx) -> "Batch":
        pick = lambda t: None if t is None else t[idx]
        ids = [self.ids[i] for i in (idx.tolist() if torch.is_tensor(idx) else idx)] if self.ids else []
        return Batch(pick(self.image), pick(self.src), pick(self.src_pad), pick(self.rule), pick(self.rule_pad),
                     pick(self.tgt_in), pick(self.tgt_out), ids)


def collate(
    items: Sequence[dict],
    pad_id: int,
    bos_id: int,
    eos_id: int,
    max_src_len: int,
    max_tgt_len: int,
    dtype=torch.float32,
) -> Batch:
    """Pad a list of encoded samples into a :class:`Batch`.

    Each item has ``image`` (array), ``src`` (ids), optional ``rule`` /
    ``rule_pad`` (from :func:`rule_features`), optional ``tgt`` (ids without
    BOS/EOS) and ``id``. Over-long articles are truncated with a warning.
    """
    B = len(items)
    src_lens = []
    for it in items:
        if len(it["src"]) > max_src_len:
            warnings.warn(f"sample {it.get('id')!r}: article truncated from {len(it['src'])} to {max_src_len} tokens")
        src_lens.append(max(1, min(len(it["src"]), max_src_len)))
    S = max(src_lens)
    src = torch.full((B, S), pad_id, dtype=torch.long)
    for i, it in enumerate(items):
        ids = list(it["src"])[:max_src_len]
        if ids:
            src[i, : len(ids)] = torch.tensor(ids)
    src_pad = src.eq(pad_id)
    image = torch.tensor(np.stack([np.asarray(it["image"], dtype=np.float64) for it in items]), dtype=dtype)
    rule = rule_pad = None
    if items and items[0].get("rule") is not None:
        rule = torch.tensor(np.stack([it["rule"] for it in items]), dtype=dtype)
        rule_pad = torch.tensor(np.stack([it["rule_pad"] for it in items]))
    tgt_in = tgt_out = None
    if items and items[0].get("tgt") is not None:
        seqs = [list(it["tgt"])[: max_tgt_len - 1] for it in items]
        T = max(len(s) for s in seqs) + 1
        tgt_in = torch.full((B, T), pad_id, dtype=torch.long)
        tgt_out = torch.full((B, T), pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            tgt_in[i, : len(s) + 1] = torch.tensor([bos_id] + s)
            tgt_out[i, : len(s) + 1] = torch.tensor(s + [eos_id])
    return Batch(image, src, src_pad, rule, rule_pad, tgt_in, tgt_out, [it.get("id") for it in items])


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = PrefixMultiheadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.linear1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.linear2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.norm1 = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.norm2 = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask, prefix=None, rule=None, rule_pad=None, layer=None, need_weights=False):
        attn = self.self_attn(x, x, key_padding_mask=pad_mask, prefix=prefix, extra_kv=rule,
                              extra_kv_padding_mask=rule_pad, need_weights=need_weights, layer=layer)
        weights = None
        if need_weights:
            attn, weights = attn
        x = self.norm1(x + self.dropout(attn))
        x = self.norm2(x + self.dropout(self.linear2(self.dropout(F.gelu(self.linear1(x))))))
        return x, weights


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = PrefixMultiheadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_attn = PrefixMultiheadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.linear1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.linear2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.norm1 = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.norm2 = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.norm3 = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, mem_pad, causal, tgt_pad=None, need_weights=False):
        sa = self.self_attn(y, y, key_padding_mask=tgt_pad, attn_mask=causal, need_weights=need_weights)
        ca_w = sa_w = None
        if need_weights:
            sa, sa_w = sa
        y = self.norm1(y + self.dropout(sa))
        ca = self.cross_attn(y, memory, key_padding_mask=mem_pad, need_weights=need_weights)
        if need_weights:
            ca, ca_w = ca
        y = self.norm2(y + self.dropout(ca))
        y = self.norm3(y + self.dropout(self.linear2(self.dropout(F.gelu(self.linear1(y))))))
        return y, (sa_w, ca_w)


def causal_mask(T: int, device=None) -> torch.Tensor:
    return torch.triu(torch.ones(T, T, dtype=torch.bool, device=device), diagonal=1)


class RuleCapModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.src_pos = nn.Embedding(cfg.max_src_len + cfg.rule_segments + 1, d)
        self.tgt_pos = nn.Embedding(cfg.max_tgt_len + 1, d)
        self.visual_mlp = nn.Sequential(nn.Linear(cfg.d_img, d), nn.GELU(), nn.Linear(d, d))
        if cfg.use_rule:
            self.rule_proj = nn.Linear(cfg.d_rule_txt, d)
            self.prefixes = nn.ParameterDict(
                {str(l): nn.Parameter(torch.zeros(cfg.prefix_len, d)) for l in cfg.inject_layers}
            )
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.variant = Variant.FULL if cfg.use_rule else Variant.NON_RULE
        self.reset_parameters()
        if cfg.tie_embeddings:
            self.lm_head.weight = self.tok_emb.weight

    def reset_parameters(self) -> None:
        std = self.cfg.init_std
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, 0.0, std)
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
        if self.cfg.use_rule:
            for p in self.prefixes.values():
                nn.init.normal_(p, 0.0, std)

    @property
    def rule_input_enabled(self) -> bool:
        return self.cfg.use_rule and self.cfg.rule_input and self.variant != Variant.NON_RULE

    @property
    def rule_injection_enabled(self) -> bool:
        return self.cfg.use_rule and self.cfg.rule_injection and self.variant != Variant.NON_RULE

    def embed_visual(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] != self.cfg.d_img:
            raise ValueError(f"image feature dim {image.shape[-1]} != d_img {self.cfg.d_img}")
        return self.visual_mlp(image)

    def embed_rule(self, rule_feats: torch.Tensor) -> torch.Tensor:
        if rule_feats.shape[-1] != self.cfg.d_rule_txt:
            raise ValueError(f"rule feature dim {rule_feats.shape[-1]} != d_rule_txt {self.cfg.d_rule_txt}")
        return self.rule_proj(rule_feats)

    def source_embeddings(self, batch: Batch):
        """Return the encoder input sequence, its padding mask and the rule vectors."""
        parts = []
        masks = []
        B = batch.src.shape[0]
        dtype = self.lm_head.weight.dtype
        z_rule = rule_pad = None
        if self.rule_input_enabled or self.rule_injection_enabled:
            if batch.rule is None:
                raise ValueError("model variant uses a rule but the batch carries none")
            z_rule = self.embed_rule(batch.rule.to(dtype))
            rule_pad = batch.rule_pad
        if self.rule_input_enabled:
            parts.append(z_rule)
            masks.append(rule_pad)
        parts.append(self.embed_visual(batch.image.to(dtype)).unsqueeze(1))
        masks.append(torch.zeros(B, 1, dtype=torch.bool))
        src = batch.src[:, : self.cfg.max_src_len]
        parts.append(self.tok_emb(src))
        masks.append(batch.src_pad[:, : self.cfg.max_src_len])
        x = torch.cat(parts, dim=1)
        x = x + self.src_pos(torch.arange(x.shape[1]))
        return x, torch.cat(masks, dim=1), z_rule, rule_pad

    def encode(self, batch: Batch, need_weights: bool = False):
        x, pad, z_rule, rule_pad = self.source_embeddings(batch)
        all_weights = []
        for i, layer in enumerate(self.encoder, start=1):
            inject = self.rule_injection_enabled and i in self.cfg.inject_layers
            prefix = self.prefixes[str(i)] if inject and self.cfg.prefix_len > 0 else None
            x, w = layer(x, pad, prefix=prefix, rule=z_rule if inject else None,
                         rule_pad=rule_pad if inject else None, layer=i, need_weights=need_weights)
            all_weights.append(w)
        return (x, pad, all_weights) if need_weights else (x, pad)

    def decode(self, memory, mem_pad, tgt_in, need_weights: bool = False):
        T = tgt_in.shape[1]
        if T > self.cfg.max_tgt_len + 1:
            raise ValueError(f"target length {T} exceeds max_tgt_len + 1")
        y = self.tok_emb(tgt_in) + self.tgt_pos(torch.arange(T))
        causal = causal_mask(T)
        all_weights = []
        for layer in self.decoder:
            y, w = layer(y, memory, mem_pad, causal, need_weights=need_weights)
            all_weights.append(w)
        logits = self.lm_head(y)
        return (logits, all_weights) if need_weights else logits

    def forward(self, batch: Batch) -> torch.Tensor:
        memory, mem_pad = self.encode(batch)
        return self.decode(memory, mem_pad, batch.tgt_in)

    def loss(self, batch: Batch) -> torch.Tensor:
        """Teacher-forced cross-entropy averaged over non-pad target tokens."""
        logits = self(batch)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.tgt_out.reshape(-1), ignore_index=0)


def set_variant(model: RuleCapModel, variant: Variant | str) -> RuleCapModel:
    """Switch the ablation variant in place.

    ``NON_RULE`` drops the rule vector from the encoder input and disables
    every injection. ``NON_ENTITY`` and ``PER_RULE`` keep the architecture and
    differ only in how the rule text is built (see
    :func:`rulecap.pipeline.rule_for_variant`).
    """
    variant = Variant(variant)
    if variant != Variant.NON_RULE and not model.cfg.use_rule:
        raise ConfigError(f"variant {variant.value} needs a model built with use_rule=True")
    model.variant = variant
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
