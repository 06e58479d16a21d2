"""Multi-head attention with key/value prefixes.

At injected layers the key/value stream is extended twice: rule vectors are
concatenated to the input before projection, and a learnable prefix is
prepended after projection. Queries come from the layer input only, so the
output length never changes.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import NumericalError


def scaled_prefix_attention(q, k, v, prefix=None, key_padding_mask=None, attn_mask=None, layer=None):
    """Per-head attention of ``q`` over ``[prefix; k]`` and ``[prefix; v]``.

    Shapes: q ``(B, H, Lq, d)``, k/v ``(B, H, Lk, d)``, prefix ``(H, P, d)``.
    ``key_padding_mask`` is ``(B, Lk)`` with True at ignored keys;
    ``attn_mask`` is ``(Lq, Lk)`` with True at forbidden positions. Prefix
    keys are never masked. Returns the attended values and the weights
    ``(B, H, Lq, P + Lk)``.
    """
    B, H, Lq, d = q.shape
    if prefix is not None and prefix.shape[1] > 0:
        p = prefix.unsqueeze(0).expand(B, -1, -1, -1)
        k = torch.cat([p, k], dim=2)
        v = torch.cat([p, v], dim=2)
        n_prefix = prefix.shape[1]
    else:
        n_prefix = 0
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    if torch.isnan(scores).any():
        head = int(torch.isnan(scores).any(dim=(0, 2, 3)).nonzero()[0])
        raise NumericalError(f"NaN attention scores in layer {layer}, head {head}", layer=layer, head=head)
    if key_padding_mask is not None or attn_mask is not None:
        Lk = k.shape[2]
        masked = torch.zeros(B, 1, Lq, Lk, dtype=torch.bool, device=q.device)
        if key_padding_mask is not None:
            masked[..., n_prefix:] |= key_padding_mask[:, None, None, :]
        if attn_mask is not None:
            masked[..., n_prefix:] |= attn_mask[None, None]
        scores = scores.masked_fill(masked, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class PrefixMultiheadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def _heads(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        query,
        key_value,
        key_padding_mask=None,
        attn_mask=None,
        prefix=None,
        extra_kv=None,
        extra_kv_padding_mask=None,
        need_weights: bool = False,
        layer=None,
    ):
        """Attend from ``query`` over ``[prefix; extra_kv; key_value]``.

        ``prefix`` is ``(P, d_model)`` in projected key/value space and is
        shared by keys and values. ``extra_kv`` is ``(B, R, d_model)`` and goes
        through the key/value projections like ``key_value``.
        """
        if extra_kv is not None and extra_kv.shape[1] > 0:
            key_value = torch.cat([extra_kv, key_value], dim=1)
            B, R = extra_kv.shape[:2]
            if key_padding_mask is not None or extra_kv_padding_mask is not None:
                lead = extra_kv_padding_mask if extra_kv_padding_mask is not None else torch.zeros(B, R, dtype=torch.bool)
                tail = (
                    key_padding_mask
                    if key_padding_mask is not None
                    else torch.zeros(B, key_value.shape[1] - R, dtype=torch.bool)
                )
                key_padding_mask = torch.cat([lead, tail], dim=1)
            if attn_mask is not None:
                attn_mask = torch.cat([attn_mask.new_zeros(attn_mask.shape[0], R), attn_mask], dim=1)
        q = self._heads(self.q_proj(query))
        k = self._heads(self.k_proj(key_value))
        v = self._heads(self.v_proj(key_value))
        heads_prefix = None
        if prefix is not None:
            heads_prefix = prefix.view(prefix.shape[0], self.n_heads, self.d_head).transpose(0, 1)
        out, weights = scaled_prefix_attention(q, k, v, heads_prefix, key_padding_mask, attn_mask, layer)
        if self.dropout and self.training:
            # dropout on the attended output keeps the returned weights row-stochastic
            out = F.dropout(out, self.dropout, True)
        B, H, Lq, d = out.shape
        out = self.out_proj(out.transpose(1, 2).reshape(B, Lq, H * d))
        return (out, weights) if need_weights else out
