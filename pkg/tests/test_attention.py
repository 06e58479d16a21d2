import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rulecap.errors import NumericalError
from rulecap.model import PrefixMultiheadAttention, scaled_prefix_attention

D = torch.float64


def test_single_head_by_hand():
    q = torch.tensor([[[[1.0, 0.0]]]], dtype=D)
    k = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=D)
    v = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=D)
    prefix = torch.tensor([[[2.0, 0.0]]], dtype=D)
    out, w = scaled_prefix_attention(q, k, v, prefix)
    s = np.array([2.0, 1.0, 0.0]) / math.sqrt(2)
    e = np.exp(s - s.max())
    p = e / e.sum()
    np.testing.assert_allclose(w[0, 0, 0].numpy(), p, atol=1e-15)
    expected = p[0] * np.array([2.0, 0.0]) + p[1] * np.array([1.0, 2.0]) + p[2] * np.array([3.0, 4.0])
    np.testing.assert_allclose(out[0, 0, 0].numpy(), expected, atol=1e-15)


def test_masks_never_hide_prefix_keys():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(1, 1, 3, 4, generator=g, dtype=D) for _ in range(3))
    prefix = torch.randn(1, 2, 4, generator=g, dtype=D)
    pad = torch.tensor([[False, True, True]])
    causal = torch.triu(torch.ones(3, 3, dtype=torch.bool), 1)
    _, w = scaled_prefix_attention(q, k, v, prefix, pad, causal)
    assert (w[..., :2] > 0).all()
    assert (w[..., 3:] == 0).all()
    # a fully masked row still attends to the prefix
    full = torch.ones(1, 3, dtype=torch.bool)
    out, w = scaled_prefix_attention(q, k, v, prefix, full)
    assert torch.isfinite(out).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(1, 1, 3, dtype=D))


def test_nan_scores_raise_with_location():
    q = torch.zeros(1, 2, 1, 2, dtype=D)
    q[0, 1, 0, 0] = math.nan
    k = v = torch.zeros(1, 2, 2, 2, dtype=D)
    with pytest.raises(NumericalError) as err:
        scaled_prefix_attention(q, k, v, layer=3)
    assert (err.value.layer, err.value.head) == (3, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(0, 5), st.integers(0, 4), st.integers(0, 10**6))
def test_rows_are_probability_distributions(B, H, L, P, d_half, seed):
    d = 2 * d_half + 2
    g = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(B, H, L, d, generator=g, dtype=D) * 3 for _ in range(3))
    prefix = torch.randn(H, P, d, generator=g, dtype=D) if P else None
    pad = torch.rand(B, L, generator=g) < 0.3
    pad[:, 0] = False
    _, w = scaled_prefix_attention(q, k, v, prefix, pad)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(B, H, L, dtype=D), atol=1e-6)


def test_empty_prefix_equals_plain_attention():
    torch.manual_seed(0)
    mha = PrefixMultiheadAttention(8, 2).to(D)
    ref = torch.nn.MultiheadAttention(8, 2, batch_first=True).to(D)
    with torch.no_grad():
        ref.in_proj_weight.copy_(torch.cat([mha.q_proj.weight, mha.k_proj.weight, mha.v_proj.weight]))
        ref.in_proj_bias.copy_(torch.cat([mha.q_proj.bias, mha.k_proj.bias, mha.v_proj.bias]))
        ref.out_proj.weight.copy_(mha.out_proj.weight)
        ref.out_proj.bias.copy_(mha.out_proj.bias)
    x = torch.randn(3, 5, 8, dtype=D)
    pad = torch.zeros(3, 5, dtype=torch.bool)
    pad[1, 3:] = True
    expected, _ = ref(x, x, x, key_padding_mask=pad)
    for prefix in (None, torch.zeros(0, 8, dtype=D)):
        torch.testing.assert_close(mha(x, x, key_padding_mask=pad, prefix=prefix), expected, atol=1e-12, rtol=0)


def test_zero_prefix_closed_form():
    # Zero prefix keys score 0 and zero prefix values add nothing, but they
    # still take softmax mass: with zero key/value biases the attended output
    # is the plain output scaled by S / (S + n_zero) per query, where
    # S = sum_j exp(score_j).
    torch.manual_seed(1)
    mha = PrefixMultiheadAttention(8, 2).to(D)
    with torch.no_grad():
        mha.k_proj.bias.zero_()
        mha.v_proj.bias.zero_()
    x = torch.randn(2, 4, 8, dtype=D)
    n_zero = 3
    q = mha._heads(mha.q_proj(x))
    k = mha._heads(mha.k_proj(x))
    v = mha._heads(mha.v_proj(x))
    plain, _ = scaled_prefix_attention(q, k, v)
    S = torch.exp(q @ k.transpose(-2, -1) / math.sqrt(4)).sum(-1, keepdim=True)
    expected_heads = plain * S / (S + n_zero)
    expected = mha.out_proj(expected_heads.transpose(1, 2).reshape(2, 4, 8))
    got = mha(x, x, prefix=torch.zeros(n_zero, 8, dtype=D))
    torch.testing.assert_close(got, expected, atol=1e-12, rtol=0)
    # so zero prefixes are not a no-op
    assert not torch.allclose(got, mha(x, x))


def test_extra_kv_is_projected_and_keeps_output_length():
    torch.manual_seed(2)
    mha = PrefixMultiheadAttention(8, 2).to(D)
    x = torch.randn(2, 4, 8, dtype=D)
    rule = torch.randn(2, 1, 8, dtype=D)
    out, w = mha(x, x, extra_kv=rule, prefix=torch.randn(2, 8, dtype=D), need_weights=True)
    assert out.shape == (2, 4, 8)
    assert w.shape == (2, 2, 4, 2 + 1 + 4)
    # same as feeding the rule as ordinary keys/values
    torch.testing.assert_close(mha(x, x, extra_kv=rule), mha(x, torch.cat([rule, x], 1)), atol=1e-12, rtol=0)
