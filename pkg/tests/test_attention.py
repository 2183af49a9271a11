import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchkit import autodiff as ad
from branchkit.attention import init_mha, mha_forward, rel_shift, sinusoidal_rel_embeddings
from branchkit.autodiff import ShapeError
from branchkit.nn import lengths_to_mask, named_parameters


def naive_attention(x, p, lengths=None):
    """Double loop over (query, key) pairs, written without the shift trick."""
    B, T, d = x.shape
    h, dh = p.heads, p.d // p.heads
    W = {k: getattr(p, k).weight.data for k in ("w_q", "w_k", "w_v", "w_out", "w_pos")}
    bq, bk, bv, bo = (getattr(p, k).bias.data for k in ("w_q", "w_k", "w_v", "w_out"))
    u, v = p.pos_bias_u.data.reshape(h, dh), p.pos_bias_v.data.reshape(h, dh)
    weights = np.zeros((B, h, T, T))
    out = np.zeros((B, T, d))
    for b in range(B):
        n = T if lengths is None else lengths[b]
        q = (x[b] @ W["w_q"] + bq).reshape(T, h, dh)
        k = (x[b] @ W["w_k"] + bk).reshape(T, h, dh)
        val = (x[b] @ W["w_v"] + bv).reshape(T, h, dh)
        ctx = np.zeros((T, h, dh))
        for head in range(h):
            for i in range(T):
                scores = np.full(T, -np.inf)
                for j in range(n):
                    offset = i - j
                    angle = offset / 10000.0 ** (np.arange(0, d, 2) / d)
                    r = np.empty(d)
                    r[0::2], r[1::2] = np.sin(angle), np.cos(angle)
                    r = (r @ W["w_pos"]).reshape(h, dh)[head]
                    scores[j] = ((q[i, head] + u[head]) @ k[j, head] + (q[i, head] + v[head]) @ r) / math.sqrt(dh)
                e = np.exp(scores - scores[:n].max())
                weights[b, head, i] = e / e.sum()
                ctx[i, head] = weights[b, head, i] @ val[:, head]
        out[b] = ctx.reshape(T, d) @ W["w_out"] + bo
    return out, weights


def vanilla_attention(x, p):
    T, d = x.shape[1:]
    h, dh = p.heads, p.d // p.heads
    q = (x @ p.w_q.weight.data + p.w_q.bias.data).reshape(-1, T, h, dh).transpose(0, 2, 1, 3)
    k = (x @ p.w_k.weight.data + p.w_k.bias.data).reshape(-1, T, h, dh).transpose(0, 2, 1, 3)
    v = (x @ p.w_v.weight.data + p.w_v.bias.data).reshape(-1, T, h, dh).transpose(0, 2, 1, 3)
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    w = np.exp(s - s.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(-1, T, d)
    return ctx @ p.w_out.weight.data + p.w_out.bias.data


# ---------------------------------------------------------------------------
# embeddings and shift


def test_embeddings_offset_zero_row():
    pe = sinusoidal_rel_embeddings(5, 8)
    assert pe.shape == (9, 8)
    assert np.all(pe[4, 0::2] == 0.0) and np.all(pe[4, 1::2] == 1.0)


def test_embeddings_single_row_and_odd_width():
    assert sinusoidal_rel_embeddings(1, 4).shape == (1, 4)
    with pytest.raises(ShapeError):
        sinusoidal_rel_embeddings(3, 5)


def test_embeddings_rows_run_from_positive_to_negative_offsets():
    pe = sinusoidal_rel_embeddings(3, 4)
    # first column is sin(offset); rows are offsets 2, 1, 0, -1, -2
    np.testing.assert_allclose(pe[:, 0], np.sin([2.0, 1.0, 0.0, -1.0, -2.0]))


def test_rel_shift_two_frames():
    # per query, columns are offsets +1, 0, -1 (row order of the embeddings)
    scores = np.array([[10.0, 11.0, 12.0], [20.0, 21.0, 22.0]])
    out = rel_shift(scores).data
    # query 0: key 0 has offset 0 (col 1), key 1 offset -1 (col 2)
    # query 1: key 0 has offset +1 (col 0), key 1 offset 0 (col 1)
    assert out.tolist() == [[11.0, 12.0], [20.0, 21.0]]


def test_rel_shift_degenerate_and_diagonal(rng):
    assert rel_shift(np.array([[3.0]])).data.tolist() == [[3.0]]
    scores = rng.normal(size=(2, 3, 5, 9))
    out = rel_shift(scores).data
    for i in range(5):
        assert np.array_equal(out[..., i, i], scores[..., i, 4])
    with pytest.raises(ShapeError):
        rel_shift(rng.normal(size=(4, 6)))


# ---------------------------------------------------------------------------
# attention


def test_heads_must_divide_width(rng):
    with pytest.raises(ShapeError):
        init_mha(rng, 6, 4)


def test_single_frame(rng):
    p = init_mha(rng, 8, 2)
    x = rng.normal(size=(1, 1, 8))
    out, w = mha_forward(x, p, return_weights=True)
    assert np.all(w.data == 1.0)
    value = x[0] @ p.w_v.weight.data + p.w_v.bias.data
    np.testing.assert_allclose(out.data[0], value @ p.w_out.weight.data + p.w_out.bias.data, atol=1e-14)


def test_zero_output_projection(rng):
    p = init_mha(rng, 8, 2)
    p.w_out.weight.data[...] = 0.0
    p.w_out.bias.data[...] = 0.0
    assert np.abs(mha_forward(rng.normal(size=(2, 4, 8)), p).data).max() == 0.0


def test_matches_naive_pairwise_oracle(rng):
    p = init_mha(rng, 8, 2)
    x = rng.normal(size=(2, 4, 8))
    out, w = mha_forward(x, p, return_weights=True)
    ref_out, ref_w = naive_attention(x, p)
    assert np.abs(w.data - ref_w).max() < 1e-10
    assert np.abs(out.data - ref_out).max() < 1e-10


def test_matches_naive_oracle_with_padding(rng):
    p = init_mha(rng, 8, 4)
    x = rng.normal(size=(2, 5, 8))
    lengths = [5, 3]
    out, w = mha_forward(x, p, lengths_to_mask(lengths), return_weights=True)
    ref_out, ref_w = naive_attention(x, p, lengths)
    assert np.abs(w.data - ref_w).max() < 1e-10
    assert np.abs(out.data[1, :3] - ref_out[1, :3]).max() < 1e-10


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_weights_normalized_and_masked(seed, valid):
    rng = np.random.default_rng(seed)
    p = init_mha(rng, 8, 2)
    mask = lengths_to_mask([6, valid])
    _, w = mha_forward(rng.normal(size=(2, 6, 8)), p, mask, return_weights=True)
    assert np.abs(w.data.sum(-1) - 1).max() < 1e-10
    assert np.all(w.data[1, :, :, valid:] == 0.0)


def test_padding_content_is_invisible(rng):
    p = init_mha(rng, 8, 2)
    mask = lengths_to_mask([6, 4])
    x = rng.normal(size=(2, 6, 8))
    garbage = x.copy()
    garbage[1, 4:] = rng.normal(scale=1e3, size=(2, 8))
    a, b = mha_forward(x, p, mask).data, mha_forward(garbage, p, mask).data
    assert np.abs(a[mask] - b[mask]).max() <= 1e-10


def test_reduces_to_vanilla_attention(rng):
    p = init_mha(rng, 8, 2)
    p.w_pos.weight.data[...] = 0.0
    p.pos_bias_u.data[...] = 0.0
    p.pos_bias_v.data[...] = 0.0
    x = rng.normal(size=(2, 5, 8))
    assert np.abs(mha_forward(x, p).data - vanilla_attention(x, p)).max() <= 1e-10


def test_attention_dropout_only_in_train(rng):
    p = init_mha(rng, 8, 2, dropout_rate=0.5)
    x = rng.normal(size=(1, 5, 8))
    assert np.array_equal(mha_forward(x, p, mode="eval").data, mha_forward(x, p).data)
    dropped = mha_forward(x, p, mode="train", rng=np.random.default_rng(0)).data
    assert not np.allclose(dropped, mha_forward(x, p).data)


@pytest.mark.parametrize("seed", range(3))
def test_mha_gradcheck(seed):
    rng = np.random.default_rng(seed)
    p = init_mha(rng, 8, 2)
    x = ad.Tensor(rng.normal(size=(1, 5, 8)))
    w = rng.normal(size=(1, 5, 8))
    inputs = [x] + [t for _, t in named_parameters(p)]
    assert ad.grad_check(lambda: ad.reduce_sum(mha_forward(x, p, lengths_to_mask([5])) * w), inputs) < 1e-4
