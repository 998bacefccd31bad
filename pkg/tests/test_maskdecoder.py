import numpy as np
import pytest

from promptseg.maskdecoder import (
    DecodeError, MaskPrediction, decode, embed_mask, embed_point, init_decoder,
    language_token, stack_confidences, stack_logits, upsample_matrix,
)
from promptseg.maskops import BitMask, MaskError
from promptseg.numerics import ParamStore, Rng, const


def make_store(seed=0, d=64):
    store = ParamStore()
    init_decoder(store, d, Rng(seed))
    return store


def rand_level3(seed, d=64):
    return const(Rng(seed).normal(0, 1, (64, d)))


def test_upsample_reproduces_at_anchor_pixels():
    for low_n, high_n in ((8, 64), (16, 64)):
        u = upsample_matrix(low_n, high_n)
        rng = Rng(4)
        low = rng.normal(0, 1, (low_n, low_n), dtype=np.float64)
        up = u @ low @ u.T
        step = high_n // low_n
        for i in range(low_n):
            for j in range(low_n):
                assert up[step * i, step * j] == pytest.approx(low[i, j], abs=1e-12)
        assert (u.sum(axis=1) - 1.0).max() < 1e-12  # interpolation weights


def test_decode_requires_tokens():
    store = make_store()
    with pytest.raises(DecodeError):
        decode(store, [], rand_level3(1), 64)


def test_decode_token_order_equivariant():
    store = make_store(seed=3)
    level3 = rand_level3(7)
    toks = [embed_point(store, 5, 9, 64), embed_point(store, 40, 50, 64),
            embed_point(store, 60, 3, 64)]
    preds = decode(store, toks, level3, 64)
    perm = [2, 0, 1]
    preds_p = decode(store, [toks[i] for i in perm], level3, 64)
    for out_idx, in_idx in enumerate(perm):
        assert np.abs(preds_p[out_idx].logits.data - preds[in_idx].logits.data).max() < 1e-5
        assert abs(preds_p[out_idx].conf() - preds[in_idx].conf()) < 1e-6


def test_decode_shapes_and_confidence_range():
    store = make_store(seed=1)
    preds = decode(store, [embed_point(store, 0, 0, 64)], rand_level3(2), 64)
    assert len(preds) == 1
    assert preds[0].logits.data.shape == (1, 64 * 64)
    assert 0.0 < preds[0].conf() < 1.0
    assert stack_logits(preds).data.shape == (1, 4096)
    assert stack_confidences(preds).data.shape == (1, 1)


# --- point tokens ---

def test_embed_point_deterministic_and_binned():
    store = make_store()
    a = embed_point(store, 17, 33, 64)
    b = embed_point(store, 17, 33, 64)
    assert np.array_equal(a.pe.data, b.pe.data)
    assert np.array_equal(a.embedding.data, b.embedding.data)
    # two points in the same 8x8 cell give identical tokens
    c = embed_point(store, 16, 32, 64)
    assert np.array_equal(a.pe.data, c.pe.data)
    # different cell differs
    d = embed_point(store, 25, 33, 64)
    assert not np.array_equal(a.pe.data, d.pe.data)


def test_embed_point_corner_is_cell_zero():
    store = make_store()
    corner = embed_point(store, 0, 0, 64)
    assert np.array_equal(corner.pe.data[0], store["dec.pos"].data[0])
    assert np.array_equal(corner.embedding.data, store["dec.point_type"].data)


def test_embed_point_out_of_range():
    store = make_store()
    for x, y in ((-1, 0), (0, 64), (64, 0)):
        with pytest.raises(DecodeError):
            embed_point(store, x, y, 64)


# --- mask tokens ---

def test_embed_mask_full_raster_is_projected_global_mean():
    store = make_store(seed=5)
    level3 = rand_level3(9)
    tok = embed_mask(store, BitMask.full(64, 64), level3, 64)
    pooled = level3.data.mean(axis=0, keepdims=True)
    want = pooled @ store["dec.maskemb.w"].data + store["dec.maskemb.b"].data
    assert np.abs(tok.embedding.data - want).max() < 1e-5


def test_embed_mask_empty_rejected():
    store = make_store()
    with pytest.raises(MaskError):
        embed_mask(store, BitMask.zeros(64, 64), rand_level3(1), 64)


def test_embed_mask_coverage_rule():
    store = make_store(seed=6)
    level3 = rand_level3(10)
    # mask covering exactly cells 0 and 1 fully
    bits = np.zeros((64, 64), dtype=bool)
    bits[0:8, 0:16] = True
    tok = embed_mask(store, BitMask(bits), level3, 64)
    pooled = level3.data[[0, 1]].mean(axis=0, keepdims=True)
    want = pooled @ store["dec.maskemb.w"].data + store["dec.maskemb.b"].data
    assert np.abs(tok.embedding.data - want).max() < 1e-5
    # tiny mask under 50% everywhere falls back to the best-covered cell
    bits2 = np.zeros((64, 64), dtype=bool)
    bits2[24:26, 24:26] = True  # 4 px in cell (3,3) = index 27
    tok2 = embed_mask(store, BitMask(bits2), level3, 64)
    pooled2 = level3.data[[27]]
    want2 = pooled2 @ store["dec.maskemb.w"].data + store["dec.maskemb.b"].data
    assert np.abs(tok2.embedding.data - want2).max() < 1e-5


def test_language_and_prompt_tokens_share_decoder_params():
    # the language path runs the identical parameter set as the point path:
    # decode() touches only dec.* names regardless of token kind
    store = make_store(seed=2)
    level3 = rand_level3(3)
    lang = language_token(const(Rng(8).normal(0, 1, (1, 64))))
    point = embed_point(store, 10, 10, 64)
    before = {n: store[n].data.tobytes() for n in store.names()}
    decode(store, [lang], level3, 64)
    decode(store, [point], level3, 64)
    after = {n: store[n].data.tobytes() for n in store.names()}
    assert before == after
    assert all(n.startswith("dec.") for n in store.names())
