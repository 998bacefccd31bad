import numpy as np
import pytest

from promptseg.adapter import (
    AdapterConfig, adapter_param_names, adapter_trainable_count, expand_queries,
    init_adapter, project, run_adapter, soft_prompt,
)
from promptseg.numerics import (
    F64, ParamStore, Rng, Tensor, const, finite_difference_check,
)
from promptseg import setcriterion

TINY = AdapterConfig(d_model=8, d_lang=12, k_queries=4, blocks=1, heads=2,
                     attn_dim=4, proj_hidden=6)


def make_store(cfg=TINY, seed=0):
    store = ParamStore()
    init_adapter(store, cfg, Rng(seed))
    return store


def test_project_zero_weights_returns_bias():
    store = make_store()
    for n in adapter_param_names(store):
        if n.startswith("adapter.proj") and n.endswith(".w"):
            store[n].data = np.zeros_like(store[n].data)
    store["adapter.proj1.b"].data = np.zeros_like(store["adapter.proj1.b"].data)
    store["adapter.proj2.b"].data = np.full_like(store["adapter.proj2.b"].data, 0.7)
    p = const(np.ones((1, TINY.d_lang)))
    u = project(store, p)
    assert np.allclose(u.data, 0.7)


def test_project_matches_scalar_oracle():
    import math
    cfg = AdapterConfig(d_model=1, d_lang=1, k_queries=1, blocks=1, heads=1,
                        attn_dim=1, proj_hidden=1)
    store = make_store(cfg, seed=3)
    w1 = store["adapter.proj1.w"].data.item()
    w2 = store["adapter.proj2.w"].data.item()
    x = 0.83

    def gelu_scalar(v):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * v * (1.0 + math.tanh(c * (v + 0.044715 * v ** 3)))

    got = project(store, const(np.asarray([[x]], dtype=np.float32))).data.item()
    assert abs(got - w2 * gelu_scalar(w1 * x)) < 1e-6


def test_expand_queries_is_exact_addition():
    store = make_store()
    # random values: q must equal the recomputed addition bit for bit
    u = const(Rng(5).normal(0, 1, (1, TINY.d_model)))
    qs = expand_queries(store, u)
    tie = store["adapter.tie"].data
    assert np.array_equal(qs.q.data, tie + u.data)
    # on exactly-representable values the addition itself is exact, so
    # subtracting u recovers the bank and q - u - t is identically zero
    grid_u = np.round(Rng(6).uniform(-4, 4, (1, TINY.d_model)) * 64) / 64
    grid_t = np.round(Rng(7).uniform(-1, 1, (TINY.k_queries, TINY.d_model)) * 64) / 64
    store["adapter.tie"].data = grid_t.astype(np.float32)
    qs2 = expand_queries(store, const(grid_u.astype(np.float32)))
    assert np.array_equal(qs2.q.data - grid_u.astype(np.float32), grid_t.astype(np.float32))
    assert np.abs(qs2.q.data - grid_u - grid_t).max() == 0.0


def test_expand_queries_integer_example():
    cfg = AdapterConfig(d_model=2, d_lang=2, k_queries=2, blocks=1, heads=1,
                        attn_dim=2, proj_hidden=2)
    store = make_store(cfg)
    store["adapter.tie"].data = np.asarray([[0.0, 1.0], [1.0, 1.0]], dtype=np.float32)
    qs = expand_queries(store, const(np.asarray([[1.0, 0.0]], dtype=np.float32)))
    assert np.array_equal(qs.q.data, [[1.0, 1.0], [2.0, 1.0]])


def test_expand_queries_zero_bank_duplicates_u():
    store = make_store()
    store["adapter.tie"].data = np.zeros_like(store["adapter.tie"].data)
    u = const(Rng(6).normal(0, 1, (1, TINY.d_model)))
    qs = expand_queries(store, u)
    assert np.array_equal(qs.q.data, np.repeat(u.data, TINY.k_queries, axis=0))


def test_soft_prompt_identical_queries_stay_identical():
    store = make_store()
    level3 = const(Rng(9).normal(0, 1, (16, TINY.d_model)))
    q = np.repeat(Rng(10).normal(0, 1, (1, TINY.d_model)), TINY.k_queries, axis=0)
    qs = expand_queries(store, const(np.zeros((1, TINY.d_model), dtype=np.float32)))
    qs.q = const(q)
    out = soft_prompt(store, TINY, qs, level3).q_refined.data
    for i in range(1, TINY.k_queries):
        assert np.array_equal(out[0], out[i])


def test_soft_prompt_permutation_equivariant():
    store = make_store(seed=2)
    level3 = const(Rng(11).normal(0, 1, (16, TINY.d_model)))
    q = Rng(12).normal(0, 1, (TINY.k_queries, TINY.d_model))
    perm = [2, 0, 3, 1]

    def refine(arr):
        qs = expand_queries(store, const(np.zeros((1, TINY.d_model), dtype=np.float32)))
        qs.q = const(arr)
        return soft_prompt(store, TINY, qs, level3).q_refined.data

    a = refine(q)
    b = refine(q[perm])
    # equivariant exactly in math; summation order inside softmax/matmul
    # shifts the last float bits, hence the tight tolerance
    assert np.abs(a[perm] - b).max() < 1e-6


def test_soft_prompt_one_block_matches_scalar_oracle():
    # 1 block, 1 head, K=2, d=2, 4 feature positions: compare against a
    # direct numpy re-derivation of the same arithmetic
    cfg = AdapterConfig(d_model=2, d_lang=2, k_queries=2, blocks=1, heads=1,
                        attn_dim=2, ffn_mult=2, proj_hidden=2)
    store = make_store(cfg, seed=8)
    level3 = Rng(20).normal(0, 1, (4, 2), dtype=np.float64)
    q0 = Rng(21).normal(0, 1, (2, 2), dtype=np.float64)
    s64 = store.astype(np.float64)

    def np_ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def np_lin(name, x):
        return x @ s64[f"{name}.w"].data + s64[f"{name}.b"].data

    def np_attn(name, q_in, kv):
        qq = np_lin(f"{name}.q", q_in)
        kk = np_lin(f"{name}.k", kv)
        vv = np_lin(f"{name}.v", kv)
        logits = qq @ kk.T / np.sqrt(2.0)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        return np_lin(f"{name}.o", w @ vv)

    def np_gelu(x):
        c = np.sqrt(2.0 / np.pi)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))

    p = "adapter.b0"
    x = q0.copy()
    x = x + np_attn(f"{p}.self", np_ln(x, s64[f"{p}.ln_self.g"].data, s64[f"{p}.ln_self.b"].data), x)
    x = x + np_attn(f"{p}.cross", np_ln(x, s64[f"{p}.ln_cross.g"].data, s64[f"{p}.ln_cross.b"].data), level3)
    x = x + np_lin(f"{p}.ffn2", np_gelu(np_lin(f"{p}.ffn1", np_ln(x, s64[f"{p}.ln_ffn.g"].data, s64[f"{p}.ln_ffn.b"].data))))

    qs = expand_queries(s64, const(np.zeros((1, 2)), np.float64))
    qs.q = const(q0, np.float64)
    got = soft_prompt(s64, cfg, qs, const(level3, np.float64)).q_refined.data
    assert np.max(np.abs(got - x)) < 1e-5


def test_cross_attention_off_bypasses_level3():
    cfg = AdapterConfig(d_model=8, d_lang=12, k_queries=4, blocks=2, heads=2,
                        attn_dim=4, proj_hidden=6, cross_attention=False)
    store = make_store(cfg, seed=4)
    q = const(Rng(30).normal(0, 1, (4, 8)))
    qs1 = expand_queries(store, const(np.zeros((1, 8), dtype=np.float32)))
    qs1.q = q
    a = soft_prompt(store, cfg, qs1, const(Rng(31).normal(0, 1, (16, 8)))).q_refined.data
    qs2 = expand_queries(store, const(np.zeros((1, 8), dtype=np.float32)))
    qs2.q = q
    b = soft_prompt(store, cfg, qs2, const(Rng(32).normal(0, 1, (16, 8)))).q_refined.data
    assert np.array_equal(a, b)


def test_tiebreakers_off_zeroed_and_frozen():
    cfg = AdapterConfig(tiebreakers=False)
    store = ParamStore()
    init_adapter(store, cfg, Rng(0))
    assert not store["adapter.tie"].data.any()
    assert "adapter.tie" in store.frozen


def test_default_trainable_count_under_budget():
    store = ParamStore()
    init_adapter(store, AdapterConfig(), Rng(1))
    n = adapter_trainable_count(store)
    assert n <= 100_000, n


def test_full_adapter_gradient_check():
    # projector + bank + transformer through focal+dice on a toy batch
    cfg = AdapterConfig(d_model=8, d_lang=6, k_queries=4, blocks=2, heads=2,
                        attn_dim=4, proj_hidden=6)
    store = make_store(cfg, seed=13)
    s64 = store.astype(F64)
    level3 = const(Rng(41).normal(0, 1.0, (16, 8), dtype=np.float64), F64)
    p_lang = Rng(42).normal(0, 1.0, (1, 6), dtype=np.float64)
    targets = (Rng(43).uniform(0, 1, (4, 16), dtype=np.float64) > 0.5).astype(np.float64)

    def loss_for(store_like):
        qs = run_adapter(store_like, cfg, const(p_lang, F64), level3)
        logits = qs.q_refined @ level3.T  # (K, 16) stand-in mask head
        return setcriterion.focal_loss(logits, targets) + \
            (1.0 - setcriterion.soft_iou_rows(logits, targets)).mean()

    worst = 0.0
    for name in ("adapter.proj1.w", "adapter.tie", "adapter.b0.cross.k.w",
                 "adapter.b1.self.q.w", "adapter.b0.ln_ffn.g"):
        orig = s64.params[name]

        def fn(x, name=name, orig=orig):
            s64.params[name] = x
            try:
                return loss_for(s64)
            finally:
                s64.params[name] = orig

        err = finite_difference_check(fn, Tensor(orig.data.copy(), requires_grad=True, dtype=F64))
        worst = max(worst, err)
    assert worst <= 1e-4, worst
