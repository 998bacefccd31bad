"""Trainable language adapter: projector, tie-breaker bank, soft prompting.

Projects the multi-modal prompt summary to decoder width, perturbs it into
K distinct queries via learnable tie-breakers (q_i = u + t_i, exactly), and
refines the queries through blocks that alternate self-attention among the
queries and cross-attention into the coarse image features. No positional
encoding is attached to the query index, so refinement is permutation
equivariant: only the tie-breakers break query symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    F32, ParamStore, Rng, Tensor, attention, gelu, layer_norm_apply,
    layer_norm_init, linear, linear_init,
)


@dataclass
class AdapterConfig:
    d_model: int = 64
    d_lang: int = 128
    k_queries: int = 8
    blocks: int = 3
    heads: int = 2
    attn_dim: int = 16
    ffn_mult: int = 2
    proj_hidden: int = 96
    tiebreaker_std: float = 0.02
    tiebreakers: bool = True
    cross_attention: bool = True


@dataclass
class QuerySet:
    u: Tensor           # (1, d_model)
    q: Tensor           # (K, d_model), u + t_i at construction
    q_refined: Tensor | None = None


def init_adapter(store: ParamStore, cfg: AdapterConfig, rng: Rng) -> None:
    linear_init(store, "adapter.proj1", cfg.d_lang, cfg.proj_hidden, rng.split("p1"))
    linear_init(store, "adapter.proj2", cfg.proj_hidden, cfg.d_model, rng.split("p2"))
    if cfg.tiebreakers:
        tie = rng.split("tie").normal(0.0, cfg.tiebreaker_std, (cfg.k_queries, cfg.d_model))
    else:
        tie = np.zeros((cfg.k_queries, cfg.d_model), dtype=F32)
    store.create("adapter.tie", tie)
    for b in range(cfg.blocks):
        p = f"adapter.b{b}"
        r = rng.split(f"b{b}")
        for ln in ("ln_self", "ln_cross", "ln_ffn"):
            layer_norm_init(store, f"{p}.{ln}", cfg.d_model)
        for attn in ("self", "cross"):
            for side in ("q", "k", "v"):
                linear_init(store, f"{p}.{attn}.{side}", cfg.d_model, cfg.attn_dim,
                            r.split(f"{attn}{side}"))
            linear_init(store, f"{p}.{attn}.o", cfg.attn_dim, cfg.d_model, r.split(f"{attn}o"))
        linear_init(store, f"{p}.ffn1", cfg.d_model, cfg.ffn_mult * cfg.d_model, r.split("f1"))
        linear_init(store, f"{p}.ffn2", cfg.ffn_mult * cfg.d_model, cfg.d_model, r.split("f2"))
    if not cfg.tiebreakers:
        store.freeze(["adapter.tie"])


def adapter_param_names(store: ParamStore) -> list[str]:
    return [n for n in store.names() if n.startswith("adapter.")]


def adapter_trainable_count(store: ParamStore) -> int:
    return sum(store[n].data.size for n in adapter_param_names(store)
               if n not in store.frozen)


def project(store: ParamStore, p_lang: Tensor) -> Tensor:
    """Two-layer MLP from the prompt summary to decoder width."""
    return linear(store, "adapter.proj2", gelu(linear(store, "adapter.proj1", p_lang)))


def expand_queries(store: ParamStore, u: Tensor) -> QuerySet:
    """q_i = u + t_i, exact addition against the tie-breaker bank."""
    return QuerySet(u=u, q=store["adapter.tie"] + u)


def _attn(store: ParamStore, name: str, q_in: Tensor, kv_in: Tensor, heads: int) -> Tensor:
    q = linear(store, f"{name}.q", q_in)
    k = linear(store, f"{name}.k", kv_in)
    v = linear(store, f"{name}.v", kv_in)
    return linear(store, f"{name}.o", attention(q, k, v, n_heads=heads))


def soft_prompt(store: ParamStore, cfg: AdapterConfig, qs: QuerySet, level3: Tensor) -> QuerySet:
    """Refine queries through pre-norm blocks: self-attention among queries,
    cross-attention with the flattened coarse features as keys/values
    (bypassed under the ablation switch), then a feed-forward."""
    x = qs.q
    for b in range(cfg.blocks):
        p = f"adapter.b{b}"
        x = x + _attn(store, f"{p}.self", layer_norm_apply(store, f"{p}.ln_self", x), x, cfg.heads)
        if cfg.cross_attention:
            normed = layer_norm_apply(store, f"{p}.ln_cross", x)
            x = x + _attn(store, f"{p}.cross", normed, level3, cfg.heads)
        x = x + linear(store, f"{p}.ffn2",
                       gelu(linear(store, f"{p}.ffn1", layer_norm_apply(store, f"{p}.ln_ffn", x))))
    qs.q_refined = x
    return qs


def run_adapter(store: ParamStore, cfg: AdapterConfig, p_lang: Tensor, level3: Tensor) -> QuerySet:
    return soft_prompt(store, cfg, expand_queries(store, project(store, p_lang)), level3)
