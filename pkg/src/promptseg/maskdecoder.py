"""Promptable mask decoder shared by point, language-query, and mask prompts.

One two-way attention block between prompt tokens and the coarsest feature
grid, a dot-product mask head upsampled to full resolution, and an
estimated-IoU confidence head. Attention scores are disentangled:
content-to-content plus position-to-position, with no cross terms, so a
point prompt localizes by its cell code alone while language and mask
prompts match content. Values and both mask-head projections carry content
only. Decoding is equivariant in token order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .maskops import BitMask, MaskError
from .numerics import (
    Im2ColPlan, ParamStore, Rng, Tensor, concat, const, gelu, im2col,
    index_rows, layer_norm_apply, layer_norm_init, linear, linear_init,
    matmul, mul, reshape, sigmoid, softmax,
)


N_BLOCKS = 2

_pix_plan_cache: dict[int, Im2ColPlan] = {}


def _pix_plan(side: int) -> Im2ColPlan:
    if side not in _pix_plan_cache:
        _pix_plan_cache[side] = Im2ColPlan(side, side, k=3, stride=1, pad=1)
    return _pix_plan_cache[side]


class DecodeError(Exception):
    pass


@dataclass
class PromptToken:
    kind: str  # "point" | "language_query" | "mask"
    embedding: Tensor          # (1, d_model) content stream seed
    pe: Optional[Tensor] = None  # (1, d_model) positional code, None = zeros
    origin: tuple = ()


@dataclass
class MaskPrediction:
    logits: Tensor  # (1, R*R) row
    confidence: Tensor  # (1, 1)
    raster: int
    logits_low: Optional[Tensor] = None  # (1, cells) pre-upsample row

    def prob_grid(self) -> np.ndarray:
        z = self.logits.data.reshape(self.raster, self.raster)
        return 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))

    def binary_mask(self, prob: float = 0.5) -> BitMask:
        return BitMask(self.prob_grid() > prob)

    def conf(self) -> float:
        return self.confidence.data.item()


_upsample_cache: dict[tuple[int, int], np.ndarray] = {}


def upsample_matrix(low: int, high: int) -> np.ndarray:
    """(high, low) bilinear interpolation matrix with src = i * low / high,
    so every output row at a multiple of high/low reproduces its source row
    exactly (the grid-aligned anchors); the right edge clamps."""
    key = (low, high)
    if key not in _upsample_cache:
        u = np.zeros((high, low), dtype=np.float64)
        scale = low / high
        for i in range(high):
            src = i * scale
            j0 = int(math.floor(src))
            j1 = min(j0 + 1, low - 1)
            f = src - j0
            u[i, j0] += 1.0 - f
            u[i, j1] += f
        _upsample_cache[key] = u
    return _upsample_cache[key]


def _near_identity(rng: Rng, d: int, noise: float = 0.02) -> np.ndarray:
    return np.eye(d, dtype=np.float32) + rng.uniform(-noise, noise, (d, d))


def fourier_codes(side: int, freqs: np.ndarray) -> np.ndarray:
    """Random Fourier features of normalized cell centers on a side x side
    grid: dot products decay smoothly with spatial distance, and two grids
    built from the same frequencies live in one comparable code space."""
    n = side * side
    ys, xs = np.divmod(np.arange(n), side)
    coords = np.stack([(ys + 0.5) / side, (xs + 0.5) / side], axis=1)  # (n, 2)
    phases = 2.0 * math.pi * coords @ freqs
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=1).astype(np.float32)


def fourier_cell_codes(n_cells: int, d_model: int, rng: Rng, sigma: float = 2.5) -> np.ndarray:
    side = int(round(math.sqrt(n_cells)))
    freqs = rng.normal(0.0, sigma, (2, d_model // 2)).astype(np.float64)
    return fourier_codes(side, freqs)


_subperm_cache: dict[int, np.ndarray] = {}


def _subcell_permutation(side: int) -> np.ndarray:
    """Target row (sy, sx) of the doubled grid -> source row cell*4 + sub."""
    if side not in _subperm_cache:
        out = np.empty(4 * side * side, dtype=np.int64)
        for sy in range(2 * side):
            for sx in range(2 * side):
                cell = (sy // 2) * side + (sx // 2)
                sub = (sy % 2) * 2 + (sx % 2)
                out[sy * 2 * side + sx] = cell * 4 + sub
        _subperm_cache[side] = out
    return _subperm_cache[side]


def init_decoder(store: ParamStore, d_model: int, rng: Rng, n_cells: int = 64) -> None:
    grid = "dec"
    # spatially smooth cell codes shared by the feature grid, the point
    # prompts, and (at doubled resolution, same frequencies) the mask grid
    side = int(round(math.sqrt(n_cells)))
    freqs = rng.split("pos").normal(0.0, 2.5, (2, d_model // 2)).astype(np.float64)
    store.create(f"{grid}.pos", fourier_codes(side, freqs))
    store.create(f"{grid}.pos_sub", fourier_codes(2 * side, freqs))
    # zero start: a point token is pure position until trained otherwise
    store.create(f"{grid}.point_type", np.zeros((1, d_model), dtype=np.float32))
    for ln in ("ln_pix", "ln_pixconv", "ln_out"):
        layer_norm_init(store, f"{grid}.{ln}", d_model)
    for b in range(N_BLOCKS):
        blk = f"{grid}.b{b}"
        for ln in ("ln_self", "ln_cross", "ln_ffn", "ln_feat"):
            layer_norm_init(store, f"{blk}.{ln}", d_model)
        r = rng.split(f"blk{b}")
        for attn in ("self", "cross", "fcross"):
            linear_init(store, f"{blk}.{attn}.q", d_model, d_model, r.split(f"{attn}q"))
            linear_init(store, f"{blk}.{attn}.k", d_model, d_model, r.split(f"{attn}k"))
            # tied positional projections: matching cell codes score ~|code|^2
            # immediately instead of waiting for subspaces to align
            qk = r.split(f"{attn}pos").uniform(-3.0 / math.sqrt(d_model),
                                               3.0 / math.sqrt(d_model), (d_model, d_model))
            store.create(f"{blk}.{attn}.qp.w", qk.copy())
            store.create(f"{blk}.{attn}.qp.b", np.zeros(d_model, dtype=np.float32))
            store.create(f"{blk}.{attn}.kp.w", qk.copy())
            store.create(f"{blk}.{attn}.kp.b", np.zeros(d_model, dtype=np.float32))
            store.create(f"{blk}.{attn}.v.w", _near_identity(r.split(f"{attn}v"), d_model))
            store.create(f"{blk}.{attn}.v.b", np.zeros(d_model, dtype=np.float32))
            if attn == "cross":
                # the token->feature retrieval is the one live branch at init:
                # tokens start content-free and must pick up cell content
                # immediately for the mask head to score similarity
                store.create(f"{blk}.{attn}.o.w", _near_identity(r.split(f"{attn}o"), d_model))
            else:
                # zero-init residual branches; with few tokens the
                # feature<-token attention would otherwise dump token content
                # on every cell
                store.create(f"{blk}.{attn}.o.w", np.zeros((d_model, d_model), dtype=np.float32))
            store.create(f"{blk}.{attn}.o.b", np.zeros(d_model, dtype=np.float32))
        linear_init(store, f"{blk}.ffn1", d_model, 2 * d_model, r.split("ffn1"))
        store.create(f"{blk}.ffn2.w", np.zeros((2 * d_model, d_model), dtype=np.float32))
        store.create(f"{blk}.ffn2.b", np.zeros(d_model, dtype=np.float32))
    # local neighborhood mixing on the pixel path (zero-init residual)
    linear_init(store, f"{grid}.pixconv1", d_model * 9, d_model, rng.split("pixconv1"))
    store.create(f"{grid}.pixconv2.w", np.zeros((d_model, d_model), dtype=np.float32))
    store.create(f"{grid}.pixconv2.b", np.zeros(d_model, dtype=np.float32))
    # each coarse cell expands into 2x2 subcell embeddings before the dot
    # product; identity-stacked init makes every subcell start as its cell
    expand = np.concatenate([_near_identity(rng.split(f"expand{i}"), d_model)
                             for i in range(4)], axis=1)
    store.create(f"{grid}.pixup.w", expand)
    store.create(f"{grid}.pixup.b", np.zeros(4 * d_model, dtype=np.float32))
    store.create(f"{grid}.pix.w", _near_identity(rng.split("pix"), d_model))
    store.create(f"{grid}.pix.b", np.zeros(d_model, dtype=np.float32))
    store.create(f"{grid}.memb1.w", _near_identity(rng.split("memb1"), d_model))
    store.create(f"{grid}.memb1.b", np.zeros(d_model, dtype=np.float32))
    store.create(f"{grid}.memb2.w", _near_identity(rng.split("memb2"), d_model))
    store.create(f"{grid}.memb2.b", np.zeros(d_model, dtype=np.float32))
    # disentangled position term of the mask head: tied init makes
    # "cell near the prompt" score positively from the first step
    mp = rng.split("membpos").uniform(-1.0 / math.sqrt(d_model),
                                      1.0 / math.sqrt(d_model), (d_model, d_model))
    store.create(f"{grid}.memb_p.w", mp.copy())
    store.create(f"{grid}.memb_p.b", np.zeros(d_model, dtype=np.float32))
    store.create(f"{grid}.pix_p.w", mp.copy())
    store.create(f"{grid}.pix_p.b", np.zeros(d_model, dtype=np.float32))
    linear_init(store, f"{grid}.conf1", d_model, d_model // 2, rng.split("conf1"))
    linear_init(store, f"{grid}.conf2", d_model // 2, 1, rng.split("conf2"))
    linear_init(store, f"{grid}.maskemb", d_model, d_model, rng.split("maskemb"))
    # background-prior bias: masks start sparse so training attends to the
    # prompted object instead of suppressing the whole grid
    store.create(f"{grid}.logit_bias", np.full((1, 1), -2.0, dtype=np.float32))


def decoder_param_names(store: ParamStore) -> list[str]:
    return [n for n in store.names() if n.startswith("dec.")]


def _attn(store: ParamStore, name: str, q_in: Tensor, q_pe: Optional[Tensor],
          kv_in: Tensor, k_pe: Optional[Tensor], zero_pe: Tensor) -> Tensor:
    """Single-head attention with disentangled content/position scores.

    Position-channel queries read content plus positional code (so trained
    tokens can express positional intent); position-channel keys read pure
    position, keeping the score additive with no content leakage on the key
    side.
    """
    qc = linear(store, f"{name}.q", q_in)
    kc = linear(store, f"{name}.k", kv_in)
    qp = linear(store, f"{name}.qp", q_in if q_pe is None else q_in + q_pe)
    kp = linear(store, f"{name}.kp", k_pe if k_pe is not None else zero_pe)
    q = concat([qc, qp], axis=1)
    k = concat([kc, kp], axis=1)
    d = q_in.data.shape[1]
    w = softmax(mul(matmul(q, k.T), const(1.0 / math.sqrt(2 * d), q_in.dtype)))
    v = linear(store, f"{name}.v", kv_in)
    return linear(store, f"{name}.o", matmul(w, v))


def embed_point(store: ParamStore, x: int, y: int, raster: int) -> PromptToken:
    """Token for a pixel coordinate: the shared type embedding plus the
    positional code of the coarse-grid cell containing the point."""
    if not (0 <= x < raster and 0 <= y < raster):
        raise DecodeError(f"point ({x}, {y}) outside raster {raster}")
    cells = raster // 8
    cell = (y // 8) * cells + (x // 8)
    pe = index_rows(store["dec.pos"], [cell])
    return PromptToken("point", store["dec.point_type"], pe=pe, origin=(x, y))


def embed_mask(store: ParamStore, mask: BitMask, level3: Tensor, raster: int) -> PromptToken:
    """Token for a mask prompt: projected mean of the coarse features under
    the mask, downsampled with a >=50% coverage rule (best cell if none);
    its positional code is the mean code of the active cells."""
    if mask.empty():
        raise MaskError("cannot embed an empty mask prompt")
    if mask.bits.shape != (raster, raster):
        raise DecodeError("mask prompt dimensions do not match raster")
    cells = raster // 8
    coverage = mask.bits.reshape(cells, 8, cells, 8).mean(axis=(1, 3))
    active = np.flatnonzero(coverage.reshape(-1) >= 0.5)
    if active.size == 0:
        active = np.asarray([int(np.argmax(coverage.reshape(-1)))])
    pooled = index_rows(level3, active).mean(axis=0, keepdims=True)
    emb = linear(store, "dec.maskemb", pooled)
    pe = index_rows(store["dec.pos"], active).mean(axis=0, keepdims=True)
    return PromptToken("mask", emb, pe=pe, origin=(int(mask.count()),))


def language_token(embedding: Tensor) -> PromptToken:
    return PromptToken("language_query", embedding)


def decode(store: ParamStore, tokens: list[PromptToken], level3: Tensor,
           raster: int) -> list[MaskPrediction]:
    """Decode every prompt token into full-resolution mask logits plus an
    estimated-IoU confidence."""
    if not tokens:
        raise DecodeError("decode requires at least one prompt token")
    d = level3.data.shape[1]
    t = concat([tok.embedding for tok in tokens], axis=0)
    zero_pe = const(np.zeros((1, d), dtype=level3.data.dtype))
    t_pe = concat([tok.pe if tok.pe is not None else zero_pe for tok in tokens], axis=0)
    f_pe = store["dec.pos"]

    f = level3
    for b in range(N_BLOCKS):
        blk = f"dec.b{b}"
        tn = layer_norm_apply(store, f"{blk}.ln_self", t)
        t = t + _attn(store, f"{blk}.self", tn, t_pe, tn, t_pe, zero_pe)
        t = t + _attn(store, f"{blk}.cross", layer_norm_apply(store, f"{blk}.ln_cross", t),
                      t_pe, f, f_pe, zero_pe)
        t = t + linear(store, f"{blk}.ffn2",
                       gelu(linear(store, f"{blk}.ffn1",
                                   layer_norm_apply(store, f"{blk}.ln_ffn", t))))
        f = f + _attn(store, f"{blk}.fcross", f, f_pe,
                      layer_norm_apply(store, f"{blk}.ln_feat", t), t_pe, zero_pe)

    # one residual 3x3 neighborhood pass lets boundary cells consult their
    # interiors before the dot product
    low = raster // 8
    fn = layer_norm_apply(store, "dec.ln_pixconv", f)
    f = f + linear(store, "dec.pixconv2",
                   gelu(linear(store, "dec.pixconv1", im2col(fn, _pix_plan(low)))))

    t_out = layer_norm_apply(store, "dec.ln_out", t)
    # expand cells to 2x2 subcells, then score content + position matches
    sub = reshape(linear(store, "dec.pixup", f), (4 * low * low, d))
    sub = index_rows(sub, _subcell_permutation(low))    # spatial row-major order
    pix_c = linear(store, "dec.pix", layer_norm_apply(store, "dec.ln_pix", sub))
    pix = concat([pix_c, linear(store, "dec.pix_p", store["dec.pos_sub"])], axis=1)
    memb_c = linear(store, "dec.memb2", gelu(linear(store, "dec.memb1", t_out)))
    memb = concat([memb_c, linear(store, "dec.memb_p", t_out + t_pe)], axis=1)
    logits_low = matmul(memb, pix.T) * (1.0 / math.sqrt(2 * d)) + store["dec.logit_bias"]
    conf = sigmoid(linear(store, "dec.conf2", gelu(linear(store, "dec.conf1", t_out))))

    fine = 2 * low
    u = upsample_matrix(fine, raster).astype(t.data.dtype)
    ur = const(u, t.data.dtype)
    uct = const(u.T, t.data.dtype)
    preds = []
    for i in range(len(tokens)):
        row = index_rows(logits_low, [i])
        up = matmul(matmul(ur, reshape(row, (fine, fine))), uct)
        preds.append(MaskPrediction(reshape(up, (1, raster * raster)),
                                    index_rows(conf, [i]), raster, logits_low=row))
    return preds


def stack_logits(preds: list[MaskPrediction]) -> Tensor:
    return concat([p.logits for p in preds], axis=0)


def stack_confidences(preds: list[MaskPrediction]) -> Tensor:
    return concat([p.confidence for p in preds], axis=0)
