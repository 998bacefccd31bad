"""Toy frozen encoders: hierarchical image features and the multi-modal
prompt summary, plus the pretraining phase after which both freeze.

The image encoder is a strided convolution stack emitting a three-level
pyramid; the multi-modal encoder fuses a composed text embedding with
pooled coarse image features so the prompt summary is genuinely
image-conditioned. Pretraining runs two tasks jointly: prompt-conditioned
mask decoding (point and mask prompts) and category-presence
classification; afterwards every backbone and decoder parameter enters the
frozen set and a fingerprint of their bytes is recorded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import maskdecoder, setcriterion
from .maskops import BitMask, interior_point
from .numerics import (
    AdamW, F32, Im2ColPlan, ParamStore, Rng, Tensor, attention, concat, const,
    derive_seed, gelu, im2col, index_rows, layer_norm_apply, layer_norm_init,
    linear, linear_init, reduce_max, softplus,
)
from .shapeworld import (
    RELATIONS, SHAPES, STUFF_NAMES, TEXTURES, COLORS, DatasetSplit, Scene,
    VocabularyError, parse_category,
)


class PretrainError(Exception):
    pass


@dataclass
class BackboneConfig:
    d_model: int = 64
    d_lang: int = 128
    channels: tuple[int, int, int] = (24, 48, 96)
    epochs: int = 24
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    mask_prompt_ratio: float = 0.3
    focal_weight: float = 1.0
    dice_weight: float = 2.0
    presence_floor: float = 0.85   # hard failure below this after max epochs
    presence_stop: float = 0.93    # early-stop gate
    point_stop: float = 0.88
    val_probe_scenes: int = 96


@dataclass
class FeaturePyramid:
    level1: Tensor
    level2: Tensor
    level3: Tensor
    raster: int


@dataclass
class PromptSummary:
    p_lang: Tensor  # (1, d_lang)
    prompt_text: str


# vocabulary: attribute words, stuff words, relation phrases, fillers
def vocabulary_tokens() -> list[str]:
    return (list(SHAPES) + list(TEXTURES) + list(COLORS) + list(STUFF_NAMES)
            + list(RELATIONS) + ["the"])


def tokenize(text: str) -> list[str]:
    """Greedy tokenization: relation phrases first, then single words."""
    vocab = set(vocabulary_tokens())
    toks: list[str] = []
    rest = text.strip().lower()
    while rest:
        for rel in RELATIONS:
            if rest.startswith(rel + " ") or rest == rel:
                toks.append(rel)
                rest = rest[len(rel):].strip()
                break
        else:
            word, _, rest = rest.partition(" ")
            rest = rest.strip()
            if word not in vocab:
                raise VocabularyError(f"cannot tokenize {word!r}")
            toks.append(word)
    if not toks:
        raise VocabularyError("empty prompt")
    return toks


def token_ids(text: str) -> list[int]:
    table = {t: i for i, t in enumerate(vocabulary_tokens())}
    return [table[t] for t in tokenize(text)]


def init_backbones(store: ParamStore, cfg: BackboneConfig, rng: Rng) -> None:
    c1, c2, c3 = cfg.channels
    linear_init(store, "img.conv1", 3 * 9, c1, rng.split("c1"))
    layer_norm_init(store, "img.lnc1", c1)
    linear_init(store, "img.conv2", c1 * 9, c2, rng.split("c2"))
    layer_norm_init(store, "img.lnc2", c2)
    linear_init(store, "img.conv3", c2 * 9, c3, rng.split("c3"))
    layer_norm_init(store, "img.lnc3", c3)
    linear_init(store, "img.proj1", c1, cfg.d_model, rng.split("p1"))
    linear_init(store, "img.proj2", c2, cfg.d_model, rng.split("p2"))
    # level-3 projection is a 3x3 stride-1 conv: widens the receptive field
    # past the largest shapes without changing the grid; the closing norm
    # hands every consumer unit-scale features
    linear_init(store, "img.proj3", c3 * 9, cfg.d_model, rng.split("p3"))
    layer_norm_init(store, "img.ln3", cfg.d_model)
    # every consumer grounds itself on level-3; the finer projections exist
    # to satisfy the pyramid contract and stay at their initial weights
    store.freeze(["img.proj1.w", "img.proj1.b", "img.proj2.w", "img.proj2.b"])

    n_tok = len(vocabulary_tokens())
    store.create("mm.tok", rng.split("tok").normal(0.0, 0.3, (n_tok, cfg.d_lang)))
    linear_init(store, "mm.tproj", cfg.d_lang, cfg.d_model, rng.split("tproj"))
    linear_init(store, "mm.iproj", cfg.d_model, cfg.d_model, rng.split("iproj"))
    fused = cfg.d_lang + 2 * cfg.d_model + 2 * cfg.d_model
    linear_init(store, "mm.fuse1", fused, cfg.d_lang, rng.split("f1"))
    linear_init(store, "mm.fuse2", cfg.d_lang, cfg.d_lang, rng.split("f2"))
    linear_init(store, "mm.presence", cfg.d_lang, 1, rng.split("pres"))


def backbone_param_names(store: ParamStore) -> list[str]:
    return [n for n in store.names() if n.startswith(("img.", "mm."))]


TRUNK_NONLINEAR_L1 = True
TRUNK_NONLINEAR_L3 = True

_plan_cache: dict[tuple, Im2ColPlan] = {}


def _plan(h: int, w: int, stride: int = 2) -> Im2ColPlan:
    key = (h, w, 3, stride, 1)
    if key not in _plan_cache:
        _plan_cache[key] = Im2ColPlan(h, w, k=3, stride=stride, pad=1)
    return _plan_cache[key]


def _trunk(store: ParamStore, image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected an RxRx3 raster, got {image.shape}")
    r = image.shape[0]
    if r % 8 != 0:
        raise ValueError(f"raster {r} not divisible by 8")
    dtype = store["img.conv1.w"].data.dtype
    # center pixels so the first conv sees a zero-mean signal
    x = const(image.reshape(r * r, 3) * 2.0 - 1.0, dtype)
    h1 = layer_norm_apply(store, "img.lnc1", linear(store, "img.conv1", im2col(x, _plan(r, r))))
    if TRUNK_NONLINEAR_L1:
        h1 = gelu(h1)
    h2 = gelu(layer_norm_apply(store, "img.lnc2", linear(store, "img.conv2", im2col(h1, _plan(r // 2, r // 2)))))
    h3 = layer_norm_apply(store, "img.lnc3", linear(store, "img.conv3", im2col(h2, _plan(r // 4, r // 4))))
    if TRUNK_NONLINEAR_L3:
        h3 = gelu(h3)
    return h1, h2, h3, r


def encode_image(store: ParamStore, image: np.ndarray) -> FeaturePyramid:
    """Strided conv stack (strides 2, 2, 2) with per-level projection."""
    h1, h2, h3, r = _trunk(store, image)
    return FeaturePyramid(
        level1=linear(store, "img.proj1", h1),
        level2=linear(store, "img.proj2", h2),
        level3=layer_norm_apply(store, "img.ln3",
                                linear(store, "img.proj3",
                                       im2col(h3, _plan(r // 8, r // 8, stride=1)))),
        raster=r,
    )


def encode_level3(store: ParamStore, image: np.ndarray) -> Tensor:
    """Level-3 features only; the training hot path."""
    _, _, h3, r = _trunk(store, image)
    return layer_norm_apply(store, "img.ln3",
                            linear(store, "img.proj3",
                                   im2col(h3, _plan(r // 8, r // 8, stride=1))))


def encode_multimodal(store: ParamStore, level3: Tensor, text: str,
                      zero_image: bool = False) -> PromptSummary:
    """Prompt summary fused from the composed text embedding, pooled coarse
    image features (mean and max), and the text-image interaction.

    The interaction multiplies the projected text vector into every
    projected cell before max-pooling, so "is this concept anywhere in the
    image" survives pooling as a per-dimension conjunction.
    """
    ids = token_ids(text)
    text_mean = index_rows(store["mm.tok"], ids).mean(axis=0, keepdims=True)
    d = level3.data.shape[1]
    tq = linear(store, "mm.tproj", text_mean)                 # (1, d)
    if zero_image:
        pooled = const(np.zeros((1, 2 * d)), level3.dtype)
        attended = const(np.zeros((1, d)), level3.dtype)
    else:
        pooled = concat([level3.mean(axis=0, keepdims=True),
                         reduce_max(level3, axis=0, keepdims=True)], axis=1)
        # the text vector attends over cells: one score per cell keeps the
        # attribute conjunction bound to a single location
        cells = linear(store, "mm.iproj", level3)             # (n_cells, d)
        attended = attention(tq, cells, cells)
    fused = concat([text_mean, pooled, attended, tq * attended], axis=1)
    p_lang = linear(store, "mm.fuse2", gelu(linear(store, "mm.fuse1", fused)))
    return PromptSummary(p_lang=p_lang, prompt_text=text)


def presence_logit(store: ParamStore, summary: PromptSummary) -> Tensor:
    return linear(store, "mm.presence", summary.p_lang)


# ---------------------------------------------------------------------------
# Phase A
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    fingerprint: int
    frozen_names: list[str]
    point_iou: float
    presence_accuracy: float
    epochs_run: int
    wall_seconds: float
    history: list[dict] = field(default_factory=list)


def _bce_with_logit(logit: Tensor, label: float) -> Tensor:
    # softplus(x) - x*y, numerically stable for both labels
    return (softplus(logit) - logit * label).mean()


def _point_in(mask: BitMask, rng: Rng) -> tuple[int, int]:
    ys, xs = np.nonzero(mask.bits)
    i = rng.randint(0, len(ys))
    return int(xs[i]), int(ys[i])


def _prompt_losses(store: ParamStore, scene: Scene, level3: Tensor,
                   rng: Rng, use_mask: bool, focal_weight: float = 1.0,
                   dice_weight: float = 1.0, coarse_weight: float = 1.0) -> Tensor:
    """Decode one prompt per instance in a single pass; dense supervision.

    Besides the full-resolution focal+dice terms, the pre-upsample grid is
    supervised directly against per-cell coverage fractions; that gradient
    reaches each cell undiluted by the bilinear upsample.
    """
    tokens = []
    for i, inst in enumerate(scene.instances):
        if use_mask and i == 0:
            tokens.append(maskdecoder.embed_mask(store, inst.mask, level3, scene.raster))
        else:
            x, y = _point_in(inst.mask, rng.split(i))
            tokens.append(maskdecoder.embed_point(store, x, y, scene.raster))
    preds = maskdecoder.decode(store, tokens, level3, scene.raster)
    logits = maskdecoder.stack_logits(preds)
    confs = maskdecoder.stack_confidences(preds)
    targets = np.stack([inst.mask.bits.reshape(-1) for inst in scene.instances]).astype(np.float64)
    focal = setcriterion.focal_loss(logits, targets)
    dice = (1.0 - setcriterion.soft_iou_rows(logits, targets)).mean()
    fine = scene.raster // 4
    cov = np.stack([inst.mask.bits.reshape(fine, 4, fine, 4).mean(axis=(1, 3)).reshape(-1)
                    for inst in scene.instances])
    low = concat([p.logits_low for p in preds], axis=0)
    coarse = (softplus(low) - low * const(cov, low.dtype)).mean()
    conf_target = np.asarray([[setcriterion.soft_iou_np(logits.data[i], inst.mask)]
                              for i, inst in enumerate(scene.instances)])
    delta = confs - const(conf_target, confs.dtype)
    return (focal * focal_weight + dice * dice_weight + coarse * coarse_weight
            + (delta * delta).mean())


def _presence_sample(scene: Scene, vocab: list[str], rng: Rng) -> tuple[str, float]:
    """Balanced 1:1 positives and negatives; half the negatives are hard
    (share two attributes with something present)."""
    present = scene.present_names()
    if float(rng.uniform(0, 1)) < 0.5:
        return present[rng.randint(0, len(present))], 1.0
    present_set = set(present)
    if float(rng.uniform(0, 1)) < 0.5:
        anchor = parse_category(present[rng.randint(0, len(present))])
        if anchor.is_thing:
            hard = []
            for name in vocab:
                cat = parse_category(name)
                if not cat.is_thing or name in present_set:
                    continue
                shared = (int(cat.shape == anchor.shape) + int(cat.texture == anchor.texture)
                          + int(cat.color == anchor.color))
                if shared == 2:
                    hard.append(name)
            if hard:
                return hard[rng.randint(0, len(hard))], 0.0
    absent = [n for n in vocab if n not in present_set]
    return absent[rng.randint(0, len(absent))], 0.0


def measure_point_iou(store: ParamStore, scenes: list[Scene], seed: int,
                      limit: Optional[int] = None) -> float:
    """Mean IoU of point-prompted decodes, one interior prompt per instance.

    Prompts sit at a deepest-interior pixel, the way a user clicks the
    middle of an object; training still samples uniformly.
    """
    ious = []
    for scene in scenes:
        level3 = encode_level3(store, scene.image)
        toks, insts = [], []
        for inst in scene.instances:
            x, y = interior_point(inst.mask)
            toks.append(maskdecoder.embed_point(store, x, y, scene.raster))
            insts.append(inst)
        for inst, pred in zip(insts, maskdecoder.decode(store, toks, level3, scene.raster)):
            got = pred.binary_mask()
            inter = int(np.count_nonzero(got.bits & inst.mask.bits))
            union = got.count() + inst.mask.count() - inter
            ious.append(inter / union if union else 0.0)
        if limit is not None and len(ious) >= limit:
            break
    return float(np.mean(ious))


def measure_presence_accuracy(store: ParamStore, scenes: list[Scene], vocab: list[str],
                              seed: int, samples: int = 400,
                              zero_image: bool = False) -> float:
    rng = Rng(seed)
    correct = 0
    cache: dict[int, Tensor] = {}
    for i in range(samples):
        scene = scenes[i % len(scenes)]
        name, label = _presence_sample(scene, vocab, rng.split(i))
        if scene.scene_id not in cache:
            cache[scene.scene_id] = encode_level3(store, scene.image)
        summary = encode_multimodal(store, cache[scene.scene_id], name, zero_image=zero_image)
        logit = presence_logit(store, summary).data.item()
        correct += int((logit > 0) == (label > 0.5))
    return correct / samples


def pretrain_backbones(store: ParamStore, split: DatasetSplit, cfg: BackboneConfig,
                       seed: int) -> PretrainResult:
    """Run Phase A on the train scenes, then freeze and fingerprint.

    Fails if the presence classifier cannot reach the configured floor on
    validation after the epoch budget (enlarge data or epochs).
    """
    t0 = time.time()
    rng = Rng(seed)
    vocab = split.train_categories
    opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    probe = split.val[:cfg.val_probe_scenes]
    history = []
    point_iou = presence_acc = 0.0
    epochs_run = 0
    steps_per_epoch = (len(split.train) + cfg.batch - 1) // cfg.batch
    total_steps = cfg.epochs * steps_per_epoch
    warmup = max(1, total_steps // 33)
    step_no = 0
    for epoch in range(cfg.epochs):
        order = rng.split(f"ep{epoch}").shuffled(range(len(split.train)))
        erng = rng.split(f"samples{epoch}")
        for start in range(0, len(order), cfg.batch):
            batch = order[start:start + cfg.batch]
            store.zero_grads()
            losses = []
            # fixed point/mask quota per batch so every decoder parameter
            # receives a gradient on every step
            n_mask = max(1, round(len(batch) * cfg.mask_prompt_ratio)) if len(batch) > 1 else 0
            for pos, sid in enumerate(batch):
                scene = split.train[sid]
                srng = erng.split(sid)
                level3 = encode_level3(store, scene.image)
                losses.append(_prompt_losses(store, scene, level3, srng.split("prompt"),
                                             use_mask=pos < n_mask,
                                             focal_weight=cfg.focal_weight,
                                             dice_weight=cfg.dice_weight))
                for k in range(2):
                    name, label = _presence_sample(scene, vocab, srng.split(f"presence{k}"))
                    summary = encode_multimodal(store, level3, name)
                    losses.append(_bce_with_logit(presence_logit(store, summary), label))
            total = losses[0]
            for l in losses[1:]:
                total = total + l
            total = total * (1.0 / len(batch))
            total.backward()
            step_no += 1
            lr = cfg.lr * min(1.0, step_no / warmup)
            if step_no >= 0.96 * total_steps:
                lr *= 0.01
            elif step_no >= 0.89 * total_steps:
                lr *= 0.1
            opt.step(store.grads(), lr=lr)
        epochs_run = epoch + 1
        point_iou = measure_point_iou(store, probe, derive_seed(seed, "probe", epoch), limit=160)
        presence_acc = measure_presence_accuracy(store, probe, vocab,
                                                 derive_seed(seed, "probe-acc", epoch),
                                                 samples=200)
        history.append({"epoch": epoch, "point_iou": round(point_iou, 4),
                        "presence_acc": round(presence_acc, 4)})
        if point_iou >= cfg.point_stop and presence_acc >= cfg.presence_stop:
            break
    if presence_acc < cfg.presence_floor:
        raise PretrainError(
            f"presence accuracy {presence_acc:.3f} below {cfg.presence_floor} after "
            f"{epochs_run} epochs; enlarge data or epochs")
    frozen = backbone_param_names(store) + maskdecoder.decoder_param_names(store)
    store.freeze(frozen)
    return PretrainResult(
        fingerprint=store.fingerprint(frozen),
        frozen_names=sorted(frozen),
        point_iou=point_iou,
        presence_accuracy=presence_acc,
        epochs_run=epochs_run,
        wall_seconds=time.time() - t0,
        history=history,
    )
