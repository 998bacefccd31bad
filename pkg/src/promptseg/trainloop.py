"""Adapter training orchestration.

Builds prompt-group batches (one group per present category per scene, a
configured ratio of absent-category negatives, and referring-expression
groups), runs the frozen backbones and decoder around the trainable
adapter, applies the set criterion, and steps AdamW under the paper-style
step-decay schedule. Frozen fingerprints are re-verified every epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backbones, evalbench, fusion, maskdecoder, setcriterion
from .adapter import AdapterConfig, adapter_param_names, init_adapter, run_adapter
from .maskops import BitMask
from .numerics import AdamW, ParamStore, Rng, Tensor, const, derive_seed, index_rows
from .shapeworld import DatasetSplit, Scene, parse_category, referring_pairs


class FreezeViolationError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 25
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    negative_ratio: float = 0.3
    referring_ratio: float = 0.2
    focal_weight: float = 1.0
    dice_weight: float = 1.0
    conf_weight: float = 1.0
    freeze_backbones: bool = True
    val_probe_scenes: int = 32


@dataclass
class PromptGroup:
    scene_id: int
    prompt: str
    gt_indices: tuple[int, ...]  # indices into scene.instances; empty = negative


@dataclass
class TrainResult:
    store: ParamStore
    fingerprint: int
    frozen_names: list[str]
    epoch_log: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0


def build_groups(split: DatasetSplit, seed: int, cfg: TrainConfig) -> list[PromptGroup]:
    """The fixed multiset of prompt groups for one run: every
    (scene, present category) pair, plus negatives and referring groups at
    their configured ratios."""
    groups: list[PromptGroup] = []
    for scene in split.train:
        by_name: dict[str, list[int]] = {}
        for i, inst in enumerate(scene.instances):
            by_name.setdefault(inst.name, []).append(i)
        for name in by_name:
            groups.append(PromptGroup(scene.scene_id, name, tuple(by_name[name])))
    n_pos = len(groups)

    rng = Rng(derive_seed(seed, "groups"))
    vocab = split.train_categories
    n_neg = int(round(cfg.negative_ratio * n_pos))
    neg_rng = rng.split("negatives")
    for k in range(n_neg):
        scene = split.train[neg_rng.randint(0, len(split.train))]
        present = set(scene.present_names())
        absent = [n for n in vocab if n not in present]
        if not absent:
            continue
        groups.append(PromptGroup(scene.scene_id, absent[neg_rng.randint(0, len(absent))], ()))

    n_ref = int(round(cfg.referring_ratio * n_pos))
    ref_rng = rng.split("referring")
    attempts = 0
    added = 0
    while added < n_ref and attempts < 4 * n_ref:
        attempts += 1
        scene = split.train[ref_rng.randint(0, len(split.train))]
        pairs = referring_pairs(scene)
        if not pairs:
            continue
        text, idx = pairs[ref_rng.randint(0, len(pairs))]
        groups.append(PromptGroup(scene.scene_id, text, (idx,)))
        added += 1
    return groups


def epoch_order(groups: list[PromptGroup], seed: int, epoch: int) -> list[int]:
    return Rng(derive_seed(seed, "epoch-order", epoch)).shuffled(range(len(groups)))


class _FeatureCache:
    """Frozen-backbone activations reused across epochs."""

    def __init__(self, store: ParamStore, scenes: list[Scene], enabled: bool):
        self.store = store
        self.scenes = {s.scene_id: s for s in scenes}
        self.enabled = enabled
        self.level3: dict[int, Tensor] = {}
        self.p_lang: dict[tuple[int, str], Tensor] = {}

    def get_level3(self, scene_id: int) -> Tensor:
        if not self.enabled:
            return backbones.encode_level3(self.store, self.scenes[scene_id].image)
        if scene_id not in self.level3:
            t = backbones.encode_level3(self.store, self.scenes[scene_id].image)
            self.level3[scene_id] = const(t.data)
        return self.level3[scene_id]

    def get_p_lang(self, scene_id: int, prompt: str) -> Tensor:
        if not self.enabled:
            level3 = self.get_level3(scene_id)
            return backbones.encode_multimodal(self.store, level3, prompt).p_lang
        key = (scene_id, prompt)
        if key not in self.p_lang:
            summary = backbones.encode_multimodal(self.store, self.get_level3(scene_id), prompt)
            self.p_lang[key] = const(summary.p_lang.data)
        return self.p_lang[key]


def quick_val(store: ParamStore, adapter_cfg: AdapterConfig, scenes: list[Scene]) -> dict:
    """Light oracle-protocol probe: mean per-scene semantic mIoU and AP@0.5."""
    miou_vals = []
    ap_preds, ap_gts = [], []
    for scene in scenes:
        level3 = backbones.encode_level3(store, scene.image)
        preds = []
        for name in scene.present_names():
            summary = backbones.encode_multimodal(store, level3, name)
            qs = run_adapter(store, adapter_cfg, summary.p_lang, level3)
            toks = [maskdecoder.language_token(index_rows(qs.q_refined, [i]))
                    for i in range(adapter_cfg.k_queries)]
            out = maskdecoder.decode(store, toks, level3, scene.raster)
            preds.append(fusion.PromptPrediction(
                name, [p.binary_mask() for p in out], [p.conf() for p in out]))
        sem = fusion.semantic_fuse(preds, scene.raster)
        miou_vals.append(evalbench.miou(sem, evalbench.gt_semantic(scene),
                                        scene.present_names()))
        thing_preds = [p for p in preds if parse_category(p.prompt).is_thing]
        selected = fusion.instance_select(thing_preds, 0.05, 0.5)
        for cat, mask, conf in selected.items:
            ap_preds.append((scene.scene_id, cat, mask, conf))
        for inst in scene.instances:
            if inst.is_thing:
                ap_gts.append((scene.scene_id, inst.name, inst.mask))
    ap = evalbench.average_precision(ap_preds, ap_gts, thresholds=(0.5,))
    return {"val_miou": float(np.mean(miou_vals)) if miou_vals else 0.0,
            "val_ap50": ap["ap50"]}


def train_adapter(store: ParamStore, split: DatasetSplit, adapter_cfg: AdapterConfig,
                  cfg: TrainConfig, seed: int,
                  phase_a_fingerprint: Optional[int] = None) -> TrainResult:
    """Phase B: only adapter parameters move; the frozen fingerprint is
    re-verified every epoch and any drift is fatal."""
    t0 = time.time()
    if not any(n.startswith("adapter.") for n in store.names()):
        init_adapter(store, adapter_cfg, Rng(derive_seed(seed, "adapter-init")))
    if not cfg.freeze_backbones:
        for name in sorted(store.frozen):
            store.params[name].requires_grad = True
        store.frozen.clear()
    frozen_names = sorted(store.frozen)
    fingerprint = store.fingerprint(frozen_names)
    if phase_a_fingerprint is not None and frozen_names and fingerprint != phase_a_fingerprint:
        raise FreezeViolationError("frozen parameters changed between phases")

    groups = build_groups(split, seed, cfg)
    cache = _FeatureCache(store, split.train, enabled=cfg.freeze_backbones)
    opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = (len(groups) + cfg.batch - 1) // cfg.batch
    total_steps = cfg.epochs * steps_per_epoch
    warmup = max(1, total_steps // 50)
    scenes = {s.scene_id: s for s in split.train}

    log: list[dict] = []
    step_no = 0
    for epoch in range(cfg.epochs):
        order = epoch_order(groups, seed, epoch)
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch):
            batch = [groups[i] for i in order[start:start + cfg.batch]]
            store.zero_grads()
            items = []
            for group in batch:
                scene = scenes[group.scene_id]
                level3 = cache.get_level3(group.scene_id)
                p_lang = cache.get_p_lang(group.scene_id, group.prompt)
                qs = run_adapter(store, adapter_cfg, p_lang, level3)
                toks = [maskdecoder.language_token(index_rows(qs.q_refined, [i]))
                        for i in range(adapter_cfg.k_queries)]
                preds = maskdecoder.decode(store, toks, level3, scene.raster)
                items.append(setcriterion.PromptGroupBatchItem(
                    logits=maskdecoder.stack_logits(preds),
                    confidences=maskdecoder.stack_confidences(preds),
                    gt_masks=[scene.instances[i].mask for i in group.gt_indices]))
            total, report = setcriterion.criterion(
                items, cfg.focal_weight, cfg.dice_weight, cfg.conf_weight)
            total.backward()
            step_no += 1
            lr = cfg.lr * min(1.0, step_no / warmup)
            if step_no >= 0.96 * total_steps:
                lr *= 0.01
            elif step_no >= 0.89 * total_steps:
                lr *= 0.1
            opt.step(store.grads(), lr=lr)
            loss_sum += report.total
        if frozen_names and store.fingerprint(frozen_names) != fingerprint:
            raise FreezeViolationError(f"frozen fingerprint drifted in epoch {epoch}")
        entry = {"epoch": epoch, "train_loss": round(loss_sum / steps_per_epoch, 5)}
        entry.update({k: round(v, 4) for k, v in
                      quick_val(store, adapter_cfg, split.val[:cfg.val_probe_scenes]).items()})
        log.append(entry)
    return TrainResult(store=store, fingerprint=fingerprint, frozen_names=frozen_names,
                       epoch_log=log, wall_seconds=time.time() - t0)
