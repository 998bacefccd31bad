"""Inference assembly: semantic maps, instance sets, panoptic maps, and
optional two-stage refinement that re-prompts the decoder with stage-1
masks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import maskdecoder
from .maskops import BitMask, nms
from .numerics import ParamStore, Tensor

VOID = "void"


@dataclass
class PromptPrediction:
    """Model output for one prompt on one scene, in scoring form."""
    prompt: str
    masks: list[BitMask]
    confidences: list[float]
    prob_grids: Optional[list[np.ndarray]] = None  # soft scores; None = use bits

    def soft(self, i: int) -> np.ndarray:
        if self.prob_grids is not None:
            return self.prob_grids[i]
        return self.masks[i].bits.astype(np.float64)


@dataclass
class SemanticMap:
    labels: np.ndarray  # (R, R) of object dtype strings; VOID allowed

    def region(self, name: str) -> BitMask:
        return BitMask(self.labels == name)

    def names(self) -> list[str]:
        out = sorted(set(self.labels.reshape(-1)) - {VOID})
        return out


@dataclass
class InstanceSet:
    items: list[tuple[str, BitMask, float]] = field(default_factory=list)


@dataclass
class PanopticMap:
    ids: np.ndarray  # (R, R) int32; 0 = void
    table: dict[int, tuple[str, bool]] = field(default_factory=dict)  # id -> (category, is_thing)


def semantic_fuse(predictions: Sequence[PromptPrediction], raster: int,
                  score_floor: float = 0.1) -> SemanticMap:
    """Per pixel, category score = sum of confidence-weighted mask
    probabilities; the argmax category wins where its score clears the
    floor, otherwise the pixel is void."""
    names: list[str] = []
    scores: list[np.ndarray] = []
    per_cat: dict[str, int] = {}
    for pred in predictions:
        if pred.prompt not in per_cat:
            per_cat[pred.prompt] = len(names)
            names.append(pred.prompt)
            scores.append(np.zeros((raster, raster), dtype=np.float64))
        acc = scores[per_cat[pred.prompt]]
        for i, conf in enumerate(pred.confidences):
            acc += conf * pred.soft(i)
    labels = np.full((raster, raster), VOID, dtype=object)
    if names:
        stack = np.stack(scores)
        best = stack.argmax(axis=0)
        best_score = stack.max(axis=0)
        name_arr = np.asarray(names, dtype=object)
        chosen = name_arr[best]
        labels = np.where(best_score >= score_floor, chosen, labels)
    return SemanticMap(labels)


def instance_select(predictions: Sequence[PromptPrediction], conf_threshold: float = 0.7,
                    nms_threshold: float = 0.5, binarize_prob: float = 0.5) -> InstanceSet:
    """Binarize, drop low-confidence and empty masks, then greedy NMS within
    each category."""
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_threshold <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    by_cat: dict[str, list[tuple[BitMask, float]]] = {}
    for pred in predictions:
        for i, conf in enumerate(pred.confidences):
            if conf < conf_threshold:
                continue
            if pred.prob_grids is not None:
                mask = BitMask(pred.prob_grids[i] > binarize_prob)
            else:
                mask = pred.masks[i]
            if mask.empty():
                continue
            by_cat.setdefault(pred.prompt, []).append((mask, conf))
    out = InstanceSet()
    for cat in by_cat:
        masks = [m for m, _ in by_cat[cat]]
        confs = [c for _, c in by_cat[cat]]
        for idx in nms(masks, confs, nms_threshold):
            out.items.append((cat, masks[idx], confs[idx]))
    return out


def verify_instance_set(inst: InstanceSet, conf_threshold: float,
                        nms_threshold: float) -> None:
    """Independent post-hoc check of the instance-set invariants."""
    from .maskops import iou
    for cat, mask, conf in inst.items:
        if conf < conf_threshold:
            raise AssertionError(f"{cat}: confidence {conf} below threshold")
        if mask.empty():
            raise AssertionError(f"{cat}: empty mask survived selection")
    for i in range(len(inst.items)):
        for j in range(i + 1, len(inst.items)):
            ci, mi, _ = inst.items[i]
            cj, mj, _ = inst.items[j]
            if ci == cj and iou(mi, mj)[0] > nms_threshold:
                raise AssertionError(f"{ci}: kept masks overlap past NMS threshold")


def panoptic_fuse(instances: InstanceSet, stuff: Sequence[tuple[str, BitMask, float]],
                  raster: int, min_area: int = 16) -> PanopticMap:
    """Confidence-greedy pixel claiming over all surviving segments; a pixel
    once claimed is never reassigned; segments shrunk below the minimum
    visible area are dropped; unclaimed pixels form the void region."""
    candidates: list[tuple[float, int, str, BitMask, bool]] = []
    order = 0
    for cat, mask, conf in instances.items:
        candidates.append((float(conf), order, cat, mask, True))
        order += 1
    for cat, mask, conf in stuff:
        candidates.append((float(conf), order, cat, mask, False))
        order += 1
    candidates.sort(key=lambda c: (-c[0], c[1]))
    ids = np.zeros((raster, raster), dtype=np.int32)
    table: dict[int, tuple[str, bool]] = {}
    claimed = np.zeros((raster, raster), dtype=bool)
    next_id = 1
    for conf, _, cat, mask, is_thing in candidates:
        visible = mask.bits & ~claimed
        if int(visible.sum()) < min_area:
            continue
        ids[visible] = next_id
        claimed |= visible
        table[next_id] = (cat, is_thing)
        next_id += 1
    return PanopticMap(ids, table)


def two_stage_refine(store: ParamStore, instances: InstanceSet, level3: Tensor,
                     raster: int) -> InstanceSet:
    """Re-prompt the decoder with each stage-1 mask; labels and set size are
    preserved, masks and confidences are re-estimated. Degenerate cases keep
    the stage-1 mask (skip with warning)."""
    out = InstanceSet()
    for cat, mask, conf in instances.items:
        if mask.empty():
            warnings.warn(f"two_stage_refine: skipping empty stage-1 mask for {cat!r}")
            out.items.append((cat, mask, conf))
            continue
        tok = maskdecoder.embed_mask(store, mask, level3, raster)
        pred = maskdecoder.decode(store, [tok], level3, raster)[0]
        refined = pred.binary_mask()
        if refined.empty():
            warnings.warn(f"two_stage_refine: empty refinement for {cat!r}; keeping stage 1")
            out.items.append((cat, mask, conf))
            continue
        out.items.append((cat, refined, pred.conf()))
    return out
