"""Set-prediction training objective.

Minimum-cost injective assignment of ground-truth masks to the K
predictions (rectangular Kuhn-Munkres, all columns assigned), focal+dice
mask losses on matched pairs, and confidence regression toward realized
soft-IoU (zero for unmatched queries). The loss never consumes the
instance count as a supervised signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .maskops import BitMask
from .numerics import Tensor, const, index_rows, mul, pow_const, sigmoid, softplus

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


class MatchError(Exception):
    pass


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]      # (prediction index, gt index), sorted by gt index
    unmatched_preds: list[int]
    total_cost: float


def _solve_rect(a: np.ndarray):
    """Min-cost assignment of every row of a (n x m, n <= m) to a distinct
    column. Returns (row_to_col, total, u, v) with optimal dual potentials."""
    n, m = a.shape
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # column -> assigned row (1-based, 0 none)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        way = np.zeros(m + 1, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            idx = np.flatnonzero(free)
            cur = a[i0 - 1, idx - 1] - u[i0] - v[idx]
            better = cur < minv[idx]
            minv[idx] = np.where(better, cur, minv[idx])
            way[idx[better]] = j0
            j1 = idx[np.argmin(minv[idx])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    total = float(sum(a[i, row_to_col[i]] for i in range(n)))
    return row_to_col, total, u[1:], v[1:]


def hungarian(cost: np.ndarray) -> Assignment:
    """Optimal assignment of all G ground-truth columns to K predictions.

    Requires K >= G >= 1. Ties between equally cheap optima break
    lexicographically: ground truths in index order each take the
    lowest-index prediction consistent with global optimality.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchError("cost matrix must be 2-D")
    k, g = cost.shape
    if g < 1:
        raise MatchError("need at least one ground-truth column")
    if g > k:
        raise MatchError(f"{g} ground truths exceed {k} predictions; raise K in config")
    if not np.isfinite(cost).all():
        raise MatchError("cost matrix must be finite")

    # rows of the solver = ground truths so every one gets assigned
    a = cost.T.copy()
    gt_to_pred, total, u, v = _solve_rect(a)
    tol = 1e-9 * max(1.0, abs(total))

    # complementary slackness: optimal assignments only use reduced-cost-0
    # cells, so unique tight rows mean the optimum itself is unique
    reduced = a - u[:, None] - v[None, :]
    tight = [np.flatnonzero(np.abs(reduced[j]) <= tol) for j in range(g)]
    if all(len(t) == 1 for t in tight):
        chosen = gt_to_pred
    else:
        chosen = _lexicographic_refine(a, total, tol)

    pairs = [(int(chosen[j]), j) for j in range(g)]
    matched = {p for p, _ in pairs}
    return Assignment(pairs=pairs,
                      unmatched_preds=[i for i in range(k) if i not in matched],
                      total_cost=float(sum(cost[p, j] for p, j in pairs)))


def _lexicographic_refine(a: np.ndarray, total: float, tol: float) -> np.ndarray:
    """Among optimal assignments pick, per gt index in order, the smallest
    feasible prediction index (verified by re-solving the remainder)."""
    g, k = a.shape
    chosen = np.full(g, -1, dtype=np.int64)
    free_preds = list(range(k))
    fixed_cost = 0.0
    for j in range(g):
        for pi, pred in enumerate(list(free_preds)):
            rest_rows = np.arange(j + 1, g)
            rest_preds = [p for p in free_preds if p != pred]
            cand = fixed_cost + a[j, pred]
            if rest_rows.size:
                sub = a[np.ix_(rest_rows, rest_preds)]
                _, sub_total, _, _ = _solve_rect(sub)
                cand += sub_total
            if abs(cand - total) <= tol:
                chosen[j] = pred
                free_preds.remove(pred)
                fixed_cost += a[j, pred]
                break
        if chosen[j] < 0:
            raise MatchError("tie refinement failed to reproduce the optimum")
    return chosen


# ---------------------------------------------------------------------------
# Losses (numpy twins drive the matching cost; tape versions train)
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    e = np.exp(-ax)
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def focal_terms_np(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-pixel alpha-balanced focal terms, gamma=2, alpha=0.25."""
    p = _sigmoid_np(logits)
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * _softplus_np(-logits)
    neg = (1.0 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * _softplus_np(logits)
    return targets * pos + (1.0 - targets) * neg


def focal_loss_np(logits: np.ndarray, target: BitMask) -> float:
    """Mean-over-pixels focal loss of a logit grid against a binary mask."""
    t = target.bits.reshape(-1).astype(np.float64)
    return float(focal_terms_np(np.asarray(logits, dtype=np.float64).reshape(-1), t).mean())


def soft_iou_np(logits: np.ndarray, target: BitMask) -> float:
    p = _sigmoid_np(np.asarray(logits, dtype=np.float64).reshape(-1))
    t = target.bits.reshape(-1)
    inter = float((p * t).sum())
    denom = float(p.sum()) + float(t.sum()) - inter
    return inter / denom if denom > 0 else 0.0


def match_cost(stacked_logits: np.ndarray, gts: Sequence[BitMask],
               focal_weight: float = 1.0, dice_weight: float = 1.0) -> np.ndarray:
    """(K, G) cost matrix: focal + (1 - soft IoU) per prediction/gt pair."""
    if len(gts) == 0:
        raise MatchError("match_cost needs at least one ground truth")
    k = stacked_logits.shape[0]
    logits = np.asarray(stacked_logits, dtype=np.float64).reshape(k, 1, -1)
    t = np.stack([g.bits.reshape(-1) for g in gts]).astype(np.float64)[None, :, :]
    if logits.shape[2] != t.shape[2]:
        raise MatchError("logit grid and mask sizes differ")
    focal = focal_terms_np(logits, t).mean(axis=2)
    p = _sigmoid_np(logits)
    inter = (p * t).sum(axis=2)
    denom = p.sum(axis=2) + t.sum(axis=2) - inter
    siou = np.where(denom > 0, inter / np.maximum(denom, 1e-12), 0.0)
    return focal_weight * focal + dice_weight * (1.0 - siou)


def focal_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Differentiable focal loss, mean over all entries of (n, P) logits."""
    t = const(targets.reshape(logits.data.shape), logits.dtype)
    p = sigmoid(logits)
    pos = mul(pow_const(1.0 - p, FOCAL_GAMMA), softplus(-logits)) * FOCAL_ALPHA
    neg = mul(pow_const(p, FOCAL_GAMMA), softplus(logits)) * (1.0 - FOCAL_ALPHA)
    return (t * pos + (1.0 - t) * neg).mean()


def soft_iou_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Differentiable per-row soft IoU of (n, P) logits vs binary targets."""
    t = const(targets.reshape(logits.data.shape), logits.dtype)
    p = sigmoid(logits)
    inter = (p * t).sum(axis=1, keepdims=True)
    denom = p.sum(axis=1, keepdims=True) + t.sum(axis=1, keepdims=True) - inter
    return inter / denom


@dataclass
class PromptGroupBatchItem:
    """One prompt's predictions and ground truth inside a criterion batch."""
    logits: Tensor             # (K, R*R)
    confidences: Tensor        # (K, 1)
    gt_masks: list[BitMask]    # G >= 0 masks of the prompted class


@dataclass
class CriterionReport:
    total: float
    focal: float
    dice: float
    confidence: float
    matched: int
    groups: int


def criterion(items: Sequence[PromptGroupBatchItem], focal_weight: float = 1.0,
              dice_weight: float = 1.0, conf_weight: float = 1.0
              ) -> tuple[Tensor, CriterionReport]:
    """Total loss over a batch of prompt groups (mean over groups).

    Matched pairs contribute focal + dice plus confidence regression toward
    their realized soft-IoU; unmatched predictions contribute confidence
    regression toward zero only.
    """
    if not items:
        raise MatchError("criterion needs at least one prompt group")
    losses = []
    rep_focal = rep_dice = rep_conf = 0.0
    matched_count = 0
    for item in items:
        k = item.logits.data.shape[0]
        conf_target = np.zeros((k, 1), dtype=np.float64)
        terms = []
        if item.gt_masks:
            cost = match_cost(item.logits.data, item.gt_masks, focal_weight, dice_weight)
            assign = hungarian(cost)
            pred_idx = [p for p, _ in assign.pairs]
            gt_idx = [g for _, g in assign.pairs]
            matched_count += len(pred_idx)
            targets = np.stack([item.gt_masks[g].bits.reshape(-1) for g in gt_idx]).astype(np.float64)
            matched = index_rows(item.logits, pred_idx)
            f = focal_loss(matched, targets)
            d = (1.0 - soft_iou_rows(matched, targets)).mean()
            terms.append(f * focal_weight)
            terms.append(d * dice_weight)
            rep_focal += f.data.item()
            rep_dice += d.data.item()
            for p, g in assign.pairs:
                conf_target[p, 0] = soft_iou_np(item.logits.data[p], item.gt_masks[g])
        delta = item.confidences - const(conf_target, item.confidences.dtype)
        c = (delta * delta).mean()
        terms.append(c * conf_weight)
        rep_conf += c.data.item()
        group_loss = terms[0]
        for t in terms[1:]:
            group_loss = group_loss + t
        losses.append(group_loss)
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    total = total * (1.0 / len(items))
    report = CriterionReport(total=total.data.item(), focal=rep_focal / len(items),
                             dice=rep_dice / len(items), confidence=rep_conf / len(items),
                             matched=matched_count, groups=len(items))
    return total, report
