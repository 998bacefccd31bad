"""Metrics (mIoU, PQ, AP, cIoU), the two evaluation protocols, and report
emission.

The protocol runner writes a line-JSON prediction dump before any scoring;
scoring then reads the dump back, so re-scoring a dump reproduces the
report bit for bit and needs no model.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, backbones, fusion, maskdecoder
from .adapter import AdapterConfig, run_adapter
from .fusion import VOID, InstanceSet, PanopticMap, PromptPrediction, SemanticMap
from .maskops import BitMask, RleMask, iou, rle_decode, rle_encode
from .numerics import ParamStore
from .shapeworld import DatasetSplit, Scene, expression_target, referring_pairs

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# Metric primitives
# ---------------------------------------------------------------------------


def miou(pred: SemanticMap, gt: SemanticMap, categories: Sequence[str]) -> float:
    """Mean per-category IoU between label regions; categories absent from
    both maps are skipped."""
    vals = []
    for cat in categories:
        a = pred.region(cat)
        b = gt.region(cat)
        v, both_empty = iou(a, b)
        if both_empty:
            continue
        vals.append(v)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class PqStat:
    """Pooled true-positive IoU and match counts, per category."""
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "PqStat") -> None:
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def scores(self) -> tuple[float, float, float]:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 0.0, 0.0, 0.0
        pq = self.iou_sum / denom
        sq = self.iou_sum / self.tp if self.tp else 0.0
        rq = self.tp / denom
        return pq, sq, rq


def _check_partition(m: PanopticMap) -> None:
    ids = set(np.unique(m.ids)) - {0}
    if ids - set(m.table):
        raise EvalError("panoptic map references ids missing from its table")
    for sid in m.table:
        if sid not in ids:
            raise EvalError(f"table id {sid} appears on no pixel")


def pq_stats(pred: PanopticMap, gt: PanopticMap) -> dict[str, PqStat]:
    """Per-category PQ statistics; segments match iff IoU > 0.5 (which makes
    the matching unique). Pixels void in the prediction are excluded from
    IoU denominators and mostly-void predicted segments are not counted as
    false positives."""
    _check_partition(pred)
    _check_partition(gt)
    stats: dict[str, PqStat] = {}

    def stat(cat: str) -> PqStat:
        return stats.setdefault(cat, PqStat())

    pred_void = pred.ids == 0
    gt_void = gt.ids == 0
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for gid, (cat, _) in gt.table.items():
        gmask = gt.ids == gid
        best: Optional[tuple[float, int]] = None
        for pid in np.unique(pred.ids[gmask]):
            if pid == 0 or pred.table[pid][0] != cat:
                continue
            pmask = pred.ids == pid
            inter = int(np.count_nonzero(gmask & pmask))
            union = int(np.count_nonzero(gmask | pmask)) - int(np.count_nonzero(pmask & gt_void))
            v = inter / union if union else 0.0
            if v > 0.5:
                if best is not None:
                    raise EvalError("IoU>0.5 matched one gt segment twice")
                best = (v, int(pid))
        if best is not None:
            stat(cat).iou_sum += best[0]
            stat(cat).tp += 1
            matched_pred.add(best[1])
            matched_gt.add(gid)
    for gid, (cat, _) in gt.table.items():
        if gid not in matched_gt:
            stat(cat).fn += 1
    for pid, (cat, _) in pred.table.items():
        if pid in matched_pred:
            continue
        pmask = pred.ids == pid
        area = int(pmask.sum())
        void_overlap = int(np.count_nonzero(pmask & gt_void))
        if area and void_overlap / area > 0.5:
            continue
        stat(cat).fp += 1
    return stats


def pq(pred: PanopticMap, gt: PanopticMap) -> dict:
    """(PQ, SQ, RQ) per category plus the pooled overall values."""
    stats = pq_stats(pred, gt)
    overall = PqStat()
    per_cat = {}
    for cat, st in sorted(stats.items()):
        p, s, r = st.scores()
        per_cat[cat] = {"pq": p, "sq": s, "rq": r}
        overall.add(st)
    p, s, r = overall.scores()
    return {"pq": p, "sq": s, "rq": r, "per_category": per_cat}


def average_precision(predictions: Sequence[tuple[int, str, BitMask, float]],
                      gts: Sequence[tuple[int, str, BitMask]],
                      thresholds: Sequence[float] = AP_THRESHOLDS) -> dict:
    """COCO-style mAP over masks pooled across scenes.

    predictions: (scene_id, category, mask, confidence); gts likewise minus
    the confidence. Per category and threshold, predictions sorted by
    confidence greedily match the best unmatched gt of the same scene with
    IoU >= threshold; AP is the 101-point interpolated area under the
    monotone precision envelope.
    """
    cats = sorted({c for _, c, _ in gts})
    ap_by_thr: dict[float, list[float]] = {t: [] for t in thresholds}
    for cat in cats:
        cat_preds = sorted([p for p in predictions if p[1] == cat],
                           key=lambda p: (-p[3], p[0]))
        cat_gts = [g for g in gts if g[1] == cat]
        if not cat_gts:
            continue
        gt_by_scene: dict[int, list[BitMask]] = {}
        for sid, _, m in cat_gts:
            gt_by_scene.setdefault(sid, []).append(m)
        iou_cache: dict[tuple[int, int, int], float] = {}
        for t in thresholds:
            used: dict[int, set[int]] = {sid: set() for sid in gt_by_scene}
            tp_flags = []
            for pi, (sid, _, mask, _) in enumerate(cat_preds):
                best_iou, best_j = 0.0, -1
                for j, gmask in enumerate(gt_by_scene.get(sid, [])):
                    if j in used.get(sid, set()):
                        continue
                    key = (pi, sid, j)
                    if key not in iou_cache:
                        iou_cache[key] = iou(mask, gmask)[0]
                    v = iou_cache[key]
                    if v >= t and v > best_iou:
                        best_iou, best_j = v, j
                if best_j >= 0:
                    used[sid].add(best_j)
                    tp_flags.append(True)
                else:
                    tp_flags.append(False)
            ap_by_thr[t].append(_ap_from_flags(tp_flags, len(cat_gts)))
    per_thr = {t: (float(np.mean(v)) if v else 0.0) for t, v in ap_by_thr.items()}
    vals = [v for v in per_thr.values()]
    return {"map": float(np.mean(vals)) if vals else 0.0,
            "ap50": per_thr.get(0.5, 0.0),
            "per_threshold": {f"{t:.2f}": per_thr[t] for t in thresholds}}


def _ap_from_flags(tp_flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from ordered match flags."""
    if n_gt == 0:
        return 0.0
    tps = np.cumsum(np.asarray(tp_flags, dtype=np.int64)) if tp_flags else np.asarray([])
    if len(tps) == 0:
        return 0.0
    fps = np.arange(1, len(tps) + 1) - tps
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # monotone envelope
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    out = 0.0
    for r in np.linspace(0, 1, 101):
        idx = np.searchsorted(recall, r, side="left")
        out += precision[idx] if idx < len(precision) else 0.0
    return out / 101.0


def ciou(pairs: Sequence[tuple[BitMask, BitMask]]) -> float:
    """Cumulative intersection over cumulative union across all pairs."""
    inter = union = 0
    for pred, gt in pairs:
        if pred.bits.shape != gt.bits.shape:
            raise EvalError("ciou pair dimensions differ")
        inter += int(np.count_nonzero(pred.bits & gt.bits))
        union += int(np.count_nonzero(pred.bits | gt.bits))
    return inter / union if union else 0.0


# ---------------------------------------------------------------------------
# Ground truth assembly
# ---------------------------------------------------------------------------


def gt_semantic(scene: Scene) -> SemanticMap:
    labels = np.full((scene.raster, scene.raster), VOID, dtype=object)
    for inst in scene.instances:
        labels[inst.mask.bits] = inst.name
    return SemanticMap(labels)


def gt_panoptic(scene: Scene) -> PanopticMap:
    ids = np.zeros((scene.raster, scene.raster), dtype=np.int32)
    table = {}
    for i, inst in enumerate(scene.instances, start=1):
        ids[inst.mask.bits] = i
        table[i] = (inst.name, inst.is_thing)
    return PanopticMap(ids, table)


# ---------------------------------------------------------------------------
# Dump format
# ---------------------------------------------------------------------------


def dump_line(scene_id: int, prompt: str, masks: Sequence[BitMask],
              confidences: Sequence[float], protocol: str) -> str:
    return json.dumps({
        "scene_id": scene_id,
        "prompt": prompt,
        "masks": [list(rle_encode(m).runs) for m in masks],
        "confidences": [round(float(c), 6) for c in confidences],
        "protocol": protocol,
    }, sort_keys=True)


def read_dump(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


def _masks_from_line(rec: dict, raster: int) -> list[BitMask]:
    return [rle_decode(RleMask(raster, raster, tuple(runs))) for runs in rec["masks"]]


# ---------------------------------------------------------------------------
# Model bundle inference
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    conf_threshold: float = 0.7
    nms_threshold: float = 0.5
    ap_conf_floor: float = 0.05
    semantic_floor: float = 0.1
    min_segment_area: int = 16
    two_stage: bool = False


@dataclass
class ModelBundle:
    """Trained parameters plus the architecture configs needed to run them."""
    store: ParamStore
    adapter_cfg: AdapterConfig
    fingerprint: int = 0
    config_echo: dict = field(default_factory=dict)

    def prompt_scene(self, scene: Scene, prompt: str):
        level3 = backbones.encode_level3(self.store, scene.image)
        return self.prompt_level3(level3, scene.raster, prompt)

    def prompt_level3(self, level3, raster: int, prompt: str):
        from .numerics import index_rows

        summary = backbones.encode_multimodal(self.store, level3, prompt)
        qs = run_adapter(self.store, self.adapter_cfg, summary.p_lang, level3)
        tokens = [maskdecoder.language_token(index_rows(qs.q_refined, [i]))
                  for i in range(self.adapter_cfg.k_queries)]
        return maskdecoder.decode(self.store, tokens, level3, raster)


def run_inference(bundle: ModelBundle, scene: Scene, prompts: Sequence[str],
                  eval_cfg: EvalConfig, protocol: str) -> list[str]:
    """Decode every prompt on a scene and return dump lines (binarized)."""
    from .numerics import index_rows

    level3 = backbones.encode_level3(bundle.store, scene.image)
    lines = []
    for prompt in prompts:
        summary = backbones.encode_multimodal(bundle.store, level3, prompt)
        qs = run_adapter(bundle.store, bundle.adapter_cfg, summary.p_lang, level3)
        tokens = [maskdecoder.language_token(index_rows(qs.q_refined, [i]))
                  for i in range(bundle.adapter_cfg.k_queries)]
        preds = maskdecoder.decode(bundle.store, tokens, level3, scene.raster)
        masks = [p.binary_mask() for p in preds]
        confs = [p.conf() for p in preds]
        if eval_cfg.two_stage:
            pool = fusion.InstanceSet(items=[(prompt, m, c) for m, c in zip(masks, confs)
                                             if not m.empty()])
            refined = fusion.two_stage_refine(bundle.store, pool, level3, scene.raster)
            keep = [(m, c) for _, m, c in refined.items]
            empties = [(m, c) for m, c in zip(masks, confs) if m.empty()]
            pairs = keep + empties
            masks = [m for m, _ in pairs]
            confs = [c for _, c in pairs]
        lines.append(dump_line(scene.scene_id, prompt, masks, confs, protocol))
    return lines


# ---------------------------------------------------------------------------
# Scoring (model-free, reads the dump)
# ---------------------------------------------------------------------------


def score_dump(dump_path, split: DatasetSplit, split_name: str, eval_cfg: EvalConfig,
               dataset_fingerprint: int = 0, config_echo: Optional[dict] = None) -> dict:
    """Deterministic scorer over a prediction dump; never touches the model."""
    scenes = {s.scene_id: s for s in getattr(split, split_name)}
    records = read_dump(dump_path)
    category_records = [r for r in records if r["protocol"] != "referring"]
    referring_records = [r for r in records if r["protocol"] == "referring"]

    by_scene: dict[int, list[dict]] = {}
    for rec in category_records:
        by_scene.setdefault(rec["scene_id"], []).append(rec)

    sem_inter: dict[str, int] = {}
    sem_union: dict[str, int] = {}
    pq_total: dict[str, PqStat] = {}
    ap_preds: list[tuple[int, str, BitMask, float]] = []
    ap_gts: list[tuple[int, str, BitMask]] = []
    absent_prompted = 0
    absent_with_fp = 0

    for sid in sorted(by_scene):
        scene = scenes[sid]
        raster = scene.raster
        preds = []
        for rec in by_scene[sid]:
            masks = _masks_from_line(rec, raster)
            preds.append(PromptPrediction(rec["prompt"], masks,
                                          [float(c) for c in rec["confidences"]]))
        present = set(scene.present_names())

        # semantic
        sem = fusion.semantic_fuse(preds, raster, eval_cfg.semantic_floor)
        gt_sem = gt_semantic(scene)
        for cat in set(p.prompt for p in preds) | present:
            a = sem.region(cat)
            b = gt_sem.region(cat)
            sem_inter[cat] = sem_inter.get(cat, 0) + int(np.count_nonzero(a.bits & b.bits))
            sem_union[cat] = sem_union.get(cat, 0) + int(np.count_nonzero(a.bits | b.bits))

        # instances for AP: permissive confidence floor, NMS per category
        thing_preds = [p for p in preds if _is_thing_prompt(scene, p.prompt)]
        ap_set = fusion.instance_select(thing_preds, eval_cfg.ap_conf_floor,
                                        eval_cfg.nms_threshold)
        for cat, mask, conf in ap_set.items:
            ap_preds.append((sid, cat, mask, conf))
        for inst in scene.instances:
            if inst.is_thing:
                ap_gts.append((sid, inst.name, inst.mask))

        # output instance set at the operating threshold + absent-prompt FP rate
        inst_set = fusion.instance_select(thing_preds, eval_cfg.conf_threshold,
                                          eval_cfg.nms_threshold)
        fusion.verify_instance_set(inst_set, eval_cfg.conf_threshold, eval_cfg.nms_threshold)
        kept_cats = {cat for cat, _, _ in inst_set.items}
        for p in thing_preds:
            if p.prompt not in present:
                absent_prompted += 1
                if p.prompt in kept_cats:
                    absent_with_fp += 1

        # panoptic: thing instances + per-category merged stuff
        stuff_preds = [p for p in preds if not _is_thing_prompt(scene, p.prompt)]
        stuff_set = fusion.instance_select(stuff_preds, eval_cfg.conf_threshold,
                                           eval_cfg.nms_threshold)
        stuff_merged: dict[str, tuple[np.ndarray, float]] = {}
        for cat, mask, conf in stuff_set.items:
            bits, best = stuff_merged.get(cat, (np.zeros((raster, raster), dtype=bool), 0.0))
            stuff_merged[cat] = (bits | mask.bits, max(best, conf))
        stuff_items = [(cat, BitMask(bits), conf)
                       for cat, (bits, conf) in sorted(stuff_merged.items())]
        pan = fusion.panoptic_fuse(inst_set, stuff_items, raster, eval_cfg.min_segment_area)
        for cat, st in pq_stats(pan, gt_panoptic(scene)).items():
            pq_total.setdefault(cat, PqStat()).add(st)

    # reduce
    cats = sorted(set(sem_union) | set(pq_total))
    per_cat_iou = {c: (sem_inter.get(c, 0) / sem_union[c]) for c in sorted(sem_union)
                   if sem_union.get(c, 0) > 0}
    miou_val = float(np.mean(list(per_cat_iou.values()))) if per_cat_iou else 0.0
    overall = PqStat()
    pq_per_cat = {}
    for cat in sorted(pq_total):
        p, s, r = pq_total[cat].scores()
        pq_per_cat[cat] = {"pq": p, "sq": s, "rq": r}
        overall.add(pq_total[cat])
    pq_val, sq_val, rq_val = overall.scores()
    ap = average_precision(ap_preds, ap_gts)

    ref_pairs = []
    for rec in referring_records:
        scene = scenes[rec["scene_id"]]
        target = expression_target(scene, rec["prompt"])
        if target is None:
            continue
        masks = _masks_from_line(rec, scene.raster)
        confs = [float(c) for c in rec["confidences"]]
        best = int(np.argmax(confs)) if confs else 0
        chosen = masks[best] if masks else BitMask.zeros(scene.raster, scene.raster)
        ref_pairs.append((chosen, scene.instances[target].mask))
    report = {
        "schema_version": 1,
        "tool_version": __version__,
        "protocol": records[0]["protocol"] if category_records else "",
        "dataset_fingerprint": f"{dataset_fingerprint:016x}",
        "config_echo": config_echo or {},
        "metrics": {
            "miou": miou_val,
            "pq": pq_val,
            "sq": sq_val,
            "rq": rq_val,
            "map": ap["map"],
            "ap50": ap["ap50"],
            "ciou": ciou(ref_pairs) if ref_pairs else None,
            "absent_fp_rate": (absent_with_fp / absent_prompted) if absent_prompted else 0.0,
        },
        "ap_per_threshold": ap["per_threshold"],
        "per_category_iou": {c: per_cat_iou[c] for c in sorted(per_cat_iou)},
        "pq_per_category": pq_per_cat,
        "counts": {"scenes": len(by_scene), "referring_pairs": len(ref_pairs),
                   "absent_prompts": absent_prompted},
    }
    return report


def _is_thing_prompt(scene: Scene, prompt: str) -> bool:
    from .shapeworld import parse_category
    try:
        return parse_category(prompt).is_thing
    except Exception:
        return True


def run_protocol(bundle: ModelBundle, split: DatasetSplit, split_name: str,
                 protocol: str, eval_cfg: EvalConfig, out_dir,
                 dataset_fingerprint: int = 0, include_referring: bool = True,
                 scene_limit: Optional[int] = None) -> tuple[dict, Path]:
    """Run a full evaluation protocol: dump first, then score from the dump.

    oracle prompts only the categories present in each scene; full_vocab
    prompts the entire category table of the split.
    """
    if protocol not in ("oracle", "full_vocab"):
        raise EvalError(f"unknown protocol {protocol!r}")
    scenes = list(getattr(split, split_name))
    if scene_limit is not None:
        scenes = scenes[:scene_limit]
    vocab = split.train_categories if split_name in ("train", "val") else split.all_categories
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_path = out_dir / f"dump_{split_name}_{protocol}.jsonl"
    t0 = time.time()
    with dump_path.open("w") as fh:
        for scene in scenes:
            prompts = scene.present_names() if protocol == "oracle" else list(vocab)
            for line in run_inference(bundle, scene, prompts, eval_cfg, protocol):
                fh.write(line + "\n")
            if include_referring:
                for text, _ in referring_pairs(scene):
                    for line in run_inference(bundle, scene, [text], eval_cfg, "referring"):
                        fh.write(line + "\n")
    sub = DatasetSplit(train=[], val=scenes if split_name == "val" else [],
                       test=scenes if split_name == "test" else [],
                       held_out_names=split.held_out_names,
                       train_categories=split.train_categories,
                       all_categories=split.all_categories)
    report = score_dump(dump_path, sub, split_name, eval_cfg,
                        dataset_fingerprint, bundle.config_echo)
    report["wall_seconds"] = round(time.time() - t0, 3)
    report_path = out_dir / f"report_{split_name}_{protocol}.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return report, dump_path


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def write_svg_bar_chart(path, labels: Sequence[str], values: Sequence[float],
                        title: str) -> None:
    """Minimal dependency-free per-category bar chart."""
    width = max(320, 26 * len(labels) + 60)
    height = 240
    bars = []
    for i, (lab, val) in enumerate(zip(labels, values)):
        x = 40 + i * 26
        h = int(160 * max(0.0, min(1.0, val)))
        bars.append(f'<rect x="{x}" y="{200 - h}" width="18" height="{h}" fill="#4a78b0"/>')
        bars.append(f'<text x="{x + 9}" y="214" font-size="7" text-anchor="middle" '
                    f'transform="rotate(45 {x + 9} 214)">{lab}</text>')
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
           f'<text x="10" y="18" font-size="12">{title}</text>'
           f'<line x1="38" y1="200" x2="{width - 10}" y2="200" stroke="#333"/>'
           + "".join(bars) + "</svg>")
    Path(path).write_text(svg)


def write_svg_pr_curves(path, curves: dict[str, list[tuple[float, float]]], title: str) -> None:
    """Precision-recall curves, one polyline per label."""
    width, height = 360, 300
    palette = ["#4a78b0", "#b04a4a", "#4ab06e", "#b0884a", "#7a4ab0"]
    parts = [f'<text x="10" y="16" font-size="12">{title}</text>',
             '<rect x="40" y="30" width="300" height="240" fill="none" stroke="#333"/>']
    for i, (label, pts) in enumerate(sorted(curves.items())):
        color = palette[i % len(palette)]
        path_pts = " ".join(f"{40 + 300 * r:.1f},{270 - 240 * p:.1f}" for r, p in pts)
        parts.append(f'<polyline points="{path_pts}" fill="none" stroke="{color}"/>')
        parts.append(f'<text x="44" y="{44 + 12 * i}" font-size="9" fill="{color}">{label}</text>')
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
           + "".join(parts) + "</svg>")
    Path(path).write_text(svg)


def emit_plots(report: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out = []
    cats = list(report.get("per_category_iou", {}))
    if cats:
        p = out_dir / "per_category_iou.svg"
        write_svg_bar_chart(p, cats, [report["per_category_iou"][c] for c in cats],
                            "per-category IoU")
        out.append(p)
    thr = report.get("ap_per_threshold", {})
    if thr:
        pts = sorted((float(t), v) for t, v in thr.items())
        p = out_dir / "ap_thresholds.svg"
        write_svg_pr_curves(p, {"AP@t": [(t, v) for t, v in pts]}, "AP by IoU threshold")
        out.append(p)
    return out
