"""Binary-mask geometry: IoU, soft IoU, greedy NMS, and a run-length codec."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MaskError(Exception):
    pass


class RleDecodeError(MaskError):
    pass


class BitMask:
    """Immutable binary raster mask (row-major)."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        arr = np.asarray(bits, dtype=bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise MaskError(f"mask must be 2-D and nonempty, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.bits = arr

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other) -> bool:
        return isinstance(other, BitMask) and self.bits.shape == other.bits.shape \
            and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))

    def __repr__(self):
        return f"BitMask({self.height}x{self.width}, {self.count()} set)"

    @staticmethod
    def zeros(height: int, width: int) -> "BitMask":
        return BitMask(np.zeros((height, width), dtype=bool))

    @staticmethod
    def full(height: int, width: int) -> "BitMask":
        return BitMask(np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class RleMask:
    """Run-length coded mask: runs alternate zero/one counts, zeros first."""

    height: int
    width: int
    runs: tuple[int, ...]


def iou(a: BitMask, b: BitMask) -> tuple[float, bool]:
    """Intersection over union plus an all-empty flag.

    Returns (value, both_empty). Empty-vs-empty is defined as 0.0 so empty
    predictions never claim similarity; metric code skips flagged pairs.
    """
    if a.bits.shape != b.bits.shape:
        raise MaskError(f"iou dimension mismatch: {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = a.count() + b.count() - inter
    if union == 0:
        return 0.0, True
    return inter / union, False


def iou_value(a: BitMask, b: BitMask) -> float:
    return iou(a, b)[0]


def soft_iou(p: np.ndarray, g: BitMask) -> float:
    """Soft IoU for a probability grid against a binary mask.

    sum(p*g) / (sum(p) + sum(g) - sum(p*g)); product intersection keeps it
    smooth everywhere.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != g.bits.shape:
        raise MaskError(f"soft_iou shape mismatch: {p.shape} vs {g.bits.shape}")
    if p.min() < 0.0 or p.max() > 1.0:
        raise MaskError("soft_iou probabilities must lie in [0, 1]")
    inter = float((p * g.bits).sum())
    denom = float(p.sum()) + float(g.count()) - inter
    if denom == 0.0:
        return 0.0
    return inter / denom


def nms(masks: Sequence[BitMask], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in kept order.

    Score ties break toward the lower original index. A candidate is kept
    iff its IoU with every already-kept mask is <= threshold.
    """
    if len(masks) != len(scores):
        raise MaskError("nms: masks and scores length mismatch")
    scores = [float(s) for s in scores]
    if any(not np.isfinite(s) for s in scores):
        raise MaskError("nms: scores must be finite")
    order = sorted(range(len(masks)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou(masks[i], masks[j])[0] <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def interior_point(m: BitMask) -> tuple[int, int]:
    """(x, y) of a deepest-interior pixel, found by iterated 4-erosion."""
    if m.empty():
        raise MaskError("interior_point of an empty mask")
    cur = m.bits.copy()
    while True:
        shrunk = cur.copy()
        shrunk[1:, :] &= cur[:-1, :]
        shrunk[:-1, :] &= cur[1:, :]
        shrunk[:, 1:] &= cur[:, :-1]
        shrunk[:, :-1] &= cur[:, 1:]
        shrunk[0, :] = shrunk[-1, :] = False
        shrunk[:, 0] = shrunk[:, -1] = False
        if not shrunk.any():
            break
        cur = shrunk
    ys, xs = np.nonzero(cur)
    i = len(ys) // 2
    return int(xs[i]), int(ys[i])


def rle_encode(m: BitMask) -> RleMask:
    flat = m.bits.reshape(-1)
    n = flat.size
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [n]))
    lengths = np.diff(bounds).tolist()
    runs = lengths if not flat[0] else [0] + lengths
    return RleMask(m.height, m.width, tuple(int(r) for r in runs))


def rle_decode(r: RleMask) -> BitMask:
    total = r.height * r.width
    if any(run < 0 for run in r.runs):
        raise RleDecodeError("negative run length")
    if sum(r.runs) != total:
        raise RleDecodeError(f"run sum {sum(r.runs)} != {total} pixels")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    for i, run in enumerate(r.runs):
        if i % 2 == 1:
            flat[pos:pos + run] = True
        pos += run
    return BitMask(flat.reshape(r.height, r.width))
