"""One-to-one assignment of predictions to ground truth.

Matching is class-restricted: predictions and ground truths of the same label
form an independent sub-problem solved with the Hungarian method on cost
``1 - IoU``. The assignment is computed once per (image, class) and then
filtered by each IoU threshold, so true-positive sets are nested as the
threshold rises.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .geometry import BBox, iou_matrix


class Labeled(Protocol):
    bbox: BBox
    class_label: str


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment for a (possibly rectangular) cost matrix.

    Returns ``(row, col)`` pairs sorted by row; exactly ``min(rows, cols)``
    pairs. Surplus rows or columns stay unassigned, which is the same answer
    as padding with a cost larger than every real entry and discarding the
    padded pairs. Ties resolve toward lower indices.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    if c.size == 0:
        return []
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    if c.min() < 0:
        raise ValueError("cost matrix entries must be non-negative")

    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape

    # Shortest augmenting path with row/column potentials; 1-based with a
    # virtual column 0 holding the row being inserted.
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = row assigned to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # argmin takes the lowest index on ties
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs: Sequence[tuple[int, int]]) -> float:
    c = np.asarray(cost, dtype=float)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    return float(sum(c[r, k] for r, k in pairs))


@dataclass(frozen=True)
class MatchedPair:
    pred: int
    gt: int
    iou: float


@dataclass(frozen=True)
class MatchOutcome:
    threshold: float
    tp_pairs: tuple[MatchedPair, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp_pairs), len(self.fp), len(self.fn)


@dataclass
class ImageMatch:
    """Threshold-free matching result for one image.

    ``pairs`` holds every Hungarian pair (same class) with its IoU; pairs with
    zero overlap are kept so the assignment is complete, they simply never
    pass a positive threshold.
    """

    n_pred: int
    n_gt: int
    pairs: list[MatchedPair] = field(default_factory=list)
    pred_labels: list[str] = field(default_factory=list)
    gt_labels: list[str] = field(default_factory=list)

    def at(self, threshold: float) -> MatchOutcome:
        tp = tuple(p for p in self.pairs if p.iou >= threshold)
        hit_p = {p.pred for p in tp}
        hit_g = {p.gt for p in tp}
        return MatchOutcome(
            threshold=threshold,
            tp_pairs=tp,
            fp=tuple(i for i in range(self.n_pred) if i not in hit_p),
            fn=tuple(j for j in range(self.n_gt) if j not in hit_g),
        )

    def tp_ious(self) -> np.ndarray:
        return np.array([p.iou for p in self.pairs], dtype=float)


def match_image(preds: Sequence[Labeled], gts: Sequence[Labeled]) -> ImageMatch:
    """Class-restricted Hungarian matching on cost ``1 - IoU``."""
    out = ImageMatch(
        n_pred=len(preds),
        n_gt=len(gts),
        pred_labels=[p.class_label for p in preds],
        gt_labels=[g.class_label for g in gts],
    )
    by_label_p: dict[str, list[int]] = defaultdict(list)
    by_label_g: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(preds):
        by_label_p[p.class_label].append(i)
    for j, g in enumerate(gts):
        by_label_g[g.class_label].append(j)

    for label in sorted(by_label_p.keys() & by_label_g.keys()):
        pi = by_label_p[label]
        gi = by_label_g[label]
        ious = iou_matrix([preds[i].bbox for i in pi], [gts[j].bbox for j in gi])
        for r, k in hungarian(1.0 - ious):
            out.pairs.append(MatchedPair(pred=pi[r], gt=gi[k], iou=float(ious[r, k])))
    out.pairs.sort(key=lambda p: (p.pred, p.gt))
    return out


def match_detections(
    preds: Sequence[Labeled], gts: Sequence[Labeled], threshold: float
) -> MatchOutcome:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {threshold}")
    return match_image(preds, gts).at(threshold)
