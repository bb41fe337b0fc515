"""F1 over an IoU threshold sweep, mean IoU of true positives, and report pooling.

Counts are micro-pooled across the images of one group (dataset, method, K).
Across datasets the headline number is the unweighted mean of the
per-dataset values; a micro-pooled variant is available as well.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .matching import ImageMatch, Labeled, match_image

N_THRESHOLDS = 50
THRESHOLD_FIRST = 0.05
THRESHOLD_LAST = 0.70
TP_IOU_ANCHOR = 0.5


def threshold_list(
    first: float = THRESHOLD_FIRST, last: float = THRESHOLD_LAST, n: int = N_THRESHOLDS
) -> tuple[float, ...]:
    """Evenly spaced IoU thresholds, both endpoints included exactly."""
    values = np.linspace(first, last, n)
    values[0], values[-1] = first, last
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class MetricConfig:
    thresholds: tuple[float, ...] = field(default_factory=threshold_list)
    tp_iou_anchor: float = TP_IOU_ANCHOR

    def __post_init__(self) -> None:
        t = self.thresholds
        if len(t) == 0 or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be non-empty and strictly ascending")
        if not all(0.0 < x <= 1.0 for x in t):
            raise ValueError("thresholds must lie in (0, 1]")


def f1(tp: int, fp: int, fn: int) -> float:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp == 0:
        return 0.0
    # 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); the reduced form is exact in counts.
    return 2.0 * tp / (2.0 * tp + fp + fn)


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn else 0.0


@dataclass
class ThresholdRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class MetricReport:
    dataset: str
    method: str
    k: int
    rows: list[ThresholdRow]
    mf1: float
    mean_iou_tp: float
    tp_iou_anchor: float = TP_IOU_ANCHOR
    # Pooled sum and count of TP IoUs at the anchor; kept so reports can be merged.
    tp_iou_sum: float = 0.0
    tp_iou_count: int = 0
    n_images: int = 0
    n_failed: int = 0
    empty: bool = False
    variant: str = "excluded"
    scheme: str = "micro"
    # label -> {"tp", "fp", "fn", "mf1"}; counts at the anchor threshold.
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    datasets: list[str] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.dataset, self.method, self.k)

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(r.threshold for r in self.rows)

    @property
    def f1_curve(self) -> np.ndarray:
        return np.array([r.f1 for r in self.rows])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        d = dict(d)
        d["rows"] = [ThresholdRow(**r) for r in d["rows"]]
        return cls(**d)

    def to_json(self) -> str:
        """Canonical serialization; byte-stable for identical inputs."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))


def _rows_from_counts(thresholds: Sequence[float], counts: np.ndarray) -> list[ThresholdRow]:
    rows = []
    for t, (tp, fp, fn) in zip(thresholds, counts.tolist()):
        rows.append(
            ThresholdRow(
                threshold=t, tp=tp, fp=fp, fn=fn,
                precision=precision(tp, fp), recall=recall(tp, fn), f1=f1(tp, fp, fn),
            )
        )
    return rows


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if len(values) else 0.0


def count_matches(matches: Iterable[ImageMatch], thresholds: Sequence[float]) -> np.ndarray:
    """Pooled ``(tp, fp, fn)`` per threshold, shape ``(len(thresholds), 3)``."""
    t = np.asarray(thresholds)
    out = np.zeros((len(t), 3), dtype=np.int64)
    for m in matches:
        tp = (m.tp_ious()[None, :] >= t[:, None]).sum(axis=1)
        out[:, 0] += tp
        out[:, 1] += m.n_pred - tp
        out[:, 2] += m.n_gt - tp
    return out


def _anchor_ious(matches: Iterable[ImageMatch], anchor: float) -> list[float]:
    ious = [p.iou for m in matches for p in m.pairs if p.iou >= anchor]
    return sorted(ious)


def count_matches_for_label(matches: Sequence[ImageMatch], label: str, threshold: float) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for m in matches:
        hits = sum(1 for p in m.pairs if p.iou >= threshold and m.gt_labels[p.gt] == label)
        tp += hits
        fp += sum(1 for l in m.pred_labels if l == label) - hits
        fn += sum(1 for l in m.gt_labels if l == label) - hits
    return tp, fp, fn


def _per_class(matches: Sequence[ImageMatch], cfg: MetricConfig) -> dict[str, dict[str, float]]:
    labels = sorted({l for m in matches for l in (*m.pred_labels, *m.gt_labels)})
    t = np.asarray(cfg.thresholds)
    out: dict[str, dict[str, float]] = {}
    for label in labels:
        counts = np.zeros((len(t), 3), dtype=np.int64)
        for m in matches:
            ious = np.array([p.iou for p in m.pairs if m.gt_labels[p.gt] == label])
            n_pred = sum(1 for l in m.pred_labels if l == label)
            n_gt = sum(1 for l in m.gt_labels if l == label)
            tp = (ious[None, :] >= t[:, None]).sum(axis=1) if ious.size else np.zeros(len(t), int)
            counts[:, 0] += tp
            counts[:, 1] += n_pred - tp
            counts[:, 2] += n_gt - tp
        tp_a, fp_a, fn_a = (int(x) for x in count_matches_for_label(matches, label, cfg.tp_iou_anchor))
        out[label] = {
            "tp": tp_a, "fp": fp_a, "fn": fn_a,
            "mf1": _mean([f1(*map(int, row)) for row in counts]),
        }
    return out


def report_from_matches(
    matches: Sequence[ImageMatch],
    cfg: MetricConfig = MetricConfig(),
    *,
    dataset: str = "",
    method: str = "",
    k: int = 0,
    n_failed: int = 0,
    variant: str = "excluded",
) -> MetricReport:
    counts = count_matches(matches, cfg.thresholds)
    rows = _rows_from_counts(cfg.thresholds, counts)
    anchor = _anchor_ious(matches, cfg.tp_iou_anchor)
    empty = not any(m.n_pred or m.n_gt for m in matches)
    return MetricReport(
        dataset=dataset,
        method=method,
        k=k,
        rows=rows,
        mf1=0.0 if empty else _mean([r.f1 for r in rows]),
        mean_iou_tp=_mean(anchor),
        tp_iou_anchor=cfg.tp_iou_anchor,
        tp_iou_sum=math.fsum(anchor),
        tp_iou_count=len(anchor),
        n_images=len(matches),
        n_failed=n_failed,
        empty=empty,
        variant=variant,
        per_class=_per_class(matches, cfg),
        datasets=[dataset] if dataset else [],
    )


def _match_all(
    preds_by_image: Mapping[str, Sequence[Labeled]],
    gts_by_image: Mapping[str, Sequence[Labeled]],
) -> list[ImageMatch]:
    if set(preds_by_image) - set(gts_by_image):
        extra = sorted(set(preds_by_image) - set(gts_by_image))
        raise KeyError(f"predictions for images without ground truth: {extra[:5]}")
    return [match_image(preds_by_image.get(i, ()), gts_by_image[i]) for i in sorted(gts_by_image)]


def evaluate_group(
    preds_by_image: Mapping[str, Sequence[Labeled]],
    gts_by_image: Mapping[str, Sequence[Labeled]],
    cfg: MetricConfig = MetricConfig(),
    **meta,
) -> MetricReport:
    """Match every image and pool the counts into one report.

    Images present in ``gts_by_image`` but absent from ``preds_by_image``
    count as having no predictions.
    """
    return report_from_matches(_match_all(preds_by_image, gts_by_image), cfg, **meta)


def mf1(preds_by_image, gts_by_image, cfg: MetricConfig = MetricConfig()) -> float:
    return evaluate_group(preds_by_image, gts_by_image, cfg).mf1


def mean_iou_tp(preds_by_image, gts_by_image, anchor: float = TP_IOU_ANCHOR) -> float:
    matches = _match_all(preds_by_image, gts_by_image)
    return _mean(_anchor_ious(matches, anchor))


class AggregationError(ValueError):
    pass


def _merge_micro(reports: Sequence[MetricReport], dataset: str) -> MetricReport:
    """Pool raw counts of reports that share a threshold list."""
    base = reports[0]
    thresholds = base.thresholds
    for r in reports[1:]:
        if r.thresholds != thresholds or r.tp_iou_anchor != base.tp_iou_anchor:
            raise AggregationError("cannot pool reports computed with different thresholds")
    counts = np.zeros((len(thresholds), 3), dtype=np.int64)
    for r in reports:
        counts += np.array([[row.tp, row.fp, row.fn] for row in r.rows], dtype=np.int64)
    rows = _rows_from_counts(thresholds, counts)
    empty = all(r.empty for r in reports)
    tp_sum = math.fsum(r.tp_iou_sum for r in reports)
    tp_n = sum(r.tp_iou_count for r in reports)
    per_class: dict[str, dict[str, float]] = {}
    for label in sorted({l for r in reports for l in r.per_class}):
        parts = [r.per_class[label] for r in reports if label in r.per_class]
        tp, fp, fn = (sum(int(p[c]) for p in parts) for c in ("tp", "fp", "fn"))
        # per-class mF1 cannot be re-pooled from anchor counts; average instead
        per_class[label] = {"tp": tp, "fp": fp, "fn": fn, "mf1": _mean([p["mf1"] for p in parts])}
    return MetricReport(
        dataset=dataset,
        method=base.method,
        k=base.k,
        rows=rows,
        mf1=0.0 if empty else _mean([r.f1 for r in rows]),
        mean_iou_tp=tp_sum / tp_n if tp_n else 0.0,
        tp_iou_anchor=base.tp_iou_anchor,
        tp_iou_sum=tp_sum,
        tp_iou_count=tp_n,
        n_images=sum(r.n_images for r in reports),
        n_failed=sum(r.n_failed for r in reports),
        empty=empty,
        variant=base.variant,
        scheme="micro",
        per_class=per_class,
        datasets=sorted({d for r in reports for d in (r.datasets or [r.dataset])}),
    )


def _merge_macro(reports: Sequence[MetricReport], dataset: str) -> MetricReport:
    base = reports[0]
    thresholds = base.thresholds
    for r in reports[1:]:
        if r.thresholds != thresholds:
            raise AggregationError("cannot average reports computed with different thresholds")
    rows = []
    for i, t in enumerate(thresholds):
        parts = [r.rows[i] for r in reports]
        rows.append(
            ThresholdRow(
                threshold=t,
                tp=sum(p.tp for p in parts),
                fp=sum(p.fp for p in parts),
                fn=sum(p.fn for p in parts),
                precision=_mean([p.precision for p in parts]),
                recall=_mean([p.recall for p in parts]),
                f1=_mean([p.f1 for p in parts]),
            )
        )
    return MetricReport(
        dataset=dataset,
        method=base.method,
        k=base.k,
        rows=rows,
        mf1=_mean([r.mf1 for r in reports]),
        mean_iou_tp=_mean([r.mean_iou_tp for r in reports]),
        tp_iou_anchor=base.tp_iou_anchor,
        tp_iou_sum=math.fsum(r.tp_iou_sum for r in reports),
        tp_iou_count=sum(r.tp_iou_count for r in reports),
        n_images=sum(r.n_images for r in reports),
        n_failed=sum(r.n_failed for r in reports),
        empty=all(r.empty for r in reports),
        variant=base.variant,
        scheme="macro",
        per_class={},
        datasets=[r.dataset for r in reports],
    )


def aggregate(
    reports: Sequence[MetricReport], scheme: str = "macro", dataset: Optional[str] = None
) -> MetricReport:
    """Combine reports of one (method, K).

    Reports for the same dataset are always micro-pooled first. With
    ``scheme="macro"`` the cross-dataset result is the unweighted mean of the
    per-dataset values; ``scheme="micro"`` pools every count instead.
    """
    if not reports:
        raise AggregationError("nothing to aggregate")
    keys = {(r.method, r.k) for r in reports}
    if len(keys) > 1:
        raise AggregationError(f"reports mix method/K keys: {sorted(keys)}")
    if scheme not in ("macro", "micro"):
        raise ValueError(f"unknown aggregation scheme {scheme!r}")
    if len(reports) == 1:
        return reports[0]

    by_ds: dict[str, list[MetricReport]] = {}
    for r in reports:
        by_ds.setdefault(r.dataset, []).append(r)
    per_ds = [
        grp[0] if len(grp) == 1 else _merge_micro(grp, name)
        for name, grp in sorted(by_ds.items())
    ]
    if len(per_ds) == 1:
        return per_ds[0]
    name = dataset if dataset is not None else "overall"
    if scheme == "micro":
        return _merge_micro(per_ds, name)
    return _merge_macro(per_ds, name)
