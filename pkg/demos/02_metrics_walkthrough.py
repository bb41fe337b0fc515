"""How one image is scored: matching, the threshold sweep and Mean IoU.

Three ground-truth cells and three predictions, one of them mislabeled and
one poorly localized. The script prints the matched pairs, then the
precision/recall/F1 rows at a few thresholds and the two headline numbers.

    python demos/02_metrics_walkthrough.py
"""

from fsodbench.backends import Detection
from fsodbench.dataset import Annotation
from fsodbench.geometry import BBox
from fsodbench.matching import match_image
from fsodbench.metrics import evaluate_group

gts = [
    Annotation(BBox(10, 10, 50, 50), "rbc", "img"),
    Annotation(BBox(60, 10, 100, 50), "rbc", "img"),
    Annotation(BBox(10, 60, 50, 100), "wbc", "img"),
]
preds = [
    Detection(BBox(12, 11, 51, 49), "rbc"),   # tight
    Detection(BBox(70, 20, 110, 60), "rbc"),  # shifted by 10 px
    Detection(BBox(10, 60, 50, 100), "rbc"),  # right place, wrong class
]


def main() -> None:
    # Matching runs per class, so the mislabeled box can never pair with the wbc cell.
    m = match_image(preds, gts)
    for p in m.pairs:
        print(f"pred {p.pred} <-> gt {p.gt}  {gts[p.gt].class_label}  IoU {p.iou:.3f}")

    rep = evaluate_group({"img": preds}, {"img": gts}, method="demo")
    print(f"\n{'IoU':>6} {'TP':>3} {'FP':>3} {'FN':>3} {'F1':>6}")
    for row in rep.rows[::7]:
        print(f"{row.threshold:6.3f} {row.tp:3d} {row.fp:3d} {row.fn:3d} {row.f1:6.3f}")

    # The shifted box counts as a TP only below its IoU, which pulls mF1 down.
    print(f"\nmF1 over {len(rep.rows)} thresholds: {rep.mf1:.4f}")
    print(f"Mean IoU of pairs with IoU >= 0.5: {rep.mean_iou_tp:.4f}")


if __name__ == "__main__":
    main()
