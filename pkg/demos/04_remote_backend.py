"""Drive a run through the HTTP wire protocol against a local fake service.

The fake service answers detection requests by echoing slightly shrunken
ground-truth boxes, and rejects the first few requests with HTTP 429 so the
client's backoff shows up in the log. One image gets a malformed reply and is
recorded as failed without stopping the run. Swap the endpoint for a real
adapter service to benchmark an actual model.

    python demos/04_remote_backend.py [out_dir]
"""

import base64
import logging
import sys
import tempfile
from pathlib import Path

from fsodbench.fakeserver import FakeBackendServer
from fsodbench.runner import ExperimentConfig, evaluate_run, resolve_dataset, resolve_splits, run

SYNTH = {"classes": {"rbc": 160, "wbc": 40, "platelet": 60}, "n_images": 24, "seed": 9}


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="fsod_remote_"))
    base = {
        "mode": "few_shot_mmd", "k": 3, "method": "fake-vlm",
        "dataset": {"synthetic": SYNTH, "image_dir": str(out / "images")},
        "split": {"solve": {"trials": 20, "n_exp": 4, "n_test": 16}},
    }

    # The fake model needs to know which image it was sent; it recognises the
    # base64 PNG by content.
    probe = ExperimentConfig.from_dict({**base, "detector": {"kind": "oracle"}})
    index = resolve_dataset(probe, out / "images")
    by_png = {base64.b64encode(Path(r.path).read_bytes()).decode(): i for i, r in index.images.items()}
    truth = index.by_image()
    broken = resolve_splits(probe, index)["synthetic"].test_ids[0]

    def respond(req):
        iid = by_png[req["image"]]
        if iid == broken:
            return 200, "I think there are about twelve cells."
        dets = [{"bbox": [a.bbox.x_min + 1, a.bbox.y_min + 1, a.bbox.x_max - 1, a.bbox.y_max - 1],
                 "label": a.class_label.upper(), "score": 0.8} for a in truth[iid]]
        return 200, {"detections": dets}

    with FakeBackendServer(script=[(429, {})] * 3, responder=respond, delay=0.02) as srv:
        cfg = ExperimentConfig.from_dict({**base, "detector": {
            "kind": "remote", "endpoint": srv.url, "max_parallel": 4, "max_retries": 3, "backoff_base": 0.05}})
        rec = run(cfg, out / "fake_vlm.run.jsonl")
        req = srv.requests[-1]
        print(f"request fields: {sorted(req)}; {len(req['support'])} support crops; "
              f"peak concurrency {srv.max_in_flight}")

    print("run:", rec.counts())
    for e in rec.entries.values():
        if e.status == "failed":
            print(f"  {e.image_id}: {e.error_kind} ({e.error}); raw reply kept: {e.raw!r}")

    # Labels come back upper-cased; they are normalised onto the vocabulary.
    ev = evaluate_run(out / "fake_vlm.run.jsonl")
    for variant in ("excluded", "empty"):
        h = ev.overall[variant]["macro"]
        print(f"failed images {variant:8s}: mF1 {h.mf1:.4f}  Mean IoU {h.mean_iou_tp:.4f}")
    print(f"run file: {out / 'fake_vlm.run.jsonl'}")


if __name__ == "__main__":
    main()
