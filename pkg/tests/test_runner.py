import json
import threading

import pytest

from fsodbench import runner as runner_mod
from fsodbench.backends import BackendExhausted, OracleConfig, OracleDetector
from fsodbench.dataset import SupportCrop, SupportLeakError, SupportSet
from fsodbench.fakeserver import FakeBackendServer
from fsodbench.geometry import BBox
from fsodbench.metrics import MetricReport, ThresholdRow, threshold_list
from fsodbench.runner import (
    MISSING, ConfigError, ConfigMismatchError, ExperimentConfig, RecordMismatchError, evaluate,
    evaluate_run, format_csv, format_table, load_run, render_prompt, report, resolve_dataset, round2,
    run,
)

SYNTH = {"synthetic": [{"classes": {"A": 150, "B": 100}, "n_images": 30, "seed": 3, "source": "S1", "prefix": "s1_"},
                       {"classes": {"A": 90, "C": 80}, "n_images": 30, "seed": 4, "source": "S2", "prefix": "s2_"}]}
SPLIT = {"solve": {"trials": 3, "n_exp": 5, "n_test": 20}}


def make(mode="zero_shot_t", k=0, **kw):
    d = {"mode": mode, "k": k, "dataset": SYNTH, "split": SPLIT}
    if mode == "few_shot_mmc":
        d.setdefault("segmenter", {"kind": "oracle"})
        d.setdefault("classifier", {"kind": "oracle"})
    else:
        d["detector"] = {"kind": "oracle"}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("patch", [
    {"mode": "zero_shot_t", "k": 3},
    {"mode": "few_shot_v", "k": 0},
    {"mode": "few_shot_mmd", "k": 2},
    {"mode": "few_shot_v", "k": 1, "prompt": "detect_text"},
    {"mode": "bogus"},
    {"invalid_policy": "ignore"},
    {"surprise": 1},
    {"split": {}},
    {"dataset": {"index": "a", "synthetic": {}}},
    {"detector": {"kind": "magic"}},
    {"workers": 0},
])
def test_config_rejections(patch):
    d = {"mode": "zero_shot_t", "k": 0, "dataset": SYNTH, "split": SPLIT, "detector": {"kind": "oracle"}}
    d.update(patch)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_cascade_bindings():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"mode": "few_shot_mmc", "k": 1, "dataset": SYNTH, "split": SPLIT,
                                    "segmenter": {"kind": "oracle"}})
    with pytest.raises(ConfigError):
        make("few_shot_mmc", 1, detector={"kind": "oracle"})
    assert make("few_shot_mmc", 1).prompt_id == "classify_crop"


def test_config_file_paths(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"mode": "zero_shot_t", "k": 0, "dataset": {"index": "data/i.json"},
                             "split": {"path": "s.jsonl"}, "detector": {"kind": "oracle"}}))
    cfg = ExperimentConfig.load(p)
    assert cfg.resolve("data/i.json") == tmp_path.resolve() / "data/i.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_render_prompt(tmp_path):
    text = render_prompt("detect_multimodal", ["A", "B"], 3)
    assert "A, B" in text and "3 labeled" in text and "{" not in text
    (tmp_path / "mine.txt").write_text("classes={vocab} k={K}")
    assert render_prompt("mine.txt", ["x"], 6, tmp_path) == "classes=x k=6"
    assert render_prompt(None, ["x"], 1) is None
    with pytest.raises(ConfigError):
        render_prompt("missing-template", ["x"], 1, tmp_path)


# ---------------------------------------------------------------- runs


def test_cascade_identity(tmp_path):
    rec = run(make("few_shot_mmc", 3), tmp_path / "r.jsonl")
    ev = evaluate_run(tmp_path / "r.jsonl")
    assert rec.counts()["ok"] == 40
    assert ev.headline.mf1 == 1.0 and ev.headline.mean_iou_tp == 1.0
    assert set(ev.per_dataset["excluded"]) == {"S1", "S2"}


def test_ground_truth_and_empty_records(tmp_path):
    rec = run(make(), tmp_path / "r.jsonl")
    ix = resolve_dataset(rec.config)
    assert evaluate(rec, ix).headline.mf1 == 1.0
    for e in rec.entries.values():
        e.predictions = []
    ev = evaluate(rec, ix)
    assert ev.headline.mf1 == 0.0 and ev.headline.mean_iou_tp == 0.0


def test_evaluation_rebuilds_the_same_synthetic_corpus(tmp_path):
    # the header stores the config with sorted keys; class order must not matter
    d = make().to_dict()
    d["dataset"] = {"synthetic": {"classes": {"rbc": 90, "wbc": 40, "platelet": 60}, "n_images": 20, "seed": 9}}
    d["split"] = {"solve": {"trials": 3, "n_exp": 4, "n_test": 16}}
    run(ExperimentConfig.from_dict(d), tmp_path / "r.jsonl")
    assert evaluate_run(tmp_path / "r.jsonl").headline.mf1 == 1.0


def test_determinism(tmp_path):
    cfg = make("few_shot_mmd", 3, detector={"kind": "oracle", "jitter": 2.0, "drop": 0.2, "flip": 0.1, "seed": 1})
    a = run(cfg, tmp_path / "a.jsonl")
    b = run(cfg, tmp_path / "b.jsonl")
    assert a.canonical_bytes() == b.canonical_bytes()
    assert evaluate_run(tmp_path / "a.jsonl").headline.to_json() == evaluate_run(tmp_path / "b.jsonl").headline.to_json()


class Interrupting:
    """Wraps a detector and simulates a kill after ``limit`` calls."""

    max_parallel = 1

    def __init__(self, inner, limit):
        self.inner, self.limit, self.calls = inner, limit, 0
        self.lock = threading.Lock()

    def detect(self, *args, **kw):
        with self.lock:
            self.calls += 1
            if self.calls > self.limit:
                raise KeyboardInterrupt
        return self.inner.detect(*args, **kw)


def test_resume_after_interrupt(tmp_path):
    cfg = make(detector={"kind": "oracle", "jitter": 3.0, "drop": 0.2, "seed": 7})
    full = run(cfg, tmp_path / "full.jsonl")
    ix = resolve_dataset(cfg)
    det = Interrupting(OracleDetector(ix, OracleConfig(jitter=3.0, drop=0.2, seed=7)), limit=13)
    with pytest.raises(KeyboardInterrupt):
        run(cfg, tmp_path / "part.jsonl", backends={"detector": det})
    partial = load_run(tmp_path / "part.jsonl")
    assert partial.counts()["ok"] == 13 and partial.counts()["missing"] == 27
    # simulate a torn final write as well
    with open(tmp_path / "part.jsonl", "a") as fh:
        fh.write('{"kind": "entry", "image_id": "s2_0')
    spy = Interrupting(OracleDetector(ix, OracleConfig(jitter=3.0, drop=0.2, seed=7)), limit=10**6)
    resumed = run(cfg, tmp_path / "part.jsonl", backends={"detector": spy})
    assert spy.calls == 27
    assert resumed.canonical_bytes() == full.canonical_bytes()


def test_resume_rejects_other_config(tmp_path):
    run(make(), tmp_path / "r.jsonl")
    with pytest.raises(ConfigMismatchError):
        run(make(detector={"kind": "oracle", "drop": 0.5}), tmp_path / "r.jsonl")


class Spy:
    max_parallel = 2

    def __init__(self):
        self.calls = []

    def __getattr__(self, name):
        def record(*args, **kw):
            self.calls.append(name)
            raise AssertionError(f"{name} must not be called")
        return record


def test_cascade_never_detects(tmp_path):
    cfg = make("few_shot_mmc", 1)
    ix = resolve_dataset(cfg)
    from fsodbench.backends import OracleClassifier, OracleSegmenter
    spy = Spy()
    backends = {"segmenter": OracleSegmenter(ix), "classifier": OracleClassifier(ix), "detector": spy}
    run(cfg, tmp_path / "r.jsonl", backends=backends)
    assert spy.calls == []


def _remote(srv, mode, k, tmp_path, **kw):
    d = {"mode": mode, "k": k, "dataset": {**SYNTH, "image_dir": str(tmp_path / "img")}, "split": SPLIT,
         "detector": {"kind": "remote", "endpoint": srv.url, "max_parallel": 4, "backoff_base": 0.001}}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("mode, k, keys", [
    ("zero_shot_t", 0, ["image", "prompt", "vocab"]),
    ("few_shot_v", 3, ["image", "support", "vocab"]),
    ("few_shot_mmd", 1, ["image", "prompt", "support", "vocab"]),
])
def test_mode_payloads(tmp_path, mode, k, keys):
    with FakeBackendServer() as srv:
        rec = run(_remote(srv, mode, k, tmp_path), tmp_path / "r.jsonl")
        assert rec.counts()["ok"] == 40
        assert all(sorted(r) == keys for r in srv.requests)
        if k:
            labels = sorted(s["label"] for s in srv.requests[0]["support"])
            vocab = srv.requests[0]["vocab"]
            assert labels == sorted(v for v in vocab for _ in range(k))
        assert srv.max_in_flight <= 4


def test_failures_are_per_image(tmp_path, caplog):
    calls = {"n": 0}
    lock = threading.Lock()

    def responder(req):
        with lock:
            calls["n"] += 1
            n = calls["n"]
        if n % 5 == 0:
            return 200, "garbage"
        return 200, {"detections": []}

    with FakeBackendServer(responder=responder) as srv:
        cfg = _remote(srv, "zero_shot_t", 0, tmp_path, workers=1)
        rec = run(cfg, tmp_path / "r.jsonl")
    c = rec.counts()
    assert c["failed"] == 8 and c["ok"] == 32
    bad = [e for e in rec.entries.values() if e.status == "failed"]
    assert all(e.raw == "garbage" and e.error_kind == "malformed" for e in bad)
    ev = evaluate_run(tmp_path / "r.jsonl")
    assert sum(r.n_failed for r in ev.per_dataset["excluded"].values()) == 8
    assert sum(r.n_images for r in ev.per_dataset["excluded"].values()) == 32
    assert sum(r.n_images for r in ev.per_dataset["empty"].values()) == 40


def test_exhaustion_recorded(tmp_path):
    with FakeBackendServer(responder=lambda req: (429, {})) as srv:
        d = _remote(srv, "zero_shot_t", 0, tmp_path).to_dict()
        d["detector"]["max_retries"] = 0
        rec = run(ExperimentConfig.from_dict(d), tmp_path / "r.jsonl")
    assert len(rec.exhausted()) == 40


def test_invalid_label_policy(tmp_path):
    cfg = make()
    rec = run(cfg, tmp_path / "r.jsonl")
    ix = resolve_dataset(cfg)
    some = sorted(rec.entries)[0]
    entry = rec.entries[some]
    from fsodbench.backends import Detection
    entry.predictions = entry.predictions + [Detection(BBox(0, 0, 5, 5), "rbc?", None, in_vocab=False)]
    fp = evaluate(rec, ix, invalid_policy="fp").per_dataset["excluded"]
    drop = evaluate(rec, ix, invalid_policy="drop").per_dataset["excluded"]
    src = entry.source
    assert fp[src].rows[0].fp == 1 and drop[src].rows[0].fp == 0


def test_record_index_mismatch(tmp_path):
    rec = run(make(), tmp_path / "r.jsonl")
    ix = resolve_dataset(rec.config)
    del ix.images[sorted(rec.entries)[0]]
    with pytest.raises(RecordMismatchError):
        evaluate(rec, ix)
    rec2 = load_run(tmp_path / "r.jsonl")
    rec2.entries["not-a-test-image"] = rec2.entries[sorted(rec2.entries)[0]]
    with pytest.raises(RecordMismatchError):
        evaluate(rec2, resolve_dataset(rec2.config))


def test_support_leak_guard_at_run_time(tmp_path, monkeypatch):
    cfg = make("few_shot_v", 1)
    rec = run(cfg, tmp_path / "ok.jsonl")
    test_img = rec.test_ids()[0]

    def leaky(index, example, k, seed=0, margin=0.1):
        crop = SupportCrop(test_img, BBox(0, 0, 4, 4), BBox(0, 0, 4, 4), "A")
        return SupportSet(k, {"A": [crop]})

    monkeypatch.setattr(runner_mod, "build_support", leaky)
    with pytest.raises(SupportLeakError):
        run(cfg, tmp_path / "leak.jsonl")


def test_export_crops(tmp_path):
    cfg = make("few_shot_v", 3)
    manifest = runner_mod.export_crops(cfg, tmp_path / "crops", image_dir=tmp_path / "img")
    assert len(manifest) == 3 * 4  # two sources with two classes each
    assert all((tmp_path / "crops" / m["file"]).read_bytes().startswith(b"\x89PNG") for m in manifest)


# ---------------------------------------------------------------- reports


def _rep(dataset, method, k, v):
    rows = [ThresholdRow(t, 1, 1, 1, 0.5, 0.5, v) for t in threshold_list()]
    return MetricReport(dataset, method, k, rows, v, v / 2, datasets=[dataset])


def test_round_half_even():
    assert round2(0.125) == "0.12"
    assert round2(0.135) == "0.14"
    assert round2(0.7387) == "0.74"
    assert round2(1.0) == "1.00"
    assert round2(0.0) == "0.00"


def test_report_grid():
    reps = [_rep("D", "m", k, 0.5) for k in (1, 3, 6)]
    sheets = report(reps)
    assert [s.name for s in sheets] == ["D", "overall"]
    assert sheets[0].header() == ["Method", "K=1 mF1", "K=1 Mean IoU", "K=3 mF1", "K=3 Mean IoU",
                                  "K=6 mF1", "K=6 Mean IoU"]
    assert sheets[0].cells() == [["m", "0.50", "0.25", "0.50", "0.25", "0.50", "0.25"]]


def test_report_missing_cells_and_macro():
    reps = [_rep("D1", "m", 1, 0.2), _rep("D2", "m", 1, 0.4), _rep("D1", "n", 3, 0.9)]
    sheets = report(reps)
    overall = sheets[-1]
    assert overall.cells() == [["m", "0.30", "0.15", MISSING, MISSING], ["n", MISSING, MISSING, "0.90", "0.45"]]
    text = format_table(sheets)
    assert text == format_table(report(list(reversed(reps))))
    assert "== dataset D1 ==" in text and MISSING in text
    csv_text = format_csv(sheets)
    assert csv_text.splitlines()[0] == "sheet,Method,K=1 mF1,K=1 Mean IoU,K=3 mF1,K=3 Mean IoU"
    assert "overall,m,0.30,0.15,—,—" in csv_text


def test_report_rejects_duplicates():
    with pytest.raises(ValueError):
        report([_rep("D", "m", 1, 0.1), _rep("D", "m", 1, 0.2)])
