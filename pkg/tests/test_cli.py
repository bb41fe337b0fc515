import json
import subprocess
import sys

import pytest

from fsodbench.cli import EXIT_BACKEND, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from fsodbench.dataset import SynthSpec, save_index, synth_fixture
from fsodbench.fakeserver import FakeBackendServer
from fsodbench.metrics import MetricReport
from fsodbench.split_optimizer import read_split


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    a = synth_fixture(SynthSpec({"A": 150, "B": 100}, 30, seed=3, source="S1", prefix="s1_"), d)
    b = synth_fixture(SynthSpec({"A": 90, "C": 80}, 30, seed=4, source="S2", prefix="s2_"), d)
    from fsodbench.dataset import DatasetIndex
    ix = DatasetIndex({**a.images, **b.images}, a.annotations + b.annotations)
    save_index(ix, d / "index.json")
    return d


def _split_args(corpus, out, *extra):
    return ["split", "--index", str(corpus / "index.json"), "--out", str(out), "--trials", "3",
            "--n-exp", "5", "--n-test", "20", *extra]


def test_split_single_and_many(corpus, tmp_path, capsys):
    assert main(_split_args(corpus, tmp_path / "one.jsonl", "--source", "S1")) == EXIT_OK
    a = read_split(tmp_path / "one.jsonl")
    roles = list(a.partition.values())
    assert roles.count("example") == 5 and roles.count("test") == 20
    assert main(_split_args(corpus, tmp_path / "many")) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "many").iterdir()) == ["split_S1.jsonl", "split_S2.jsonl"]
    assert "mean SSS over 2 sources" in capsys.readouterr().out


def test_split_infeasible_is_validation_error(corpus, tmp_path):
    assert main(_split_args(corpus, tmp_path / "x.jsonl", "--source", "S1", "--m-test", "10000")) == EXIT_VALIDATION


def _config(corpus, tmp_path, **kw):
    main(_split_args(corpus, tmp_path / "splits"))
    cfg = {"mode": "few_shot_mmd", "k": 1, "dataset": {"index": str(corpus / "index.json")},
           "split": {"path": [str(tmp_path / "splits" / "split_S1.jsonl"), str(tmp_path / "splits" / "split_S2.jsonl")]},
           "detector": {"kind": "oracle", "jitter": 2.0, "drop": 0.1, "seed": 1}}
    cfg.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_run_evaluate_report(corpus, tmp_path, capsys):
    cfg = _config(corpus, tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a.run.jsonl")]) == EXIT_OK
    assert "ok 40" in capsys.readouterr().out
    assert main(["evaluate", "--run", str(tmp_path / "a.run.jsonl"), "--out", str(tmp_path / "ev.json")]) == EXIT_OK
    ev = json.loads((tmp_path / "ev.json").read_text())
    head = MetricReport.from_dict(ev["overall"]["excluded"]["macro"])
    assert 0.5 < head.mf1 < 1.0
    capsys.readouterr()
    assert main(["report", "--runs", str(tmp_path / "*.run.jsonl")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "K=1 mF1" in text and "overall" in text
    assert main(["report", "--runs", str(tmp_path / "*.run.jsonl"), "--csv", "--out", str(tmp_path / "r.csv")]) == EXIT_OK
    assert (tmp_path / "r.csv").read_text().startswith("sheet,Method,K=1 mF1,K=1 Mean IoU")


def test_run_default_out_path(corpus, tmp_path):
    cfg = _config(corpus, tmp_path)
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    assert (tmp_path / "cfg.run.jsonl").exists()


def test_crops(corpus, tmp_path):
    cfg = _config(corpus, tmp_path, k=3)
    assert main(["crops", "--config", str(cfg), "--out", str(tmp_path / "crops")]) == EXIT_OK
    manifest = json.loads((tmp_path / "crops" / "manifest.json").read_text())
    assert len(manifest) == 12


def test_bad_config_exit_1(corpus, tmp_path):
    cfg = _config(corpus, tmp_path, mode="zero_shot_t", k=3)
    assert main(["run", "--config", str(cfg)]) == EXIT_VALIDATION


def test_missing_file_exit_3(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_IO
    assert main(["evaluate", "--run", str(tmp_path / "nope.jsonl")]) == EXIT_IO


def test_exhaustion_exit_2(corpus, tmp_path):
    with FakeBackendServer(responder=lambda req: (429, {})) as srv:
        cfg = _config(corpus, tmp_path, mode="zero_shot_t", k=0,
                      dataset={"index": str(corpus / "index.json"), "image_dir": str(tmp_path / "img")},
                      detector={"kind": "remote", "endpoint": srv.url, "max_retries": 0})
        assert main(["run", "--config", str(cfg)]) == EXIT_BACKEND


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "fsodbench.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("split", "crops", "run", "evaluate", "report"):
        assert cmd in out.stdout
