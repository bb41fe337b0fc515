"""Experiment execution, run persistence, evaluation and report tables.

A run is driven by one JSON config::

    {
      "mode": "few_shot_mmd",             # zero_shot_t | few_shot_v | few_shot_mmd | few_shot_mmc
      "k": 3,                              # 0 for zero_shot_t, 1/3/6 otherwise
      "method": "my-model",                # row label in report tables (defaults to mode)
      "seed": 0,                           # support sampling seed
      "dataset": {"index": "data/index.json"},           # or {"synthetic": [{SynthSpec fields}, ...]}
      "split": {"path": ["split_A.jsonl", ...]},          # or {"solve": {"trials": 1000, "base_seed": 0, ...}}
      "detector": {"kind": "remote", "endpoint": "...", "token_env": "MY_TOKEN"},
      "segmenter": ..., "classifier": ...,                # cascade mode only
      "prompt": "detect_text",             # template id or path; defaults per mode
      "crop_margin": 0.1,
      "invalid_policy": "fp",              # out-of-vocabulary labels: "fp" (kept, never match) or "drop"
      "workers": 4                         # defaults to the bound backends' max_parallel
    }

Relative paths resolve against the config file's directory. Runs are
append-only JSON lines: a header carrying the config hash, then one entry per
processed test image. Re-running with the same config skips images already
recorded as ok.
"""

from __future__ import annotations

import csv
import glob as globmod
import hashlib
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from .backends import (
    BackendConfig, BackendError, BackendExhausted, Crop, Detection, MalformedResponse,
    OracleClassifier, OracleConfig, OracleDetector, OracleSegmenter, RemoteClassifier,
    RemoteDetector, RemoteSegmenter, SupportItem,
)
from .dataset import (
    SUPPORT_SHOTS, DatasetIndex, SupportSet, SynthSpec, assert_no_leak, build_support,
    extract_crop, load_index, read_image, support_payload, synth_fixture,
)
from .geometry import DEFAULT_CROP_MARGIN
from .metrics import MetricConfig, MetricReport, aggregate, evaluate_group
from .split_optimizer import SeedSearchConfig, SplitAssignment, SplitConstraints, read_split, solve

log = logging.getLogger(__name__)

MODES = ("zero_shot_t", "few_shot_v", "few_shot_mmd", "few_shot_mmc")
DEFAULT_PROMPTS = {
    "zero_shot_t": "detect_text",
    "few_shot_v": None,
    "few_shot_mmd": "detect_multimodal",
    "few_shot_mmc": "classify_crop",
}
ROLES = ("detector", "segmenter", "classifier")
INVALID_POLICIES = ("fp", "drop")
STATUSES = ("ok", "failed", "skipped")
VARIANTS = ("excluded", "empty")
MISSING = "—"
RUN_FORMAT = 1


class ConfigError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    """An existing run file was produced by a different configuration."""


class RecordMismatchError(ValueError):
    """A run record does not fit the index or split it is evaluated against."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    k: int
    dataset: Mapping[str, Any]
    split: Mapping[str, Any]
    detector: Optional[Mapping[str, Any]] = None
    segmenter: Optional[Mapping[str, Any]] = None
    classifier: Optional[Mapping[str, Any]] = None
    prompt: Optional[str] = None
    method: str = ""
    seed: int = 0
    crop_margin: float = DEFAULT_CROP_MARGIN
    invalid_policy: str = "fp"
    workers: Optional[int] = None
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.k, int) or isinstance(self.k, bool):
            raise ConfigError(f"k must be an integer, got {self.k!r}")
        if self.mode == "zero_shot_t":
            if self.k != 0:
                raise ConfigError(f"zero_shot_t takes no support examples; k must be 0, got {self.k}")
        elif self.k not in SUPPORT_SHOTS:
            raise ConfigError(f"{self.mode} needs k in {SUPPORT_SHOTS}, got {self.k}")
        needed = ("segmenter", "classifier") if self.mode == "few_shot_mmc" else ("detector",)
        for role in ROLES:
            bound = getattr(self, role) is not None
            if role in needed and not bound:
                raise ConfigError(f"{self.mode} requires a {role} backend")
            if role not in needed and bound:
                raise ConfigError(f"{self.mode} does not use a {role} backend")
            if bound:
                kind = getattr(self, role).get("kind")
                if kind not in ("oracle", "remote"):
                    raise ConfigError(f"{role}.kind must be 'oracle' or 'remote', got {kind!r}")
        if self.mode == "few_shot_v" and self.prompt is not None:
            raise ConfigError("few_shot_v sends no text prompt")
        if self.invalid_policy not in INVALID_POLICIES:
            raise ConfigError(f"invalid_policy must be one of {INVALID_POLICIES}")
        if self.crop_margin < 0:
            raise ConfigError("crop_margin must be >= 0")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if sum(k in self.dataset for k in ("index", "synthetic")) != 1:
            raise ConfigError("dataset needs exactly one of 'index' or 'synthetic'")
        if sum(k in self.split for k in ("path", "solve")) != 1:
            raise ConfigError("split needs exactly one of 'path' or 'solve'")

    @property
    def method_name(self) -> str:
        return self.method or self.mode

    @property
    def prompt_id(self) -> Optional[str]:
        return self.prompt if self.prompt is not None else DEFAULT_PROMPTS[self.mode]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir=".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}")
        try:
            return cls(**d, base_dir=str(Path(base_dir).resolve()))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data, path.parent)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def uses_remote(self) -> bool:
        return any(getattr(self, r) and getattr(self, r)["kind"] == "remote" for r in ROLES)


def render_prompt(template: Optional[str], vocab: Sequence[str], k: int, base_dir=".") -> Optional[str]:
    """Fill ``{vocab}`` and ``{K}`` in a shipped template (by id) or a template file."""
    if template is None:
        return None
    shipped = resources.files("fsodbench").joinpath("prompts", f"{template}.txt")
    if shipped.is_file():
        text = shipped.read_text()
    else:
        path = Path(template)
        path = path if path.is_absolute() else Path(base_dir) / path
        if not path.is_file():
            raise ConfigError(f"unknown prompt template {template!r}")
        text = path.read_text()
    return text.replace("{vocab}", ", ".join(vocab)).replace("{K}", str(k))


# ---------------------------------------------------------------- resolution


def _merge(indexes: Sequence[DatasetIndex]) -> DatasetIndex:
    images, anns = {}, []
    for ix in indexes:
        clash = set(images) & set(ix.images)
        if clash:
            raise ConfigError(f"duplicate image ids across synthetic sources: {sorted(clash)[:5]}")
        images.update(ix.images)
        anns.extend(ix.annotations)
    return DatasetIndex(images, anns)


def _synth_spec(d: Mapping[str, Any]) -> SynthSpec:
    d = dict(d)
    if "reference" in d:
        return SynthSpec.reference(d.pop("reference"), **d)
    return SynthSpec(**d)


def resolve_dataset(cfg: ExperimentConfig, image_dir=None) -> DatasetIndex:
    """Load the index, or generate the synthetic corpus.

    Synthetic images are only drawn when ``image_dir`` is given (remote
    backends and crop export need pixels; oracles do not).
    """
    ds = cfg.dataset
    if "index" in ds:
        return load_index(cfg.resolve(ds["index"]), ds.get("format"))
    specs = ds["synthetic"]
    specs = [specs] if isinstance(specs, Mapping) else list(specs)
    if image_dir is None and ds.get("image_dir"):
        image_dir = cfg.resolve(ds["image_dir"])
    try:
        return _merge([synth_fixture(_synth_spec(s), image_dir) for s in specs])
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc


def resolve_splits(cfg: ExperimentConfig, index: DatasetIndex) -> dict[str, SplitAssignment]:
    """One split per source dataset, keyed by source tag."""
    sp = cfg.split
    out: dict[str, SplitAssignment] = {}
    if "path" in sp:
        paths = sp["path"]
        for p in [paths] if isinstance(paths, str) else paths:
            a = read_split(cfg.resolve(p))
            unknown = [i for i in a.instance.image_ids if i not in index.images]
            if unknown:
                raise RecordMismatchError(f"split {p} names images missing from the index: {unknown[:5]}")
            if a.instance.source in out:
                raise ConfigError(f"two split files for source {a.instance.source!r}")
            out[a.instance.source] = a
        return out
    opts = dict(sp["solve"])
    search = SeedSearchConfig(**{k: opts.pop(k) for k in ("trials", "base_seed", "two_swap_budget") if k in opts})
    constraints = SplitConstraints(**opts)
    for source in index.sources():
        out[source] = solve(index.to_split_instance(source), constraints, search)
    return out


def partitions_of(splits: Mapping[str, SplitAssignment]) -> dict[str, dict[str, list[str]]]:
    return {s: {"example": sorted(a.example_ids), "test": sorted(a.test_ids)} for s, a in sorted(splits.items())}


def make_backend(role: str, spec: Mapping[str, Any], index: DatasetIndex, **client_kw):
    opts = {k: v for k, v in spec.items() if k != "kind"}
    try:
        if spec["kind"] == "oracle":
            oc = OracleConfig(**opts)
            return {"detector": OracleDetector, "segmenter": OracleSegmenter,
                    "classifier": OracleClassifier}[role](index, oc)
        bc = BackendConfig(**opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{role}: {exc}") from exc
    return {"detector": RemoteDetector, "segmenter": RemoteSegmenter,
            "classifier": RemoteClassifier}[role](bc, **client_kw)


def config_hash(cfg: ExperimentConfig, partitions: Mapping, prompts: Mapping) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "splits": partitions, "prompts": prompts},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- records


@dataclass
class RunEntry:
    image_id: str
    status: str
    predictions: list[Detection] = field(default_factory=list)
    source: str = ""
    latency_ms: float = 0.0
    timestamp: str = ""
    error: str = ""
    error_kind: str = ""
    raw: str = ""

    def to_dict(self, canonical: bool = False) -> dict:
        d = {
            "kind": "entry",
            "image_id": self.image_id,
            "source": self.source,
            "status": self.status,
            "predictions": [p.to_record() for p in self.predictions],
        }
        if self.error:
            d.update(error=self.error, error_kind=self.error_kind, raw=self.raw)
        if not canonical:
            d.update(latency_ms=self.latency_ms, timestamp=self.timestamp)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunEntry":
        if d.get("status") not in STATUSES:
            raise ValueError(f"bad entry status {d.get('status')!r}")
        return cls(
            image_id=d["image_id"], status=d["status"],
            predictions=[Detection.from_record(p) for p in d.get("predictions", [])],
            source=d.get("source", ""), latency_ms=d.get("latency_ms", 0.0),
            timestamp=d.get("timestamp", ""), error=d.get("error", ""),
            error_kind=d.get("error_kind", ""), raw=d.get("raw", ""),
        )


@dataclass
class RunRecord:
    header: dict
    entries: dict[str, RunEntry]

    @property
    def config_hash(self) -> str:
        return self.header["config_hash"]

    @property
    def config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.header["config"], self.header.get("base_dir", "."))

    @property
    def partitions(self) -> dict[str, dict[str, list[str]]]:
        return self.header["splits"]

    def test_ids(self) -> list[str]:
        return sorted(i for p in self.partitions.values() for i in p["test"])

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in STATUSES}
        for e in self.entries.values():
            out[e.status] += 1
        out["missing"] = len(set(self.test_ids()) - set(self.entries))
        return out

    def exhausted(self) -> list[str]:
        return sorted(i for i, e in self.entries.items() if e.error_kind == "exhausted")

    def canonical_bytes(self) -> bytes:
        """Timestamp- and latency-free serialization, entries ordered by image id."""
        head = {k: v for k, v in self.header.items() if k not in ("created", "base_dir")}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(self.entries[i].to_dict(canonical=True), sort_keys=True) for i in sorted(self.entries)]
        return ("\n".join(lines) + "\n").encode()


def _read_lines(path: Path) -> list[dict]:
    text = path.read_text()
    out = []
    for n, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if n == len(text.splitlines()) - 1 and not text.endswith("\n"):
                break  # torn final write from an interrupted run
            raise ValueError(f"{path}: line {n + 1} is not valid JSON")
    return out


def load_run(path) -> RunRecord:
    path = Path(path)
    lines = _read_lines(path)
    if not lines or lines[0].get("kind") != "run_header":
        raise ValueError(f"{path}: missing run header")
    entries: dict[str, RunEntry] = {}
    for d in lines[1:]:
        e = RunEntry.from_dict(d)
        entries[e.image_id] = e  # later entries supersede earlier ones
    return RunRecord(lines[0], entries)


class _Appender:
    """Serialized line writer shared by the worker threads."""

    def __init__(self, path: Path):
        self._fh = path.open("a")
        self._lock = threading.Lock()

    def write(self, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _drop_torn_tail(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        log.warning("%s: discarding incomplete final line", path)
        with path.open("r+b") as fh:
            fh.truncate(cut)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


# ---------------------------------------------------------------- execution


@dataclass
class _Context:
    cfg: ExperimentConfig
    index: DatasetIndex
    source_of: dict[str, str]
    vocab: dict[str, list[str]]
    prompts: dict[str, Optional[str]]
    support: dict[str, list[SupportItem]]
    backends: dict[str, Any]
    crop_pixels: bool


def _support_items(index: DatasetIndex, support: SupportSet, with_pixels: bool) -> list[SupportItem]:
    crops = support.all_crops()
    if not with_pixels:
        return [SupportItem(c.class_label, c.image_id) for c in crops]
    pngs = support_payload(index, support)
    return [SupportItem(label, c.image_id, png) for c, (png, label) in zip(crops, pngs)]


def _predict(ctx: _Context, image_id: str) -> list[Detection]:
    cfg = ctx.cfg
    rec = ctx.index.images[image_id]
    src = ctx.source_of[image_id]
    vocab, prompt = ctx.vocab[src], ctx.prompts[src]
    support = ctx.support.get(src) or None
    if cfg.mode == "zero_shot_t":
        return ctx.backends["detector"].detect(rec, vocab, prompt, None)
    if cfg.mode in ("few_shot_v", "few_shot_mmd"):
        return ctx.backends["detector"].detect(rec, vocab, prompt, support)
    boxes = ctx.backends["segmenter"].segment(rec)
    image = read_image(rec) if ctx.crop_pixels and boxes else None
    out = []
    for box in boxes:
        png = extract_crop(rec, box, cfg.crop_margin, image) if image is not None else None
        c = ctx.backends["classifier"].classify(Crop(image_id, box, png), vocab, support, prompt)
        out.append(Detection(box, c.label, c.score, c.valid))
    return out


def _process(ctx: _Context, image_id: str) -> RunEntry:
    t0 = time.perf_counter()
    entry = RunEntry(image_id, "ok", source=ctx.source_of[image_id])
    try:
        entry.predictions = _predict(ctx, image_id)
    except BackendError as exc:
        entry.status = "failed"
        entry.error = str(exc)
        entry.raw = exc.raw
        entry.error_kind = ("exhausted" if isinstance(exc, BackendExhausted)
                            else "malformed" if isinstance(exc, MalformedResponse) else "backend")
        log.error("image %s failed: %s", image_id, exc)
    except OSError as exc:
        entry.status = "failed"
        entry.error = str(exc)
        entry.error_kind = "io"
        log.error("image %s failed: %s", image_id, exc)
    entry.latency_ms = (time.perf_counter() - t0) * 1000.0
    entry.timestamp = _now()
    return entry


def prepare(cfg: ExperimentConfig, image_dir=None, backends: Optional[Mapping[str, Any]] = None,
            **client_kw) -> tuple[_Context, dict]:
    """Resolve data, split, support and backends; return the context and run header."""
    if image_dir is None and cfg.uses_remote() and "synthetic" in cfg.dataset and not cfg.dataset.get("image_dir"):
        raise ConfigError("remote backends need pixels: set dataset.image_dir for a synthetic corpus")
    index = resolve_dataset(cfg, image_dir)
    splits = resolve_splits(cfg, index)
    parts = partitions_of(splits)
    all_test = {i for p in parts.values() for i in p["test"]}
    source_of = {i: s for s, p in parts.items() for i in p["test"]}

    vocab, prompts, support = {}, {}, {}
    pixels = {r: bool(getattr(cfg, r)) and getattr(cfg, r)["kind"] == "remote" for r in ROLES}
    support_pixels = pixels["detector"] or pixels["classifier"]
    for src, p in parts.items():
        sub = index.by_source(src)
        vocab[src] = list(sub.classes)
        prompts[src] = render_prompt(cfg.prompt_id, vocab[src], cfg.k, cfg.base_dir)
        if cfg.k:
            s = build_support(sub, p["example"], cfg.k, cfg.seed, cfg.crop_margin)
            assert_no_leak(s, p["example"], all_test)
            if s.shortfall:
                log.warning("source %s: classes short of K=%d examples: %s", src, cfg.k, s.shortfall)
            support[src] = _support_items(sub, s, support_pixels)

    if backends is None:
        backends = {r: make_backend(r, getattr(cfg, r), index, **client_kw) for r in ROLES if getattr(cfg, r)}
    digest = config_hash(cfg, parts, prompts)
    header = {
        "kind": "run_header",
        "format": RUN_FORMAT,
        "config_hash": digest,
        "config": cfg.to_dict(),
        "base_dir": cfg.base_dir,
        "splits": parts,
        "vocab": vocab,
        "prompts": prompts,
        "support": {s: [[it.image_id, it.label] for it in items] for s, items in sorted(support.items())},
        "created": _now(),
    }
    ctx = _Context(cfg, index, source_of, vocab, prompts, support, dict(backends), pixels["classifier"])
    return ctx, header


def run(cfg: ExperimentConfig, out_path, *, image_dir=None, backends: Optional[Mapping[str, Any]] = None,
        **client_kw) -> RunRecord:
    """Execute ``cfg`` over every test image, appending to ``out_path``.

    An existing file with the same config hash is resumed: images already
    recorded as ok are skipped, everything else is (re)attempted. A file
    written by a different config raises ``ConfigMismatchError``.
    """
    out_path = Path(out_path)
    ctx, header = prepare(cfg, image_dir, backends, **client_kw)
    done: set[str] = set()
    if out_path.exists() and out_path.stat().st_size:
        _drop_torn_tail(out_path)
        prior = load_run(out_path)
        if prior.config_hash != header["config_hash"]:
            raise ConfigMismatchError(
                f"{out_path} was written by config {prior.config_hash[:12]}, not {header['config_hash'][:12]}"
            )
        done = {i for i, e in prior.entries.items() if e.status == "ok"}
        log.info("resuming %s: %d image(s) already done", out_path, len(done))
    else:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(header, sort_keys=True) + "\n")

    todo = [i for i in sorted(ctx.source_of) if i not in done]
    workers = cfg.workers or max(getattr(b, "max_parallel", 1) for b in ctx.backends.values())
    writer = _Appender(out_path)
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(lambda i=i: writer.write(_process(ctx, i).to_dict())) for i in todo]
            try:
                for f in as_completed(futures):
                    f.result()
            except BaseException:
                for f in futures:
                    f.cancel()
                raise
    finally:
        writer.close()
        for b in ctx.backends.values():
            if backends is None and hasattr(b, "close"):
                b.close()
    return load_run(out_path)


def export_crops(cfg: ExperimentConfig, out_dir, image_dir=None) -> list[dict]:
    """Write each source's K-shot support crops as PNG files plus ``manifest.json``."""
    if cfg.k < 1:
        raise ConfigError("crop export needs k >= 1")
    index = resolve_dataset(cfg, image_dir)
    parts = partitions_of(resolve_splits(cfg, index))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_test = {i for p in parts.values() for i in p["test"]}
    manifest = []
    for src, p in parts.items():
        support = build_support(index.by_source(src), p["example"], cfg.k, cfg.seed, cfg.crop_margin)
        assert_no_leak(support, p["example"], all_test)
        crops = support.all_crops()
        for n, (c, (png, label)) in enumerate(zip(crops, support_payload(index, support))):
            name = f"{src or 'default'}_{label}_{n:02d}.png".replace(" ", "_").replace("/", "_")
            (out_dir / name).write_bytes(png)
            manifest.append({"file": name, "source": src, "label": label, "image_id": c.image_id,
                             "crop": c.box.as_list(), "annotation": c.annotation.as_list()})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    per_dataset: dict[str, dict[str, MetricReport]]   # variant -> dataset -> report
    overall: dict[str, dict[str, MetricReport]]       # variant -> scheme -> report

    @property
    def headline(self) -> MetricReport:
        return self.overall["excluded"]["macro"]

    def to_dict(self) -> dict:
        return {
            "headline": self.headline.to_dict(),
            "per_dataset": {v: {d: r.to_dict() for d, r in sorted(m.items())} for v, m in self.per_dataset.items()},
            "overall": {v: {s: r.to_dict() for s, r in sorted(m.items())} for v, m in self.overall.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate(record: RunRecord, index: DatasetIndex, cfg: MetricConfig = MetricConfig(),
             invalid_policy: Optional[str] = None) -> Evaluation:
    """Score a run per source dataset, with failed images excluded or counted as empty.

    Test images without an ok entry (failed, skipped, or never reached) are
    treated as failed.
    """
    exp = record.header["config"]
    method = exp.get("method") or exp["mode"]
    k = exp["k"]
    policy = invalid_policy or exp.get("invalid_policy", "fp")
    parts = record.partitions
    test_ids = set(record.test_ids())
    stray = sorted(set(record.entries) - test_ids)
    if stray:
        raise RecordMismatchError(f"run has entries for non-test images: {stray[:5]}")
    unknown = sorted(test_ids - set(index.images))
    if unknown:
        raise RecordMismatchError(f"test images missing from the index: {unknown[:5]}")
    gts_all = index.by_image()

    per: dict[str, dict[str, MetricReport]] = {v: {} for v in VARIANTS}
    for src, p in sorted(parts.items()):
        ok, failed = {}, []
        for iid in p["test"]:
            e = record.entries.get(iid)
            if e is None or e.status != "ok":
                failed.append(iid)
                continue
            ok[iid] = [d for d in e.predictions if d.in_vocab or policy == "fp"]
        gts = {i: gts_all[i] for i in p["test"]}
        meta = dict(dataset=src, method=method, k=k, n_failed=len(failed), cfg=cfg)
        per["excluded"][src] = evaluate_group(ok, {i: gts[i] for i in ok}, variant="excluded", **meta)
        per["empty"][src] = evaluate_group(ok, gts, variant="empty", **meta)
    overall = {v: {s: aggregate(list(per[v].values()), s) for s in ("macro", "micro")} for v in VARIANTS}
    return Evaluation(per, overall)


def evaluate_run(path, index: Optional[DatasetIndex] = None, cfg: MetricConfig = MetricConfig()) -> Evaluation:
    record = load_run(path)
    if index is None:
        index = resolve_dataset(record.config)
    return evaluate(record, index, cfg)


# ---------------------------------------------------------------- report tables


def round2(x: float) -> str:
    """Two decimals, ties to even, on the shortest decimal form of ``x``."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


@dataclass
class Sheet:
    name: str
    title: str
    ks: list[int]
    rows: list[tuple[str, list[Optional[tuple[float, float]]]]]

    def header(self) -> list[str]:
        return ["Method"] + [h for k in self.ks for h in (f"K={k} mF1", f"K={k} Mean IoU")]

    def cells(self) -> list[list[str]]:
        out = []
        for method, vals in self.rows:
            row = [method]
            for v in vals:
                row += [MISSING, MISSING] if v is None else [round2(v[0]), round2(v[1])]
            out.append(row)
        return out


def report(reports: Sequence[MetricReport], ks: Optional[Sequence[int]] = None) -> list[Sheet]:
    """Method x K grids of (mF1, Mean IoU): one sheet per dataset, then the macro overall."""
    seen: dict[tuple[str, str, int], MetricReport] = {}
    for r in reports:
        key = (r.dataset, r.method, r.k)
        if key in seen:
            raise ValueError(f"duplicate report for dataset/method/K {key}")
        seen[key] = r
    ks = sorted(set(ks) if ks is not None else {r.k for r in reports})
    methods = sorted({r.method for r in reports})
    datasets = sorted({r.dataset for r in reports})

    def grid(lookup: Mapping[tuple[str, int], MetricReport]):
        rows = []
        for m in methods:
            vals = []
            for k in ks:
                r = lookup.get((m, k))
                vals.append(None if r is None else (r.mf1, r.mean_iou_tp))
            rows.append((m, vals))
        return rows

    sheets = [
        Sheet(d, f"dataset {d}", ks, grid({(m, k): r for (dd, m, k), r in seen.items() if dd == d}))
        for d in datasets
    ]
    overall = {}
    for m in methods:
        for k in ks:
            group = [r for (d, mm, kk), r in seen.items() if mm == m and kk == k]
            if group:
                overall[(m, k)] = aggregate(group, "macro")
    sheets.append(Sheet("overall", f"overall (macro mean over {len(datasets)} dataset(s))", ks, grid(overall)))
    return sheets


def format_table(sheets: Sequence[Sheet]) -> str:
    blocks = []
    for s in sheets:
        rows = [s.header()] + s.cells()
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = [f"== {s.title} =="]
        for r in rows:
            lines.append("  ".join(r[0].ljust(widths[0]) if c == 0 else r[c].rjust(widths[c])
                                   for c in range(len(r))).rstrip())
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def format_csv(sheets: Sequence[Sheet]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for n, s in enumerate(sheets):
        if n == 0:
            w.writerow(["sheet"] + s.header())
        for row in s.cells():
            w.writerow([s.name] + row)
    return buf.getvalue()


def report_runs(pattern: str, variant: str = "excluded") -> list[Sheet]:
    paths = sorted(globmod.glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no run files match {pattern!r}")
    reports = []
    for p in paths:
        ev = evaluate_run(p)
        reports.extend(ev.per_dataset[variant].values())
    return report(reports)
