"""Detector, classifier and segmenter backends.

Remote backends speak one JSON-over-HTTP protocol (every request is a POST
to the backend's endpoint; images travel as base64-encoded PNG):

detect    request  {"image", "vocab", "prompt"?, "support"?: [{"image", "label"}]}
          response {"detections": [{"bbox": [x_min, y_min, x_max, y_max], "label", "score"?}]}
classify  request  {"image", "vocab", "prompt"?, "support"?}
          response {"label", "score"?}
segment   request  {"image"}
          response {"boxes": [[x_min, y_min, x_max, y_max], ...]}

Optional keys are omitted, not sent as null. The bearer token, if any, is
read from the environment variable named in the backend config.

Oracle backends derive their output from ground truth with seeded noise and
stand in for real models when testing the harness offline.
"""

from __future__ import annotations

import base64
import logging
import math
import os
import random
import re
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import httpx
import numpy as np

from .dataset import Annotation, DatasetIndex, ImageRecord, encode_png, read_image
from .geometry import BBox, ImageDims, InvalidBoxError, clip, dedupe, iou_matrix

log = logging.getLogger(__name__)

SEGMENT_DEDUP_IOU = 0.95
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_label: str
    score: Optional[float] = None
    in_vocab: bool = True

    def to_wire(self) -> dict:
        d = {"bbox": self.bbox.as_list(), "label": self.class_label}
        if self.score is not None:
            d["score"] = self.score
        return d

    def to_record(self) -> dict:
        d = self.to_wire()
        if not self.in_vocab:
            d["in_vocab"] = False
        return d

    @classmethod
    def from_record(cls, d: dict) -> "Detection":
        return cls(BBox.from_list(d["bbox"]), d["label"], d.get("score"), d.get("in_vocab", True))


@dataclass(frozen=True)
class SupportItem:
    label: str
    image_id: str = ""
    png: Optional[bytes] = None


@dataclass(frozen=True)
class Crop:
    """A region of a test image sent to a classifier."""

    image_id: str
    box: BBox
    png: Optional[bytes] = None


@dataclass(frozen=True)
class Classification:
    label: str
    score: Optional[float] = None
    valid: bool = True


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    token_env: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_cap: float = 60.0
    max_parallel: int = 4

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class OracleConfig:
    jitter: float = 0.0    # half-width of uniform per-coordinate noise, pixels
    drop: float = 0.0      # fraction of boxes removed per image
    flip: float = 0.0      # probability a label is swapped for another vocab label
    spurious: float = 0.0  # mean number of extra random boxes per image
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.drop <= 1.0 and 0.0 <= self.flip <= 1.0):
            raise ValueError("drop and flip must lie in [0, 1]")
        if self.jitter < 0 or self.spurious < 0:
            raise ValueError("jitter and spurious must be >= 0")


class BackendError(RuntimeError):
    """A request failed; ``raw`` carries the offending response body verbatim."""

    def __init__(self, message: str, raw: str = "", retries: int = 0):
        super().__init__(message)
        self.raw = raw
        self.retries = retries


class BackendExhausted(BackendError):
    """Retryable failures persisted past ``max_retries``."""


class MalformedResponse(BackendError):
    pass


class Detector(Protocol):
    def detect(self, image: ImageRecord, vocab: Sequence[str], prompt: Optional[str] = None,
               support: Optional[Sequence[SupportItem]] = None) -> list[Detection]: ...


class Classifier(Protocol):
    def classify(self, crop: Crop, vocab: Sequence[str], support: Optional[Sequence[SupportItem]] = None,
                 prompt: Optional[str] = None) -> Classification: ...


class Segmenter(Protocol):
    def segment(self, image: ImageRecord) -> list[BBox]: ...


def normalize_label(label: str, vocab: Sequence[str]) -> Optional[str]:
    """Vocab entry equal to ``label`` up to case and whitespace, else None."""
    if label in vocab:
        return label

    def canon(s: str) -> str:
        return re.sub(r"\s+", " ", s).strip().casefold()

    target = canon(label)
    hits = [v for v in vocab if canon(v) == target]
    return hits[0] if len(hits) == 1 else None


def clip_detections(dets: Sequence[Detection], dims: ImageDims, image_id: str = "") -> list[Detection]:
    out = []
    for d in dets:
        c = clip(d.bbox, dims)
        if c is None:
            log.warning("image %s: dropped box %s outside the frame", image_id, d.bbox.as_list())
            continue
        if c != d.bbox:
            log.warning("image %s: clipped box %s to %s", image_id, d.bbox.as_list(), c.as_list())
            d = Detection(c, d.class_label, d.score, d.in_vocab)
        out.append(d)
    return out


# ---------------------------------------------------------------- remote


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def image_png(record: ImageRecord) -> bytes:
    with open(record.path, "rb") as fh:
        data = fh.read()
    if data.startswith(PNG_MAGIC):
        return data
    return encode_png(read_image(record))


def support_wire(support: Optional[Sequence[SupportItem]]) -> list[dict]:
    out = []
    for s in support or ():
        if s.png is None:
            raise ValueError(f"support item {s.label!r} from {s.image_id!r} has no image bytes")
        out.append({"image": b64(s.png), "label": s.label})
    return out


class RemoteClient:
    """POSTs JSON with bounded concurrency and jittered exponential backoff.

    Retries on HTTP 429, 5xx and transport errors. ``max_retries`` counts
    retry attempts after the first request; each one is appended to
    ``retries``.
    """

    def __init__(self, config: BackendConfig, *, sleep: Callable[[float], None] = time.sleep,
                 seed: Optional[int] = None, transport: Optional[httpx.BaseTransport] = None):
        self.config = config
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._sem = threading.BoundedSemaphore(config.max_parallel)
        self._lock = threading.Lock()
        self._http = httpx.Client(timeout=config.timeout, transport=transport)
        self.retries: list[dict] = []

    def close(self) -> None:
        self._http.close()

    def _headers(self) -> dict:
        h = {"Content-Type": "application/json"}
        name = self.config.token_env
        if name:
            token = os.environ.get(name)
            if not token:
                raise BackendError(f"environment variable {name} is not set")
            h["Authorization"] = f"Bearer {token}"
        return h

    def backoff(self, attempt: int) -> float:
        cfg = self.config
        with self._lock:
            u = self._rng.uniform(0.5, 1.0)
        return min(cfg.backoff_cap, cfg.backoff_base * (2 ** attempt)) * u

    def post(self, payload: dict) -> dict:
        cfg = self.config
        headers = self._headers()
        reason = ""
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = self.backoff(attempt - 1)
                with self._lock:
                    self.retries.append({"attempt": attempt, "reason": reason, "delay": delay})
                log.warning("retry %d/%d after %s (sleep %.2fs)", attempt, cfg.max_retries, reason, delay)
                self._sleep(delay)
            with self._sem:
                try:
                    resp = self._http.post(cfg.endpoint, json=payload, headers=headers)
                except httpx.TransportError as exc:
                    reason = f"transport error: {exc!r}"
                    continue
            if resp.status_code == 429 or resp.status_code >= 500:
                reason = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}", raw=resp.text, retries=attempt)
            try:
                data = resp.json()
            except ValueError:
                raise MalformedResponse("response is not JSON", raw=resp.text, retries=attempt)
            if not isinstance(data, dict):
                raise MalformedResponse("response is not a JSON object", raw=resp.text, retries=attempt)
            return data
        raise BackendExhausted(f"gave up after {cfg.max_retries} retries: {reason}",
                               retries=cfg.max_retries)


def _parse_box(raw, text: str) -> BBox:
    if not (isinstance(raw, (list, tuple)) and len(raw) == 4
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw)):
        raise MalformedResponse(f"bad bbox {raw!r}", raw=text)
    return BBox.from_list(raw)


def _parse_score(raw, text: str) -> Optional[float]:
    if raw is None:
        return None
    if not isinstance(raw, (int, float)) or isinstance(raw, bool) or not 0.0 <= raw <= 1.0:
        raise MalformedResponse(f"bad score {raw!r}", raw=text)
    return float(raw)


def parse_detections(data: dict, vocab: Sequence[str], dims: ImageDims, image_id: str = "") -> list[Detection]:
    text = repr(data)
    items = data.get("detections")
    if not isinstance(items, list):
        raise MalformedResponse("missing 'detections' list", raw=text)
    out = []
    for it in items:
        if not isinstance(it, dict) or not isinstance(it.get("label"), str):
            raise MalformedResponse(f"bad detection {it!r}", raw=text)
        try:
            box = _parse_box(it.get("bbox"), text)
        except InvalidBoxError as exc:
            log.warning("image %s: dropped degenerate box (%s)", image_id, exc)
            continue
        label = it["label"]
        canon = normalize_label(label, vocab)
        out.append(Detection(box, canon or label, _parse_score(it.get("score"), text), canon is not None))
    return clip_detections(out, dims, image_id)


def parse_classification(data: dict, vocab: Sequence[str]) -> Classification:
    text = repr(data)
    label = data.get("label")
    if not isinstance(label, str):
        raise MalformedResponse("missing 'label'", raw=text)
    score = _parse_score(data.get("score"), text)
    canon = normalize_label(label, vocab)
    if canon is None:
        log.warning("classifier label %r not in vocabulary; marked invalid", label)
        return Classification(label, score, valid=False)
    return Classification(canon, score)


def parse_boxes(data: dict, dims: ImageDims, image_id: str = "") -> list[BBox]:
    text = repr(data)
    items = data.get("boxes")
    if not isinstance(items, list):
        raise MalformedResponse("missing 'boxes' list", raw=text)
    boxes = []
    for raw in items:
        try:
            b = _parse_box(raw, text)
        except InvalidBoxError as exc:
            log.warning("image %s: dropped degenerate proposal (%s)", image_id, exc)
            continue
        c = clip(b, dims)
        if c is None:
            log.warning("image %s: dropped proposal %s outside the frame", image_id, raw)
            continue
        boxes.append(c)
    return dedupe(boxes, SEGMENT_DEDUP_IOU)


class _Remote:
    def __init__(self, config: BackendConfig, client: Optional[RemoteClient] = None, **client_kw):
        self.config = config
        self.client = client or RemoteClient(config, **client_kw)

    @property
    def max_parallel(self) -> int:
        return self.config.max_parallel

    def close(self) -> None:
        self.client.close()


class RemoteDetector(_Remote):
    def detect(self, image: ImageRecord, vocab: Sequence[str], prompt: Optional[str] = None,
               support: Optional[Sequence[SupportItem]] = None) -> list[Detection]:
        if not vocab:
            raise ValueError("vocabulary must be non-empty")
        payload = {"image": b64(image_png(image)), "vocab": list(vocab)}
        if prompt is not None:
            payload["prompt"] = prompt
        if support:
            payload["support"] = support_wire(support)
        return parse_detections(self.client.post(payload), vocab, image.dims, image.image_id)


class RemoteClassifier(_Remote):
    def classify(self, crop: Crop, vocab: Sequence[str], support: Optional[Sequence[SupportItem]] = None,
                 prompt: Optional[str] = None) -> Classification:
        if not vocab:
            raise ValueError("vocabulary must be non-empty")
        if crop.png is None:
            raise ValueError(f"crop from {crop.image_id!r} has no image bytes")
        payload = {"image": b64(crop.png), "vocab": list(vocab)}
        if prompt is not None:
            payload["prompt"] = prompt
        if support:
            payload["support"] = support_wire(support)
        return parse_classification(self.client.post(payload), vocab)


class RemoteSegmenter(_Remote):
    def segment(self, image: ImageRecord) -> list[BBox]:
        data = self.client.post({"image": b64(image_png(image))})
        return parse_boxes(data, image.dims, image.image_id)


# ---------------------------------------------------------------- oracles


def _rng(seed: int, *parts) -> np.random.Generator:
    keys = [seed] + [zlib.crc32(repr(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(keys))


def _n_dropped(p: float, n: int) -> int:
    # exact fraction per image (rounded half up) rather than independent coin flips
    return min(n, int(math.floor(p * n + 0.5)))


def _jittered(box: BBox, sigma: float, rng: np.random.Generator, dims: ImageDims) -> Optional[BBox]:
    noise = rng.uniform(-1.0, 1.0, size=4) * sigma
    if sigma == 0:
        return clip(box, dims)
    x0, y0, x1, y1 = (np.array(box.as_list()) + noise).tolist()
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    try:
        return clip(BBox(x0, y0, x1, y1), dims)
    except InvalidBoxError:
        return None


def _flip(label: str, vocab: Sequence[str], q: float, rng: np.random.Generator) -> str:
    u = rng.random()
    others = [v for v in vocab if v != label]
    pick = rng.integers(len(others)) if others else 0
    if u < q and others:
        return others[int(pick)]
    return label


def _spurious(cfg: OracleConfig, dims: ImageDims, rng: np.random.Generator) -> list[BBox]:
    out = []
    for _ in range(int(rng.poisson(cfg.spurious)) if cfg.spurious else 0):
        w = rng.uniform(4, max(5.0, dims.width / 4))
        h = rng.uniform(4, max(5.0, dims.height / 4))
        x = rng.uniform(0, max(1e-9, dims.width - w))
        y = rng.uniform(0, max(1e-9, dims.height - h))
        b = clip(BBox(x, y, x + w, y + h), dims)
        if b is not None:
            out.append(b)
    return out


class _Oracle:
    max_parallel = 1

    def __init__(self, index: DatasetIndex, config: OracleConfig = OracleConfig()):
        self.index = index
        self.config = config
        self._gts = index.by_image()

    def _truth(self, image_id: str) -> list[Annotation]:
        if image_id not in self._gts:
            raise KeyError(f"oracle has no ground truth for image {image_id!r}")
        return self._gts[image_id]

    def _noisy(self, image: ImageRecord, rng: np.random.Generator) -> list[tuple[BBox, Annotation]]:
        gts = self._truth(image.image_id)
        order = rng.permutation(len(gts))
        dropped = set(order[: _n_dropped(self.config.drop, len(gts))].tolist())
        out = []
        for k, a in enumerate(gts):
            b = _jittered(a.bbox, self.config.jitter, rng, image.dims)
            if k not in dropped and b is not None:
                out.append((b, a))
        return out

    def close(self) -> None:
        pass


class OracleDetector(_Oracle):
    def detect(self, image: ImageRecord, vocab: Sequence[str], prompt: Optional[str] = None,
               support: Optional[Sequence[SupportItem]] = None) -> list[Detection]:
        if not vocab:
            raise ValueError("vocabulary must be non-empty")
        rng = _rng(self.config.seed, "detect", image.image_id)
        out = []
        for box, a in self._noisy(image, rng):
            label = _flip(a.class_label, vocab, self.config.flip, rng)
            out.append(Detection(box, label, 1.0, label in vocab))
        for box in _spurious(self.config, image.dims, rng):
            out.append(Detection(box, vocab[int(rng.integers(len(vocab)))], 0.5))
        return out


class OracleSegmenter(_Oracle):
    def segment(self, image: ImageRecord) -> list[BBox]:
        rng = _rng(self.config.seed, "segment", image.image_id)
        boxes = [b for b, _ in self._noisy(image, rng)]
        boxes += _spurious(self.config, image.dims, rng)
        return dedupe(boxes, SEGMENT_DEDUP_IOU)


class OracleClassifier(_Oracle):
    """Labels a crop with the class of its best-overlapping ground-truth box."""

    def classify(self, crop: Crop, vocab: Sequence[str], support: Optional[Sequence[SupportItem]] = None,
                 prompt: Optional[str] = None) -> Classification:
        if not vocab:
            raise ValueError("vocabulary must be non-empty")
        gts = self._truth(crop.image_id)
        rng = _rng(self.config.seed, "classify", crop.image_id, crop.box.as_list())
        if gts:
            ious = iou_matrix([crop.box], [a.bbox for a in gts])[0]
            best = int(np.argmax(ious))
            truth = gts[best].class_label if ious[best] > 0 else vocab[0]
        else:
            truth = vocab[0]
        return Classification(_flip(truth, vocab, self.config.flip, rng), 1.0)
