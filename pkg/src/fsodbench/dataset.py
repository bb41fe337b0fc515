"""Annotated corpora: ingestion, validation, synthetic fixtures, support sets.

Two on-disk formats are read and written:

* ``coco_json``: ``{"images": [...], "annotations": [...], "categories": [...]}``
  with ``bbox = [x, y, w, h]``; an optional ``"source"`` key on each image.
* ``simple_csv``: columns ``image_id,path,width,height,class,x_min,y_min,x_max,y_max``;
  a row with an empty ``class`` declares an image without boxes.

Boxes are converted to corner form on ingestion. Degenerate or out-of-frame
boxes are rejected, never repaired.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import DEFAULT_CROP_MARGIN, BBox, ImageDims, InvalidBoxError, crop_region
from .split_optimizer import SplitInstance

CSV_COLUMNS = ("image_id", "path", "width", "height", "class", "x_min", "y_min", "x_max", "y_max")
SUPPORT_SHOTS = (1, 3, 6)

# Per-source (test, example) box counts of the four-source microscopy benchmark.
REFERENCE_COUNTS: dict[str, dict[str, tuple[int, int]]] = {
    "BCCD": {
        "Platelets": (159, 10),
        "Red Blood Cells": (737, 58),
        "White Blood Cells": (56, 10),
    },
    "BBBC": {
        "Gametocyte Cells": (24, 6),
        "Red Blood Cells": (3690, 684),
        "Ring Cells": (34, 6),
        "Schizont Cells": (10, 6),
        "Trophozoite Cells": (193, 26),
        "White Blood Cells": (49, 6),
    },
    "NIH-3T3": {
        "Polygonal Cells": (303, 43),
        "Round Cells": (11, 6),
        "Spindle Cells": (62, 13),
    },
    "LIVECell": {
        "Polygonal Cells": (114, 15),
        "Round Cells": (13, 6),
        "Spindle Cells": (96, 19),
    },
}


class IndexValidationError(ValueError):
    """Collected ingestion problems; ``problems`` holds one message per defect."""

    def __init__(self, problems: Sequence[str]):
        super().__init__(f"{len(problems)} annotation problem(s): " + "; ".join(problems[:10]))
        self.problems = list(problems)


@dataclass(frozen=True)
class Annotation:
    bbox: BBox
    class_label: str
    image_id: str

    def __post_init__(self) -> None:
        if not self.class_label:
            raise ValueError("class label must be non-empty")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    dims: ImageDims
    source: str = ""


@dataclass
class DatasetIndex:
    images: dict[str, ImageRecord]
    annotations: list[Annotation]
    classes: tuple[str, ...] = ()
    totals: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.classes = tuple(sorted(self.classes or {a.class_label for a in self.annotations}))
        if not self.totals:
            self.totals = self.recount()

    def recount(self) -> dict[str, int]:
        c = Counter(a.class_label for a in self.annotations)
        return {k: c.get(k, 0) for k in self.classes}

    def by_image(self) -> dict[str, list[Annotation]]:
        out: dict[str, list[Annotation]] = {i: [] for i in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    def sources(self) -> list[str]:
        return sorted({r.source for r in self.images.values()})

    def subset(self, image_ids: Iterable[str]) -> "DatasetIndex":
        wanted = set(image_ids)
        keep = [i for i in self.images if i in wanted]
        images = {i: self.images[i] for i in keep}
        anns = [a for a in self.annotations if a.image_id in images]
        return DatasetIndex(images, anns, self.classes)

    def by_source(self, source: str) -> "DatasetIndex":
        sub = self.subset(i for i, r in self.images.items() if r.source == source)
        sub.classes = tuple(c for c in sub.classes if sub.recount().get(c, 0) > 0)
        sub.totals = sub.recount()
        return sub

    def to_split_instance(self, source: Optional[str] = None) -> SplitInstance:
        idx = self if source is None else self.by_source(source)
        per = idx.by_image()
        classes = tuple(c for c in idx.classes if idx.totals.get(c, 0) > 0)
        records = [(i, Counter(a.class_label for a in per[i])) for i in idx.images]
        return SplitInstance.from_records(records, classes, source or "")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetIndex):
            return NotImplemented
        return (
            self.images == other.images
            and self.classes == other.classes
            and self.totals == other.totals
            and sorted(self.annotations, key=_ann_key) == sorted(other.annotations, key=_ann_key)
        )


def _ann_key(a: Annotation):
    return (a.image_id, a.class_label, a.bbox.as_list())


# ---------------------------------------------------------------- ingestion


def _resolve(base: Path, p: str) -> str:
    path = Path(p)
    return str(path if path.is_absolute() else (base / path).resolve())


def _check_box(
    problems: list[str], image: ImageRecord, ordinal: int, box: Sequence[float]
) -> Optional[BBox]:
    try:
        b = BBox.from_list(box)
    except (InvalidBoxError, TypeError, ValueError) as exc:
        problems.append(f"image {image.image_id!r} annotation #{ordinal}: {exc}")
        return None
    d = image.dims
    if b.x_min < 0 or b.y_min < 0 or b.x_max > d.width or b.y_max > d.height:
        problems.append(
            f"image {image.image_id!r} annotation #{ordinal}: box {b.as_list()} "
            f"outside {d.width}x{d.height} frame"
        )
        return None
    return b


def _load_coco(path: Path) -> DatasetIndex:
    data = json.loads(path.read_text())
    base = path.parent
    cats = {c["id"]: c["name"] for c in data.get("categories", [])}
    images: dict[str, ImageRecord] = {}
    problems: list[str] = []
    for im in data["images"]:
        iid = str(im["id"])
        if iid in images:
            problems.append(f"duplicate image id {iid!r}")
            continue
        images[iid] = ImageRecord(
            iid, _resolve(base, im.get("file_name", f"{iid}.png")),
            ImageDims(int(im["width"]), int(im["height"])), im.get("source", ""),
        )
    anns = []
    per_image: Counter = Counter()
    for a in data.get("annotations", []):
        iid = str(a["image_id"])
        ordinal = per_image[iid]
        per_image[iid] += 1
        if iid not in images:
            problems.append(f"annotation #{ordinal} references unknown image {iid!r}")
            continue
        label = cats.get(a.get("category_id"), a.get("category"))
        if not label:
            problems.append(f"image {iid!r} annotation #{ordinal}: unknown category {a.get('category_id')!r}")
            continue
        x, y, w, h = a["bbox"]
        b = _check_box(problems, images[iid], ordinal, [x, y, x + w, y + h])
        if b is not None:
            anns.append(Annotation(b, label, iid))
    if problems:
        raise IndexValidationError(problems)
    classes = tuple(sorted(set(cats.values()) | {a.class_label for a in anns}))
    return DatasetIndex(images, anns, classes)


def _load_csv(path: Path) -> DatasetIndex:
    base = path.parent
    images: dict[str, ImageRecord] = {}
    anns = []
    problems: list[str] = []
    per_image: Counter = Counter()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise IndexValidationError([f"missing CSV columns: {sorted(missing)}"])
        for row in reader:
            iid = row["image_id"]
            rec = ImageRecord(
                iid, _resolve(base, row["path"]),
                ImageDims(int(row["width"]), int(row["height"])), row.get("source", "") or "",
            )
            if iid not in images:
                images[iid] = rec
            elif images[iid].dims != rec.dims:
                problems.append(f"image {iid!r}: inconsistent dimensions across rows")
            if not row["class"]:
                continue
            ordinal = per_image[iid]
            per_image[iid] += 1
            coords = [row[k] for k in ("x_min", "y_min", "x_max", "y_max")]
            b = _check_box(problems, images[iid], ordinal, coords)
            if b is not None:
                anns.append(Annotation(b, row["class"], iid))
    if problems:
        raise IndexValidationError(problems)
    return DatasetIndex(images, anns)


def load_index(path, format: Optional[str] = None) -> DatasetIndex:
    """Read and validate an annotation index (``coco_json`` or ``simple_csv``)."""
    path = Path(path)
    fmt = format or ("simple_csv" if path.suffix.lower() == ".csv" else "coco_json")
    try:
        if fmt == "coco_json":
            return _load_coco(path)
        if fmt == "simple_csv":
            return _load_csv(path)
    except (json.JSONDecodeError, KeyError, csv.Error) as exc:
        raise IndexValidationError([f"{path}: cannot parse {fmt}: {exc!r}"]) from exc
    raise ValueError(f"unknown index format {fmt!r}")


def _relative(p: str, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return p


def save_index(index: DatasetIndex, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = format or ("simple_csv" if path.suffix.lower() == ".csv" else "coco_json")
    base = path.parent
    if fmt == "coco_json":
        cat_ids = {c: k + 1 for k, c in enumerate(index.classes)}
        data = {
            "images": [
                {"id": r.image_id, "file_name": _relative(r.path, base), "width": r.dims.width,
                 "height": r.dims.height, "source": r.source}
                for r in index.images.values()
            ],
            "annotations": [
                {"id": k + 1, "image_id": a.image_id, "category_id": cat_ids[a.class_label],
                 "bbox": a.bbox.as_xywh()}
                for k, a in enumerate(index.annotations)
            ],
            "categories": [{"id": v, "name": c} for c, v in cat_ids.items()],
        }
        path.write_text(json.dumps(data, indent=1) + "\n")
    elif fmt == "simple_csv":
        per = index.by_image()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS + ("source",))
            for iid, rec in index.images.items():
                head = [iid, _relative(rec.path, base), rec.dims.width, rec.dims.height]
                if not per[iid]:
                    w.writerow(head + ["", "", "", "", "", rec.source])
                for a in per[iid]:
                    w.writerow(head + [a.class_label, *(repr(v) for v in a.bbox.as_list()), rec.source])
    else:
        raise ValueError(f"unknown index format {fmt!r}")


# ---------------------------------------------------------------- synthetic corpora


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a procedurally drawn corpus.

    Classes with fewer boxes than images are spread at most one box per
    image; frequent classes are drawn multinomially over a random subset of
    ``presence`` x n_images images.
    """

    classes: Mapping[str, int]
    n_images: int
    width: int = 256
    height: int = 256
    seed: int = 0
    source: str = "synthetic"
    min_side: int = 8
    max_side: int = 24
    presence: float = 0.8
    prefix: str = ""

    def __post_init__(self) -> None:
        # draws follow class order, so fix it: a config round-tripped through
        # sorted JSON must rebuild the same corpus
        object.__setattr__(self, "classes", dict(sorted(self.classes.items())))

    @classmethod
    def reference(cls, source: str, n_images: int = 63, seed: int = 0, **kw) -> "SynthSpec":
        counts = {c: ref + sup for c, (ref, sup) in REFERENCE_COUNTS[source].items()}
        return cls(counts, n_images, seed=seed, source=source, prefix=f"{source}_", **kw)


_PALETTE = [
    (230, 60, 60), (60, 200, 80), (70, 110, 240), (240, 200, 40),
    (200, 80, 220), (40, 210, 210), (250, 140, 40), (160, 160, 160),
]
BACKGROUND = (24, 24, 24)


def _allocate(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_images
    out = np.zeros((n, len(spec.classes)), dtype=np.int64)
    for k, total in enumerate(spec.classes.values()):
        if total <= n:
            out[rng.choice(n, size=total, replace=False), k] = 1
        else:
            m = max(1, int(np.ceil(spec.presence * n)))
            hosts = rng.choice(n, size=m, replace=False)
            out[hosts, k] = rng.multinomial(total, np.full(m, 1.0 / m))
    return out


def synth_fixture(spec: SynthSpec, out_dir=None) -> DatasetIndex:
    """Generate a corpus; draws PNGs into ``out_dir`` when given.

    Boxes have integer corners so crops align with pixels. Output is a pure
    function of ``spec``.
    """
    rng = np.random.default_rng(spec.seed)
    alloc = _allocate(spec, rng)
    classes = tuple(spec.classes)
    dims = ImageDims(spec.width, spec.height)
    base = Path(out_dir).resolve() if out_dir is not None else None
    if base is not None:
        base.mkdir(parents=True, exist_ok=True)
    images: dict[str, ImageRecord] = {}
    anns: list[Annotation] = []
    width = len(str(spec.n_images - 1))
    for i in range(spec.n_images):
        iid = f"{spec.prefix}{i:0{width}d}"
        fname = f"{iid}.png"
        path = str(base / fname) if base is not None else fname
        images[iid] = ImageRecord(iid, path, dims, spec.source)
        canvas = Image.new("RGB", (spec.width, spec.height), BACKGROUND) if base is not None else None
        draw = ImageDraw.Draw(canvas) if canvas is not None else None
        for k, cls in enumerate(classes):
            for _ in range(int(alloc[i, k])):
                w = int(rng.integers(spec.min_side, spec.max_side + 1))
                h = int(rng.integers(spec.min_side, spec.max_side + 1))
                x = int(rng.integers(0, spec.width - w + 1))
                y = int(rng.integers(0, spec.height - h + 1))
                box = BBox(x, y, x + w, y + h)
                anns.append(Annotation(box, cls, iid))
                if draw is not None:
                    color = _PALETTE[k % len(_PALETTE)]
                    # PIL's shape bounds are inclusive
                    xy = [x, y, x + w - 1, y + h - 1]
                    if k % 2:
                        draw.ellipse(xy, fill=color)
                    else:
                        draw.rectangle(xy, fill=color)
        if canvas is not None:
            canvas.save(path, format="PNG")
    return DatasetIndex(images, anns, classes)


# ---------------------------------------------------------------- support sets


class SupportLeakError(AssertionError):
    """A support crop was drawn from outside the example partition."""


@dataclass(frozen=True)
class SupportCrop:
    image_id: str
    box: BBox  # crop region after margin and clipping
    annotation: BBox
    class_label: str


@dataclass
class SupportSet:
    k: int
    crops: dict[str, list[SupportCrop]]
    # class -> number of available example boxes, for classes short of K
    shortfall: dict[str, int] = field(default_factory=dict)

    def all_crops(self) -> list[SupportCrop]:
        return [c for label in sorted(self.crops) for c in self.crops[label]]

    def image_ids(self) -> set[str]:
        return {c.image_id for c in self.all_crops()}


def _example_ids(split) -> set[str]:
    if hasattr(split, "example_ids"):
        return set(split.example_ids)
    return set(split)


def assert_no_leak(support: SupportSet, example_ids: Iterable[str], test_ids: Iterable[str] = ()) -> None:
    ex, te = set(example_ids), set(test_ids)
    for c in support.all_crops():
        if c.image_id not in ex or c.image_id in te:
            raise SupportLeakError(f"support crop from non-example image {c.image_id!r}")


def class_seed(seed: int, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(label.encode())])


def build_support(
    index: DatasetIndex, split, k: int, seed: int = 0, margin: float = DEFAULT_CROP_MARGIN,
) -> SupportSet:
    """Draw ``k`` crops per class, without replacement, from example-split images.

    ``split`` is a split assignment (anything with ``example_ids``) or an
    iterable of example image ids. Classes with fewer than ``k`` example
    boxes contribute all of them and are listed in ``shortfall``.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    example = _example_ids(split)
    pool: dict[str, list[Annotation]] = {c: [] for c in index.classes}
    for a in index.annotations:
        if a.image_id in example:
            pool.setdefault(a.class_label, []).append(a)
    empty = sorted(c for c, v in pool.items() if not v)
    if empty:
        raise ValueError(f"classes without example boxes: {empty}")
    crops: dict[str, list[SupportCrop]] = {}
    shortfall: dict[str, int] = {}
    for label in sorted(pool):
        cands = sorted(pool[label], key=_ann_key)
        rng = np.random.default_rng(class_seed(seed, label))
        chosen = [cands[i] for i in rng.permutation(len(cands))[:k]]
        if len(cands) < k:
            shortfall[label] = len(cands)
        crops[label] = [
            SupportCrop(a.image_id, crop_region(a.bbox, index.images[a.image_id].dims, margin),
                        a.bbox, label)
            for a in chosen
        ]
    support = SupportSet(k, crops, shortfall)
    assert_no_leak(support, example, getattr(split, "test_ids", ()))
    return support


def _pixel_bounds(box: BBox) -> tuple[int, int, int, int]:
    return (int(np.floor(box.x_min)), int(np.floor(box.y_min)),
            int(np.ceil(box.x_max)), int(np.ceil(box.y_max)))


def read_image(record: ImageRecord) -> Image.Image:
    try:
        with Image.open(record.path) as im:
            return im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {record.image_id!r} at {record.path}: {exc}") from exc


def encode_png(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def extract_crop(
    record: ImageRecord, box: BBox, margin: float = DEFAULT_CROP_MARGIN,
    image: Optional[Image.Image] = None,
) -> bytes:
    """PNG bytes of the padded, clipped region around ``box``.

    The region is expanded outward to whole pixels.
    """
    region = crop_region(box, record.dims, margin)
    im = image if image is not None else read_image(record)
    return encode_png(im.crop(_pixel_bounds(region)))


def support_payload(index: DatasetIndex, support: SupportSet) -> list[tuple[bytes, str]]:
    """PNG bytes and label of every support crop, in deterministic order."""
    cache: dict[str, Image.Image] = {}
    out = []
    for c in support.all_crops():
        rec = index.images[c.image_id]
        if c.image_id not in cache:
            cache[c.image_id] = read_image(rec)
        out.append((encode_png(cache[c.image_id].crop(_pixel_bounds(c.box))), c.class_label))
    return out

