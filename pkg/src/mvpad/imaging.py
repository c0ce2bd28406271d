"""Image decoding, iris-centred cropping and dataset manifests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .common import Label

PARTITIONS = ("train", "validation", "test_known", "test_unknown")
TEST_PARTITIONS = ("test_known", "test_unknown")
MANIFEST_HEADER = ("id", "image_path", "label", "partition", "center_x", "center_y")

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ManifestError(ValueError):
    pass


class ProtocolViolation(RuntimeError):
    """A test-partition label was requested outside the evaluation stage."""


@dataclass(frozen=True)
class GrayImage:
    """Grayscale raster with intensities in [0, 1]; ``pixels`` is (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {px.shape}")
        if px.size and (not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        px = px.copy() if px is self.pixels else px
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def to_gray(array: np.ndarray) -> np.ndarray:
    """Collapse an RGB(A) array to luma; 2-D input is returned unchanged."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 2:
        return array
    if array.ndim == 3 and array.shape[2] in (3, 4):
        return array[..., :3] @ np.asarray(LUMA_WEIGHTS)
    raise ValueError(f"unsupported image shape {array.shape}")


def decode_image(data: bytes | str | Path) -> GrayImage:
    """Decode an 8-bit (or 16-bit grayscale) PNG/PGM into a [0, 1] raster."""
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    with Image.open(io.BytesIO(data)) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0
        else:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
            scale = 255.0
    return GrayImage(np.clip(to_gray(arr) / scale, 0.0, 1.0))


def encode_png(img: GrayImage | np.ndarray) -> bytes:
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img)
    buf = io.BytesIO()
    Image.fromarray(np.round(px * 255.0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def crop_window(shape: tuple[int, int], center: tuple[float, float], size: int) -> tuple[int, int]:
    """Top-left (row, col) of a size x size window centred on (x, y), shifted inside the image."""
    height, width = shape
    if size < 1:
        raise ValueError("crop size must be >= 1")
    if size > min(width, height):
        raise ValueError(f"image smaller than crop ({width}x{height} < {size})")
    cx, cy = center
    top = math.floor(cy + 0.5) - size // 2
    left = math.floor(cx + 0.5) - size // 2
    top = min(max(top, 0), height - size)
    left = min(max(left, 0), width - size)
    return top, left


def crop_array(array: np.ndarray, center: tuple[float, float], size: int) -> np.ndarray:
    top, left = crop_window(array.shape[:2], center, size)
    return array[top:top + size, left:left + size]


def crop_centered(img: GrayImage, center: tuple[float, float], size: int) -> GrayImage:
    return GrayImage(crop_array(img.pixels, center, size))


def image_center(img: GrayImage) -> tuple[float, float]:
    return ((img.width - 1) / 2.0, (img.height - 1) / 2.0)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    label: Label
    partition: str
    iris_center: tuple[float, float] | None = None

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))

    def center_for(self, img: GrayImage) -> tuple[float, float]:
        if self.iris_center is None:
            return image_center(img)
        x, y = self.iris_center
        if not (0 <= x < img.width and 0 <= y < img.height):
            raise ValueError(f"iris center {self.iris_center} of {self.id!r} lies outside the image")
        return self.iris_center


@dataclass
class LabelAudit:
    """Log of label reads; test labels may only be read by the evaluation stage."""

    entries: list[tuple[str, str, int]] = field(default_factory=list)

    def record(self, stage: str, partition: str, count: int) -> None:
        if partition in TEST_PARTITIONS and stage != "evaluate":
            raise ProtocolViolation(
                f"stage {stage!r} requested labels of test partition {partition!r}")
        self.entries.append((stage, partition, count))


@dataclass(frozen=True)
class Dataset:
    name: str
    records: tuple[SampleRecord, ...]
    root: Path = Path(".")
    audit: LabelAudit = field(default_factory=LabelAudit, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValueError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def partition(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.partition == name]

    def labels(self, records: Sequence[SampleRecord], stage: str) -> np.ndarray:
        """Audited label access. Test-partition labels are released only to ``stage='evaluate'``."""
        for part in sorted({r.partition for r in records}):
            self.audit.record(stage, part, sum(r.partition == part for r in records))
        return np.array([int(r.label) for r in records], dtype=np.int8)

    def resolve(self, record: SampleRecord) -> Path:
        path = Path(record.image_path)
        return path if path.is_absolute() else self.root / path

    def load_image(self, record: SampleRecord) -> GrayImage:
        return decode_image(self.resolve(record))

    def counts(self) -> dict[tuple[str, Label], int]:
        out: dict[tuple[str, Label], int] = {}
        for r in self.records:
            out[(r.partition, r.label)] = out.get((r.partition, r.label), 0) + 1
        return out


def _parse_center(raw_x: str, raw_y: str, lineno: int) -> tuple[float, float] | None:
    raw_x, raw_y = raw_x.strip(), raw_y.strip()
    if not raw_x and not raw_y:
        return None
    if not raw_x or not raw_y:
        raise ManifestError(f"line {lineno}: only one center coordinate given")
    try:
        x, y = float(raw_x), float(raw_y)
    except ValueError:
        raise ManifestError(f"line {lineno}: center is not numeric") from None
    if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
        raise ManifestError(f"line {lineno}: center must be finite and non-negative")
    return (x, y)


def parse_manifest(text: str, name: str = "dataset", root: Path = Path(".")) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("line 1: empty manifest") from None
    header = [h.strip() for h in header]
    if tuple(header) != MANIFEST_HEADER:
        raise ManifestError(f"line 1: expected header {','.join(MANIFEST_HEADER)}")
    records = []
    seen: dict[str, int] = {}
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
        sid, path, label, part, cx, cy = (c.strip() for c in row)
        if not sid or not path:
            raise ManifestError(f"line {lineno}: empty id or image_path")
        if label not in ("live", "attack"):
            raise ManifestError(f"line {lineno}: label must be live or attack, got {label!r}")
        if part not in PARTITIONS:
            raise ManifestError(f"line {lineno}: unknown partition {part!r}")
        if sid in seen:
            raise ManifestError(f"duplicate id {sid!r} at line {lineno} (first seen at line {seen[sid]})")
        seen[sid] = lineno
        records.append(SampleRecord(sid, path, Label.parse(label), part, _parse_center(cx, cy, lineno)))
    return Dataset(name, tuple(records), root)


def load_manifest(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), name or path.stem, path.parent)


def _fmt(v: float) -> str:
    return f"{v:g}" if float(v) != int(v) else str(int(v))


def format_manifest(ds: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in ds.records:
        cx, cy = ("", "") if r.iris_center is None else (_fmt(r.iris_center[0]), _fmt(r.iris_center[1]))
        writer.writerow([r.id, r.image_path, r.label.manifest_name, r.partition, cx, cy])
    return buf.getvalue()


def combine(datasets: Iterable[Dataset], name: str = "Combined") -> Dataset:
    """Concatenate datasets, keeping each record's partition and prefixing ids with the source name."""
    records = []
    for ds in datasets:
        for r in ds.records:
            path = str(ds.resolve(r).resolve())
            records.append(replace(r, id=f"{ds.name}/{r.id}", image_path=path))
    return Dataset(name, tuple(records), Path("/"))


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    base = [math.floor(w) for w in weights]
    rest = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(weights[i] - base[i]), i))
    for i in order[:max(rest, 0)]:
        base[i] += 1
    return base


def split_validation(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Move round(fraction * |train|) train records to ``validation``, stratified by label.

    Per-class quotas come from largest-remainder rounding of ``fraction * class_count``.
    One generator seeded with ``seed`` permutes the bona fide train records first, then the
    attack records (each in manifest order); the first ``quota`` of each permutation move.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    train = [i for i, r in enumerate(ds.records) if r.partition == "train"]
    if not train:
        raise ValueError("dataset has no train records")
    total = math.floor(fraction * len(train) + 0.5)
    classes = (Label.BONA_FIDE, Label.ATTACK)
    members = [[i for i in train if ds.records[i].label == c] for c in classes]
    quotas = _largest_remainder(total, [fraction * len(m) for m in members])
    rng = np.random.default_rng(seed)
    chosen: set[int] = set()
    for idx, quota in zip(members, quotas):
        perm = rng.permutation(len(idx))
        chosen.update(idx[p] for p in perm[:quota])
    records = tuple(replace(r, partition="validation") if i in chosen else r
                    for i, r in enumerate(ds.records))
    return Dataset(ds.name, records, ds.root, ds.audit)
