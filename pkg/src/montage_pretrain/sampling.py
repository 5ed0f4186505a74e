"""Positive/negative sample extraction from a detection index."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset_io import BBox, DatasetIndex

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"

MANIFEST_MAGIC = "# montage-samples v1"
MANIFEST_COLUMNS = ("image_id", "image_path", "x_min", "y_min", "x_max", "y_max", "label", "polarity", "group")


@dataclass(frozen=True)
class SampleRecord:
    image_id: int
    region: BBox
    label: int
    polarity: str
    image_path: str = ""
    group: str | None = None


@dataclass(frozen=True)
class SampleSet:
    records: tuple[SampleRecord, ...]
    num_categories: int
    seed: int
    ratio: float

    @property
    def pos_count(self) -> int:
        return sum(r.polarity == POSITIVE for r in self.records)

    @property
    def neg_count(self) -> int:
        return sum(r.polarity == NEGATIVE for r in self.records)

    @property
    def num_classes(self) -> int:
        """Classifier outputs: C foreground categories plus background."""
        return self.num_categories + 1


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def enlarge_positive(box: BBox, image_w: float, image_h: float, rng: np.random.Generator,
                     draws=None) -> BBox:
    """Push each side outwards by a uniform fraction of half the box extent.

    ``draws`` overrides the four factors (left, top, right, bottom).
    """
    ul, ut, ur, ub = rng.uniform(0.0, 1.0, size=4) if draws is None else draws
    w, h = box.width, box.height
    return BBox(
        max(0.0, box.x_min - ul * w / 2),
        max(0.0, box.y_min - ut * h / 2),
        min(float(image_w), box.x_max + ur * w / 2),
        min(float(image_h), box.y_max + ub * h / 2),
    )


def sample_negatives(image_w: int, image_h: int, positives: list[BBox], count: int,
                     rng: np.random.Generator, retry_budget: int | None = None,
                     min_side: float = 16.0, max_frac: float = 0.5) -> tuple[list[BBox], int]:
    """Draw background boxes with zero overlap against every positive.

    Returns ``(boxes, shortfall)``; shortfall > 0 when the retry budget ran out.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if retry_budget is None:
        retry_budget = 50 * count
    lo = min(min_side, image_w, image_h)
    hi = max(lo, min(max_frac * min(image_w, image_h), image_w, image_h))
    out: list[BBox] = []
    attempts = 0
    while len(out) < count and attempts < retry_budget:
        attempts += 1
        bw, bh = np.exp(rng.uniform(math.log(lo), math.log(hi), size=2)) if hi > lo else (lo, lo)
        x0 = rng.uniform(0.0, image_w - bw)
        y0 = rng.uniform(0.0, image_h - bh)
        cand = BBox(float(x0), float(y0), min(float(x0 + bw), float(image_w)), min(float(y0 + bh), float(image_h)))
        if all(iou(cand, p) == 0.0 for p in positives):
            out.append(cand)
    return out, count - len(out)


def _image_rng(seed: int, image_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, int(image_id)])


def build_sample_set(index: DatasetIndex, ratio: float = 10.0, seed: int = 0,
                     with_negatives: bool = True, min_side: float = 16.0,
                     max_frac: float = 0.5) -> SampleSet:
    """Enlarged positives for every annotation plus ``round(pos / ratio)`` negatives.

    Negatives are spread over images uniformly at random (images without
    annotations included); a shortfall on a crowded image is handed on to
    other images instead of relaxing the zero-overlap rule.
    """
    if not index.annotations:
        raise ValueError("dataset has no annotations; positives are required to anchor the sample set")
    if ratio <= 0:
        raise ValueError("ratio must be positive")

    records: list[SampleRecord] = []
    boxes_by_image: dict[int, list[BBox]] = {im.id: [] for im in index.images}
    for im in index.images:
        rng = _image_rng(seed, im.id, 0)
        for ann in index.annotations_for(im.id):
            region = enlarge_positive(ann.bbox, im.width, im.height, rng)
            # enlarged region contains the ground truth, so clearing it clears both
            boxes_by_image[im.id].append(region)
            records.append(SampleRecord(im.id, region, index.label_of(ann.category_id), POSITIVE,
                                        index.image_path(im.id)))

    pos_count = len(records)
    neg_target = round_half_up(pos_count / ratio) if with_negatives else 0

    alloc_rng = np.random.default_rng([seed, 1])
    image_ids = [im.id for im in index.images]
    exhausted: set[int] = set()
    negatives: dict[int, list[BBox]] = {i: [] for i in image_ids}
    deficit = neg_target
    round_no = 0
    while deficit > 0:
        open_ids = [i for i in image_ids if i not in exhausted]
        if not open_ids:
            log.warning("could only place %d of %d negatives", neg_target - deficit, neg_target)
            break
        picks = alloc_rng.choice(len(open_ids), size=deficit, replace=True)
        wanted = np.bincount(picks, minlength=len(open_ids))
        deficit = 0
        for i, n in zip(open_ids, wanted):
            if n == 0:
                continue
            im = index.image(i)
            got, short = sample_negatives(im.width, im.height, boxes_by_image[i], int(n),
                                          _image_rng(seed, i, 2 + round_no), min_side=min_side,
                                          max_frac=max_frac)
            negatives[i].extend(got)
            if short:
                exhausted.add(i)
                deficit += short
        round_no += 1

    for i in image_ids:
        for box in negatives[i]:
            records.append(SampleRecord(i, box, index.background_label, NEGATIVE, index.image_path(i)))
    return SampleSet(tuple(records), index.num_categories, seed, float(ratio))


def write_manifest(path: str | Path, samples: SampleSet) -> None:
    lines = [
        f"{MANIFEST_MAGIC} num_categories={samples.num_categories} seed={samples.seed} ratio={samples.ratio!r}",
        "\t".join(MANIFEST_COLUMNS),
    ]
    for r in samples.records:
        b = r.region
        lines.append("\t".join([
            str(r.image_id), r.image_path, repr(b.x_min), repr(b.y_min), repr(b.x_max), repr(b.y_max),
            str(r.label), r.polarity, r.group or "-",
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> SampleSet:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(MANIFEST_MAGIC):
        raise ValueError(f"{path}: not a sample manifest")
    meta = dict(kv.split("=", 1) for kv in text[0][len(MANIFEST_MAGIC):].split())
    if tuple(text[1].split("\t")) != MANIFEST_COLUMNS:
        raise ValueError(f"{path}: unexpected column header")
    records = []
    for n, line in enumerate(text[2:], start=3):
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise ValueError(f"{path}:{n}: expected {len(MANIFEST_COLUMNS)} columns")
        box = BBox(*(float(c) for c in cols[2:6]))
        records.append(SampleRecord(int(cols[0]), box, int(cols[6]), cols[7], cols[1],
                                    None if cols[8] == "-" else cols[8]))
    return SampleSet(tuple(records), int(meta["num_categories"]), int(meta["seed"]), float(meta["ratio"]))


def with_groups(samples: SampleSet, groups: list[str]) -> SampleSet:
    records = tuple(replace(r, group=g) for r, g in zip(samples.records, groups, strict=True))
    return replace(samples, records=records)
