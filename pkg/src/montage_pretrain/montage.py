"""Aspect grouping, per-sample augmentation and four-region Montage assembly.

Template layout (regions numbered 1..4 in this order everywhere)::

    +--------+-----------------+
    | 1: S   | 2: W            |   split_y
    | small  |                 |
    +--------+-----------------+
    | 3: T   | 4: S large      |
    |        |                 |
    +--------+-----------------+
      split_x
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .dataset_io import BBox, ImageBuffer, load_image
from .sampling import SampleRecord, SampleSet, round_half_up, with_groups

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])

SQUARE, TALL, WIDE = "S", "T", "W"
SLOT_GROUPS = (SQUARE, WIDE, TALL, SQUARE)  # region 1..4
REGION_NAMES = ("top-left", "top-right", "bottom-left", "bottom-right")
ADJUST_MODES = ("padcrop", "warp", "resize")


class TemplateError(ValueError):
    pass


class GroupError(ValueError):
    pass


def classify_aspect(width: float, height: float) -> str:
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    ar = width / height
    if ar < 0.5:
        return TALL
    if ar > 1.5:
        return WIDE
    return SQUARE


def assign_groups(samples: SampleSet) -> SampleSet:
    return with_groups(samples, [classify_aspect(r.region.width, r.region.height) for r in samples.records])


@dataclass(frozen=True)
class MontageTemplate:
    canvas_w: int
    canvas_h: int
    split_x: int
    split_y: int

    @property
    def regions(self) -> tuple[BBox, BBox, BBox, BBox]:
        w, h, sx, sy = self.canvas_w, self.canvas_h, self.split_x, self.split_y
        return (BBox(0, 0, sx, sy), BBox(sx, 0, w, sy), BBox(0, sy, sx, h), BBox(sx, sy, w, h))

    def region_slices(self, i: int) -> tuple[slice, slice]:
        """(rows, cols) slices of region ``i`` (0-based) on a canvas array."""
        r = self.regions[i]
        return slice(int(r.y_min), int(r.y_max)), slice(int(r.x_min), int(r.x_max))

    def region_sizes(self) -> list[tuple[int, int]]:
        return [(int(r.width), int(r.height)) for r in self.regions]

    def region_areas(self) -> np.ndarray:
        return np.array([r.area for r in self.regions], dtype=float)

    def region_of(self, x: float, y: float) -> int:
        """0-based region index of the canvas point (x, y)."""
        if not (0 <= x < self.canvas_w and 0 <= y < self.canvas_h):
            raise ValueError(f"point ({x}, {y}) is outside the {self.canvas_w}x{self.canvas_h} canvas")
        return (2 if y >= self.split_y else 0) + (1 if x >= self.split_x else 0)

    def spec(self) -> str:
        return f"{self.canvas_w}x{self.canvas_h}:{self.split_x},{self.split_y}"


def make_template(canvas_w: int, canvas_h: int, split_x: int, split_y: int) -> MontageTemplate:
    if not (0 < split_x < canvas_w and 0 < split_y < canvas_h):
        raise TemplateError(f"split ({split_x}, {split_y}) must lie strictly inside the canvas")
    tr_ar = (canvas_w - split_x) / split_y
    bl_ar = split_x / (canvas_h - split_y)
    if not tr_ar > 1.5:
        raise TemplateError(f"top-right region aspect {tr_ar:.3f} must exceed 1.5 to hold W-samples")
    if not bl_ar < 0.5:
        raise TemplateError(f"bottom-left region aspect {bl_ar:.3f} must be below 0.5 to hold T-samples")
    return MontageTemplate(int(canvas_w), int(canvas_h), int(split_x), int(split_y))


def parse_template(text: str) -> MontageTemplate:
    """Parse ``WxH:SX,SY``."""
    try:
        size, split = text.split(":")
        w, h = (int(v) for v in size.lower().split("x"))
        sx, sy = (int(v) for v in split.split(","))
    except ValueError:
        raise TemplateError(f"template must look like WxH:SX,SY, got {text!r}") from None
    return make_template(w, h, sx, sy)


def normalize(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float64) / 255.0 - MEAN) / STD


def denormalize(pixels: np.ndarray) -> np.ndarray:
    """Normalized float pixels back to uint8 for viewing."""
    raw = (pixels * STD + MEAN) * 255.0
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8)


def _resize_uint8(data: np.ndarray, w: int, h: int) -> np.ndarray:
    return np.asarray(Image.fromarray(data).resize((w, h), Image.BILINEAR))


def _resize_float(data: np.ndarray, w: int, h: int) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(data[:, :, c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
             for c in range(data.shape[2])]
    return np.stack(chans, axis=2).astype(np.float64)


def augment(patch: ImageBuffer, rng: np.random.Generator, ratio: float | None = None,
            flip: bool | None = None, scale_range=(0.8, 1.5), flip_prob: float = 0.5) -> ImageBuffer:
    """Random isotropic resize, random horizontal flip, then channel normalization.

    Both random draws are always consumed so the stream stays aligned when
    ``ratio`` or ``flip`` is forced.
    """
    r_draw = rng.uniform(*scale_range)
    f_draw = rng.uniform() < flip_prob
    ratio = r_draw if ratio is None else ratio
    flip = f_draw if flip is None else flip
    data = patch.data
    if patch.normalized:
        raise ValueError("augment expects raw uint8 pixels")
    nw = max(1, round_half_up(patch.width * ratio))
    nh = max(1, round_half_up(patch.height * ratio))
    if (nw, nh) != (patch.width, patch.height):
        data = _resize_uint8(data, nw, nh)
    if flip:
        data = data[:, ::-1]
    return ImageBuffer(normalize(data))


def hflip(patch: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(patch.data[:, ::-1].copy())


def _fit_axis(data: np.ndarray, axis: int, target: int, rng: np.random.Generator) -> np.ndarray:
    size = data.shape[axis]
    if size > target:
        off = int(rng.integers(0, size - target + 1))
        return np.take(data, np.arange(off, off + target), axis=axis)
    if size < target:
        before = (target - size) // 2
        pad = [(0, 0)] * data.ndim
        pad[axis] = (before, target - size - before)
        return np.pad(data, pad)
    return data


def adjust_to_region(patch: ImageBuffer, target_w: int, target_h: int, rng: np.random.Generator,
                     mode: str = "padcrop") -> ImageBuffer:
    """Fit a normalized patch to ``target_w x target_h``.

    ``padcrop`` (default) random-crops oversize axes and centre-pads
    undersize ones with 0. ``warp`` and ``resize`` are comparison baselines:
    stretch to the target, or scale to fit (aspect kept) and then pad.
    """
    data = patch.data
    if mode == "warp":
        return ImageBuffer(_resize_float(data, target_w, target_h))
    if mode == "resize":
        s = min(target_w / patch.width, target_h / patch.height)
        nw = min(target_w, max(1, round_half_up(patch.width * s)))
        nh = min(target_h, max(1, round_half_up(patch.height * s)))
        data = _resize_float(data, nw, nh)
    elif mode != "padcrop":
        raise ValueError(f"unknown adjust mode {mode!r}")
    data = _fit_axis(data, 1, target_w, rng)
    data = _fit_axis(data, 0, target_h, rng)
    return ImageBuffer(np.ascontiguousarray(data))


@dataclass
class AssembledImage:
    pixels: ImageBuffer
    labels: np.ndarray  # (4, C+1) one-hot, row i for region i
    records: tuple[SampleRecord, ...]
    indices: tuple[int, ...]  # positions in the sample set

    def chw(self) -> np.ndarray:
        return self.pixels.data.transpose(2, 0, 1)


def one_hot(label: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[label] = 1.0
    return y


def _group_of(rec: SampleRecord) -> str:
    return rec.group or classify_aspect(rec.region.width, rec.region.height)


def assemble(s_small, s_large, t, w, template: MontageTemplate, rng: np.random.Generator,
             num_classes: int, mode: str = "padcrop", check_groups: bool = True) -> AssembledImage:
    """Stitch four ``(record, uint8 patch, index)`` triples into one canvas.

    Slots are filled in region order (small S, W, T, large S); within each
    slot the patch is augmented then adjusted, drawing from ``rng``.
    """
    slots = (s_small, w, t, s_large)
    if check_groups:
        for (rec, _, _), want, name in zip(slots, SLOT_GROUPS, REGION_NAMES):
            got = _group_of(rec)
            if got != want:
                raise GroupError(f"{name} slot needs a {want}-sample, got a {got}-sample")
        if s_small[0].region.area > s_large[0].region.area:
            raise GroupError("top-left S-sample must not be larger than the bottom-right one")
    canvas = np.zeros((template.canvas_h, template.canvas_w, 3))
    for i, (_, patch, _) in enumerate(slots):
        tw, th = template.region_sizes()[i]
        fitted = adjust_to_region(augment(patch, rng), tw, th, rng, mode=mode)
        rows, cols = template.region_slices(i)
        canvas[rows, cols] = fitted.data
    labels = np.stack([one_hot(rec.label, num_classes) for rec, _, _ in slots])
    return AssembledImage(ImageBuffer(canvas), labels, tuple(s[0] for s in slots), tuple(s[2] for s in slots))


class PatchSource:
    """Crops sample regions out of their source images, caching decoded images."""

    def __init__(self, cache_size: int = 512):
        self._load = lru_cache(maxsize=cache_size)(load_image)

    def __call__(self, rec: SampleRecord) -> ImageBuffer:
        img = self._load(rec.image_path)
        b = rec.region
        x0, y0 = int(math.floor(b.x_min)), int(math.floor(b.y_min))
        x1 = max(x0 + 1, min(img.width, int(math.ceil(b.x_max))))
        y1 = max(y0 + 1, min(img.height, int(math.ceil(b.y_max))))
        return ImageBuffer(img.data[y0:y1, x0:x1])


def partition_groups(samples: SampleSet, relax: bool = False) -> dict[str, list[int]]:
    """Sample indices per aspect group.

    With ``relax``, an empty T or W group borrows the S-samples whose aspect
    ratio is closest to it (a quarter of S, at least one), keeping two in S.
    """
    groups: dict[str, list[int]] = {SQUARE: [], TALL: [], WIDE: []}
    ars = []
    for i, rec in enumerate(samples.records):
        groups[_group_of(rec)].append(i)
        ars.append(rec.region.width / rec.region.height)
    if relax:
        for g in (TALL, WIDE):
            if groups[g] or len(groups[SQUARE]) < 3:
                continue
            k = max(1, min(len(groups[SQUARE]) // 4, len(groups[SQUARE]) - 2))
            order = sorted(groups[SQUARE], key=lambda i: (ars[i], i), reverse=(g == WIDE))
            moved = order[:k] if g == TALL else sorted(order[:k])
            groups[g] = sorted(moved)
            groups[SQUARE] = [i for i in groups[SQUARE] if i not in set(moved)]
    for g, members in groups.items():
        if (g == SQUARE and len(members) < 2) or not members:
            raise GroupError(
                f"group {g} has {len(members)} samples, not enough to fill a template; "
                "pass --relax-groups to borrow from the nearest S-samples")
    return groups


def epoch_plan(groups: dict[str, list[int]], samples: SampleSet, seed: int, epoch: int,
               replacement: bool = False) -> list[tuple[int, int, int, int]]:
    """(s_small, s_large, t, w) sample indices for every image of one epoch."""
    rng = np.random.default_rng([seed, 7, epoch])
    s, t, w = (np.array(groups[g]) for g in (SQUARE, TALL, WIDE))
    n = min(len(s) // 2, len(t), len(w))
    if replacement:
        s_pick = rng.choice(s, size=2 * n, replace=True)
        t_pick = rng.choice(t, size=n, replace=True)
        w_pick = rng.choice(w, size=n, replace=True)
    else:
        s_pick, t_pick, w_pick = rng.permutation(s), rng.permutation(t), rng.permutation(w)
    plan = []
    for i in range(n):
        a, b = int(s_pick[2 * i]), int(s_pick[2 * i + 1])
        area_a, area_b = samples.records[a].region.area, samples.records[b].region.area
        small, large = (a, b) if (area_a, a) <= (area_b, b) else (b, a)
        plan.append((small, large, int(t_pick[i]), int(w_pick[i])))
    return plan


def batch_stream(samples: SampleSet, source, template: MontageTemplate, batch_size: int, seed: int,
                 epochs: int | None = None, replacement: bool = False, relax_groups: bool = False,
                 mode: str = "padcrop", jobs: int = 1) -> Iterator[list[AssembledImage]]:
    """Endless (or ``epochs``-long) stream of assembled-image batches.

    Image ``i`` of epoch ``e`` is built from ``default_rng([seed, e, i])``, so
    output does not depend on ``jobs``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = partition_groups(samples, relax=relax_groups)
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None

    def build(job):
        epoch, i, (a, b, t, w) = job
        rng = np.random.default_rng([seed, epoch, i])
        picks = [(samples.records[k], source(samples.records[k]), k) for k in (a, b, t, w)]
        return assemble(*picks, template, rng, samples.num_classes, mode=mode,
                        check_groups=not relax_groups)

    def jobs_iter():
        epoch = 0
        while epochs is None or epoch < epochs:
            for i, quad in enumerate(epoch_plan(groups, samples, seed, epoch, replacement)):
                yield epoch, i, quad
            epoch += 1

    try:
        pending = []
        for job in jobs_iter():
            pending.append(job)
            if len(pending) == batch_size:
                yield list(pool.map(build, pending)) if pool else [build(j) for j in pending]
                pending = []
        if pending:
            yield list(pool.map(build, pending)) if pool else [build(j) for j in pending]
    finally:
        if pool:
            pool.shutdown(wait=False)


def stack_batch(batch: Sequence[AssembledImage]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3, H, W) inputs and (N, 4, C+1) region labels."""
    x = np.stack([im.chw() for im in batch])
    y = np.stack([im.labels for im in batch])
    return np.ascontiguousarray(x), y
