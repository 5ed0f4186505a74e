"""Detection annotation parsing and raster image I/O.

The annotation document is a JSON subset of the common detection export
layout::

    {
      "images":      [{"id": 1, "file_name": "a.png", "width": 640, "height": 480}],
      "annotations": [{"image_id": 1, "bbox": [x, y, w, h], "category_id": 3}],
      "categories":  [{"id": 3, "name": "car"}]
    }

Boxes are converted to corner form and clamped to the image. Boxes that end
up 1px or thinner on either axis are dropped and counted in
``DatasetIndex.dropped``. Unknown keys (``iscrowd``, ``segmentation``,
``info``...) are ignored by the pipeline but kept for serialization.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "BBox",
    "ImageInfo",
    "Annotation",
    "Category",
    "DatasetIndex",
    "ImageBuffer",
    "AnnotationParseError",
    "ReferentialIntegrityError",
    "ImageDecodeError",
    "parse_annotations",
    "serialize_annotations",
    "load_annotations",
    "load_image",
    "save_ppm",
]

MIN_SIDE = 1.0


class AnnotationParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ReferentialIntegrityError(ValueError):
    pass


class ImageDecodeError(OSError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner form, pixel units."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = tuple(float(c) for c in (self.x_min, self.y_min, self.x_max, self.y_max))
        for name, c in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, c)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if min(coords) < 0:
            raise ValueError(f"negative box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"empty box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, other: "BBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and other.x_max <= self.x_max and other.y_max <= self.y_max)

    def within(self, width: float, height: float) -> bool:
        return self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int
    extra: dict = field(default_factory=dict, compare=True)


@dataclass(frozen=True)
class Annotation:
    image_id: int
    bbox: BBox
    category_id: int
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetIndex:
    images: tuple[ImageInfo, ...]
    annotations: tuple[Annotation, ...]
    categories: tuple[Category, ...]
    dropped: int = field(default=0, compare=False)  # parse diagnostics, not content
    image_root: str | None = field(default=None, compare=False)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.categories:
            raise ReferentialIntegrityError("dataset declares no categories")
        object.__setattr__(self, "_images_by_id", {im.id: im for im in self.images})
        object.__setattr__(
            self, "_label_of", {c.id: i for i, c in enumerate(sorted(self.categories, key=lambda c: c.id))})

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def background_label(self) -> int:
        return self.num_categories

    def image(self, image_id: int) -> ImageInfo:
        return self._images_by_id[image_id]

    def label_of(self, category_id: int) -> int:
        """Contiguous training label in [0, C) for a category id."""
        return self._label_of[category_id]

    def category_names(self) -> list[str]:
        return [c.name for c in sorted(self.categories, key=lambda c: c.id)]

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def image_path(self, image_id: int) -> str:
        name = self.image(image_id).file_name
        return os.path.join(self.image_root, name) if self.image_root else name


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise AnnotationParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise AnnotationParseError(f"{where}: missing required key {key!r}")
    return obj[key]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise AnnotationParseError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise AnnotationParseError(f"{where}: non-finite value {value!r}")
    return value


def _clamp_box(x, y, w, h, width, height) -> tuple[float, float, float, float]:
    x0 = min(max(x, 0), width)
    y0 = min(max(y, 0), height)
    x1 = min(max(x + w, 0), width)
    y1 = min(max(y + h, 0), height)
    return x0, y0, x1, y1


def parse_annotations(data: bytes, image_root: str | os.PathLike | None = None) -> DatasetIndex:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise AnnotationParseError(f"invalid UTF-8: {e.reason}", e.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationParseError(e.msg, _byte_offset(text, e.pos)) from None
    if not isinstance(doc, dict):
        raise AnnotationParseError("top level must be an object", 0)

    images = []
    for n, im in enumerate(_require(doc, "images", "document")):
        where = f"images[{n}]"
        image_id = _require(im, "id", where)
        w, h = _require(im, "width", where), _require(im, "height", where)
        if not (isinstance(w, int) and isinstance(h, int)) or w <= 0 or h <= 0:
            raise AnnotationParseError(f"{where}: width/height must be positive integers")
        extra = {k: v for k, v in im.items() if k not in ("id", "file_name", "width", "height")}
        images.append(ImageInfo(image_id, str(_require(im, "file_name", where)), w, h, extra))
    by_id = {im.id: im for im in images}
    if len(by_id) != len(images):
        raise AnnotationParseError("duplicate image id")

    categories = []
    for n, cat in enumerate(_require(doc, "categories", "document")):
        where = f"categories[{n}]"
        extra = {k: v for k, v in cat.items() if k not in ("id", "name")}
        categories.append(Category(_require(cat, "id", where), str(cat.get("name", "")), extra))
    cat_ids = {c.id for c in categories}
    if len(cat_ids) != len(categories):
        raise AnnotationParseError("duplicate category id")

    annotations = []
    dropped = 0
    for n, ann in enumerate(_require(doc, "annotations", "document")):
        where = f"annotations[{n}]"
        image_id = _require(ann, "image_id", where)
        category_id = _require(ann, "category_id", where)
        if image_id not in by_id:
            raise ReferentialIntegrityError(f"{where}: unknown image_id {image_id!r}")
        if category_id not in cat_ids:
            raise ReferentialIntegrityError(f"{where}: unknown category_id {category_id!r}")
        box = _require(ann, "bbox", where)
        if not isinstance(box, list) or len(box) != 4:
            raise AnnotationParseError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (_number(v, f"{where}.bbox") for v in box)
        info = by_id[image_id]
        x0, y0, x1, y1 = _clamp_box(x, y, w, h, info.width, info.height)
        if x1 - x0 <= MIN_SIDE or y1 - y0 <= MIN_SIDE:
            dropped += 1
            continue
        extra = {k: v for k, v in ann.items() if k not in ("image_id", "bbox", "category_id")}
        annotations.append(Annotation(image_id, BBox(x0, y0, x1, y1), category_id, extra))

    top_extra = {k: v for k, v in doc.items() if k not in ("images", "annotations", "categories")}
    return DatasetIndex(
        tuple(images), tuple(annotations), tuple(categories), dropped,
        str(image_root) if image_root is not None else None, top_extra,
    )


def serialize_annotations(index: DatasetIndex) -> bytes:
    doc: dict[str, Any] = dict(index.extra)
    doc["images"] = [
        {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height, **im.extra}
        for im in index.images
    ]
    doc["annotations"] = [
        {"image_id": a.image_id,
         "bbox": [a.bbox.x_min, a.bbox.y_min, a.bbox.width, a.bbox.height],
         "category_id": a.category_id, **a.extra}
        for a in index.annotations
    ]
    doc["categories"] = [{"id": c.id, "name": c.name, **c.extra} for c in index.categories]
    return json.dumps(doc, indent=1).encode("utf-8")


def load_annotations(path: str | os.PathLike, image_root: str | os.PathLike | None = None) -> DatasetIndex:
    path = Path(path)
    if image_root is None:
        image_root = path.parent
    return parse_annotations(path.read_bytes(), image_root)


@dataclass
class ImageBuffer:
    """HxWx3 pixel array; uint8 before normalization, float64 after."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected HxWx3 data, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def normalized(self) -> bool:
        return self.data.dtype != np.uint8


def load_image(path: str | os.PathLike) -> ImageBuffer:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageDecodeError(f"cannot decode {path}: {e}") from e
    return ImageBuffer(np.asarray(rgb, dtype=np.uint8).copy())


def save_ppm(path: str | os.PathLike, image: ImageBuffer | np.ndarray) -> None:
    """Write binary P6; float input must already be mapped back to uint8."""
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image)
    if data.dtype != np.uint8:
        raise TypeError("save_ppm expects uint8 pixels")
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def split_by_image(index: DatasetIndex, holdout: float = 0.2, seed: int = 0) -> tuple[DatasetIndex, DatasetIndex]:
    """Disjoint (train, held-out) indices, split by image."""
    ids = sorted(im.id for im in index.images)
    rng = np.random.default_rng([seed, 3])
    n_hold = int(round(holdout * len(ids)))
    held = set(rng.permutation(ids)[:n_hold].tolist())

    def subset(keep):
        return DatasetIndex(
            tuple(im for im in index.images if keep(im.id)),
            tuple(a for a in index.annotations if keep(a.image_id)),
            index.categories, 0, index.image_root, index.extra,
        )

    return subset(lambda i: i not in held), subset(lambda i: i in held)
