"""Deterministic synthetic detection dataset: coloured shapes on textured noise.

Four categories (ellipse, box, triangle, cross), each with its own hue, drawn
square, tall or wide so that every aspect group is populated.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

CATEGORIES = ("ellipse", "box", "triangle", "cross")
HUES = ((210, 50, 40), (40, 170, 60), (40, 70, 200), (220, 190, 30))


def _background(rng: np.random.Generator, w: int, h: int) -> Image.Image:
    base = rng.uniform(90, 150)
    coarse = rng.normal(0, 18, size=(h // 8 + 1, w // 8 + 1))
    coarse = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    fine = rng.normal(0, 10, size=(h, w))
    gray = np.clip(base + coarse + fine, 0, 255)
    tint = rng.uniform(-8, 8, size=3)
    rgb = np.clip(gray[:, :, None] + tint, 0, 255).astype(np.uint8)
    return Image.fromarray(rgb)


def _shape_box(rng: np.random.Generator, w: int, h: int):
    kind = rng.choice(3, p=[0.5, 0.25, 0.25])
    if kind == 0:
        side = rng.uniform(20, 44)
        bw, bh = side * rng.uniform(0.85, 1.15), side * rng.uniform(0.85, 1.15)
    else:
        long_side, short = rng.uniform(44, 72), rng.uniform(10, 16)
        bw, bh = (short, long_side) if kind == 1 else (long_side, short)
    bw, bh = int(min(bw, w - 2)), int(min(bh, h - 2))
    x0 = int(rng.integers(0, w - bw))
    y0 = int(rng.integers(0, h - bh))
    return x0, y0, bw, bh


def _draw(draw: ImageDraw.ImageDraw, cat: int, box, color):
    x0, y0, bw, bh = box
    x1, y1 = x0 + bw - 1, y0 + bh - 1
    if cat == 0:
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif cat == 1:
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif cat == 2:
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2, y0)], fill=color)
    else:
        tx, ty = max(2, bw // 3), max(2, bh // 3)
        draw.rectangle([x0, y0 + ty, x1, y1 - ty], fill=color)
        draw.rectangle([x0 + tx, y0, x1 - tx, y1], fill=color)


def _overlaps(a, b) -> bool:
    return not (a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1])


def generate_shapes(out_dir: str | Path, n_images: int = 400, seed: int = 0, size: int = 128,
                    max_objects: int = 3, image_ext: str = "png") -> Path:
    """Write images plus ``annotations.json``; returns the annotation path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        img = _background(rng, size, size)
        draw = ImageDraw.Draw(img)
        placed = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(20):
                box = _shape_box(rng, size, size)
                if not any(_overlaps(box, p) for p in placed):
                    break
            else:
                continue
            cat = int(rng.integers(0, len(CATEGORIES)))
            jitter = rng.integers(-25, 26, size=3)
            color = tuple(int(np.clip(c + d, 0, 255)) for c, d in zip(HUES[cat], jitter))
            _draw(draw, cat, box, color)
            placed.append(box)
            annotations.append({"image_id": i + 1, "bbox": [box[0], box[1], box[2], box[3]],
                                "category_id": cat + 1, "iscrowd": 0})
        name = f"images/{i:05d}.{image_ext}"
        img.save(out / name)
        images.append({"id": i + 1, "file_name": name, "width": size, "height": size})
    doc = {
        "info": {"description": "synthetic shapes", "seed": seed},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c + 1, "name": n} for c, n in enumerate(CATEGORIES)],
    }
    path = out / "annotations.json"
    path.write_text(json.dumps(doc, indent=1))
    return path
