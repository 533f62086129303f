"""Procedural raw-annotation fixtures with long-tailed category counts.

Objects are axis-aligned rectangles with a per-category colour drawn over a
two-band stuff background (``sky`` on top, ``ground`` below).  Without an
output directory only annotations are produced, which is enough for the
benchmark and regime code; with one, PNG images and stuff masks are
written and referenced by relative URI.
"""

from __future__ import annotations

import colorsys
import json
from pathlib import Path

import numpy as np

from ..datamodel import rle_encode
from .raw import RawAnnotationSet, RawCategory, RawImage, RawObject, raw_to_json

STUFF_NAMES = ("sky", "ground")


def zipf_counts(n_categories: int, alpha: float, total: int) -> list[int]:
    """Counts proportional to ``rank ** -alpha`` summing to ``total``."""
    weights = np.arange(1, n_categories + 1, dtype=float) ** -alpha
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(int)
    # largest remainders take the leftover units
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def category_color(k: int, n: int) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((k / max(n, 1)) % 1.0, 0.9, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def synthetic_raw(
    counts,
    image_size: tuple[int, int] = (64, 64),
    objects_per_image: int = 4,
    n_parts: int = 4,
    n_attributes: int = 8,
    n_scenes: int = 3,
    seed: int = 0,
) -> RawAnnotationSet:
    """Annotations for object categories ``obj000..`` with the given counts.

    Instances are shuffled and packed ``objects_per_image`` at a time into
    ``image_size = (H, W)`` images; each object gets a random rectangle inside
    its own vertical slot so objects never overlap.
    """
    rng = np.random.default_rng(seed)
    H, W = image_size
    counts = list(counts)
    n_obj = len(counts)
    cats = []
    for k in range(n_obj):
        name = f"obj{k:03d}"
        cats.append(
            RawCategory(
                name=name,
                kind="object",
                attributes=tuple(int(b) for b in rng.integers(0, 2, n_attributes)),
                hierarchy=("entity", f"group{k % 2}", f"group{k % 2}.{k % 4}", name),
            )
        )
    part_names = [f"part{p}" for p in range(n_parts)]
    cats += [RawCategory(p, "part") for p in part_names]
    cats += [RawCategory(s, "stuff") for s in STUFF_NAMES]
    part_sets = [tuple(sorted(rng.choice(part_names, size=min(2, n_parts), replace=False).tolist())) if n_parts else () for _ in range(n_obj)]
    scene_names = tuple(f"scene{s}" for s in range(n_scenes))

    labels = np.repeat(np.arange(n_obj), counts)
    rng.shuffle(labels)
    slot_w = W // objects_per_image
    if slot_w < 4 or H < 8:
        raise ValueError("image too small for the requested objects per image")
    images = []
    for image_id, start in enumerate(range(0, len(labels), objects_per_image)):
        objects = []
        for slot, k in enumerate(labels[start : start + objects_per_image]):
            w = int(rng.integers(max(2, slot_w // 2), slot_w + 1))
            h = int(rng.integers(max(2, H // 4), H // 2 + 1))
            x = slot * slot_w + int(rng.integers(0, slot_w - w + 1))
            y = int(rng.integers(0, H - h + 1))
            m = np.zeros((H, W), dtype=bool)
            m[y : y + h, x : x + w] = True
            objects.append(RawObject(cats[k].name, rle_encode(m), part_sets[k]))
        scene = scene_names[int(rng.integers(0, n_scenes))] if n_scenes else None
        images.append(RawImage(image_id, f"images/{image_id:06d}.png", W, H, scene, None, objects))
    attr_names = tuple(f"attr{a}" for a in range(n_attributes))
    return RawAnnotationSet(cats, images, attr_names, scene_names)


def render(raw: RawAnnotationSet, out_dir, seed: int = 0, noise: float = 8.0) -> RawAnnotationSet:
    """Write PNG images and stuff masks for ``raw`` below ``out_dir``.

    Returns ``raw`` with ``stuff_mask_uri`` filled in; URIs are relative to
    ``out_dir``.  Stuff label values are ``1 + category id`` (the category's
    position in ``raw.categories``); 0 means no stuff label.
    """
    from PIL import Image

    from ..datamodel import rle_decode

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "stuff").mkdir(parents=True, exist_ok=True)
    objects = [c for c in raw.categories if c.kind == "object"]
    colors = {c.name: category_color(k, len(objects)) for k, c in enumerate(objects)}
    stuff_value = {c.name: i + 1 for i, c in enumerate(raw.categories) if c.kind == "stuff"}
    rng = np.random.default_rng(seed)
    for im in raw.images:
        H, W = im.height, im.width
        split = H // 2
        pix = np.empty((H, W, 3), dtype=float)
        pix[:split] = (150, 190, 230)
        pix[split:] = (110, 90, 60)
        stuff = np.zeros((H, W), dtype=np.uint16)
        stuff[:split] = stuff_value.get("sky", 0)
        stuff[split:] = stuff_value.get("ground", 0)
        for o in im.objects:
            m = rle_decode(o.mask)
            if o.name in colors:
                pix[m] = colors[o.name]
            stuff[m] = 0
        pix += rng.normal(0.0, noise, pix.shape)
        Image.fromarray(np.clip(pix, 0, 255).astype(np.uint8)).save(out_dir / im.uri)
        im.stuff_mask_uri = f"stuff/{im.image_id:06d}.png"
        Image.fromarray(stuff).save(out_dir / im.stuff_mask_uri)
    return raw


def write_fixture(raw: RawAnnotationSet, path) -> None:
    Path(path).write_text(json.dumps(raw_to_json(raw), sort_keys=True) + "\n", encoding="utf-8")
