"""Compose filtering, splitting, region derivation and tagging into a manifest."""

from __future__ import annotations

import logging

from ..datamodel import (
    DEFAULT_GAMMA,
    MIN_INSTANCES,
    BenchmarkManifest,
    ImageRecord,
    ObjectInstance,
    derive_seed,
    keyed_rng,
    rle_bbox,
    validate_manifest,
)
from .geometry import enlarge_and_jitter
from .raw import RawAnnotationSet
from .splits import assign_subsets, filter_categories, split_base_novel

log = logging.getLogger(__name__)

BUILD_PURPOSES = ("novel_split", "base_val", "support", "jitter")


def build_manifest(
    raw: RawAnnotationSet,
    gamma: float = DEFAULT_GAMMA,
    global_seed: int = 0,
    min_count: int = MIN_INSTANCES,
    header: dict | None = None,
) -> BenchmarkManifest:
    seeds = {"global": int(global_seed)}
    seeds.update({p: derive_seed(global_seed, p) for p in BUILD_PURPOSES})

    categories = filter_categories(raw, min_count)
    categories = split_base_novel(categories, seeds["novel_split"])
    by_name = {c.name: c for c in categories}
    targets = {c.name for c in categories if c.split in ("base", "novel_val", "novel_test")}

    scene_names = tuple(raw.scene_names) or tuple(sorted({im.scene for im in raw.images if im.scene is not None}))
    scene_index = {s: i for i, s in enumerate(scene_names)}

    instances = []
    per_image: dict[int, list[int]] = {}
    next_id = 0
    for im in sorted(raw.images, key=lambda r: r.image_id):
        ids = per_image.setdefault(im.image_id, [])
        for o in im.objects:
            if o.name not in targets:
                continue
            tight = rle_bbox(o.mask)
            region = enlarge_and_jitter(tight, (im.height, im.width), gamma, keyed_rng(seeds["jitter"], next_id))
            parts = sorted({by_name[p].category_id for p in o.parts if by_name[p].kind == "part"})
            instances.append(
                ObjectInstance(
                    instance_id=next_id,
                    image_id=im.image_id,
                    category_id=by_name[o.name].category_id,
                    tight_box=tight,
                    region_box=region,
                    mask=o.mask,
                    part_labels=tuple(parts),
                )
            )
            ids.append(next_id)
            next_id += 1

    instances = assign_subsets(categories, instances, seeds["base_val"], seeds["support"])
    images = tuple(
        ImageRecord(
            image_id=im.image_id,
            uri=im.uri,
            width=im.width,
            height=im.height,
            scene_label=scene_index.get(im.scene) if im.scene is not None else None,
            stuff_mask_uri=im.stuff_mask_uri,
            instance_ids=tuple(per_image[im.image_id]),
        )
        for im in sorted(raw.images, key=lambda r: r.image_id)
    )
    manifest = BenchmarkManifest(
        categories=tuple(categories),
        images=images,
        instances=tuple(instances),
        context_ratio=float(gamma),
        seeds=seeds,
        regime="full",
        attribute_names=tuple(raw.attribute_names),
        scene_names=scene_names,
        header=dict(header or {}),
    )
    problems = validate_manifest(manifest)
    if problems:
        raise ValueError("built manifest failed validation:\n  " + "\n  ".join(problems[:20]))
    log.info(
        "built manifest: %d base, %d novel-val, %d novel-test categories; %d instances",
        len(manifest.categories_in("base")),
        len(manifest.categories_in("novel_val")),
        len(manifest.categories_in("novel_test")),
        len(instances),
    )
    return manifest


def split_summary(m: BenchmarkManifest) -> dict:
    """Category and instance counts per split/subset."""
    out = {}
    for split in ("base", "novel_val", "novel_test", "dropped"):
        out[f"categories_{split}"] = len(m.categories_in(split))
    for subset in ("base_train", "base_val", "novel_support", "novel_query"):
        out[f"instances_{subset}"] = len(m.instances_in(subset))
    out["images"] = len(m.images)
    return out
