"""Data-scarcity regimes and supervision subsampling derived from a full manifest.

Every operation returns a new manifest whose ``regime`` records the hash of
the full manifest it came from, the operation name and its parameters.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from collections import defaultdict
from fractions import Fraction
from typing import Iterable

from .datamodel import (
    IMAGE_HEADS,
    OBJECT_HEADS,
    BenchmarkManifest,
    Provenance,
    derive_seed,
    keyed_rng,
    manifest_hash,
)

SUPERVISION_HEADS = OBJECT_HEADS + IMAGE_HEADS


def _ratio(value, name: str, lo_open: bool) -> Fraction:
    # decimal string keeps e.g. 0.7 from turning into 0.69999...
    try:
        r = Fraction(repr(float(value)))
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a number, got {value!r}") from None
    if (r <= 0 if lo_open else r < 0) or r > 1:
        interval = "(0, 1]" if lo_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return r


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)) // 1)


def _require_full(m: BenchmarkManifest, op: str) -> None:
    if not m.is_full:
        raise ValueError(f"{op} needs a full manifest; got regime {m.regime.op!r}")


def _derive(m: BenchmarkManifest, op: str, params: dict, keep_ids: set[int] | None, drop_categories=(), **changes):
    """New manifest restricted to ``keep_ids`` instances, with provenance."""
    instances = m.instances
    images = m.images
    categories = m.categories
    if drop_categories:
        drop = set(drop_categories)
        categories = tuple(c for c in categories if c.category_id not in drop)
    if keep_ids is not None:
        instances = tuple(o for o in instances if o.instance_id in keep_ids)
        images = tuple(
            dataclasses.replace(im, instance_ids=tuple(i for i in im.instance_ids if i in keep_ids)) for im in images
        )
    fields = dict(
        categories=categories,
        images=images,
        instances=instances,
        regime=Provenance(manifest_hash(m), op, params),
    )
    fields.update(changes)
    return m.replace(**fields)


def scarce_class_removed(m: BenchmarkManifest, keep_ratio) -> list[int]:
    """Ids of the base categories a Scarce-Class cut removes, in removal order."""
    r = _ratio(keep_ratio, "keep_ratio", lo_open=True)
    base = sorted(m.categories_in("base"), key=lambda c: (c.instance_count, c.category_id))
    n_remove = int((1 - r) * len(base) // 1)
    return [c.category_id for c in base[:n_remove]]


def scarce_class(m: BenchmarkManifest, keep_ratio) -> BenchmarkManifest:
    """Drop the least frequent ``floor((1 - keep_ratio) * N_base)`` base categories."""
    _require_full(m, "scarce_class")
    removed = set(scarce_class_removed(m, keep_ratio))
    keep = {o.instance_id for o in m.instances if o.category_id not in removed}
    return _derive(
        m,
        "scarce_class",
        {"keep_ratio": float(keep_ratio), "removed_categories": sorted(removed)},
        keep,
        drop_categories=removed,
    )


def base_training_images(m: BenchmarkManifest) -> list[int]:
    return sorted({o.image_id for o in m.instances if o.subset == "base_train"})


def scarce_image(m: BenchmarkManifest, keep_ratio, seed: int) -> BenchmarkManifest:
    """Keep ``round(keep_ratio * N)`` base-training images chosen uniformly.

    Only ``base_train`` instances of dropped images are removed.  Base
    categories left without training instances stay and are listed under
    ``orphaned_categories`` in the provenance parameters.
    """
    _require_full(m, "scarce_image")
    r = _ratio(keep_ratio, "keep_ratio", lo_open=True)
    sub_seed = derive_seed(seed, "scarce_image")
    train_images = base_training_images(m)
    n_keep = _round_half_up(r * len(train_images))
    chosen = keyed_rng(sub_seed).choice(len(train_images), size=n_keep, replace=False)
    kept_images = {train_images[i] for i in chosen.tolist()}
    keep = {o.instance_id for o in m.instances if o.subset != "base_train" or o.image_id in kept_images}
    still = {o.category_id for o in m.instances if o.instance_id in keep and o.subset == "base_train"}
    orphaned = sorted(c.category_id for c in m.categories_in("base") if c.category_id not in still)
    seeds = dict(m.seeds, scarce_image=sub_seed)
    return _derive(
        m,
        "scarce_image",
        {"keep_ratio": float(keep_ratio), "seed": int(seed), "kept_images": n_keep, "orphaned_categories": orphaned},
        keep,
        seeds=seeds,
    )


def scarce_class_adjust(m: BenchmarkManifest, keep_ratio, seed: int) -> BenchmarkManifest:
    """Scarce-Class, then downsampled to the Scarce-Image training total.

    Each surviving category keeps ``round(rate * n_c)`` training instances
    (``rate = T / total``); single random instances are then removed or
    restored until the total is exactly ``T``.
    """
    _require_full(m, "scarce_class_adjust")
    sc = scarce_class(m, keep_ratio)
    target = sum(o.subset == "base_train" for o in scarce_image(m, keep_ratio, seed).instances)
    train_by_cat: dict[int, list[int]] = defaultdict(list)
    for o in sc.instances:
        if o.subset == "base_train":
            train_by_cat[o.category_id].append(o.instance_id)
    total = sum(len(v) for v in train_by_cat.values())
    if target > total:
        raise ValueError(f"Scarce-Image target {target} exceeds Scarce-Class training total {total}")

    sub_seed = derive_seed(seed, "scarce_class_adjust")
    rng = keyed_rng(sub_seed)
    cats = sorted(train_by_cat)
    rate = Fraction(target, total) if total else Fraction(0)
    quota = {c: _round_half_up(rate * len(train_by_cat[c])) for c in cats}
    drift = sum(quota.values()) - target
    while drift != 0:
        if drift > 0:
            pool = [c for c in cats if quota[c] > 0]
            c = pool[int(rng.integers(len(pool)))]
            quota[c] -= 1
            drift -= 1
        else:
            pool = [c for c in cats if quota[c] < len(train_by_cat[c])]
            c = pool[int(rng.integers(len(pool)))]
            quota[c] += 1
            drift += 1

    keep = {o.instance_id for o in sc.instances if o.subset != "base_train"}
    for c in cats:
        ids = sorted(train_by_cat[c])
        picked = keyed_rng(sub_seed, c).choice(len(ids), size=quota[c], replace=False)
        keep.update(ids[i] for i in picked.tolist())
    removed = sc.regime.params["removed_categories"]
    seeds = dict(m.seeds, scarce_image=derive_seed(seed, "scarce_image"), scarce_class_adjust=sub_seed)
    return _derive(
        m,
        "scarce_class_adjust",
        {"keep_ratio": float(keep_ratio), "seed": int(seed), "target": target, "removed_categories": removed},
        keep,
        drop_categories=removed,
        seeds=seeds,
    )


def subsample_supervision(m: BenchmarkManifest, head: str, fraction, seed: int) -> BenchmarkManifest:
    """Keep ``head`` labels on a uniform ``round(fraction * N)`` of its units.

    Units are base-training instances for object-level heads and images
    holding base-training instances for image-level heads.  The rest get
    ``head`` appended to their ``masked_heads``.
    """
    _require_full(m, "subsample_supervision")
    if head not in SUPERVISION_HEADS:
        raise ValueError(f"head must be one of {SUPERVISION_HEADS}, got {head!r}")
    f = _ratio(fraction, "fraction", lo_open=False)
    sub_seed = derive_seed(seed, "supervision")
    rng = keyed_rng(sub_seed, SUPERVISION_HEADS.index(head))
    if head in OBJECT_HEADS:
        units = sorted(o.instance_id for o in m.instances if o.subset == "base_train")
    else:
        units = base_training_images(m)
    n_keep = _round_half_up(f * len(units))
    kept = {units[i] for i in rng.choice(len(units), size=n_keep, replace=False).tolist()}
    masked = set(units) - kept

    def add(rec):
        if head in rec.masked_heads:
            return rec
        return dataclasses.replace(rec, masked_heads=tuple(sorted(rec.masked_heads + (head,))))

    instances, images = m.instances, m.images
    if head in OBJECT_HEADS:
        instances = tuple(add(o) if o.instance_id in masked else o for o in m.instances)
    else:
        images = tuple(add(im) if im.image_id in masked else im for im in m.images)
    seeds = dict(m.seeds, supervision=sub_seed)
    return _derive(
        m,
        "supervision_fraction",
        {"head": head, "fraction": float(fraction), "seed": int(seed), "labeled_units": n_keep, "total_units": len(units)},
        None,
        instances=instances,
        images=images,
        seeds=seeds,
    )


def training_instance_count(m: BenchmarkManifest) -> int:
    return sum(o.subset == "base_train" for o in m.instances)


PORTION_COLUMNS = ("regime", "ratio", "instances", "portion_pct")


def instance_portion_report(manifests: Iterable[BenchmarkManifest], base: BenchmarkManifest | None) -> list[dict]:
    """Remaining training-instance percentage of each manifest relative to ``base``."""
    if base is None:
        raise ValueError("instance portion report needs the full base manifest")
    if not base.is_full:
        raise ValueError("base manifest for the portion report must be full")
    base_hash = manifest_hash(base)
    full_count = training_instance_count(base)
    rows = []
    for m in manifests:
        if m.is_full:
            if manifest_hash(m) != base_hash:
                raise ValueError("full manifest differs from the report's base manifest")
            regime, ratio = "full", 1.0
        else:
            if m.regime.base_hash != base_hash:
                raise ValueError(f"{m.regime.op} manifest was derived from a different base manifest")
            regime = m.regime.op
            ratio = m.regime.params.get("keep_ratio", m.regime.params.get("fraction", 1.0))
        n = training_instance_count(m)
        rows.append(
            {
                "regime": regime,
                "ratio": float(ratio),
                "instances": n,
                "portion_pct": round(100.0 * n / full_count, 2) if full_count else 0.0,
            }
        )
    return rows


def portion_csv(rows: list[dict], header_lines: Iterable[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.DictWriter(buf, fieldnames=PORTION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({"regime": row["regime"], "ratio": f"{row['ratio']:g}", "instances": row["instances"], "portion_pct": f"{row['portion_pct']:.2f}"})
    return buf.getvalue()
