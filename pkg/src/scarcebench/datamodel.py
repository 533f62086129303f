"""Canonical record types, mask encoding, seed derivation and manifest I/O.

Every other module speaks in terms of the types defined here.  Records are
frozen dataclasses; derived manifests are always new objects.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1

KINDS = ("object", "part", "stuff")
SPLITS = ("base", "novel_val", "novel_test", "dropped")
SUBSETS = ("base_train", "base_val", "novel_support", "novel_query")

OBJECT_HEADS = ("attribute", "hierarchy", "part", "bbox", "seg_region")
IMAGE_HEADS = ("seg_fcn", "stuff", "scene")
SELF_HEADS = ("rotation", "patch_location")
AUX_HEADS = OBJECT_HEADS + IMAGE_HEADS + SELF_HEADS
ALL_HEADS = ("cls",) + AUX_HEADS

HIERARCHY_DEPTH = 4
MIN_INSTANCES = 15
BASE_THRESHOLD = 100
SUPPORT_SHOTS = 5
DEFAULT_GAMMA = 2.7

Box = tuple[float, float, float, float]


class ManifestParseError(ValueError):
    """Raised when a serialized manifest cannot be decoded.

    ``record`` names the offending record, e.g. ``"instances[12]"``.
    """

    def __init__(self, record: str, reason: str):
        super().__init__(f"{record}: {reason}")
        self.record = record
        self.reason = reason


# ---------------------------------------------------------------------------
# seeds

# Fixed purpose table.  The counter of a purpose is its position here; never
# reorder, only append.
SEED_PURPOSES = (
    "novel_split",
    "base_val",
    "support",
    "jitter",
    "scarce_image",
    "scarce_class_adjust",
    "supervision",
    "train",
    "fewshot",
)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(global_seed: int, purpose: str) -> int:
    """Per-purpose 64-bit seed: ``splitmix64(global_seed + counter * golden)``.

    ``counter`` is the 1-based index of ``purpose`` in :data:`SEED_PURPOSES`.
    """
    if purpose not in SEED_PURPOSES:
        raise KeyError(f"unknown seed purpose {purpose!r}")
    counter = SEED_PURPOSES.index(purpose) + 1
    return splitmix64((global_seed + counter * 0x9E3779B97F4A7C15) & _MASK64)


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by ``(seed, *keys)``; independent of call order."""
    return np.random.default_rng([seed, *keys])


# ---------------------------------------------------------------------------
# run-length masks


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating 0-runs and 1-runs, starting with 0s."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    flat = mask.ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(r) for r in runs]}


def rle_decode(rle: Mapping[str, Any]) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise ValueError(f"RLE counts sum to {counts.sum()}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(h, w)


def rle_area(rle: Mapping[str, Any]) -> int:
    return int(sum(rle["counts"][1::2]))


def rle_bbox(rle: Mapping[str, Any]) -> Box:
    """Tight pixel box ``(x, y, w, h)`` of a non-empty mask."""
    m = rle_decode(rle)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1 - cols[0]), float(rows[-1] + 1 - rows[0]))


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class CategoryRecord:
    category_id: int
    name: str
    kind: str
    instance_count: int
    attributes: tuple[int, ...] = ()
    hierarchy_path: tuple[str, ...] = ()
    split: str | None = None


@dataclass(frozen=True)
class ObjectInstance:
    """One annotated target-class object.

    Both boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner, in
    pixels of the original image.  ``support_index`` orders the support
    instances of a novel category by sampling order (0 is the 1-shot pick).
    ``masked_heads`` lists auxiliary heads whose labels are withheld.
    """

    instance_id: int
    image_id: int
    category_id: int
    tight_box: Box
    region_box: Box
    mask: dict | None = None
    part_labels: tuple[int, ...] = ()
    subset: str | None = None
    support_index: int | None = None
    masked_heads: tuple[str, ...] = ()


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    uri: str
    width: int
    height: int
    scene_label: int | None = None
    stuff_mask_uri: str | None = None
    instance_ids: tuple[int, ...] = ()
    masked_heads: tuple[str, ...] = ()


@dataclass(frozen=True)
class Provenance:
    base_hash: str
    op: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BenchmarkManifest:
    categories: tuple[CategoryRecord, ...]
    images: tuple[ImageRecord, ...]
    instances: tuple[ObjectInstance, ...]
    context_ratio: float = DEFAULT_GAMMA
    seeds: dict = field(default_factory=dict)
    regime: Provenance | str = "full"
    attribute_names: tuple[str, ...] = ()
    scene_names: tuple[str, ...] = ()
    header: dict = field(default_factory=dict)

    def category(self, category_id: int) -> CategoryRecord:
        return self._categories_by_id()[category_id]

    def _categories_by_id(self) -> dict[int, CategoryRecord]:
        # cached on first use; dataclass is frozen so bypass __setattr__
        try:
            return self.__dict__["_cat_index"]
        except KeyError:
            idx = {c.category_id: c for c in self.categories}
            object.__setattr__(self, "_cat_index", idx)
            return idx

    def categories_in(self, *splits: str) -> list[CategoryRecord]:
        return [c for c in self.categories if c.split in splits]

    def instances_in(self, *subsets: str) -> list[ObjectInstance]:
        return [o for o in self.instances if o.subset in subsets]

    @property
    def is_full(self) -> bool:
        return self.regime == "full"

    def replace(self, **changes) -> "BenchmarkManifest":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# geometry helpers shared by validation and benchgen


def box_contains(outer: Sequence[float], inner: Sequence[float]) -> bool:
    ox, oy, ow, oh = outer
    ix, iy, iw, ih = inner
    return ox <= ix and oy <= iy and ix + iw <= ox + ow and iy + ih <= oy + oh


def box_in_image(box: Sequence[float], width: float, height: float) -> bool:
    x, y, w, h = box
    return x >= 0 and y >= 0 and x + w <= width and y + h <= height


# ---------------------------------------------------------------------------
# serialization


def _category_to_json(c: CategoryRecord) -> dict:
    return {
        "category_id": c.category_id,
        "name": c.name,
        "kind": c.kind,
        "instance_count": c.instance_count,
        "attributes": list(c.attributes),
        "hierarchy_path": list(c.hierarchy_path),
        "split": c.split,
    }


def _instance_to_json(o: ObjectInstance) -> dict:
    return {
        "instance_id": o.instance_id,
        "image_id": o.image_id,
        "category_id": o.category_id,
        "tight_box": list(o.tight_box),
        "region_box": list(o.region_box),
        "mask": o.mask,
        "part_labels": list(o.part_labels),
        "subset": o.subset,
        "support_index": o.support_index,
        "masked_heads": list(o.masked_heads),
    }


def _image_to_json(im: ImageRecord) -> dict:
    return {
        "image_id": im.image_id,
        "uri": im.uri,
        "width": im.width,
        "height": im.height,
        "scene_label": im.scene_label,
        "stuff_mask_uri": im.stuff_mask_uri,
        "instance_ids": list(im.instance_ids),
        "masked_heads": list(im.masked_heads),
    }


def manifest_to_json(m: BenchmarkManifest) -> dict:
    regime: Any = m.regime
    if isinstance(regime, Provenance):
        regime = {"base_hash": regime.base_hash, "op": regime.op, "params": regime.params}
    return {
        "schema_version": SCHEMA_VERSION,
        "header": m.header,
        "context_ratio": m.context_ratio,
        "seeds": {k: int(v) for k, v in m.seeds.items()},
        "regime": regime,
        "attribute_names": list(m.attribute_names),
        "scene_names": list(m.scene_names),
        "categories": [_category_to_json(c) for c in m.categories],
        "images": [_image_to_json(i) for i in m.images],
        "instances": [_instance_to_json(o) for o in m.instances],
    }


def serialize(m: BenchmarkManifest) -> str:
    """Canonical JSON text; equal manifests give byte-equal output."""
    return json.dumps(manifest_to_json(m), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def manifest_hash(m: BenchmarkManifest) -> str:
    return hashlib.sha256(serialize(m).encode()).hexdigest()


def _box(value: Any, record: str, key: str) -> Box:
    if not isinstance(value, list) or len(value) != 4:
        raise ManifestParseError(record, f"{key} must be a list of 4 numbers")
    try:
        return tuple(float(v) for v in value)  # type: ignore[return-value]
    except (TypeError, ValueError) as exc:
        raise ManifestParseError(record, f"{key}: {exc}") from None


def _take(d: Mapping, key: str, record: str):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ManifestParseError(record, f"missing field {key!r}") from None


def manifest_from_json(doc: Mapping) -> BenchmarkManifest:
    if not isinstance(doc, Mapping):
        raise ManifestParseError("<root>", "manifest must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestParseError("<root>", f"unsupported schema_version {version!r}")

    categories = []
    for i, c in enumerate(_take(doc, "categories", "<root>")):
        rec = f"categories[{i}]"
        try:
            categories.append(
                CategoryRecord(
                    category_id=int(_take(c, "category_id", rec)),
                    name=str(_take(c, "name", rec)),
                    kind=str(_take(c, "kind", rec)),
                    instance_count=int(_take(c, "instance_count", rec)),
                    attributes=tuple(int(a) for a in _take(c, "attributes", rec)),
                    hierarchy_path=tuple(str(p) for p in _take(c, "hierarchy_path", rec)),
                    split=_take(c, "split", rec),
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ManifestParseError):
                raise
            raise ManifestParseError(rec, str(exc)) from None

    images = []
    for i, im in enumerate(_take(doc, "images", "<root>")):
        rec = f"images[{i}]"
        try:
            scene = _take(im, "scene_label", rec)
            images.append(
                ImageRecord(
                    image_id=int(_take(im, "image_id", rec)),
                    uri=str(_take(im, "uri", rec)),
                    width=int(_take(im, "width", rec)),
                    height=int(_take(im, "height", rec)),
                    scene_label=None if scene is None else int(scene),
                    stuff_mask_uri=_take(im, "stuff_mask_uri", rec),
                    instance_ids=tuple(int(x) for x in _take(im, "instance_ids", rec)),
                    masked_heads=tuple(_take(im, "masked_heads", rec)),
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ManifestParseError):
                raise
            raise ManifestParseError(rec, str(exc)) from None

    instances = []
    for i, o in enumerate(_take(doc, "instances", "<root>")):
        rec = f"instances[{i}]"
        try:
            sidx = _take(o, "support_index", rec)
            instances.append(
                ObjectInstance(
                    instance_id=int(_take(o, "instance_id", rec)),
                    image_id=int(_take(o, "image_id", rec)),
                    category_id=int(_take(o, "category_id", rec)),
                    tight_box=_box(_take(o, "tight_box", rec), rec, "tight_box"),
                    region_box=_box(_take(o, "region_box", rec), rec, "region_box"),
                    mask=_take(o, "mask", rec),
                    part_labels=tuple(int(p) for p in _take(o, "part_labels", rec)),
                    subset=_take(o, "subset", rec),
                    support_index=None if sidx is None else int(sidx),
                    masked_heads=tuple(_take(o, "masked_heads", rec)),
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ManifestParseError):
                raise
            raise ManifestParseError(rec, str(exc)) from None

    regime = _take(doc, "regime", "<root>")
    if isinstance(regime, Mapping):
        regime = Provenance(
            base_hash=str(_take(regime, "base_hash", "regime")),
            op=str(_take(regime, "op", "regime")),
            params=dict(_take(regime, "params", "regime")),
        )
    elif regime != "full":
        raise ManifestParseError("regime", f"expected 'full' or a provenance object, got {regime!r}")

    return BenchmarkManifest(
        categories=tuple(categories),
        images=tuple(images),
        instances=tuple(instances),
        context_ratio=float(_take(doc, "context_ratio", "<root>")),
        seeds={str(k): int(v) for k, v in _take(doc, "seeds", "<root>").items()},
        regime=regime,
        attribute_names=tuple(doc.get("attribute_names", ())),
        scene_names=tuple(doc.get("scene_names", ())),
        header=dict(doc.get("header", {})),
    )


def deserialize(text: str) -> BenchmarkManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return manifest_from_json(doc)


def save_manifest(m: BenchmarkManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(m))


def load_manifest(path) -> BenchmarkManifest:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())


# ---------------------------------------------------------------------------
# validation


def validate_manifest(m: BenchmarkManifest) -> list[str]:
    """Return one human-readable string per violated invariant; ``[]`` if clean."""
    problems: list[str] = []
    cats = {}
    for c in m.categories:
        if c.category_id in cats:
            problems.append(f"category {c.category_id}: duplicate id")
        cats[c.category_id] = c
        tag = f"category {c.category_id} ({c.name})"
        if c.kind not in KINDS:
            problems.append(f"{tag}: unknown kind {c.kind!r}")
        if c.instance_count < 0:
            problems.append(f"{tag}: negative instance_count")
        if c.split not in SPLITS:
            problems.append(f"{tag}: invalid split {c.split!r}")
        elif c.split == "base" and not c.instance_count > BASE_THRESHOLD:
            problems.append(f"{tag}: base split requires more than {BASE_THRESHOLD} instances, has {c.instance_count}")
        elif c.split in ("novel_val", "novel_test") and not MIN_INSTANCES <= c.instance_count <= BASE_THRESHOLD:
            problems.append(f"{tag}: novel split requires {MIN_INSTANCES}..{BASE_THRESHOLD} instances, has {c.instance_count}")
        elif c.split == "dropped" and c.kind == "object" and c.instance_count >= MIN_INSTANCES:
            problems.append(f"{tag}: dropped object category has {c.instance_count} >= {MIN_INSTANCES} instances")
        if c.kind == "object" and len(c.hierarchy_path) != HIERARCHY_DEPTH:
            problems.append(f"{tag}: hierarchy_path has length {len(c.hierarchy_path)}, expected {HIERARCHY_DEPTH}")
        if c.attributes and m.attribute_names and len(c.attributes) != len(m.attribute_names):
            problems.append(f"{tag}: attribute vector length {len(c.attributes)} != vocabulary {len(m.attribute_names)}")
        if any(a not in (0, 1) for a in c.attributes):
            problems.append(f"{tag}: attribute vector must be binary")

    images = {}
    for im in m.images:
        if im.image_id in images:
            problems.append(f"image {im.image_id}: duplicate id")
        images[im.image_id] = im
        if im.width <= 0 or im.height <= 0:
            problems.append(f"image {im.image_id}: non-positive size {im.width}x{im.height}")
        if im.scene_label is not None and m.scene_names and not 0 <= im.scene_label < len(m.scene_names):
            problems.append(f"image {im.image_id}: scene_label {im.scene_label} outside vocabulary")

    instances = {}
    per_cat: dict[int, list[ObjectInstance]] = {}
    for o in m.instances:
        tag = f"instance {o.instance_id}"
        if o.instance_id in instances:
            problems.append(f"{tag}: duplicate id")
        instances[o.instance_id] = o
        c = cats.get(o.category_id)
        if c is None:
            problems.append(f"{tag}: unknown category {o.category_id}")
            continue
        per_cat.setdefault(o.category_id, []).append(o)
        im = images.get(o.image_id)
        if im is None:
            problems.append(f"{tag}: unknown image {o.image_id}")
            continue
        if o.instance_id not in im.instance_ids:
            problems.append(f"{tag}: not listed by image {o.image_id}")
        if o.tight_box[2] <= 0 or o.tight_box[3] <= 0:
            problems.append(f"{tag}: degenerate tight_box {o.tight_box}")
        if not box_contains(o.region_box, o.tight_box):
            problems.append(f"{tag}: region_box {o.region_box} does not contain tight_box {o.tight_box}")
        if not box_in_image(o.region_box, im.width, im.height):
            problems.append(f"{tag}: region_box {o.region_box} leaves image {im.width}x{im.height}")
        if o.mask is not None:
            size = list(o.mask.get("size", ()))
            if size != [im.height, im.width]:
                problems.append(f"{tag}: mask size {size} != image size {[im.height, im.width]}")
            elif sum(o.mask.get("counts", ())) != im.height * im.width:
                problems.append(f"{tag}: mask counts do not cover the image")
            elif rle_area(o.mask) == 0:
                problems.append(f"{tag}: mask is empty")
        if o.subset not in SUBSETS:
            problems.append(f"{tag}: invalid subset {o.subset!r}")
        elif c.split == "base" and o.subset not in ("base_train", "base_val"):
            problems.append(f"{tag}: base category instance tagged {o.subset}")
        elif c.split in ("novel_val", "novel_test") and o.subset not in ("novel_support", "novel_query"):
            problems.append(f"{tag}: novel category instance tagged {o.subset}")
        elif c.split not in ("base", "novel_val", "novel_test"):
            problems.append(f"{tag}: instance of non-target category {c.category_id} ({c.split})")
        if (o.subset == "novel_support") != (o.support_index is not None):
            problems.append(f"{tag}: support_index must be set exactly for novel_support instances")
        for p in o.part_labels:
            pc = cats.get(p)
            if pc is None or pc.kind != "part":
                problems.append(f"{tag}: part label {p} is not a part category")
        bad = set(o.masked_heads) - set(AUX_HEADS)
        if bad:
            problems.append(f"{tag}: unknown masked heads {sorted(bad)}")

    for im in m.images:
        for iid in im.instance_ids:
            if iid not in instances:
                problems.append(f"image {im.image_id}: references missing instance {iid}")

    for c in m.categories:
        members = per_cat.get(c.category_id, [])
        tag = f"category {c.category_id} ({c.name})"
        if c.split == "base":
            n_val = sum(o.subset == "base_val" for o in members)
            n_train = sum(o.subset == "base_train" for o in members)
            if n_val != c.instance_count // 6:
                problems.append(f"{tag}: {n_val} base_val instances, expected floor({c.instance_count}/6) = {c.instance_count // 6}")
            expected_train = c.instance_count - c.instance_count // 6
            if m.is_full and n_train != expected_train:
                problems.append(f"{tag}: {n_train} base_train instances, expected {expected_train}")
            elif n_train > expected_train:
                problems.append(f"{tag}: {n_train} base_train instances exceed {expected_train}")
        elif c.split in ("novel_val", "novel_test"):
            support = sorted(o.support_index for o in members if o.subset == "novel_support")
            n_query = sum(o.subset == "novel_query" for o in members)
            if len(support) != SUPPORT_SHOTS:
                problems.append(f"{tag}: has {len(support)} novel_support instances, expected {SUPPORT_SHOTS}")
            elif support != list(range(SUPPORT_SHOTS)):
                problems.append(f"{tag}: support_index values {support} are not 0..{SUPPORT_SHOTS - 1}")
            if n_query != c.instance_count - SUPPORT_SHOTS:
                problems.append(f"{tag}: has {n_query} novel_query instances, expected {c.instance_count - SUPPORT_SHOTS}")

    if not (isinstance(m.context_ratio, float) or isinstance(m.context_ratio, int)) or not math.isfinite(m.context_ratio) or m.context_ratio < 1:
        problems.append(f"context_ratio {m.context_ratio!r} must be a finite number >= 1")
    return problems


def iter_base_train(m: BenchmarkManifest) -> Iterable[ObjectInstance]:
    return (o for o in m.instances if o.subset == "base_train")
