"""Raw scene-parsing annotations and the parsers that produce them.

Two sources are supported out of the box:

* a single JSON *fixture* file (``"schema": "raw-annotations/1"``), used by
  tests and the synthetic generator;
* an ADE20K-style directory holding one JSON annotation per image plus a
  ``categories.json`` file that assigns each name a kind.

Fixture schema::

    {
      "schema": "raw-annotations/1",
      "attribute_names": ["furry", ...],          # optional
      "scene_names": ["kitchen", ...],            # optional
      "categories": [
        {"name": "chair", "kind": "object",
         "attributes": [0, 1, ...],               # optional bit vector
         "hierarchy": ["entity", "furniture", "seat", "chair"]},  # optional
        ...
      ],
      "images": [
        {"image_id": 0, "uri": "images/0.png", "width": 64, "height": 48,
         "scene": "kitchen",                      # optional
         "stuff_mask_uri": "stuff/0.png",         # optional
         "objects": [
           {"name": "chair",
            "mask": {"size": [48, 64], "counts": [...]},  # or "polygon": [[x, y], ...]
            "parts": ["leg"]}                     # optional part names
         ]}
      ]
    }

Objects whose names are part or stuff categories are allowed in ``objects``;
they count towards those vocabularies but never become target instances.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..datamodel import KINDS, rle_area, rle_encode

FIXTURE_SCHEMA = "raw-annotations/1"


class RawParseError(ValueError):
    def __init__(self, source, where: str, reason: str):
        super().__init__(f"{source}: {where}: {reason}")
        self.source = str(source)
        self.where = where


@dataclass
class RawCategory:
    name: str
    kind: str
    attributes: tuple[int, ...] = ()
    hierarchy: tuple[str, ...] = ()


@dataclass
class RawObject:
    name: str
    mask: dict
    parts: tuple[str, ...] = ()


@dataclass
class RawImage:
    image_id: int
    uri: str
    width: int
    height: int
    scene: str | None = None
    stuff_mask_uri: str | None = None
    objects: list[RawObject] = field(default_factory=list)


@dataclass
class RawAnnotationSet:
    categories: list[RawCategory]
    images: list[RawImage]
    attribute_names: tuple[str, ...] = ()
    scene_names: tuple[str, ...] = ()

    def counts(self) -> dict[str, int]:
        out = {c.name: 0 for c in self.categories}
        for im in self.images:
            for o in im.objects:
                out[o.name] = out.get(o.name, 0) + 1
        return out


def rasterize_polygon(points, height: int, width: int) -> np.ndarray:
    from PIL import Image, ImageDraw

    canvas = Image.new("L", (width, height), 0)
    ImageDraw.Draw(canvas).polygon([tuple(map(float, p)) for p in points], fill=1, outline=1)
    return np.asarray(canvas, dtype=bool)


def _object_mask(obj: dict, height: int, width: int, source, where: str) -> dict:
    if "mask" in obj:
        mask = obj["mask"]
        if list(mask.get("size", ())) != [height, width]:
            raise RawParseError(source, where, f"mask size {mask.get('size')} != image size {[height, width]}")
    elif "polygon" in obj:
        mask = rle_encode(rasterize_polygon(obj["polygon"], height, width))
    else:
        raise RawParseError(source, where, "object has neither 'mask' nor 'polygon'")
    if rle_area(mask) == 0:
        raise RawParseError(source, where, "object mask is empty")
    return mask


def check_raw(raw: RawAnnotationSet, source="<raw>") -> None:
    names = {c.name for c in raw.categories}
    for im in raw.images:
        for j, o in enumerate(im.objects):
            if o.name not in names:
                raise RawParseError(source, f"image {im.image_id} object {j}", f"unresolvable category name {o.name!r}")
            for p in o.parts:
                if p not in names:
                    raise RawParseError(source, f"image {im.image_id} object {j}", f"unresolvable part name {p!r}")


def raw_from_json(doc: dict, source="<fixture>") -> RawAnnotationSet:
    if doc.get("schema") != FIXTURE_SCHEMA:
        raise RawParseError(source, "<root>", f"expected schema {FIXTURE_SCHEMA!r}, got {doc.get('schema')!r}")
    cats = []
    for i, c in enumerate(doc.get("categories", [])):
        try:
            cats.append(
                RawCategory(
                    name=str(c["name"]),
                    kind=str(c["kind"]),
                    attributes=tuple(int(a) for a in c.get("attributes", ())),
                    hierarchy=tuple(str(h) for h in c.get("hierarchy", ())),
                )
            )
        except KeyError as exc:
            raise RawParseError(source, f"categories[{i}]", f"missing field {exc}") from None
    images = []
    for i, im in enumerate(doc.get("images", [])):
        where = f"images[{i}]"
        try:
            h, w = int(im["height"]), int(im["width"])
            objects = []
            for j, o in enumerate(im.get("objects", [])):
                owhere = f"{where}.objects[{j}]"
                objects.append(RawObject(str(o["name"]), _object_mask(o, h, w, source, owhere), tuple(o.get("parts", ()))))
            images.append(
                RawImage(
                    image_id=int(im["image_id"]),
                    uri=str(im["uri"]),
                    width=w,
                    height=h,
                    scene=im.get("scene"),
                    stuff_mask_uri=im.get("stuff_mask_uri"),
                    objects=objects,
                )
            )
        except KeyError as exc:
            raise RawParseError(source, where, f"missing field {exc}") from None
    raw = RawAnnotationSet(cats, images, tuple(doc.get("attribute_names", ())), tuple(doc.get("scene_names", ())))
    check_raw(raw, source)
    return raw


def load_fixture(path) -> RawAnnotationSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RawParseError(path, f"line {exc.lineno}", exc.msg) from None
    return raw_from_json(doc, path)


def raw_to_json(raw: RawAnnotationSet) -> dict:
    return {
        "schema": FIXTURE_SCHEMA,
        "attribute_names": list(raw.attribute_names),
        "scene_names": list(raw.scene_names),
        "categories": [
            {"name": c.name, "kind": c.kind, "attributes": list(c.attributes), "hierarchy": list(c.hierarchy)}
            for c in raw.categories
        ],
        "images": [
            {
                "image_id": im.image_id,
                "uri": im.uri,
                "width": im.width,
                "height": im.height,
                "scene": im.scene,
                "stuff_mask_uri": im.stuff_mask_uri,
                "objects": [{"name": o.name, "mask": o.mask, "parts": list(o.parts)} for o in im.objects],
            }
            for im in raw.images
        ],
    }


# ---------------------------------------------------------------------------
# ADE20K-style directories


def _write_stuff_mask(stuff: list[tuple[int, np.ndarray]], height: int, width: int, path: Path) -> None:
    from PIL import Image

    label = np.zeros((height, width), dtype=np.uint16)
    for value, m in stuff:
        label[m] = value
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(label).save(path)


def load_ade20k_dir(root, stuff_dir=None) -> RawAnnotationSet:
    """Parse an ADE20K-style directory.

    Expects ``root/categories.json`` of the form::

        {"attribute_names": [...], "scene_names": [...],
         "categories": {"<name>": {"kind": "object", "attributes": [...],
                                   "hierarchy": [...]}, ...}}

    and one ``*.json`` annotation per image anywhere below ``root`` with the
    ADE20K layout (``annotation.filename``, ``annotation.imsize``,
    ``annotation.scene``, ``annotation.object[*].polygon`` and
    ``annotation.object[*].parts.ispartof``).  Objects with ``part_level > 0``
    are parts of the object whose ``id`` they name in ``ispartof``.  When
    ``stuff_dir`` is given, stuff polygons are rasterized into 16-bit label
    PNGs there (pixel value = 1 + category id, i.e. 1 + the name's position
    in ``categories``).
    """
    root = Path(root)
    meta_path = root / "categories.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise RawParseError(meta_path, "<root>", "categories.json not found") from None
    except json.JSONDecodeError as exc:
        raise RawParseError(meta_path, f"line {exc.lineno}", exc.msg) from None
    cat_meta = meta.get("categories", {})
    cats = [
        RawCategory(name, str(v.get("kind")), tuple(v.get("attributes", ())), tuple(v.get("hierarchy", ())))
        for name, v in cat_meta.items()
    ]
    stuff_value = {c.name: i + 1 for i, c in enumerate(cats) if c.kind == "stuff"}

    files = sorted(p for p in root.rglob("*.json") if p != meta_path)
    images = []
    for image_id, path in enumerate(files):
        try:
            ann = json.loads(path.read_text(encoding="utf-8"))["annotation"]
        except json.JSONDecodeError as exc:
            raise RawParseError(path, f"line {exc.lineno}", exc.msg) from None
        except KeyError:
            raise RawParseError(path, "<root>", "missing 'annotation'") from None
        try:
            h, w = int(ann["imsize"][0]), int(ann["imsize"][1])
            uri = os.path.relpath(path.parent / ann["filename"], root)
        except (KeyError, IndexError, TypeError) as exc:
            raise RawParseError(path, "annotation", f"bad image header: {exc}") from None
        scene = ann.get("scene")
        if isinstance(scene, list):
            scene = "/".join(scene) if scene else None

        whole: dict[int, RawObject] = {}
        parts_of: dict[int, list[str]] = {}
        stuff: list[tuple[int, np.ndarray]] = []
        for j, o in enumerate(ann.get("object", [])):
            where = f"object[{j}]"
            name = o.get("name")
            if name not in cat_meta:
                raise RawParseError(path, where, f"unresolvable category name {name!r}")
            parts = o.get("parts", {}) or {}
            level = int(parts.get("part_level", 0) or 0)
            if level > 0:
                parent = parts.get("ispartof")
                if isinstance(parent, list):
                    parent = parent[0] if parent else None
                if parent is not None:
                    parts_of.setdefault(int(parent), []).append(name)
                continue
            poly = o.get("polygon", {})
            pts = list(zip(poly.get("x", []), poly.get("y", [])))
            if len(pts) < 3:
                raise RawParseError(path, where, "polygon has fewer than 3 points")
            m = rasterize_polygon(pts, h, w)
            if not m.any():
                raise RawParseError(path, where, "object mask is empty")
            if name in stuff_value:
                stuff.append((stuff_value[name], m))
            whole[int(o.get("id", j))] = RawObject(name, rle_encode(m))
        for oid, names in parts_of.items():
            if oid in whole:
                whole[oid].parts = tuple(sorted(set(names)))
        stuff_uri = None
        if stuff_dir is not None and stuff:
            out = Path(stuff_dir) / f"{image_id:08d}.png"
            _write_stuff_mask(stuff, h, w, out)
            stuff_uri = str(out)
        images.append(RawImage(image_id, uri, w, h, scene, stuff_uri, list(whole.values())))

    raw = RawAnnotationSet(cats, images, tuple(meta.get("attribute_names", ())), tuple(meta.get("scene_names", ())))
    check_raw(raw, root)
    return raw


PARSERS = {"fixture": load_fixture, "ade20k": load_ade20k_dir}


def load_raw(path, parser: str | None = None, **kwargs) -> RawAnnotationSet:
    """Dispatch to a parser: files are fixtures, directories ADE20K-style."""
    if parser is None:
        parser = "ade20k" if Path(path).is_dir() else "fixture"
    try:
        fn = PARSERS[parser]
    except KeyError:
        raise ValueError(f"unknown parser {parser!r}; known: {sorted(PARSERS)}") from None
    return fn(path, **kwargs)


def kinds_valid(raw: RawAnnotationSet) -> list[str]:
    return sorted(c.name for c in raw.categories if c.kind not in KINDS)
