"""Per-image training and evaluation samples built from a manifest.

Targets are computed in original image coordinates and then expressed on
the grid the model predicts on:

* region masks: the instance mask over an ``M x M`` grid spanning the
  region box; a cell is foreground when the mask covers at least half
  of its area;
* dense rasters: one cell per stride-8 feature cell of the resized image,
  labelled by the class covering at least half of the cell's area and
  ``IGNORE`` otherwise.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .backbone import feature_size, resize_short_edge
from .datamodel import HIERARCHY_DEPTH, BenchmarkManifest, ImageRecord, ObjectInstance, rle_decode
from .heads import IGNORE

DATA_ROOT_ENV = "SCARCEBENCH_DATA_ROOT"
PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


@dataclass(frozen=True)
class Vocabulary:
    """Index spaces of every head, fixed per training manifest."""

    base_ids: tuple[int, ...]
    hierarchy: tuple[tuple[str, ...], ...]
    part_ids: tuple[int, ...]
    stuff_ids: tuple[int, ...]
    n_attributes: int
    n_scenes: int

    @classmethod
    def from_manifest(cls, m: BenchmarkManifest) -> "Vocabulary":
        base = sorted(m.categories_in("base"), key=lambda c: c.category_id)
        levels = tuple(
            tuple(sorted({c.hierarchy_path[level] for c in base if len(c.hierarchy_path) == HIERARCHY_DEPTH}))
            for level in range(HIERARCHY_DEPTH)
        )
        return cls(
            base_ids=tuple(c.category_id for c in base),
            hierarchy=levels,
            part_ids=tuple(sorted(c.category_id for c in m.categories if c.kind == "part")),
            stuff_ids=tuple(sorted(c.category_id for c in m.categories if c.kind == "stuff")),
            n_attributes=len(m.attribute_names),
            n_scenes=len(m.scene_names),
        )

    @property
    def n_classes(self) -> int:
        return len(self.base_ids)

    @property
    def hierarchy_sizes(self) -> tuple[int, ...]:
        return tuple(len(level) for level in self.hierarchy)

    def to_dict(self) -> dict:
        return {
            "base_ids": list(self.base_ids),
            "hierarchy": [list(level) for level in self.hierarchy],
            "part_ids": list(self.part_ids),
            "stuff_ids": list(self.stuff_ids),
            "n_attributes": self.n_attributes,
            "n_scenes": self.n_scenes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(
            tuple(d["base_ids"]),
            tuple(tuple(level) for level in d["hierarchy"]),
            tuple(d["part_ids"]),
            tuple(d["stuff_ids"]),
            int(d["n_attributes"]),
            int(d["n_scenes"]),
        )


# ---------------------------------------------------------------------------
# area-majority rasterization


def axis_overlap(lo: np.ndarray, hi: np.ndarray, first: int, count: int) -> np.ndarray:
    """Overlap length of cells ``[lo_i, hi_i]`` with pixels ``[p, p+1]``, p = first..first+count-1."""
    p = np.arange(first, first + count, dtype=float)
    return np.clip(np.minimum(hi[:, None], p[None, :] + 1) - np.maximum(lo[:, None], p[None, :]), 0.0, None)


def cell_coverage(mask: np.ndarray, y_edges: np.ndarray, x_edges: np.ndarray) -> np.ndarray:
    """Covered area of each grid cell; edges are cell boundaries in pixels."""
    H, W = mask.shape
    y0 = max(0, int(np.floor(y_edges[0])))
    y1 = min(H, int(np.ceil(y_edges[-1])))
    x0 = max(0, int(np.floor(x_edges[0])))
    x1 = min(W, int(np.ceil(x_edges[-1])))
    oy = axis_overlap(y_edges[:-1], y_edges[1:], y0, y1 - y0)
    ox = axis_overlap(x_edges[:-1], x_edges[1:], x0, x1 - x0)
    return oy @ mask[y0:y1, x0:x1].astype(float) @ ox.T


def region_mask_target(mask: np.ndarray, region_box, size: int) -> np.ndarray:
    x, y, w, h = region_box
    if w <= 0 or h <= 0:
        raise ValueError(f"empty region {region_box}")
    ye = y + h * np.arange(size + 1) / size
    xe = x + w * np.arange(size + 1) / size
    cov = cell_coverage(mask, ye, xe)
    return (cov >= 0.5 * (w / size) * (h / size)).astype(np.float32)


def feature_grid_edges(n_orig: int, n_resized: int, stride: int) -> np.ndarray:
    cells = feature_size(n_resized, stride)
    scale = n_orig / n_resized
    return np.minimum(np.arange(cells + 1) * stride * scale, n_orig)


def majority_raster(class_masks: dict[int, np.ndarray], y_edges, x_edges) -> np.ndarray:
    """Per-cell label of the class covering at least half the cell, else ``IGNORE``."""
    area = np.outer(np.diff(y_edges), np.diff(x_edges))
    out = np.full(area.shape, IGNORE, dtype=np.int64)
    if not class_masks:
        return out
    labels = sorted(class_masks)
    cov = np.stack([cell_coverage(class_masks[c], y_edges, x_edges) for c in labels])
    best = cov.argmax(axis=0)
    hit = cov.max(axis=0) >= 0.5 * area
    out[hit] = np.asarray(labels)[best[hit]]
    return out


# ---------------------------------------------------------------------------
# samples


def resolve_uri(uri: str, root) -> Path:
    p = Path(uri)
    if p.is_absolute() or root is None:
        return p
    return Path(root) / p


def default_root(manifest_path=None):
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    if manifest_path is not None:
        return Path(manifest_path).resolve().parent
    return None


def load_image(path) -> Tensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return (torch.from_numpy(arr).permute(2, 0, 1) - PIXEL_MEAN) / PIXEL_STD


def load_label_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


@dataclass
class Sample:
    image_id: int
    image: Tensor
    size: tuple[int, int]
    instance_ids: list[int]
    regions: Tensor
    tights: Tensor
    labels: Tensor
    attributes: Tensor | None = None
    attribute_ok: Tensor | None = None
    hierarchy: Tensor | None = None
    hierarchy_ok: Tensor | None = None
    parts: Tensor | None = None
    part_ok: Tensor | None = None
    bbox_ok: Tensor | None = None
    masks: Tensor | None = None
    mask_ok: Tensor | None = None
    fcn: Tensor | None = None
    stuff: Tensor | None = None
    scene: int = IGNORE
    extra: dict = field(default_factory=dict)


class RegionDataset:
    """Images holding instances of ``subsets``, one :class:`Sample` each.

    With ``targets=False`` only images, boxes and class labels are built
    (class labels are category ids then, since novel classes have no base
    index).
    """

    def __init__(
        self,
        manifest: BenchmarkManifest,
        root=None,
        short_edge: int = 800,
        subsets=("base_train",),
        vocab: Vocabulary | None = None,
        mask_size: int = 14,
        stride: int = 8,
        targets: bool = True,
        stuff_combined: bool = False,
        cache: bool = True,
    ):
        self.manifest = manifest
        self.root = root
        self.short_edge = short_edge
        self.subsets = tuple(subsets)
        self.vocab = vocab or Vocabulary.from_manifest(manifest)
        self.mask_size = mask_size
        self.stride = stride
        self.targets = targets
        self.stuff_combined = stuff_combined
        self._cache: dict[int, Sample] | None = {} if cache else None
        self._images = {im.image_id: im for im in manifest.images}
        members: dict[int, list[ObjectInstance]] = {}
        for o in manifest.instances:
            if o.subset in self.subsets:
                members.setdefault(o.image_id, []).append(o)
        self.image_ids = sorted(members)
        self._members = members
        self._train_members: dict[int, list[ObjectInstance]] = {}
        for o in manifest.instances:
            if o.subset == "base_train":
                self._train_members.setdefault(o.image_id, []).append(o)
        self._base_index = {cid: i for i, cid in enumerate(self.vocab.base_ids)}
        self._level_index = [{name: i for i, name in enumerate(level)} for level in self.vocab.hierarchy]
        self._part_index = {cid: i for i, cid in enumerate(self.vocab.part_ids)}
        self._stuff_index = {cid: i for i, cid in enumerate(self.vocab.stuff_ids)}

    def __len__(self) -> int:
        return len(self.image_ids)

    def __getitem__(self, i: int) -> Sample:
        image_id = self.image_ids[i]
        if self._cache is not None and image_id in self._cache:
            return self._cache[image_id]
        sample = self._build(self._images[image_id], self._members[image_id])
        if self._cache is not None:
            self._cache[image_id] = sample
        return sample

    def _build(self, rec: ImageRecord, objs: list[ObjectInstance]) -> Sample:
        path = resolve_uri(rec.uri, self.root)
        image = load_image(path)
        if tuple(image.shape[1:]) != (rec.height, rec.width):
            raise ValueError(f"{path}: image is {tuple(image.shape[1:])}, manifest says {(rec.height, rec.width)}")
        regions = torch.tensor([o.region_box for o in objs], dtype=torch.float64)
        tights = torch.tensor([o.tight_box for o in objs], dtype=torch.float64)
        image, regions, (sy, sx) = resize_short_edge(image, self.short_edge, regions)
        tights = tights * tights.new_tensor([sx, sy, sx, sy])
        h, w = image.shape[1:]
        s = Sample(
            image_id=rec.image_id,
            image=image,
            size=(h, w),
            instance_ids=[o.instance_id for o in objs],
            regions=regions,
            tights=tights,
            labels=torch.tensor(
                [self._base_index[o.category_id] if self.targets else o.category_id for o in objs], dtype=torch.long
            ),
        )
        if self.targets:
            self._object_targets(s, objs)
            self._image_targets(s, rec, (sy, sx))
        return s

    def _object_targets(self, s: Sample, objs: list[ObjectInstance]) -> None:
        m, v = self.manifest, self.vocab
        n = len(objs)
        cats = [m.category(o.category_id) for o in objs]
        attrs = np.zeros((n, v.n_attributes), dtype=np.float32)
        attr_ok = np.zeros(n, dtype=bool)
        hier = np.zeros((n, HIERARCHY_DEPTH), dtype=np.int64)
        hier_ok = np.zeros(n, dtype=bool)
        parts = np.zeros((n, len(v.part_ids)), dtype=np.float32)
        masks = np.zeros((n, self.mask_size, self.mask_size), dtype=np.float32)
        mask_ok = np.zeros(n, dtype=bool)
        for j, (o, c) in enumerate(zip(objs, cats)):
            if len(c.attributes) == v.n_attributes and v.n_attributes and "attribute" not in o.masked_heads:
                attrs[j] = c.attributes
                attr_ok[j] = True
            if len(c.hierarchy_path) == HIERARCHY_DEPTH and "hierarchy" not in o.masked_heads:
                hier[j] = [self._level_index[k][c.hierarchy_path[k]] for k in range(HIERARCHY_DEPTH)]
                hier_ok[j] = True
            for p in o.part_labels:
                parts[j, self._part_index[p]] = 1.0
            if o.mask is not None and "seg_region" not in o.masked_heads:
                masks[j] = region_mask_target(rle_decode(o.mask), o.region_box, self.mask_size)
                mask_ok[j] = True
        s.attributes, s.attribute_ok = torch.from_numpy(attrs), torch.from_numpy(attr_ok)
        s.hierarchy, s.hierarchy_ok = torch.from_numpy(hier), torch.from_numpy(hier_ok)
        s.parts = torch.from_numpy(parts)
        s.part_ok = torch.tensor(["part" not in o.masked_heads for o in objs])
        s.bbox_ok = torch.tensor(["bbox" not in o.masked_heads for o in objs])
        s.masks, s.mask_ok = torch.from_numpy(masks), torch.from_numpy(mask_ok)

    def _image_targets(self, s: Sample, rec: ImageRecord, scale) -> None:
        h, w = s.size
        ye = feature_grid_edges(rec.height, h, self.stride)
        xe = feature_grid_edges(rec.width, w, self.stride)
        shape = (len(ye) - 1, len(xe) - 1)
        by_class: dict[int, np.ndarray] = {}
        for o in self._train_members.get(rec.image_id, []):
            if o.mask is None or o.category_id not in self._base_index:
                continue
            k = self._base_index[o.category_id]
            mk = rle_decode(o.mask)
            by_class[k] = by_class[k] | mk if k in by_class else mk
        objects = majority_raster(by_class, ye, xe)
        if "seg_fcn" in rec.masked_heads:
            s.fcn = torch.full(shape, IGNORE, dtype=torch.long)
        else:
            s.fcn = torch.from_numpy(objects)

        stuff = np.full(shape, IGNORE, dtype=np.int64)
        if rec.stuff_mask_uri is not None and "stuff" not in rec.masked_heads:
            label = load_label_png(resolve_uri(rec.stuff_mask_uri, self.root))
            stuff_masks = {}
            for value in np.unique(label):
                cid = int(value) - 1
                if value > 0 and cid in self._stuff_index:
                    stuff_masks[self._stuff_index[cid]] = label == value
            if self.stuff_combined:
                bg = majority_raster(stuff_masks, ye, xe)
                stuff[bg != IGNORE] = self.vocab.n_classes + bg[bg != IGNORE]
                stuff[objects != IGNORE] = objects[objects != IGNORE]
            else:
                any_obj = {1: np.any(np.stack(list(by_class.values())), axis=0)} if by_class else {}
                any_stuff = {0: np.any(np.stack(list(stuff_masks.values())), axis=0)} if stuff_masks else {}
                stuff = majority_raster({**any_obj, **any_stuff}, ye, xe)
        s.stuff = torch.from_numpy(stuff)
        if rec.scene_label is not None and "scene" not in rec.masked_heads:
            s.scene = rec.scene_label


@dataclass
class Batch:
    images: Tensor  # [B, 3, H, W], zero padded
    sizes: list[tuple[int, int]]
    samples: list[Sample]
    boxes: Tensor  # [R, 5] (batch index, x, y, w, h) of regions
    tights: Tensor
    labels: Tensor

    def cat(self, name: str) -> Tensor:
        return torch.cat([getattr(s, name) for s in self.samples])


def collate(samples: list[Sample], dtype=torch.float32) -> Batch:
    H = max(s.size[0] for s in samples)
    W = max(s.size[1] for s in samples)
    images = torch.zeros((len(samples), 3, H, W), dtype=dtype)
    rows = []
    for b, s in enumerate(samples):
        images[b, :, : s.size[0], : s.size[1]] = s.image
        rows.append(torch.cat([torch.full((len(s.regions), 1), float(b), dtype=torch.float64), s.regions], dim=1))
    return Batch(
        images=images,
        sizes=[s.size for s in samples],
        samples=samples,
        boxes=torch.cat(rows).to(dtype),
        tights=torch.cat([s.tights for s in samples]).to(dtype),
        labels=torch.cat([s.labels for s in samples]),
    )


def iter_batches(dataset: RegionDataset, order, batch_size: int, workers: int = 0, dtype=torch.float32):
    """Batches in ``order``; worker threads only prefetch, order is fixed."""
    order = [int(i) for i in order]
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if workers <= 0:
        for chunk in chunks:
            yield collate([dataset[i] for i in chunk], dtype)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map() yields in submission order regardless of completion order
        for samples in pool.map(lambda c: [dataset[i] for i in c], chunks):
            yield collate(samples, dtype)
