"""Supervision heads and their losses.

Object-level heads read :class:`~scarcebench.backbone.RegionFeature`,
image-level heads read :class:`~scarcebench.backbone.FeatureMap`, and the
self-supervised heads read feature maps of *edited* images.  Each loss sums
over the label-bearing units it is given; units whose label is withheld
are dropped by an ``available`` mask and contribute exactly zero.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import FeatureMap, RegionFeature

IGNORE = -1
MASK_SIZE = 14
STUFF_BACKGROUND_WEIGHT = 0.1
# grid cells of the 3x3 patch layout, row-major; the centre (4) is excluded
PATCH_NEIGHBORS = (0, 1, 2, 3, 5, 6, 7, 8)


def _apply_available(x: Tensor, available: Tensor | None) -> Tensor:
    if available is None:
        return x
    return x[available.bool()]


# ---------------------------------------------------------------------------
# functional losses


def cls_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Summed softmax cross-entropy over objects."""
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"class label outside vocabulary of size {k}")
    return F.cross_entropy(logits, labels, reduction="sum")


def multilabel_loss(logits: Tensor, targets: Tensor, available: Tensor | None = None) -> Tensor:
    """Summed per-label sigmoid binary cross-entropy (attributes, parts)."""
    logits, targets = _apply_available(logits, available), _apply_available(targets, available)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="sum")


def hierarchy_loss(level_logits: list[Tensor], labels: Tensor, available: Tensor | None = None) -> Tensor:
    """Sum of one cross-entropy per hierarchy level; ``labels`` is ``[N, levels]``."""
    if labels.dim() != 2 or labels.shape[1] != len(level_logits):
        raise ValueError(f"hierarchy labels must be [N, {len(level_logits)}]")
    labels = _apply_available(labels, available)
    total = level_logits[0].new_zeros(())
    for level, logits in enumerate(level_logits):
        logits = _apply_available(logits, available)
        k = logits.shape[-1]
        lab = labels[:, level]
        if lab.numel() and (int(lab.min()) < 0 or int(lab.max()) >= k):
            raise ValueError(f"hierarchy level {level} label outside vocabulary of size {k}")
        total = total + F.cross_entropy(logits, lab, reduction="sum")
    return total


def bbox_targets(region: Tensor, tight: Tensor) -> Tensor:
    """Centre/log-size offsets of ``tight`` relative to ``region`` (both ``[N, 4]`` xywh)."""
    if bool((region[:, 2:] <= 0).any()) or bool((tight[:, 2:] <= 0).any()):
        raise ValueError("boxes must have positive width and height")
    rc = region[:, :2] + region[:, 2:] / 2
    tc = tight[:, :2] + tight[:, 2:] / 2
    t_xy = (tc - rc) / region[:, 2:]
    t_wh = torch.log(tight[:, 2:] / region[:, 2:])
    return torch.cat([t_xy, t_wh], dim=1)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    a = x.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def bbox_loss(pred: Tensor, region: Tensor, tight: Tensor, available: Tensor | None = None) -> Tensor:
    target = bbox_targets(region, tight)
    return smooth_l1(_apply_available(pred, available) - _apply_available(target, available)).sum()


def seg_region_loss(mask_logits: Tensor, mask_targets: Tensor, available: Tensor | None = None) -> Tensor:
    """Summed per-cell BCE of ``[N, M, M]`` mask logits against binary targets."""
    return multilabel_loss(mask_logits.flatten(1), mask_targets.flatten(1), available)


def masked_ce(logits: Tensor, labels: Tensor, weights: Tensor | None = None) -> tuple[Tensor, bool]:
    """Mean cross-entropy over cells whose label is not ``IGNORE``.

    ``logits`` is ``[K, h, w]``, ``labels`` ``[h, w]``.  Optional per-class
    ``weights`` scale each cell's term; the sum is still divided by the
    number of labelled cells.  Returns ``(loss, all_ignored)``; with every
    cell ignored the loss is 0.
    """
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return logits.sum() * 0.0, True
    flat_logits = logits.permute(1, 2, 0)[valid]
    lab = labels[valid]
    ce = F.cross_entropy(flat_logits, lab, reduction="none")
    if weights is not None:
        ce = ce * weights[lab]
    return ce.sum() / n, False


def masked_bce(logits: Tensor, labels: Tensor) -> tuple[Tensor, bool]:
    """Mean binary cross-entropy over non-ignored cells of ``[h, w]`` maps."""
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return logits.sum() * 0.0, True
    return F.binary_cross_entropy_with_logits(logits[valid], labels[valid].to(logits.dtype), reduction="sum") / n, False


def stuff_weights(n_object_classes: int, n_stuff_classes: int, dtype=torch.float32) -> Tensor:
    w = torch.ones(n_object_classes + n_stuff_classes, dtype=dtype)
    w[n_object_classes:] = STUFF_BACKGROUND_WEIGHT
    return w


# ---------------------------------------------------------------------------
# edits for self-supervision


def square_crop(image: Tensor) -> Tensor:
    _, h, w = image.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return image[:, top : top + s, left : left + s]


def rotation_edit(image: Tensor, k: int) -> tuple[Tensor, int]:
    """Centre square crop rotated by ``90 * k`` degrees counter-clockwise."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"rotation index must be 0..3, got {k}")
    sq = square_crop(image)
    return torch.rot90(sq, k, dims=(1, 2)), k


def grid_cell(image: Tensor, index: int) -> Tensor:
    _, h, w = image.shape
    ch, cw = h // 3, w // 3
    r, c = divmod(index, 3)
    return image[:, r * ch : (r + 1) * ch, c * cw : (c + 1) * cw]


def patch_location_edit(image: Tensor, rng: np.random.Generator, min_patch: int = 8, neighbor: int | None = None):
    """Centre patch, one neighbour patch of a 3x3 grid, and the neighbour's label.

    Labels enumerate the eight non-centre cells row-major (so the cell above
    the centre, grid index 1, has label 1 and grid index 5 has label 4).
    """
    _, h, w = image.shape
    if h // 3 < min_patch or w // 3 < min_patch:
        raise ValueError(f"image {h}x{w} too small for a 3x3 grid of {min_patch}px patches")
    label = int(rng.integers(8)) if neighbor is None else PATCH_NEIGHBORS.index(neighbor)
    return grid_cell(image, 4), grid_cell(image, PATCH_NEIGHBORS[label]), label


# ---------------------------------------------------------------------------
# head modules


def _require(x, kind, head):
    if not isinstance(x, kind):
        raise TypeError(f"{head} head consumes {kind.__name__}, got {type(x).__name__}")


class ClsHead(nn.Module):
    level = "object"

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(dim, n_classes)

    def forward(self, feats: RegionFeature) -> Tensor:
        _require(feats, RegionFeature, "cls")
        return self.fc(feats.vectors)

    def loss(self, feats: RegionFeature, labels: Tensor) -> Tensor:
        return cls_loss(self(feats), labels)


class MultiLabelHead(nn.Module):
    """Attribute or part head: one sigmoid score per vocabulary entry."""

    level = "object"

    def __init__(self, dim: int, n_labels: int):
        super().__init__()
        self.fc = nn.Linear(dim, n_labels)

    def forward(self, feats: RegionFeature) -> Tensor:
        _require(feats, RegionFeature, "multi-label")
        return self.fc(feats.vectors)

    def loss(self, feats, targets, available=None):
        return multilabel_loss(self(feats), targets, available)


class HierarchyHead(nn.Module):
    level = "object"

    def __init__(self, dim: int, level_sizes):
        super().__init__()
        self.levels = nn.ModuleList(nn.Linear(dim, k) for k in level_sizes)

    def forward(self, feats: RegionFeature) -> list[Tensor]:
        _require(feats, RegionFeature, "hierarchy")
        return [fc(feats.vectors) for fc in self.levels]

    def loss(self, feats, labels, available=None):
        return hierarchy_loss(self(feats), labels, available)


class BoxHead(nn.Module):
    level = "object"

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, 4)

    def forward(self, feats: RegionFeature) -> Tensor:
        _require(feats, RegionFeature, "bbox")
        return self.fc(feats.vectors)

    def loss(self, feats, region, tight, available=None):
        return bbox_loss(self(feats), region, tight, available)


class MaskHead(nn.Module):
    """Binary mask logits on the ``M x M`` aligned crop of each region."""

    level = "object"

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.conv = nn.Conv2d(channels, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)

    def forward(self, feats: RegionFeature) -> Tensor:
        _require(feats, RegionFeature, "seg_region")
        if feats.mask_crops is None:
            raise ValueError("seg_region head needs mask crops")
        return self.out(F.relu(self.conv(feats.mask_crops)))[:, 0]

    def loss(self, feats, targets, available=None):
        return seg_region_loss(self(feats), targets, available)


class DenseHead(nn.Module):
    """1x1 conv over the feature map (semantic or stuff segmentation)."""

    level = "image"

    def __init__(self, channels: int, n_out: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, n_out, 1)

    def forward(self, fmap: FeatureMap) -> Tensor:
        _require(fmap, FeatureMap, "dense")
        return self.conv(fmap.tensor)


class FCNHead(DenseHead):
    def loss_one(self, logits: Tensor, labels: Tensor) -> tuple[Tensor, bool]:
        return masked_ce(logits, labels)


class StuffHead(DenseHead):
    """Object-vs-stuff (plain) or base classes plus stuff classes (combined)."""

    def __init__(self, channels: int, n_object_classes: int = 0, n_stuff_classes: int = 0, combined: bool = False):
        super().__init__(channels, n_object_classes + n_stuff_classes if combined else 1)
        self.combined = combined
        self.n_object_classes = n_object_classes
        self.n_stuff_classes = n_stuff_classes

    def loss_one(self, logits: Tensor, labels: Tensor) -> tuple[Tensor, bool]:
        if self.combined:
            weights = stuff_weights(self.n_object_classes, self.n_stuff_classes, logits.dtype).to(logits.device)
            return masked_ce(logits, labels, weights)
        return masked_bce(logits[0], labels)


def pooled(fmap: FeatureMap) -> Tensor:
    """Global average over each image's unpadded area: ``[N, D]``."""
    if fmap.valid is None:
        return fmap.tensor.mean(dim=(2, 3))
    return torch.stack([fmap.image(i).mean(dim=(1, 2)) for i in range(fmap.tensor.shape[0])])


class SceneHead(nn.Module):
    level = "image"

    def __init__(self, channels: int, n_scenes: int):
        super().__init__()
        self.fc = nn.Linear(channels, n_scenes)

    def forward(self, fmap: FeatureMap) -> Tensor:
        _require(fmap, FeatureMap, "scene")
        return self.fc(pooled(fmap))

    def loss(self, fmap: FeatureMap, labels: Tensor) -> Tensor:
        """Summed CE over images; label ``IGNORE`` marks an absent scene."""
        logits = self(fmap)
        keep = labels != IGNORE
        if not bool(keep.any()):
            return logits.sum() * 0.0
        return F.cross_entropy(logits[keep], labels[keep], reduction="sum")


class RotationHead(nn.Module):
    level = "self"

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, 4)

    def forward(self, fmap: FeatureMap) -> Tensor:
        _require(fmap, FeatureMap, "rotation")
        return self.fc(pooled(fmap))

    def loss(self, fmap: FeatureMap, labels: Tensor) -> Tensor:
        return F.cross_entropy(self(fmap), labels, reduction="sum")


class PatchLocationHead(nn.Module):
    level = "self"

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(2 * channels, 8)

    def forward(self, center: FeatureMap, neighbor: FeatureMap) -> Tensor:
        _require(center, FeatureMap, "patch_location")
        _require(neighbor, FeatureMap, "patch_location")
        return self.fc(torch.cat([pooled(center), pooled(neighbor)], dim=1))

    def loss(self, center, neighbor, labels):
        return F.cross_entropy(self(center, neighbor), labels, reduction="sum")
