"""Extractor + region pathway + supervision heads as one module.

The checkpoint descriptor (:meth:`RegionModel.descriptor`) records the
architecture, vocabulary and head set; :func:`model_from_descriptor`
rebuilds an identical module ready for ``load_state_dict``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from .backbone import POOL_SIZE, ExtractorConfig, RegionEncoder, RegionFeature, build_extractor, crop_and_pool, extract_features
from .data import Batch, Vocabulary
from .datamodel import ALL_HEADS
from .heads import (
    MASK_SIZE,
    BoxHead,
    ClsHead,
    FCNHead,
    HierarchyHead,
    MaskHead,
    MultiLabelHead,
    PATCH_NEIGHBORS,
    PatchLocationHead,
    RotationHead,
    SceneHead,
    StuffHead,
)

MODES = ("region", "crop")


@dataclass(frozen=True)
class ModelConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    dim: int = 256
    pool_size: int = POOL_SIZE
    mask_size: int = MASK_SIZE
    mode: str = "region"
    crop_size: int = 224
    stuff_combined: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor"] = self.extractor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["extractor"] = ExtractorConfig.from_dict(d.get("extractor", {}))
        return cls(**d)


class RegionModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.extractor = build_extractor(config.extractor)
        channels = self.extractor.out_channels
        if config.mode == "region":
            self.encoder = RegionEncoder(channels, config.dim, config.pool_size, config.mask_size)
            self.dim = config.dim
        else:
            self.encoder = None
            self.dim = channels
        self.heads = nn.ModuleDict()
        self.add_head("cls")

    @property
    def channels(self) -> int:
        return self.extractor.out_channels

    def _make_head(self, name: str) -> nn.Module:
        v, d, c = self.vocab, self.dim, self.channels
        if self.config.mode == "crop" and name in ("seg_region", "seg_fcn", "stuff", "scene"):
            raise ValueError(f"head {name!r} needs the region pathway (mode 'region')")
        if name == "cls":
            return ClsHead(d, v.n_classes)
        if name == "attribute":
            return MultiLabelHead(d, v.n_attributes)
        if name == "part":
            return MultiLabelHead(d, len(v.part_ids))
        if name == "hierarchy":
            return HierarchyHead(d, v.hierarchy_sizes)
        if name == "bbox":
            return BoxHead(d)
        if name == "seg_region":
            return MaskHead(c)
        if name == "seg_fcn":
            return FCNHead(c, v.n_classes)
        if name == "stuff":
            return StuffHead(c, v.n_classes, len(v.stuff_ids), self.config.stuff_combined)
        if name == "scene":
            return SceneHead(c, v.n_scenes)
        if name == "rotation":
            return RotationHead(c)
        if name == "patch_location":
            return PatchLocationHead(c)
        raise ValueError(f"unknown head {name!r}; known: {ALL_HEADS}")

    def add_head(self, name: str, generator_seed: int | None = None) -> nn.Module:
        """Create ``name`` if absent; a seed makes its initialisation reproducible."""
        if name in self.heads:
            return self.heads[name]
        if generator_seed is None:
            head = self._make_head(name)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(generator_seed)
                head = self._make_head(name)
        p = next(self.extractor.parameters())
        self.heads[name] = head.to(dtype=p.dtype, device=p.device)
        return self.heads[name]

    def features(self, images: Tensor, sizes=None):
        return extract_features(self.extractor, images, sizes)

    def regions(self, fmap, batch: Batch, with_mask_crops: bool = False) -> RegionFeature:
        if self.config.mode == "region":
            return self.encoder(fmap, batch.boxes, with_mask_crops)
        vecs = crop_and_pool(batch.images, batch.boxes, self.extractor, self.config.crop_size)
        return RegionFeature(vecs)

    @torch.no_grad()
    def embed(self, batch: Batch) -> Tensor:
        """Region feature vectors ``[R, d]`` for the batch's boxes."""
        fmap = self.features(batch.images, batch.sizes) if self.config.mode == "region" else None
        return self.regions(fmap, batch).vectors

    def descriptor(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "vocab": self.vocab.to_dict(),
            "heads": list(self.heads.keys()),
            "dim": self.dim,
            "mask_size": self.config.mask_size,
            "pool_size": self.config.pool_size,
            "patch_neighbors": list(PATCH_NEIGHBORS),
        }


def model_from_descriptor(desc: dict) -> RegionModel:
    model = RegionModel(ModelConfig.from_dict(desc["config"]), Vocabulary.from_dict(desc["vocab"]))
    for name in desc["heads"]:
        model.add_head(name)
    return model
