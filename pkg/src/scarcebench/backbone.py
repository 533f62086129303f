"""Feature extractors, RoI-Align pooling and the object-crop pathway.

Coordinate convention: boxes are ``(x, y, w, h)`` in image pixels.  Feature
cell ``i`` of a stride-``s`` map is centred on image coordinate
``(i + 0.5) * s``, so an image point ``p`` maps to ``p / s - 0.5`` in
feature-map index space.  Bilinear samples are clamped to the valid index
range ``[0, size - 1]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

POOL_SIZE = 7
SAMPLING_RATIO = 2
BOX_EPS = 1e-6


@dataclass(frozen=True)
class FeatureMap:
    """Extractor output ``[N, D, h, w]`` with its stride.

    ``valid`` holds the ``(h, w)`` of each image's unpadded area in
    feature cells.
    """

    tensor: Tensor
    stride: int
    valid: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.tensor.dim() != 4:
            raise ValueError("feature map tensor must be [N, D, h, w]")

    def image(self, i: int) -> Tensor:
        t = self.tensor[i]
        if self.valid is None:
            return t
        h, w = self.valid[i]
        return t[:, :h, :w]


@dataclass(frozen=True)
class RegionFeature:
    """Per-region feature vectors ``[R, d]`` plus the aligned crops that made them.

    ``mask_crops`` (``[R, D, M, M]``) feeds the region-mask head.
    """

    vectors: Tensor
    crops: Tensor | None = None
    mask_crops: Tensor | None = None


def feature_size(n: int, stride: int = 8) -> int:
    return -(-n // stride)


# ---------------------------------------------------------------------------
# resizing


def resized_shape(height: int, width: int, short_edge: int) -> tuple[int, int]:
    if height <= 0 or width <= 0:
        raise ValueError(f"cannot resize a zero-sized image ({height}x{width})")
    s = short_edge / min(height, width)
    return max(1, round(height * s)), max(1, round(width * s))


def resize_short_edge(image: Tensor, short_edge: int = 800, boxes: Tensor | None = None):
    """Aspect-preserving resize of ``[C, H, W]`` so ``min(H, W) == short_edge``.

    Returns ``(image, boxes, (sy, sx))``; boxes ``[R, 4]`` (x, y, w, h) are
    scaled by the per-axis factors actually applied.
    """
    _, h, w = image.shape
    nh, nw = resized_shape(h, w, short_edge)
    sy, sx = nh / h, nw / w
    if (nh, nw) != (h, w):
        image = F.interpolate(image[None], size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)[0]
    if boxes is not None:
        boxes = scale_boxes(boxes, sy, sx)
    return image, boxes, (sy, sx)


def scale_boxes(boxes: Tensor, sy: float, sx: float) -> Tensor:
    scale = boxes.new_tensor([sx, sy, sx, sy])
    return boxes * scale


# ---------------------------------------------------------------------------
# extractors


@dataclass(frozen=True)
class ExtractorConfig:
    arch: str = "tiny"  # "tiny" or "resnet18"
    channels: int = 32
    strides: tuple[int, ...] = (2, 2, 2)
    norm: str = "batch"  # "batch" or "none"
    width: int = 64  # resnet18 base width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        d = dict(d)
        if "strides" in d:
            d["strides"] = tuple(d["strides"])
        return cls(**d)


def _norm(kind: str, c: int) -> nn.Module:
    return nn.BatchNorm2d(c) if kind == "batch" else nn.Identity()


class TinyExtractor(nn.Module):
    """Plain 3x3 conv stack; one conv (+norm) + ReLU per stride entry."""

    def __init__(self, channels: int = 32, strides=(2, 2, 2), norm: str = "batch", in_channels: int = 3):
        super().__init__()
        layers = []
        c_in = in_channels
        for s in strides:
            layers += [nn.Conv2d(c_in, channels, 3, stride=s, padding=1, bias=norm != "batch"), _norm(norm, channels), nn.ReLU()]
            c_in = channels
        self.body = nn.Sequential(*layers)
        self.out_channels = channels
        self.stride = math.prod(strides)

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.down is None else self.down(x)))


class ResNet18Stride8(nn.Module):
    """ResNet-18 whose first three residual stages each halve resolution.

    The stem keeps full resolution (no strided conv, no max-pool) and the
    last stage keeps stride 1, for a total stride of 8.
    """

    def __init__(self, width: int = 64, in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        widths = [width, width * 2, width * 4, width * 8]
        strides = [2, 2, 2, 1]
        stages = []
        c_in = width
        for c, s in zip(widths, strides):
            stages.append(nn.Sequential(BasicBlock(c_in, c, s), BasicBlock(c, c, 1)))
            c_in = c
        self.stages = nn.Sequential(*stages)
        self.out_channels = widths[-1]
        self.stride = 8

    def forward(self, x):
        return self.stages(self.stem(x))


def build_extractor(cfg: ExtractorConfig) -> nn.Module:
    if cfg.arch == "tiny":
        return TinyExtractor(cfg.channels, cfg.strides, cfg.norm)
    if cfg.arch == "resnet18":
        return ResNet18Stride8(cfg.width)
    raise ValueError(f"unknown extractor arch {cfg.arch!r}")


def extract_features(extractor: nn.Module, images: Tensor, sizes=None) -> FeatureMap:
    """Run ``extractor`` on ``[N, 3, H, W]``; ``sizes`` are unpadded ``(H, W)``."""
    out = extractor(images)
    stride = extractor.stride
    valid = None
    if sizes is not None:
        valid = tuple((feature_size(h, stride), feature_size(w, stride)) for h, w in sizes)
    return FeatureMap(out, stride, valid)


# ---------------------------------------------------------------------------
# RoI-Align


def _check_boxes(boxes: Tensor, stride: float) -> None:
    if boxes.dim() != 2 or boxes.shape[1] != 5:
        raise ValueError("boxes must be [R, 5] rows of (batch_index, x, y, w, h)")
    if boxes.numel() and bool((boxes[:, 3:5] <= stride * BOX_EPS).any()):
        bad = boxes[(boxes[:, 3:5] <= stride * BOX_EPS).any(dim=1)][0].tolist()
        raise ValueError(f"degenerate box {bad[1:]} (width or height ~ 0)")


def roi_align(
    features: Tensor,
    boxes: Tensor,
    output_size: int = POOL_SIZE,
    stride: float = 8,
    sampling_ratio: int = SAMPLING_RATIO,
) -> Tensor:
    """Bilinear RoI pooling of ``[N, D, h, w]`` features to ``[R, D, P, P]``.

    ``boxes`` rows are ``(batch_index, x, y, w, h)`` in image pixels.  Each
    of the ``P x P`` output cells averages ``sampling_ratio**2`` bilinear
    samples placed on a regular sub-grid of the cell.
    """
    _check_boxes(boxes, stride)
    n, d, fh, fw = features.shape
    P, S = output_size, sampling_ratio
    if boxes.shape[0] == 0:
        return features.new_zeros((0, d, P, P))
    bidx = boxes[:, 0].long()
    x0 = boxes[:, 1] / stride - 0.5
    y0 = boxes[:, 2] / stride - 0.5
    bin_w = boxes[:, 3] / stride / P
    bin_h = boxes[:, 4] / stride / P
    # sub-sample offsets in units of bins: j + (s + 0.5) / S
    grid = (torch.arange(P, dtype=boxes.dtype)[:, None] + (torch.arange(S, dtype=boxes.dtype)[None, :] + 0.5) / S).reshape(-1)
    xs = (x0[:, None] + grid[None, :] * bin_w[:, None]).clamp(0, fw - 1)
    ys = (y0[:, None] + grid[None, :] * bin_h[:, None]).clamp(0, fh - 1)

    xl = xs.floor().long().clamp(max=fw - 1)
    yl = ys.floor().long().clamp(max=fh - 1)
    xh = (xl + 1).clamp(max=fw - 1)
    yh = (yl + 1).clamp(max=fh - 1)
    ax = (xs - xl.to(xs.dtype)).to(features.dtype)
    ay = (ys - yl.to(ys.dtype)).to(features.dtype)

    fmap = features.permute(0, 2, 3, 1)  # [N, h, w, D]
    b = bidx[:, None, None]

    def gather(yi, xi):
        return fmap[b, yi[:, :, None], xi[:, None, :]]  # [R, PS, PS, D]

    wy0, wy1 = (1 - ay)[:, :, None, None], ay[:, :, None, None]
    wx0, wx1 = (1 - ax)[:, None, :, None], ax[:, None, :, None]
    val = wy0 * (wx0 * gather(yl, xl) + wx1 * gather(yl, xh)) + wy1 * (wx0 * gather(yh, xl) + wx1 * gather(yh, xh))
    r = boxes.shape[0]
    val = val.reshape(r, P, S, P, S, d).mean(dim=(2, 4))
    return val.permute(0, 3, 1, 2).contiguous()


class RegionEncoder(nn.Module):
    """RoI-Align to ``P x P`` then flatten and one linear map to ``d``.

    The flattened crop is scaled by ``1 / P`` so its squared norm is the
    mean (not the sum) of the per-cell squared norms; without it the
    projection's effective step size grows with ``P**2`` and SGD at
    lr 0.1 diverges.
    """

    def __init__(self, channels: int, dim: int, pool_size: int = POOL_SIZE, mask_size: int | None = None):
        super().__init__()
        self.pool_size = pool_size
        self.mask_size = mask_size
        self.proj = nn.Linear(channels * pool_size * pool_size, dim)
        self.dim = dim

    def forward(self, fmap: FeatureMap, boxes: Tensor, with_mask_crops: bool = False) -> RegionFeature:
        crops = roi_align(fmap.tensor, boxes, self.pool_size, fmap.stride)
        vectors = self.proj(crops.flatten(1) / self.pool_size)
        mask_crops = None
        if with_mask_crops:
            mask_crops = roi_align(fmap.tensor, boxes, self.mask_size, fmap.stride)
        return RegionFeature(vectors, crops, mask_crops)


def crop_and_pool(image: Tensor, box, extractor: nn.Module, size: int = 224) -> Tensor:
    """Object-crop pathway: bilinear crop to ``size x size``, extract, global-average-pool.

    ``image`` is ``[3, H, W]`` (or ``[N, 3, H, W]`` with ``box`` rows carrying a
    batch index).  Returns ``[D]`` (or ``[R, D]``).
    """
    single = image.dim() == 3
    if single:
        image = image[None]
        box = torch.as_tensor([[0.0, *[float(v) for v in box]]], dtype=image.dtype)
    crops = roi_align(image, box, output_size=size, stride=1, sampling_ratio=1)
    feats = extractor(crops).mean(dim=(2, 3))
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# parameter containers


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the state dict (names, dtypes, shapes and raw bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()
