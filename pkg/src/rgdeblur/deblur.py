"""Deblurring module: blur-map estimator, deformable cross-attention fusion and backbones."""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imagecore import ShapeError, pixel_grid, sample_points
from .kernelgen import seed_channels
from .reblur import ConvTrunk


class BlurMapEstimator(nn.Module):
    """Two convolutions around three residual blocks, softplus output (B, M, H, W)."""

    def __init__(self, m: int = 8, width: int = 32, blocks: int = 3):
        super().__init__()
        self.m = m
        self.trunk = ConvTrunk(3, seed_channels(m), width, blocks)

    def forward(self, blurry):
        return estimate_blur_map(self, blurry)


def estimate_blur_map(estimator: BlurMapEstimator, blurry: torch.Tensor) -> torch.Tensor:
    if blurry.dim() != 4 or blurry.shape[1] != 3:
        raise ShapeError(f"estimator expects (B, 3, H, W), got {tuple(blurry.shape)}")
    return F.softplus(estimator.trunk(blurry))


class DeformableFusion(nn.Module):
    """Deformable cross-attention injecting a blur map into the blurry image.

    For each head ``h`` and sampling point ``n`` the blurry pixel is projected
    by ``query[h, n]`` (M x 3), the blur map is read at an offset predicted
    from the blurry pixel and projected by ``value[h, n]`` (M x M); the
    element-wise products are summed over points, scaled by ``1 / (points *
    channels)``, mapped back to RGB by ``out[h]`` (3 x M), averaged over
    heads and added to the blurry image.
    """

    def __init__(self, channels: int = 35, heads: int = 5, points: int = 4):
        super().__init__()
        self.channels = channels
        self.heads = heads
        self.points = points
        self.query = nn.Parameter(torch.randn(heads, points, channels, 3) / math.sqrt(3))
        self.value = nn.Parameter(torch.randn(heads, points, channels, channels) / math.sqrt(channels))
        # offsets: per head a linear map RGB -> (dx_1, dy_1, ..., dx_Np, dy_Np)
        self.offset_weight = nn.Parameter(torch.zeros(heads, 2 * points, 3))
        self.offset_bias = nn.Parameter(torch.zeros(heads, 2 * points))
        self.out = nn.Parameter(torch.zeros(heads, 3, channels))

    def offsets(self, blurry: torch.Tensor) -> torch.Tensor:
        """Per-pixel offsets (B, heads, points, 2, H, W) in pixels."""
        B, _, H, W = blurry.shape
        off = torch.einsum("hoc,bcyx->bhoyx", self.offset_weight, blurry)
        off = off + self.offset_bias[None, :, :, None, None]
        return off.view(B, self.heads, self.points, 2, H, W)

    def forward(self, blurry, blurmap):
        return fuse(self, blurry, blurmap)


def fuse(fusion: DeformableFusion, blurry: torch.Tensor, blurmap: torch.Tensor) -> torch.Tensor:
    if blurry.dim() != 4 or blurry.shape[1] != 3:
        raise ShapeError(f"fusion expects a (B, 3, H, W) image, got {tuple(blurry.shape)}")
    if blurmap.shape[1] != fusion.channels:
        raise ShapeError(f"blur map has {blurmap.shape[1]} channels, fusion expects {fusion.channels}")
    if blurmap.shape[0] != blurry.shape[0] or blurmap.shape[-2:] != blurry.shape[-2:]:
        raise ShapeError("blur map and image disagree in batch or spatial size")
    B, _, H, W = blurry.shape
    Ha, Np, M = fusion.heads, fusion.points, fusion.channels

    off = fusion.offsets(blurry)
    xs, ys = pixel_grid(H, W, dtype=blurry.dtype, device=blurry.device)
    sx = xs + off[:, :, :, 0]
    sy = ys + off[:, :, :, 1]
    sampled = sample_points(blurmap, sx, sy)  # (B, M, Ha, Np, H, W)

    query = torch.einsum("hnmc,bcyx->bhnmyx", fusion.query, blurry)
    value = torch.einsum("hnkm,bmhnyx->bhnkyx", fusion.value, sampled)
    # fixed 1/(Np*M) scale keeps Adam steps on `out` from jolting the fused image
    agg = (query * value).sum(dim=2) / (Np * M)  # (B, Ha, M, H, W)
    residual = torch.einsum("hcm,bhmyx->bhcyx", fusion.out, agg).mean(dim=1)
    return blurry + residual


# --------------------------------------------------------------------------- #
# Backbones
# --------------------------------------------------------------------------- #

BACKBONES: dict[str, Callable[..., nn.Module]] = {}


def register_backbone(name: str):
    def deco(factory):
        BACKBONES[name] = factory
        return factory

    return deco


def build_backbone(name: str, **options) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise KeyError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}") from None
    return factory(**options)


class _DoubleConv(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.ReLU(inplace=True),
        )


@register_backbone("unet")
class UNet(nn.Module):
    """Small residual UNet; encoder widths given coarse-to-fine by ``widths``.

    The output head is zero-initialized so the network starts as the identity.
    Inputs whose size is not divisible by the total downsampling factor are
    replicate-padded and cropped back.
    """

    def __init__(self, widths=(32, 64, 128), in_ch: int = 3, out_ch: int = 3):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.factor = 2 ** (len(widths) - 1)
        self.enc = nn.ModuleList()
        prev = in_ch
        for w in widths:
            self.enc.append(_DoubleConv(prev, w))
            prev = w
        self.dec = nn.ModuleList()
        for skip, w in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.dec.append(_DoubleConv(w + skip, skip))
        self.head = nn.Conv2d(widths[0], out_ch, 1)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                nn.init.zeros_(mod.bias)
        nn.init.zeros_(self.head.weight)

    def forward(self, x):
        H, W = x.shape[-2:]
        ph = (-H) % self.factor
        pw = (-W) % self.factor
        inp = F.pad(x, (0, pw, 0, ph), mode="replicate") if ph or pw else x
        skips = []
        h = inp
        for i, block in enumerate(self.enc):
            if i > 0:
                h = F.max_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        for block, skip in zip(self.dec, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        out = inp + self.head(h)
        return out[..., :H, :W]


@register_backbone("identity")
class IdentityBackbone(nn.Module):
    def __init__(self, **_):
        super().__init__()

    def forward(self, x):
        return x


# --------------------------------------------------------------------------- #
# Composition
# --------------------------------------------------------------------------- #


class DeblurModel(nn.Module):
    """``D(F(I_B, E(I_B)))``; without fusion it reduces to ``D(I_B)``."""

    def __init__(self, backbone: nn.Module, estimator: BlurMapEstimator | None = None,
                 fusion: DeformableFusion | None = None):
        super().__init__()
        if (estimator is None) != (fusion is None):
            raise ValueError("estimator and fusion are used together or not at all")
        self.backbone = backbone
        self.estimator = estimator
        self.fusion = fusion

    def forward(self, blurry):
        return deblur_forward(self.backbone, self.estimator, self.fusion, blurry)


def deblur_forward(backbone, estimator, fusion, blurry: torch.Tensor):
    """Return ``(deblurred, blurmap)``; ``blurmap`` is None without an estimator."""
    if blurry.dim() != 4 or blurry.shape[1] != 3:
        raise ShapeError(f"expected a (B, 3, H, W) image, got {tuple(blurry.shape)}")
    if estimator is None:
        return backbone(blurry), None
    blurmap = estimate_blur_map(estimator, blurry)
    return backbone(fuse(fusion, blurry, blurmap)), blurmap
