"""Reblurring networks, reblur composition, reblurring loss and pseudo defocus maps."""

from __future__ import annotations

import torch
import torch.nn as nn

from .imagecore import ShapeError, charbonnier
from .kernelgen import blur_levels, level_slice, levels_from_channels, seed_channels


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ConvTrunk(nn.Module):
    """Input conv, a stack of residual blocks, output conv; stride 1 throughout."""

    def __init__(self, in_ch: int, out_ch: int, width: int = 32, blocks: int = 3):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(inplace=True)]
        layers += [ResidualBlock(width) for _ in range(blocks)]
        layers.append(nn.Conv2d(width, out_ch, 3, padding=1))
        self.body = nn.Sequential(*layers)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu")
                nn.init.zeros_(mod.bias)

    def forward(self, x):
        return self.body(x)


class ReblurNet(nn.Module):
    """The two reblurring branches: kernel-seed head and blend-weight head."""

    def __init__(self, m: int = 8, width: int = 32, blocks: int = 3):
        super().__init__()
        self.m = m
        self.kpn = ConvTrunk(6, seed_channels(m), width, blocks)
        self.wpn = ConvTrunk(6, m, width, blocks)

    def forward(self, deblurred, blurry):
        return predict_seeds(self, deblurred, blurry), predict_weights(self, deblurred, blurry)


def _pair_input(deblurred: torch.Tensor, blurry: torch.Tensor) -> torch.Tensor:
    if deblurred.shape != blurry.shape:
        raise ShapeError(f"deblurred {tuple(deblurred.shape)} and blurry {tuple(blurry.shape)} differ")
    return torch.cat([deblurred, blurry], dim=1)


def predict_seeds(net: ReblurNet, deblurred: torch.Tensor, blurry: torch.Tensor) -> torch.Tensor:
    """Raw kernel seeds (B, M, H, W); normalization happens per kernel."""
    return net.kpn(_pair_input(deblurred, blurry))


def predict_weights(net: ReblurNet, deblurred: torch.Tensor, blurry: torch.Tensor) -> torch.Tensor:
    """Blend weights (B, m, H, W), softmax-normalized across levels."""
    return torch.softmax(net.wpn(_pair_input(deblurred, blurry)), dim=1)


def compose_reblur(deblurred: torch.Tensor, seeds: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of the zero-blur image and its ``m - 1`` blurred versions."""
    m = levels_from_channels(seeds.shape[1])
    if weights.shape[1] != m:
        raise ShapeError(f"weights have {weights.shape[1]} levels, seeds imply {m}")
    if weights.shape[-2:] != deblurred.shape[-2:] or weights.shape[0] != deblurred.shape[0]:
        raise ShapeError("weights and image disagree in batch or spatial size")
    out = weights[:, :1] * deblurred
    for i, blurred in enumerate(blur_levels(deblurred, seeds), start=1):
        out = out + weights[:, i : i + 1] * blurred
    return out


def reblur_loss(reblurred, blurry, epsilon: float = 1e-3, reduction: str = "mean"):
    return charbonnier(reblurred, blurry, epsilon, reduction)


def pseudo_defocus_map(seeds: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weight each seed block by its level's blend weight (level 1 is dropped)."""
    m = levels_from_channels(seeds.shape[1])
    if weights.shape[1] != m:
        raise ShapeError(f"weights have {weights.shape[1]} levels, seeds imply {m}")
    repeats = torch.arange(2, m + 1, device=weights.device)
    expanded = torch.repeat_interleave(weights[:, 1:], repeats, dim=1)
    return expanded * seeds


def uniform_disc_seeds(like: torch.Tensor, m: int) -> torch.Tensor:
    """Seeds whose kernels are flat discs at every level (all-equal seed values)."""
    B, _, H, W = like.shape
    return like.new_zeros(B, seed_channels(m), H, W)


def uniform_weights(like: torch.Tensor, m: int) -> torch.Tensor:
    B, _, H, W = like.shape
    return like.new_full((B, m, H, W), 1.0 / m)


def level_block(volume: torch.Tensor, level: int) -> torch.Tensor:
    return volume[:, level_slice(level)]
