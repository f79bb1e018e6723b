"""Isotropic per-pixel blur kernels built from radial kernel seeds.

A seed volume is a ``(B, M, H, W)`` tensor whose channels are the contiguous
blocks ``[s_2 | s_3 | ... | s_m]``; block ``i`` holds the radial profile
``a_0 ... a_{i-1}`` of a ``(2i-1) x (2i-1)`` kernel, so ``M = sum(2..m)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .imagecore import ShapeError

_RADIUS_TOL = 1e-9


def seed_channels(m: int) -> int:
    """Number of seed channels for maximal level ``m`` (35 for ``m = 8``)."""
    if m < 2:
        raise ValueError("m must be at least 2")
    return m * (m + 1) // 2 - 1


def levels_from_channels(channels: int) -> int:
    m = 2
    while seed_channels(m) < channels:
        m += 1
    if seed_channels(m) != channels:
        raise ShapeError(f"{channels} channels is not a valid seed volume size")
    return m


def level_slice(level: int) -> slice:
    """Channel range of block ``level`` inside a seed volume."""
    start = seed_channels(level - 1) if level > 2 else 0
    return slice(start, start + level)


@lru_cache(maxsize=None)
def _radial_table(level: int) -> tuple[np.ndarray, np.ndarray]:
    # interp: (taps, level) linear map from a seed to pre-normalized tap values;
    # support: (taps,) bool, True where rho <= level - 1.
    r = level - 1
    size = 2 * level - 1
    interp = np.zeros((size * size, level))
    support = np.zeros(size * size, dtype=bool)
    for t in range(size * size):
        dy, dx = divmod(t, size)
        rho = np.hypot(dx - r, dy - r)
        if rho > r + _RADIUS_TOL:
            continue
        support[t] = True
        nearest = round(rho)
        if abs(rho - nearest) <= _RADIUS_TOL:
            interp[t, nearest] = 1.0
        else:
            lo, hi = int(np.floor(rho)), int(np.ceil(rho))
            interp[t, lo] = hi - rho
            interp[t, hi] = rho - lo
    return interp, support


def radial_table(level: int, dtype=torch.float64, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Interpolation matrix restricted to the support, and the support tap indices."""
    interp, support = _radial_table(level)
    idx = np.flatnonzero(support)
    return (
        torch.as_tensor(interp[idx], dtype=dtype, device=device),
        torch.as_tensor(idx, dtype=torch.long, device=device),
    )


def seed_to_kernel(seed, level: int) -> torch.Tensor:
    """Build the ``(2i-1) x (2i-1)`` isotropic kernel for a single seed vector.

    Pre-normalized taps interpolate the seed linearly in the radius; the
    softmax then runs over the taps with radius ``<= level - 1`` only, so the
    result sums to one and is exactly zero outside that disc.
    """
    seed = torch.as_tensor(seed)
    if not seed.is_floating_point():
        seed = seed.to(torch.float64)
    if level < 2:
        raise ValueError("level must be at least 2")
    if seed.shape != (level,):
        raise ShapeError(f"level {level} needs a seed of length {level}, got {tuple(seed.shape)}")
    interp, idx = radial_table(level, dtype=seed.dtype, device=seed.device)
    taps = torch.softmax(interp @ seed, dim=0)
    size = 2 * level - 1
    kernel = seed.new_zeros(size * size)
    kernel = kernel.index_put((idx,), taps)
    return kernel.reshape(size, size)


def pixel_kernels(seed_block: torch.Tensor, level: int) -> torch.Tensor:
    """Normalized support taps for every pixel: (B, level, H, W) -> (B, S, H, W)."""
    if seed_block.shape[1] != level:
        raise ShapeError(f"seed block for level {level} must have {level} channels")
    interp, _ = radial_table(level, dtype=seed_block.dtype, device=seed_block.device)
    logits = torch.einsum("si,bihw->bshw", interp, seed_block)
    return torch.softmax(logits, dim=1)


def apply_pixel_kernels(img: torch.Tensor, taps: torch.Tensor, level: int) -> torch.Tensor:
    """Correlate ``img`` (B, C, H, W) with per-pixel support taps (B, S, H, W)."""
    B, C, H, W = img.shape
    r = level - 1
    size = 2 * level - 1
    _, idx = radial_table(level, device=img.device)
    padded = F.pad(img, (r, r, r, r), mode="replicate")
    patches = F.unfold(padded, kernel_size=size).view(B, C, size * size, H, W)
    patches = patches.index_select(2, idx)
    return (patches * taps.unsqueeze(1)).sum(dim=2)


def blur_levels(img: torch.Tensor, seeds: torch.Tensor) -> list[torch.Tensor]:
    """Blur ``img`` at every level ``2..m`` with its spatially-variant kernels.

    ``img`` is (B, C, H, W), ``seeds`` (B, M, H, W). Returns ``m - 1`` images,
    level 2 first. Borders are replicate-padded; correlation orientation.
    """
    if img.dim() != 4 or seeds.dim() != 4:
        raise ShapeError("blur_levels expects batched (B, C, H, W) tensors")
    if img.shape[0] != seeds.shape[0] or img.shape[-2:] != seeds.shape[-2:]:
        raise ShapeError(f"image {tuple(img.shape)} and seeds {tuple(seeds.shape)} disagree")
    m = levels_from_channels(seeds.shape[1])
    out = []
    for level in range(2, m + 1):
        taps = pixel_kernels(seeds[:, level_slice(level)], level)
        out.append(apply_pixel_kernels(img, taps, level))
    return out


def kernel_to_image(kernel: torch.Tensor) -> torch.Tensor:
    """Scale a kernel to [0, 1] for display; returns (1, k, k)."""
    k = kernel.detach().to(torch.float64)
    peak = k.max()
    if peak > 0:
        k = k / peak
    return k.unsqueeze(0)
