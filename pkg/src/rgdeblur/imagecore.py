"""Shared numeric primitives: Charbonnier penalty, bilinear sampling, warping,
reference metrics, and image / flow file I/O.

Images are torch tensors laid out ``(B, C, H, W)`` (a missing batch axis is
accepted where noted) with intensities in ``[0, 1]``. Flow fields are
``(B, 2, H, W)`` tensors of pixel displacements ``(dx, dy)``.

Flow convention used throughout the package: a flow "from ``a`` to ``b``" is
the field for which ``warp(a, flow)`` reproduces ``b``, i.e. every output
pixel ``(x, y)`` reads ``a`` at ``(x + dx, y + dy)``.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

FLOW_MAGIC = b"FLOWv1\0\0"


class ShapeError(ValueError):
    """Raised when array arguments violate a shape contract."""


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what} must share a shape, got {tuple(a.shape)} and {tuple(b.shape)}")


def _as_batched(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {tuple(img.shape)}")
    return img, False


# --------------------------------------------------------------------------- #
# Charbonnier
# --------------------------------------------------------------------------- #


def charbonnier(
    a: torch.Tensor,
    b: torch.Tensor,
    epsilon: float = 1e-3,
    reduction: str = "mean",
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Charbonnier distance between ``a`` and ``b``.

    ``reduction="mean"`` averages ``sqrt((a - b)^2 + eps^2)`` over elements;
    ``reduction="global"`` is the single-norm form ``sqrt(||a - b||^2 + eps^2)``.

    ``mask`` (broadcastable to ``a``) selects the elements that count. In mean
    mode the average runs over selected elements only, so sparse masks do not
    shrink the loss; an empty mask yields ``epsilon``. In global mode the mask
    multiplies the residual before the norm.
    """
    _check_same_shape(a, b)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    diff = a - b
    if reduction == "global":
        if mask is not None:
            diff = diff * mask
        return torch.sqrt(diff.pow(2).sum() + epsilon**2)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    pen = torch.sqrt(diff.pow(2) + epsilon**2)
    if mask is None:
        return pen.mean()
    mask = mask.to(pen.dtype).expand_as(pen)
    count = mask.sum()
    if count.item() == 0:
        return pen.new_tensor(epsilon)
    return (pen * mask).sum() / count


# --------------------------------------------------------------------------- #
# Sampling and warping
# --------------------------------------------------------------------------- #


def sample_points(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``img`` (B, C, H, W) at coordinates ``x``, ``y`` (B, ...).

    Coordinates are in pixels, clamped to the image (replicate border).
    Returns (B, C, ...). Differentiable in ``img``, ``x`` and ``y``.
    """
    B, C, H, W = img.shape
    out_shape = x.shape[1:]
    x = x.reshape(B, -1).clamp(0, W - 1)
    y = y.reshape(B, -1).clamp(0, H - 1)
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    wx = x - x0
    wy = y - y0
    # NaN coordinates read pixel 0; their NaN weights still poison the result
    x0i = torch.nan_to_num(x0, nan=0.0).long()
    y0i = torch.nan_to_num(y0, nan=0.0).long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)

    flat = img.reshape(B, C, H * W)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * W + xi).unsqueeze(1).expand(B, C, -1)
        return torch.gather(flat, 2, idx)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = (
        gather(y0i, x0i) * (1 - wx) * (1 - wy)
        + gather(y0i, x1i) * wx * (1 - wy)
        + gather(y1i, x0i) * (1 - wx) * wy
        + gather(y1i, x1i) * wx * wy
    )
    return out.reshape(B, C, *out_shape)


def bilinear_sample(img: torch.Tensor, x, y) -> torch.Tensor:
    """Sample a single location ``(x, y)`` of ``img`` (C, H, W); returns (C,)."""
    if img.dim() != 3 or img.numel() == 0:
        raise ShapeError("bilinear_sample expects a non-empty (C, H, W) image")
    xt = torch.as_tensor(x, dtype=img.dtype).reshape(1, 1)
    yt = torch.as_tensor(y, dtype=img.dtype).reshape(1, 1)
    return sample_points(img.unsqueeze(0), xt, yt)[0, :, 0]


def pixel_grid(h: int, w: int, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return xs, ys


def warp(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``img`` by ``flow``: ``out(x, y) = img(x + dx, y + dy)``."""
    img, squeezed = _as_batched(img)
    flow, _ = _as_batched(flow)
    if flow.shape[1] != 2 or flow.shape[-2:] != img.shape[-2:] or flow.shape[0] != img.shape[0]:
        raise ShapeError(f"flow {tuple(flow.shape)} does not match image {tuple(img.shape)}")
    B, _, H, W = img.shape
    xs, ys = pixel_grid(H, W, dtype=flow.dtype, device=flow.device)
    out = sample_points(img, xs + flow[:, 0], ys + flow[:, 1])
    return out[0] if squeezed else out


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #


def _to_float64(img) -> torch.Tensor:
    t = torch.as_tensor(img).detach().to(torch.float64)
    return t.unsqueeze(0) if t.dim() == 3 else t


def psnr(a, b) -> float:
    """PSNR in dB for peak 1.0; ``math.inf`` for identical inputs."""
    a = _to_float64(a)
    b = _to_float64(b)
    _check_same_shape(a, b)
    mse = (a - b).pow(2).mean().item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window, peak 1.0, averaged over channels.

    Statistics are computed on the valid region only (no padding).
    """
    a = _to_float64(a)
    b = _to_float64(b)
    _check_same_shape(a, b)
    B, C, H, W = a.shape
    if H < window or W < window:
        raise ShapeError(f"images must be at least {window}x{window} for SSIM")
    g = _gaussian_window(window, sigma)
    kx = g.view(1, 1, 1, window).expand(C, 1, 1, window)
    ky = g.view(1, 1, window, 1).expand(C, 1, window, 1)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(F.conv2d(t, kx, groups=C), ky, groups=C)

    c1 = 0.01**2
    c2 = 0.03**2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean().item()


# --------------------------------------------------------------------------- #
# File I/O
# --------------------------------------------------------------------------- #


def read_image(path: str | Path) -> torch.Tensor:
    """Read an 8- or 16-bit PNG into a float32 (C, H, W) tensor in [0, 1]."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FileNotFoundError(path)
    if arr.dtype == np.uint16:
        scale = 65535.0
    elif arr.dtype == np.uint8:
        scale = 255.0
    else:
        raise ValueError(f"unsupported PNG sample type {arr.dtype} in {path}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.shape[2] == 3:
        arr = arr[:, :, ::-1]
    out = arr.astype(np.float32) / scale
    return torch.from_numpy(np.ascontiguousarray(out.transpose(2, 0, 1)))


def write_image(path: str | Path, img, bits: int = 8) -> None:
    """Write a (C, H, W) image (C in {1, 3}) to PNG, clipping to [0, 1]."""
    arr = torch.as_tensor(img).detach().cpu().to(torch.float64).numpy()
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError("write_image takes a single image")
        arr = arr[0]
    arr = np.clip(arr, 0.0, 1.0).transpose(1, 2, 0)
    if bits == 8:
        out = np.round(arr * 255.0).astype(np.uint8)
    elif bits == 16:
        out = np.round(arr * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if out.shape[2] == 3:
        out = out[:, :, ::-1]
    elif out.shape[2] == 1:
        out = out[:, :, 0]
    else:
        raise ShapeError("only 1- and 3-channel images can be written")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(out)):
        raise OSError(f"failed to write {path}")


def write_flow(path: str | Path, flow) -> None:
    """Serialize a (2, H, W) flow field in the FLOWv1 binary layout."""
    arr = torch.as_tensor(flow).detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"flow must be (2, H, W), got {arr.shape}")
    _, h, w = arr.shape
    body = np.ascontiguousarray(arr.transpose(1, 2, 0)).astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(body.tobytes())


def read_flow(path: str | Path) -> torch.Tensor:
    """Read a FLOWv1 file into a float32 (2, H, W) tensor."""
    data = Path(path).read_bytes()
    if data[:8] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a FLOWv1 file")
    h, w = struct.unpack("<II", data[8:16])
    expected = 16 + h * w * 2 * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, 2)
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32))
