"""Flow providers, calibration masks and the misalignment-tolerant losses."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .imagecore import ShapeError, charbonnier, read_flow, warp

# Horn-Schunck neighbourhood average
_HS_AVG = torch.tensor([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])
_SMOOTH = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _conv_same(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    kh, kw = kernel.shape
    padded = F.pad(img, (kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate")
    return F.conv2d(padded, kernel.to(img.dtype).view(1, 1, kh, kw))


def _smooth(img: torch.Tensor) -> torch.Tensor:
    return _conv_same(_conv_same(img, _SMOOTH.view(1, 5)), _SMOOTH.view(5, 1))


def _gradients(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    d = torch.tensor([[-0.5, 0.0, 0.5]], dtype=img.dtype)
    return _conv_same(img, d), _conv_same(img, d.t())


def _pyramid(img: torch.Tensor, levels: int) -> list[torch.Tensor]:
    pyr = [img]
    for _ in range(levels - 1):
        cur = pyr[-1]
        if min(cur.shape[-2:]) < 8:
            break
        pyr.append(F.avg_pool2d(_smooth(cur), 2, ceil_mode=True))
    return pyr[::-1]


@torch.no_grad()
def classical_flow(
    a: torch.Tensor,
    b: torch.Tensor,
    levels: int = 4,
    iterations: int = 60,
    smoothness: float = 0.2,
    warps: int = 3,
) -> torch.Tensor:
    """Coarse-to-fine Horn-Schunck flow with ``warp(a, flow) ~= b``.

    ``a``, ``b`` are (B, C, H, W); returns (B, 2, H, W) in the input dtype.
    Constant images give zero flow.
    """
    if a.shape != b.shape:
        raise ShapeError(f"flow inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    a64 = _smooth(a.detach().to(torch.float64).mean(dim=1, keepdim=True))
    b64 = _smooth(b.detach().to(torch.float64).mean(dim=1, keepdim=True))
    pa = _pyramid(a64, levels)
    pb = _pyramid(b64, levels)
    alpha2 = smoothness**2
    avg = _HS_AVG.to(torch.float64)

    B = a.shape[0]
    flow = torch.zeros(B, 2, *pa[0].shape[-2:], dtype=torch.float64)
    for la, lb in zip(pa, pb):
        if flow.shape[-2:] != la.shape[-2:]:
            sy = la.shape[-2] / flow.shape[-2]
            sx = la.shape[-1] / flow.shape[-1]
            flow = F.interpolate(flow, size=la.shape[-2:], mode="bilinear", align_corners=False)
            flow = flow * torch.tensor([sx, sy], dtype=flow.dtype).view(1, 2, 1, 1)
        for _ in range(warps):
            aw = warp(la, flow)
            ix, iy = _gradients(aw)
            it = aw - lb
            u0, v0 = flow[:, :1], flow[:, 1:]
            u, v = u0.clone(), v0.clone()
            denom = alpha2 + ix**2 + iy**2
            for _ in range(iterations):
                ub = _conv_same(u, avg)
                vb = _conv_same(v, avg)
                r = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
                u = ub - ix * r
                v = vb - iy * r
            flow = torch.cat([u, v], dim=1)
    return flow.to(a.dtype)


def calibration_mask(flow: torch.Tensor, lam: float = 0.35, mode: str = "magnitude") -> torch.Tensor:
    """Binary (B, 1, H, W) mask of pixels whose flow lies in a band around the mean.

    ``mode="magnitude"`` compares ``|flow|`` with ``(1 -/+ lam) * mean|flow|``;
    a mean below 1e-6 gives an all-ones mask. ``mode="channel"`` applies the
    band to ``dx`` and ``dy`` separately and keeps pixels passing both.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie in (0, 1)")
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must be (B, 2, H, W), got {tuple(flow.shape)}")
    if mode == "magnitude":
        fields = torch.sqrt(flow[:, 0:1] ** 2 + flow[:, 1:2] ** 2)
    elif mode == "channel":
        fields = flow
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    mean = fields.mean(dim=(-2, -1), keepdim=True)
    lo = torch.minimum((1 - lam) * mean, (1 + lam) * mean)
    hi = torch.maximum((1 - lam) * mean, (1 + lam) * mean)
    inside = (fields > lo) & (fields < hi)
    inside = inside | (mean.abs() < 1e-6)
    return inside.all(dim=1, keepdim=True).to(flow.dtype)


# --------------------------------------------------------------------------- #
# Flow providers
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PairKey:
    """Identifies a training pair and the crop box ``(top, left, height, width)``."""

    stem: str
    crop: tuple[int, int, int, int] | None = None


class FlowProvider:
    """Strategy returning a flow with ``warp(src, flow) ~= dst``.

    ``reverse`` is False when ``src`` is the sharp ground truth and True for
    the opposite direction; file-backed providers use it to pick a file.
    """

    name = "base"

    def __call__(self, src, dst, *, pair: PairKey | None = None, reverse: bool = False) -> torch.Tensor:
        raise NotImplementedError


class ClassicalFlow(FlowProvider):
    name = "classical"

    def __init__(self, levels: int = 4, iterations: int = 60, smoothness: float = 0.2, warps: int = 3):
        self.levels = levels
        self.iterations = iterations
        self.smoothness = smoothness
        self.warps = warps

    def __call__(self, src, dst, *, pair=None, reverse=False):
        return classical_flow(src, dst, self.levels, self.iterations, self.smoothness, self.warps)


class PrecomputedFlow(FlowProvider):
    """Reads ``<root>/<stem>.fwd.flo`` (sharp -> other) and ``.bwd.flo``."""

    name = "precomputed"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, stem: str, reverse: bool) -> Path:
        return self.root / f"{stem}.{'bwd' if reverse else 'fwd'}.flo"

    def __call__(self, src, dst, *, pair=None, reverse=False):
        if pair is None:
            raise ValueError(f"{self.name} flow needs a pair key")
        flow = read_flow(self.path_for(pair.stem, reverse))
        if pair.crop is not None:
            top, left, h, w = pair.crop
            flow = flow[:, top : top + h, left : left + w]
        if flow.shape[-2:] != src.shape[-2:]:
            raise ShapeError(f"stored flow {tuple(flow.shape)} does not match image {tuple(src.shape)}")
        return flow.unsqueeze(0).to(src.dtype).expand(src.shape[0], -1, -1, -1)


class SyntheticGTFlow(PrecomputedFlow):
    """Analytic flows emitted by the synthetic generator under ``<dataset>/flows``."""

    name = "synthetic-gt"

    def __init__(self, dataset_root: str | Path):
        super().__init__(Path(dataset_root) / "flows")


def make_flow_provider(name: str, **options) -> FlowProvider:
    if name == "classical":
        return ClassicalFlow(**options)
    if name == "precomputed":
        return PrecomputedFlow(options["root"])
    if name == "synthetic-gt":
        return SyntheticGTFlow(options["root"])
    raise KeyError(f"unknown flow provider {name!r}")


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


def deblur_loss(
    deblurred: torch.Tensor,
    sharp: torch.Tensor,
    provider: FlowProvider,
    *,
    reference: torch.Tensor | None = None,
    pair: PairKey | None = None,
    lam: float = 0.35,
    epsilon: float = 1e-3,
    use_mask: bool = True,
    use_cycle: bool = True,
    mask_mode: str = "magnitude",
    reduction: str = "mean",
) -> torch.Tensor:
    """Bidirectional flow-deformed, calibration-masked Charbonnier loss.

    Flows come from ``provider(sharp, reference)`` and
    ``provider(reference, sharp)``; ``reference`` defaults to the deblurred
    image (the blurry input is passed during flow warm-up). Flows are
    constants for backpropagation.
    """
    if deblurred.shape != sharp.shape:
        raise ShapeError(f"deblurred {tuple(deblurred.shape)} and sharp {tuple(sharp.shape)} differ")
    ref = (deblurred if reference is None else reference).detach()

    fwd = provider(sharp.detach(), ref, pair=pair, reverse=False).detach()
    mask = calibration_mask(fwd, lam, mask_mode) if use_mask else None
    loss = charbonnier(warp(sharp, fwd), deblurred, epsilon, reduction, mask)
    if use_cycle:
        bwd = provider(ref, sharp.detach(), pair=pair, reverse=True).detach()
        mask = calibration_mask(bwd, lam, mask_mode) if use_mask else None
        loss = loss + charbonnier(warp(deblurred, bwd), sharp, epsilon, reduction, mask)
    return loss


def pseudo_map_loss(estimated, pseudo, epsilon: float = 1e-3, reduction: str = "mean"):
    """Charbonnier between the estimated blur map and the detached pseudo target."""
    return charbonnier(estimated, pseudo.detach(), epsilon, reduction)
