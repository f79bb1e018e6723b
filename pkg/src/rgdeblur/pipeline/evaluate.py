"""Inference and the warped-ground-truth evaluation protocol."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import torch

from ..alignment import FlowProvider, PairKey
from ..datagen import DatasetManifest
from ..deblur import deblur_forward
from ..imagecore import psnr, ssim, warp
from .train import TrainState

log = logging.getLogger(__name__)

METRIC_KEYS = ["psnr_warped", "ssim_warped", "psnr_unwarped", "ssim_unwarped", "psnr_aligned"]


def blurmap_preview(blurmap: torch.Tensor | None, size=None) -> torch.Tensor:
    """First principal component of a (B, M, H, W) map over channels, scaled to [0, 1].

    The component's sign is chosen so it grows with the per-pixel total of
    the map. Returns (B, 1, H, W); all zeros when there is no map.
    """
    if blurmap is None:
        B, H, W = size
        return torch.zeros(B, 1, H, W)
    B, M, H, W = blurmap.shape
    out = []
    for b in range(B):
        x = blurmap[b].detach().to(torch.float64).reshape(M, -1).T  # (HW, M)
        centered = x - x.mean(dim=0, keepdim=True)
        _, _, vh = torch.linalg.svd(centered, full_matrices=False)
        pc = centered @ vh[0]
        mass = x.sum(dim=1)
        if torch.dot(pc, mass - mass.mean()) < 0:
            pc = -pc
        lo, hi = pc.min(), pc.max()
        pc = (pc - lo) / (hi - lo) if hi > lo else torch.zeros_like(pc)
        out.append(pc.reshape(1, H, W))
    return torch.stack(out).to(blurmap.dtype)


@torch.no_grad()
def infer(state: TrainState, blurry: torch.Tensor):
    """Deblur with the deblurring module only; returns ``(deblurred, blurmap, preview)``."""
    squeeze = blurry.dim() == 3
    if squeeze:
        blurry = blurry.unsqueeze(0)
    model = state.deblur
    model.eval()
    deblurred, blurmap = deblur_forward(model.backbone, model.estimator, model.fusion, blurry)
    preview = blurmap_preview(blurmap, size=(blurry.shape[0], *blurry.shape[-2:]))
    if squeeze:
        deblurred = deblurred[0]
        blurmap = blurmap[0] if blurmap is not None else None
        preview = preview[0]
    return deblurred, blurmap, preview


def evaluate(state: TrainState, manifest: DatasetManifest, provider: FlowProvider) -> dict:
    """Metrics between the deblurred output and the sharp image warped onto it."""
    rows, skipped = [], []
    for entry in manifest.pairs:
        try:
            data = manifest.load_pair(entry)
        except (FileNotFoundError, OSError) as exc:
            skipped.append({"stem": entry.stem, "reason": str(exc)})
            log.warning("skipping %s: %s", entry.stem, exc)
            continue
        blurry = data["blurry"].unsqueeze(0)
        sharp = data["sharp"].unsqueeze(0)
        deblurred, _, _ = infer(state, blurry)
        deblurred = deblurred.clamp(0, 1)
        with torch.no_grad():
            flow = provider(sharp, deblurred, pair=PairKey(entry.stem, entry.crop), reverse=False)
            warped = warp(sharp, flow).clamp(0, 1)
        row = {
            "stem": entry.stem,
            "psnr_warped": psnr(deblurred, warped),
            "ssim_warped": ssim(deblurred, warped),
            "psnr_unwarped": psnr(deblurred, sharp),
            "ssim_unwarped": ssim(deblurred, sharp),
            "psnr_aligned": psnr(deblurred, data["aligned"].unsqueeze(0)) if "aligned" in data else None,
        }
        rows.append(row)
    mean = {}
    for key in METRIC_KEYS:
        vals = [r[key] for r in rows if r[key] is not None]
        mean[key] = sum(vals) / len(vals) if vals else None
    return {"pairs": rows, "mean": mean, "skipped": skipped, "count": len(rows)}


def _json_safe(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def write_report(report: dict, out_prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.csv``; infinities become the string "inf"."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    safe = {
        "count": report["count"],
        "mean": {k: _json_safe(v) for k, v in report["mean"].items()},
        "pairs": [{k: _json_safe(v) for k, v in r.items()} for r in report["pairs"]],
        "skipped": report["skipped"],
    }
    jpath = out_prefix.with_suffix(".json")
    jpath.write_text(json.dumps(safe, indent=2) + "\n", encoding="utf-8")
    cpath = out_prefix.with_suffix(".csv")
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["stem"] + METRIC_KEYS)
        writer.writeheader()
        for r in safe["pairs"]:
            writer.writerow(r)
    return jpath, cpath
