"""Synthetic misaligned training pairs with known latent ground truth, and
ingestion of user-supplied ``root/{blurry,sharp}/<stem>.png`` datasets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .imagecore import read_image, write_flow, write_image
from .kernelgen import level_slice, seed_channels
from .reblur import compose_reblur

log = logging.getLogger(__name__)


@dataclass
class SyntheticSample:
    blurry: torch.Tensor  # (3, H, W)
    sharp: torch.Tensor  # misaligned ground truth I_S
    aligned: torch.Tensor  # latent sharp image in the blurry geometry
    seeds: torch.Tensor  # (M, H, W)
    weights: torch.Tensor  # (m, H, W)
    flow: torch.Tensor  # (2, H, W); warp(sharp, flow) ~= aligned
    inverse_flow: torch.Tensor  # warp(aligned, inverse_flow) ~= sharp
    blur_field: torch.Tensor  # (H, W) in [0, 1]; 0 is in focus
    shift: tuple[float, float]
    zoom: float


# --------------------------------------------------------------------------- #
# Procedural scene
# --------------------------------------------------------------------------- #


def _scene_params(rng: np.random.Generator, size: int) -> dict:
    gratings = []
    for k in range(4):
        gratings.append(
            dict(
                freq=rng.uniform(0.02, 0.2) * (1 + k),
                theta=rng.uniform(0, math.pi),
                phase=rng.uniform(0, 2 * math.pi),
                amp=rng.uniform(0.03, 0.1) / (1 + k),
                color=rng.uniform(0.3, 1.0, size=3),
            )
        )
    shapes = []
    for _ in range(int(rng.integers(8, 14))):
        kind = "disc" if rng.random() < 0.5 else "rect"
        cx, cy = rng.uniform(-0.1 * size, 1.1 * size, size=2)
        if kind == "disc":
            geom = dict(cx=cx, cy=cy, r=rng.uniform(0.05, 0.2) * size)
        else:
            w, h = rng.uniform(0.08, 0.4, size=2) * size
            geom = dict(x0=cx - w / 2, x1=cx + w / 2, y0=cy - h / 2, y1=cy + h / 2)
        shapes.append(dict(kind=kind, color=rng.uniform(0, 1, size=3), **geom))
    return dict(
        base=rng.uniform(0.25, 0.75, size=3),
        tilt=rng.uniform(-0.3, 0.3, size=(3, 2)) / size,
        gratings=gratings,
        shapes=shapes,
    )


def _render(params: dict, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Evaluate the scene at continuous pixel coordinates; returns (3, H, W)."""
    img = np.empty((3,) + xs.shape)
    for c in range(3):
        img[c] = params["base"][c] + params["tilt"][c, 0] * xs + params["tilt"][c, 1] * ys
    for g in params["gratings"]:
        arg = 2 * math.pi * g["freq"] * (xs * math.cos(g["theta"]) + ys * math.sin(g["theta"])) + g["phase"]
        wave = g["amp"] * np.sin(arg)
        img += g["color"][:, None, None] * wave
    for s in params["shapes"]:
        if s["kind"] == "disc":
            dist = s["r"] - np.hypot(xs - s["cx"], ys - s["cy"])
        else:
            dist = np.minimum.reduce([xs - s["x0"], s["x1"] - xs, ys - s["y0"], s["y1"] - ys])
        cover = np.clip(dist + 0.5, 0.0, 1.0)
        img = img * (1 - cover) + s["color"][:, None, None] * cover
    return np.clip(img, 0.0, 1.0)


def gaussian_profile_seeds(m: int) -> np.ndarray:
    """Non-negative seeds giving truncated Gaussian kernels; (M,) vector."""
    out = np.zeros(seed_channels(m))
    for level in range(2, m + 1):
        r = level - 1
        sigma = max(r / 2.0, 0.5)
        rho = np.arange(level, dtype=np.float64)
        out[level_slice(level)] = (r**2 - rho**2) / (2 * sigma**2)
    return out


def blur_weights(blur_field: np.ndarray, m: int) -> np.ndarray:
    """Map blur amounts in [0, 1] to simplex weights over levels 1..m."""
    pos = blur_field * (m - 1)  # 0-based level coordinate
    lo = np.floor(pos).astype(int).clip(0, m - 1)
    hi = np.minimum(lo + 1, m - 1)
    frac = pos - lo
    w = np.zeros((m,) + blur_field.shape)
    rows, cols = np.indices(blur_field.shape)
    w[lo, rows, cols] += 1 - frac
    w[hi, rows, cols] += frac
    return w


def synth_sample(
    rng_seed: int,
    size: int = 64,
    m: int = 8,
    max_shift: float = 3.0,
    max_zoom: float = 1.0,
    *,
    shift: tuple[float, float] | None = None,
    zoom: float | None = None,
) -> SyntheticSample:
    """Generate one synthetic pair; deterministic in ``rng_seed``.

    ``shift``/``zoom`` pin the misalignment instead of drawing it. The
    misaligned sharp image samples the scene at ``c + zoom * (x - c) + shift``
    with ``c`` the image centre, so ``shift = (3, 0)`` gives a ground-truth
    flow of ``(-3, 0)``.
    """
    if size < 32:
        raise ValueError("size must be at least 32")
    if not 1.0 <= max_zoom <= 1.1:
        raise ValueError("max_zoom must lie in [1.0, 1.1]")
    rng = np.random.default_rng(rng_seed)
    params = _scene_params(rng, size)

    # blur amount grows with distance from a focus point in one half of the frame
    focus = np.array([rng.uniform(0, 0.4), rng.uniform(0, 1)]) * size
    if rng.random() < 0.5:
        focus[0] = size - 1 - focus[0]
    reach = rng.uniform(0.6, 1.0) * size
    angle = rng.uniform(0, 2 * math.pi)
    radius = rng.uniform(0, max_shift)
    zoom_draw = rng.uniform(1.0, max_zoom)
    if shift is None:
        shift = (radius * math.cos(angle), radius * math.sin(angle))
    if zoom is None:
        zoom = zoom_draw

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    blur_field = np.clip(np.hypot(xs - focus[0], ys - focus[1]) / reach, 0.0, 1.0)
    c = (size - 1) / 2.0
    sx, sy = shift
    aligned = _render(params, xs, ys)
    sharp = _render(params, c + zoom * (xs - c) + sx, c + zoom * (ys - c) + sy)

    inverse_flow = np.stack([(zoom - 1) * (xs - c) + sx, (zoom - 1) * (ys - c) + sy])
    flow = np.stack([(xs - c) * (1 / zoom - 1) - sx / zoom, (ys - c) * (1 / zoom - 1) - sy / zoom])

    seeds = np.broadcast_to(gaussian_profile_seeds(m)[:, None, None], (seed_channels(m), size, size))
    weights = blur_weights(blur_field, m)

    t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))  # noqa: E731
    aligned_t, seeds_t, weights_t = t(aligned), t(seeds), t(weights)
    with torch.no_grad():
        blurry = compose_reblur(aligned_t[None], seeds_t[None], weights_t[None])[0]
    return SyntheticSample(
        blurry=blurry,
        sharp=t(sharp),
        aligned=aligned_t,
        seeds=seeds_t,
        weights=weights_t,
        flow=t(flow),
        inverse_flow=t(inverse_flow),
        blur_field=t(blur_field),
        shift=(float(sx), float(sy)),
        zoom=float(zoom),
    )


# --------------------------------------------------------------------------- #
# Manifests
# --------------------------------------------------------------------------- #


@dataclass
class PairEntry:
    stem: str
    blurry: str  # paths relative to the manifest root
    sharp: str
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width
    split: str = "train"
    aligned: str | None = None


@dataclass
class DatasetManifest:
    root: str
    split: str = "train"
    pairs: list[PairEntry] = field(default_factory=list)
    crop_size: int | None = None
    seed: int = 0
    rejects: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def to_jsonl(self) -> str:
        lines = []
        for p in self.pairs:
            rec = asdict(p)
            rec["root"] = self.root
            rec["crop"] = list(p.crop) if p.crop is not None else None
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        if self.rejects:
            rej = path.with_name(path.stem + ".rejects.json")
            rej.write_text(json.dumps(self.rejects, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        pairs = []
        root = str(path.parent)
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            root = rec.pop("root", root)
            crop = rec.get("crop")
            rec["crop"] = tuple(crop) if crop is not None else None
            pairs.append(PairEntry(**rec))
        split = pairs[0].split if pairs else "train"
        return cls(root=root, split=split, pairs=pairs)

    def load_pair(self, entry: PairEntry) -> dict[str, torch.Tensor]:
        """Read and crop one pair; keys ``blurry``, ``sharp`` and maybe ``aligned``."""
        root = Path(self.root)
        out = {"blurry": read_image(root / entry.blurry), "sharp": read_image(root / entry.sharp)}
        if entry.aligned:
            out["aligned"] = read_image(root / entry.aligned)
        if entry.crop is not None:
            top, left, h, w = entry.crop
            out = {k: v[:, top : top + h, left : left + w] for k, v in out.items()}
        return out


def _image_size(path: Path) -> tuple[int, int]:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"unreadable image {path}")
    return arr.shape[0], arr.shape[1]


def ingest_dataset(root: str | Path, crop_size: int | None = None, seed: int = 0,
                   split: str = "train") -> DatasetManifest:
    """Match ``blurry/`` and ``sharp/`` PNGs by stem and draw one shared crop per pair.

    Unmatched files and pairs with mismatched dimensions go to ``rejects``.
    """
    root = Path(root)
    manifest = DatasetManifest(root=str(root), split=split, crop_size=crop_size, seed=seed)
    blurry = {p.stem: p for p in sorted((root / "blurry").glob("*.png"))}
    sharp = {p.stem: p for p in sorted((root / "sharp").glob("*.png"))}
    for stem in sorted(set(blurry) ^ set(sharp)):
        side = "sharp" if stem in blurry else "blurry"
        manifest.rejects.append({"stem": stem, "reason": f"no matching {side} image"})

    rng = np.random.default_rng(seed)
    for stem in sorted(set(blurry) & set(sharp)):
        hb, wb = _image_size(blurry[stem])
        hs, ws = _image_size(sharp[stem])
        if (hb, wb) != (hs, ws):
            manifest.rejects.append({"stem": stem, "reason": f"size mismatch {hb}x{wb} vs {hs}x{ws}"})
            continue
        crop = None
        if crop_size:
            if hb < crop_size or wb < crop_size:
                manifest.rejects.append({"stem": stem, "reason": f"smaller than crop {crop_size}"})
                continue
            top = int(rng.integers(0, hb - crop_size + 1))
            left = int(rng.integers(0, wb - crop_size + 1))
            crop = (top, left, crop_size, crop_size)
        aligned = root / "aligned" / f"{stem}.png"
        manifest.pairs.append(
            PairEntry(
                stem=stem,
                blurry=f"blurry/{stem}.png",
                sharp=f"sharp/{stem}.png",
                crop=crop,
                split=split,
                aligned=f"aligned/{stem}.png" if aligned.exists() else None,
            )
        )
    if not manifest.pairs:
        log.warning("no usable pairs found under %s", root)
    for rej in manifest.rejects:
        log.info("rejected %s: %s", rej["stem"], rej["reason"])
    return manifest


def write_synthetic_dataset(
    root: str | Path,
    count: int,
    seed: int = 0,
    size: int = 64,
    m: int = 8,
    max_shift: float = 3.0,
    max_zoom: float = 1.0,
    shift: tuple[float, float] | None = None,
    split: str = "train",
) -> DatasetManifest:
    """Write ``count`` samples as 16-bit PNGs plus analytic flows and a manifest."""
    root = Path(root)
    for i in range(count):
        stem = f"{split}_{i:04d}"
        s = synth_sample(seed + i, size, m, max_shift, max_zoom, shift=shift)
        write_image(root / "blurry" / f"{stem}.png", s.blurry, bits=16)
        write_image(root / "sharp" / f"{stem}.png", s.sharp, bits=16)
        write_image(root / "aligned" / f"{stem}.png", s.aligned, bits=16)
        write_flow(root / "flows" / f"{stem}.fwd.flo", s.flow)
        write_flow(root / "flows" / f"{stem}.bwd.flo", s.inverse_flow)
        gt = root / "gt" / f"{stem}.npz"
        gt.parent.mkdir(parents=True, exist_ok=True)
        np.savez(gt, seeds=s.seeds.numpy(), weights=s.weights.numpy(), blur_field=s.blur_field.numpy())
    manifest = ingest_dataset(root, None, seed, split)
    manifest.write(root / "manifest.jsonl")
    return manifest
