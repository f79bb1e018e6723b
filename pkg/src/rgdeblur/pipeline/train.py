"""Joint deblur/reblur training: state, single step, epoch loop and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .. import __version__
from ..alignment import FlowProvider, PairKey, deblur_loss, make_flow_provider, pseudo_map_loss
from ..datagen import DatasetManifest
from ..deblur import BlurMapEstimator, DeblurModel, DeformableFusion, build_backbone
from ..imagecore import charbonnier
from ..kernelgen import seed_channels
from ..reblur import (
    ReblurNet,
    compose_reblur,
    predict_seeds,
    predict_weights,
    pseudo_defocus_map,
    reblur_loss,
    uniform_disc_seeds,
    uniform_weights,
)
from .config import TrainConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "L_D", "L_R", "L_P", "total", "lr"]


class NonFiniteLossError(RuntimeError):
    def __init__(self, breakdown: dict, dump_path: Path | None = None):
        self.breakdown = breakdown
        self.dump_path = dump_path
        bad = [k for k, v in breakdown.items() if isinstance(v, float) and not math.isfinite(v)]
        super().__init__(f"non-finite loss component(s) {bad}: {breakdown}")


@dataclass
class TrainState:
    config: TrainConfig
    deblur: DeblurModel
    reblur: ReblurNet
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    log: list[dict] = field(default_factory=list)

    def parameters(self):
        yield from self.deblur.parameters()
        yield from self.reblur.parameters()


def build_models(config: TrainConfig) -> tuple[DeblurModel, ReblurNet]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        backbone_opts = {} if config.backbone == "identity" else {"widths": config.backbone_widths}
        backbone = build_backbone(config.backbone, **backbone_opts)
        if config.use_fusion:
            estimator = BlurMapEstimator(config.m, config.trunk_width, config.trunk_blocks)
            fusion = DeformableFusion(seed_channels(config.m), config.heads, config.sampling_points)
        else:
            estimator = fusion = None
        deblur = DeblurModel(backbone, estimator, fusion)
        reblur = ReblurNet(config.m, config.trunk_width, config.trunk_blocks)
    return deblur, reblur


def init_state(config: TrainConfig) -> TrainState:
    deblur, reblur = build_models(config)
    params = list(deblur.parameters()) + list(reblur.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)
    return TrainState(config, deblur, reblur, opt)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.learning_rate * 0.5 ** (epoch // config.halving_period)


def flow_provider_for(config: TrainConfig) -> FlowProvider:
    if config.flow_provider == "classical":
        return make_flow_provider(
            "classical",
            levels=config.flow_levels,
            iterations=config.flow_iterations,
            smoothness=config.flow_smoothness,
        )
    return make_flow_provider(config.flow_provider, root=config.flow_root)


# --------------------------------------------------------------------------- #
# One step
# --------------------------------------------------------------------------- #


def compute_losses(state: TrainState, blurry, sharp, provider: FlowProvider, pair: PairKey | None = None):
    """Forward pass; returns ``(total, {"L_D", "L_R", "L_P", "deblurred"})``."""
    cfg = state.config
    deblurred, blurmap = state.deblur(blurry)

    if cfg.use_warp:
        reference = blurry if state.epoch < cfg.warmup_epochs else deblurred
        l_d = deblur_loss(
            deblurred, sharp, provider,
            reference=reference, pair=pair, lam=cfg.lam, epsilon=cfg.epsilon,
            use_mask=cfg.use_mask, use_cycle=cfg.use_cycle, mask_mode=cfg.mask_mode,
            reduction=cfg.loss_reduction,
        )
    elif cfg.pixel_loss == "l1":
        l_d = F.l1_loss(deblurred, sharp)
    else:
        l_d = charbonnier(deblurred, sharp, cfg.epsilon, cfg.loss_reduction)

    zero = l_d.new_zeros(())
    l_r = l_p = zero
    if cfg.use_reblur:
        seeds = (predict_seeds(state.reblur, deblurred, blurry) if cfg.use_kpn
                 else uniform_disc_seeds(blurry, cfg.m))
        weights = (predict_weights(state.reblur, deblurred, blurry) if cfg.use_wpn
                   else uniform_weights(blurry, cfg.m))
        reblurred = compose_reblur(deblurred, seeds, weights)
        l_r = reblur_loss(reblurred, blurry, cfg.epsilon, cfg.loss_reduction)
        if cfg.use_pseudo_loss and blurmap is not None:
            target = pseudo_defocus_map(seeds, weights).detach()
            l_p = pseudo_map_loss(blurmap, target, cfg.epsilon, cfg.loss_reduction)

    total = l_d + cfg.alpha * l_r + cfg.beta * l_p
    return total, {"L_D": l_d, "L_R": l_r, "L_P": l_p, "deblurred": deblurred}


def train_step(state: TrainState, blurry, sharp, provider: FlowProvider, pair: PairKey | None = None,
               dump_dir: str | Path | None = None) -> tuple[TrainState, dict]:
    """One optimizer update on a single pair; returns the state and loss breakdown."""
    if blurry.shape != sharp.shape:
        raise ValueError(f"blurry {tuple(blurry.shape)} and sharp {tuple(sharp.shape)} differ")
    cfg = state.config
    lr = lr_at(state.epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    total, parts = compute_losses(state, blurry, sharp, provider, pair)
    breakdown = {
        "epoch": state.epoch,
        "step": state.step,
        "L_D": parts["L_D"].item(),
        "L_R": parts["L_R"].item(),
        "L_P": parts["L_P"].item(),
        "total": total.item(),
        "lr": lr,
    }
    if not all(math.isfinite(breakdown[k]) for k in ("L_D", "L_R", "L_P", "total")):
        dump = None
        if dump_dir is not None:
            dump = Path(dump_dir) / "nonfinite_dump.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps({**breakdown, "pair": pair.stem if pair else None}, indent=2))
        raise NonFiniteLossError(breakdown, dump)

    (total / cfg.grad_accum).backward()
    if (state.step + 1) % cfg.grad_accum == 0:
        state.optimizer.step()
        state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    state.log.append(breakdown)
    return state, breakdown


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Zip archive: ``manifest.json`` (UTF-8) plus ``state.pt`` with all tensors.

    Written to a temporary file and renamed, so a failed write leaves the
    previous checkpoint intact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {
        "deblur": state.deblur.state_dict(),
        "reblur": state.reblur.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(tensors, buf)
    manifest = {
        "format": "rgdeblur-checkpoint/1",
        "version": __version__,
        "torch": torch.__version__,
        "epoch": state.epoch,
        "step": state.step,
        "m": state.config.m,
        "widths": {
            "backbone": list(state.config.backbone_widths),
            "trunk": state.config.trunk_width,
        },
        "config": state.config.to_dict(),
        "parameters": {
            f"{group}.{name}": list(t.shape)
            for group, sd in (("deblur", tensors["deblur"]), ("reblur", tensors["reblur"]))
            for name, t in sd.items()
        },
        "log": state.log,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
        zf.writestr("state.pt", buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> TrainState:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        tensors = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=False)
    config = TrainConfig.from_dict(manifest["config"])
    state = init_state(config)
    state.deblur.load_state_dict(tensors["deblur"])
    state.reblur.load_state_dict(tensors["reblur"])
    state.optimizer.load_state_dict(tensors["optimizer"])
    torch.set_rng_state(tensors["torch_rng"])
    state.epoch = manifest["epoch"]
    state.step = manifest["step"]
    state.log = manifest["log"]
    return state


def read_manifest(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json").decode("utf-8"))


def write_loss_log(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


# --------------------------------------------------------------------------- #
# Loop
# --------------------------------------------------------------------------- #


def _random_crop(tensors: dict, size: int | None, rng: np.random.Generator) -> tuple[dict, tuple | None]:
    H, W = tensors["blurry"].shape[-2:]
    if not size or (H <= size and W <= size):
        return tensors, None
    ch, cw = min(size, H), min(size, W)
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    return {k: v[..., top : top + ch, left : left + cw] for k, v in tensors.items()}, (top, left, ch, cw)


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    run_dir: str | Path | None = None,
    provider: FlowProvider | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Train for ``config.total_epochs`` (resuming from ``state`` when given).

    After every epoch the checkpoint ``run_dir/checkpoint.zip`` and the loss
    log ``run_dir/loss_log.csv`` are rewritten.
    """
    if state is None:
        state = init_state(config)
    if provider is None:
        provider = flow_provider_for(config)
    run_dir = Path(run_dir) if run_dir is not None else None
    if config.total_epochs > 0 and not manifest.pairs:
        raise ValueError("cannot train on an empty manifest")

    cache: dict[int, dict] = {}

    def pair_tensors(i: int) -> dict:
        if i not in cache:
            cache[i] = {k: v.unsqueeze(0) for k, v in manifest.load_pair(manifest.pairs[i]).items()}
        return cache[i]

    if run_dir is not None and state.epoch >= config.total_epochs:
        save_checkpoint(state, run_dir / "checkpoint.zip")
        write_loss_log(state.log, run_dir / "loss_log.csv")

    while state.epoch < config.total_epochs:
        rng = np.random.default_rng([config.seed, state.epoch])
        order = rng.permutation(len(manifest.pairs))
        state.deblur.train()
        state.reblur.train()
        for i in order:
            entry = manifest.pairs[int(i)]
            data, crop = _random_crop(pair_tensors(int(i)), config.crop_size, rng)
            if crop is not None and entry.crop is not None:
                crop = (entry.crop[0] + crop[0], entry.crop[1] + crop[1], crop[2], crop[3])
            else:
                crop = crop or entry.crop
            pair = PairKey(entry.stem, crop)
            train_step(state, data["blurry"], data["sharp"], provider, pair, dump_dir=run_dir)
        state.epoch += 1
        last = state.log[-1]
        log.info("epoch %d  total %.5f  L_D %.5f  L_R %.5f  L_P %.5f  lr %.2e", state.epoch,
                 last["total"], last["L_D"], last["L_R"], last["L_P"], last["lr"])
        if run_dir is not None:
            save_checkpoint(state, run_dir / "checkpoint.zip")
            write_loss_log(state.log, run_dir / "loss_log.csv")
    return state
