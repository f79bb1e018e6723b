"""Training configuration, named profiles and TOML loading."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class TrainConfig:
    # loss weights and constants
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-3
    lam: float = 0.35
    loss_reduction: str = "mean"  # "mean" or "global" (single norm under the root)
    mask_mode: str = "magnitude"  # or "channel"
    pixel_loss: str = "charbonnier"  # used when use_warp is off: "charbonnier" or "l1"

    # architecture
    m: int = 8
    heads: int = 5
    sampling_points: int = 4
    backbone: str = "unet"
    backbone_widths: tuple[int, ...] = (32, 64, 128)
    trunk_width: int = 32
    trunk_blocks: int = 3

    # schedule
    warmup_epochs: int = 15
    learning_rate: float = 2e-5
    halving_period: int = 60
    total_epochs: int = 200
    batch_size: int = 1
    grad_accum: int = 1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    crop_size: int | None = 512
    seed: int = 0

    # flow
    flow_provider: str = "classical"
    flow_root: str | None = None
    flow_levels: int = 4
    flow_iterations: int = 60
    flow_smoothness: float = 0.2

    # ablation switches
    use_reblur: bool = True
    use_kpn: bool = True
    use_wpn: bool = True
    use_mask: bool = True
    use_cycle: bool = True
    use_fusion: bool = True
    use_pseudo_loss: bool = True
    use_warp: bool = True

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1; use grad_accum for larger effective batches")
        if not 0 < self.lam < 1:
            raise ValueError("lam must lie in (0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": dict(
        crop_size=64,
        total_epochs=30,
        warmup_epochs=5,
        learning_rate=5e-4,
        halving_period=10,
        backbone_widths=(16, 32, 64),
        trunk_width=16,
    ),
}

# Table-style ablation presets layered on top of a profile.
VARIANTS: dict[str, dict] = {
    "full": {},
    "l1-baseline": dict(use_warp=False, pixel_loss="l1", use_reblur=False, use_fusion=False,
                        use_pseudo_loss=False),
    "warp-only": dict(use_cycle=False, use_mask=False, use_reblur=False, use_fusion=False,
                      use_pseudo_loss=False),
    "no-cycle": dict(use_cycle=False, use_fusion=False, use_pseudo_loss=False),
    "no-mask": dict(use_mask=False, use_fusion=False, use_pseudo_loss=False),
    "no-reblur": dict(use_reblur=False, use_fusion=False, use_pseudo_loss=False),
    "no-kpn": dict(use_kpn=False, use_fusion=False, use_pseudo_loss=False),
    "no-wpn": dict(use_wpn=False, use_fusion=False, use_pseudo_loss=False),
    "simple": dict(use_fusion=False, use_pseudo_loss=False),
}


def make_config(profile: str = "paper", variant: str = "full", **overrides) -> TrainConfig:
    data = {**PROFILES[profile], **VARIANTS[variant], **overrides}
    return TrainConfig.from_dict(data)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    """Read a TOML file; optional ``profile``/``variant`` keys select presets."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    profile = data.pop("profile", "paper")
    variant = data.pop("variant", "full")
    data.update(overrides)
    return make_config(profile, variant, **data)


def parse_override(text: str) -> tuple[str, object]:
    """Parse ``key=value`` where value is a TOML literal (bare words become strings)."""
    key, _, raw = text.partition("=")
    key = key.strip().replace("-", "_")
    if not raw:
        raise ValueError(f"override {text!r} must look like key=value")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value
