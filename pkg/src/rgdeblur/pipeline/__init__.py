from .config import PROFILES, VARIANTS, TrainConfig, load_config, make_config
from .evaluate import blurmap_preview, evaluate, infer, write_report
from .train import (
    NonFiniteLossError,
    TrainState,
    compute_losses,
    flow_provider_for,
    init_state,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
    train_step,
    write_loss_log,
)

__all__ = [
    "PROFILES",
    "VARIANTS",
    "TrainConfig",
    "load_config",
    "make_config",
    "blurmap_preview",
    "evaluate",
    "infer",
    "write_report",
    "NonFiniteLossError",
    "TrainState",
    "compute_losses",
    "flow_provider_for",
    "init_state",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "train",
    "train_step",
    "write_loss_log",
]
