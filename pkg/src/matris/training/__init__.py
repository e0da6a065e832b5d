"""Losses, optimiser, batch scheduling, denoising and the training loop."""

from .batching import (
    assign_chunk,
    imbalance_ratio,
    load_balanced_batches,
    round_robin_batches,
    timed_epoch,
    validate_schedule,
    worker_loads,
)
from .config import TrainConfig
from .denoise import Corruption, NoiseSchedule, denoise_corrupt, project_forces
from .losses import graph_level_loss, huber, label_counts, naive_loss, total_loss
from .optim import AdamWState, adamw_step, clip_grad_norm, cosine_lr
from .trainer import (
    Metrics,
    TrainResult,
    evaluate_dataset,
    load_pretrained,
    read_metrics_log,
    run_training,
    train,
)

__all__ = [
    "TrainConfig",
    "NoiseSchedule",
    "Corruption",
    "denoise_corrupt",
    "project_forces",
    "huber",
    "graph_level_loss",
    "naive_loss",
    "label_counts",
    "total_loss",
    "AdamWState",
    "adamw_step",
    "clip_grad_norm",
    "cosine_lr",
    "assign_chunk",
    "load_balanced_batches",
    "round_robin_batches",
    "worker_loads",
    "imbalance_ratio",
    "validate_schedule",
    "timed_epoch",
    "Metrics",
    "TrainResult",
    "evaluate_dataset",
    "read_metrics_log",
    "train",
    "run_training",
    "load_pretrained",
]
