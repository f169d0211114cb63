import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from tqdm import tqdm

from net import LossKind, NetworkParams, loss_and_grad, margins
from seeding import make_rng
from utils import ConfigError, DegenerateDirectionError, DimensionError, TrainingDivergedError, downsample_trace

logger = logging.getLogger(__name__)


class StoppedBy(str, Enum):
    MAX_EPOCHS = "max_epochs"
    CONVERGED = "converged"


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.1
    patience_epochs: int = 10
    min_improvement: float = 1e-12
    min_lr_ratio: float = 1e-6


@dataclass(frozen=True)
class StopConfig:
    direction_tol: float = 1e-6
    window: int = 5
    require_positive_margins: bool = True
    check_every: int = 100


@dataclass(frozen=True)
class TrainConfig:
    """Gradient descent with heavy-ball momentum; batch_size None means full batch"""

    loss_kind: LossKind = LossKind.EXPONENTIAL
    lr: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 100_000
    batch_size: int | None = None
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    stop: StopConfig = field(default_factory=StopConfig)
    seed: int = 0
    threads: int = 1
    trace_points: int = 10_000
    progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.lr <= 0.0:
            raise ConfigError("train.lr", "must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum", "must lie in [0, 1)")
        if self.max_epochs < 0:
            raise ConfigError("train.max_epochs", "must be non-negative")
        if not 0.0 < self.scheduler.factor < 1.0:
            raise ConfigError("train.factor", "must lie in (0, 1)")
        if self.scheduler.patience_epochs < 1:
            raise ConfigError("train.patience_epochs", "must be at least 1")
        if self.stop.window < 1 or self.stop.check_every < 1:
            raise ConfigError("train.window", "window and check_every must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive or null")

    def to_dict(self):
        data = asdict(self)
        data["loss_kind"] = self.loss_kind.value
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "scheduler" in data:
            data["scheduler"] = SchedulerConfig(**data["scheduler"])
        if "stop" in data:
            data["stop"] = StopConfig(**data["stop"])
        return cls(**data)


@dataclass
class TrainReport:
    epochs_run: int
    final_loss: float
    loss_trace: list
    margin_min: float
    direction_drift: float
    stopped_by: StoppedBy
    final_lr: float

    def to_dict(self):
        return {
            "epochs_run": self.epochs_run,
            "final_loss": self.final_loss,
            "loss_trace": [[int(e), float(v)] for e, v in self.loss_trace],
            "margin_min": self.margin_min,
            "direction_drift": self.direction_drift,
            "stopped_by": StoppedBy(self.stopped_by).value,
            "final_lr": self.final_lr,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["loss_trace"] = [tuple(p) for p in data["loss_trace"]]
        data["stopped_by"] = StoppedBy(data["stopped_by"])
        return cls(**data)


def direction_distance(p_a, p_b):
    """Frobenius distance between the normalized weight matrices"""
    Wa = p_a.W if isinstance(p_a, NetworkParams) else np.asarray(p_a)
    Wb = p_b.W if isinstance(p_b, NetworkParams) else np.asarray(p_b)
    if Wa.shape != Wb.shape:
        raise DegenerateDirectionError(f"shape mismatch {Wa.shape} vs {Wb.shape}")
    na = np.linalg.norm(Wa)
    nb = np.linalg.norm(Wb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateDirectionError("direction of a zero weight matrix is undefined")
    return float(np.linalg.norm(Wa / na - Wb / nb))


class _PlateauScheduler:
    """Cut the learning rate when the epoch loss stops improving"""

    def __init__(self, lr, cfg):
        self.lr = lr
        self.floor = lr * cfg.min_lr_ratio
        self.cfg = cfg
        self.best = np.inf
        self.stale = 0

    def step(self, value, epoch):
        if value < self.best - self.cfg.min_improvement:
            self.best = value
            self.stale = 0
            return
        self.stale += 1
        if self.stale < self.cfg.patience_epochs:
            return
        self.stale = 0
        cut = self.lr * self.cfg.factor
        if cut >= self.floor:
            logger.info("epoch %d: loss plateau at %.6g, lr %.3g -> %.3g", epoch, value, self.lr, cut)
            self.lr = cut


def train(p0, cfg, dataset, tc):
    """
    Train the hidden layer from p0 until the weight direction settles or max_epochs

    Args:
        p0 (NetworkParams): Initial weights, left untouched
        cfg (NetworkConfig): Architecture
        dataset (Dataset): Training samples and labels
        tc (TrainConfig): Optimizer, scheduler and stopping rule

    Returns:
        tuple: (NetworkParams, TrainReport)
    """
    p0.check(cfg)
    if dataset.d != cfg.d:
        raise DimensionError(f"dataset dimension {dataset.d} != network dimension {cfg.d}")

    W = p0.W.copy()
    velocity = np.zeros_like(W)
    scheduler = _PlateauScheduler(tc.lr, tc.scheduler)
    batch_rng = make_rng(tc.seed, "train.batches")
    full_batch = tc.batch_size is None or tc.batch_size >= dataset.n

    trace_epochs = []
    trace_losses = []
    previous_direction = None
    calm_checks = 0
    drift = float("nan")
    stopped_by = StoppedBy.MAX_EPOCHS
    epoch = 0

    logger.info(
        "training m=%d d=%d on N=%d (%s, lr=%g, momentum=%g)",
        cfg.m, cfg.d, dataset.n, tc.loss_kind.value, tc.lr, tc.momentum,
    )
    for epoch in tqdm(range(1, tc.max_epochs + 1), disable=not tc.progress, desc="train", leave=False):
        if full_batch:
            batches = [None]
        else:
            order = batch_rng.permutation(dataset.n)
            batches = [order[i:i + tc.batch_size] for i in range(0, dataset.n, tc.batch_size)]

        batch_losses = []
        for idx in batches:
            batch = dataset if idx is None else dataset.subset(np.sort(idx))
            value, grad = loss_and_grad(NetworkParams(W), cfg, batch, tc.loss_kind, threads=tc.threads)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                logger.error("training diverged at epoch %d", epoch)
                raise TrainingDivergedError(epoch, value)
            velocity = tc.momentum * velocity - scheduler.lr * grad
            W = W + velocity
            batch_losses.append(value)

        epoch_loss = float(np.mean(batch_losses))
        trace_epochs.append(epoch)
        trace_losses.append(epoch_loss)
        scheduler.step(epoch_loss, epoch)

        if epoch % tc.stop.check_every:
            continue
        norm = np.linalg.norm(W)
        if norm == 0.0:
            continue
        direction = W / norm
        if previous_direction is not None:
            drift = float(np.linalg.norm(direction - previous_direction))
            separated = True
            if tc.stop.require_positive_margins:
                separated = bool(np.all(margins(NetworkParams(W), cfg, dataset) > 0.0))
            calm_checks = calm_checks + 1 if drift < tc.stop.direction_tol and separated else 0
            logger.debug("epoch %d: loss %.6g drift %.3g calm %d", epoch, epoch_loss, drift, calm_checks)
            if calm_checks >= tc.stop.window:
                stopped_by = StoppedBy.CONVERGED
                previous_direction = direction
                break
        previous_direction = direction

    params = NetworkParams(W)
    final_margins = margins(params, cfg, dataset)
    value, _ = loss_and_grad(params, cfg, dataset, tc.loss_kind, threads=tc.threads)
    if not np.isfinite(value):
        raise TrainingDivergedError(epoch, value)
    if not trace_losses:
        trace_epochs, trace_losses = [0], [value]
    epochs_kept, losses_kept = downsample_trace(trace_epochs, trace_losses, tc.trace_points)

    report = TrainReport(
        epochs_run=epoch,
        final_loss=value,
        loss_trace=list(zip(epochs_kept.tolist(), losses_kept.tolist())),
        margin_min=float(final_margins.min()),
        direction_drift=drift,
        stopped_by=stopped_by,
        final_lr=scheduler.lr,
    )
    logger.info(
        "training stopped by %s after %d epochs: loss %.6g, min margin %.6g",
        stopped_by.value, epoch, value, report.margin_min,
    )
    return params, report
