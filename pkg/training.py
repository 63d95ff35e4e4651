"""
Training for the localization network.

Covers target construction from annotation tracks, the focal and regression
losses, plain SGD, the plateau learning-rate schedule, and the epoch loop that
batches zero-padded videos with validity masks.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel

import numerics as nx
from dataset import AnnotationTrack, Video
from model import ModelConfig, ModelParams, forward_batch, init_params
from numerics import ComputationRecord, Tensor

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-7


class NonFiniteLossError(RuntimeError):
    """Raised when a batch produces a non-finite loss or gradient."""

    def __init__(self, message: str, video_ids: list[str] | None = None):
        super().__init__(message)
        self.video_ids = video_ids or []


@dataclass
class TrainConfig:
    """Optimisation recipe."""
    epochs: int = 100
    batch_size: int = 10
    learning_rate: float = 1e-3
    plateau_factor: float = 0.01
    plateau_patience: int = 5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    regression_weight: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError(f"focal_alpha must be in (0, 1], got {self.focal_alpha}")
        if self.regression_weight < 0:
            raise ValueError(f"regression_weight must be >= 0, got {self.regression_weight}")


@dataclass
class TimestepTargets:
    """Per-timestep supervision for one video."""
    labels: np.ndarray
    offsets: np.ndarray
    regression_mask: np.ndarray
    valid: np.ndarray


class EpochRecord(BaseModel):
    """One line of the training log."""
    epoch: int
    cls_loss: float
    reg_loss: float
    total_loss: float
    lr: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)


# ==========================================
# Targets
# ==========================================

def make_targets(track: AnnotationTrack, time_grid: np.ndarray) -> TimestepTargets:
    """
    Label timesteps whose center lies in a segment [s, e] and give them
    regression targets D_s = t - s, D_e = e - t.
    """
    grid = np.asarray(time_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("make_targets: timestep grid is empty")

    labels = np.zeros(grid.shape, dtype=np.int64)
    offsets = np.zeros(grid.shape + (2,), dtype=np.float64)
    for start, end in track.segments:
        inside = (grid >= start) & (grid <= end) & (labels == 0)
        labels[inside] = 1
        offsets[inside, 0] = grid[inside] - start
        offsets[inside, 1] = end - grid[inside]

    return TimestepTargets(
        labels=labels,
        offsets=offsets,
        regression_mask=labels == 1,
        valid=np.ones(grid.shape, dtype=bool),
    )


# ==========================================
# Losses
# ==========================================

def _valid_weights(count: int, valid) -> np.ndarray:
    if valid is None:
        return np.ones(count, dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(count)
    return valid


def focal_loss(
    p_event: Tensor,
    labels: np.ndarray,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
    valid: np.ndarray | None = None,
) -> Tensor:
    """
    Mean over valid timesteps of -alpha_t * (1 - p_t)^gamma * log(p_t).

    p_t is the probability given to the true class, clamped to [1e-7, 1 - 1e-7].
    alpha_t is alpha for positives and 1 - alpha for negatives; alpha=None sets
    alpha_t to 1 everywhere.
    """
    p_event = nx.as_tensor(p_event)
    labels = np.asarray(labels).reshape(p_event.shape)
    weights = _valid_weights(p_event.size, valid).reshape(p_event.shape)
    count = int(weights.sum())
    if count == 0:
        raise ValueError("focal_loss: no valid timesteps")

    positive = labels.astype(p_event.dtype)
    p_true = nx.add(nx.mul(p_event, 2.0 * positive - 1.0), 1.0 - positive)
    p_true = nx.clip(p_true, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)

    per_step = nx.mul(nx.log(p_true), -1.0)
    if gamma != 0:
        per_step = nx.mul(per_step, nx.power(nx.sub(1.0, p_true), gamma))
    if alpha is not None:
        per_step = nx.mul(per_step, np.where(labels == 1, alpha, 1.0 - alpha).astype(p_event.dtype))

    masked = nx.mul(per_step, weights.astype(p_event.dtype))
    return nx.mul(nx.sum_all(masked), 1.0 / count)


def regression_loss(pred: Tensor, target: np.ndarray, regression_mask: np.ndarray) -> Tensor:
    """Mean squared error over masked-on timesteps and both offsets; 0 when the mask is empty."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"regression_loss: prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(regression_mask, dtype=bool).reshape(pred.shape[0])
    count = int(mask.sum())
    if count == 0:
        return nx.mul(nx.sum_all(pred), 0.0)
    diff = nx.mul(nx.sub(pred, target), mask[:, None].astype(pred.dtype))
    return nx.mul(nx.sum_all(nx.mul(diff, diff)), 1.0 / (count * pred.shape[1]))


def total_loss(cls: Tensor, reg: Tensor, weight: float = 1.0) -> Tensor:
    """cls + weight * reg; refuses non-finite inputs."""
    cls, reg = nx.as_tensor(cls), nx.as_tensor(reg)
    for name, value in (("classification", cls), ("regression", reg)):
        if not np.all(np.isfinite(value.values)):
            raise NonFiniteLossError(f"{name} loss is not finite: {value.values}")
    return nx.add(cls, nx.mul(reg, weight))


# ==========================================
# Optimisation
# ==========================================

def sgd_step(params: list[Tensor], grads: dict[Tensor, np.ndarray] | None, lr: float) -> list[Tensor]:
    """
    p <- p - lr * g for every parameter; no momentum, no weight decay.

    Every gradient is checked before any parameter moves.

    Raises:
        NonFiniteLossError: if any gradient holds NaN or inf.
    """
    updates = []
    for param in params:
        grad = param.grad if grads is None else grads.get(param, param.grad)
        if grad is None:
            grad = np.zeros_like(param.values)
        if grad.shape != param.shape:
            raise nx.ShapeError(f"sgd_step: gradient {grad.shape} does not match {param.name or 'parameter'} {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(f"sgd_step: non-finite gradient for {param.name or 'parameter'}")
        updates.append((param, grad))
    for param, grad in updates:
        param.values -= lr * grad
    return params


class PlateauScheduler:
    """Multiply the learning rate by factor after `patience` epochs without strict improvement."""

    def __init__(self, lr: float, factor: float = 0.01, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            logger.info(f"Loss plateaued for {self.patience} epochs, learning rate -> {self.lr:.3g}")
        return self.lr


def plateau_scheduler(loss_history: list[float], current_lr: float, factor: float, patience: int) -> float:
    """
    Learning rate after the latest epoch of loss_history.

    Replays the plateau counter over the whole history; returns current_lr * factor
    when the decay fires on the final epoch, otherwise current_lr.
    """
    if not loss_history:
        raise ValueError("plateau_scheduler: loss history is empty")
    replay = PlateauScheduler(1.0, factor, patience)
    fired = False
    for loss in loss_history:
        before = replay.lr
        fired = replay.step(loss) != before
    return current_lr * factor if fired else current_lr


# ==========================================
# Epoch loop
# ==========================================

def pad_batch(videos: list[Video], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad features to the longest video; returns ([B x T x d], [B x T] validity)."""
    longest = max(v.features.num_steps for v in videos)
    dim = videos[0].features.feature_dim
    batch = np.zeros((len(videos), longest, dim), dtype=dtype)
    mask = np.zeros((len(videos), longest), dtype=bool)
    for i, video in enumerate(videos):
        steps = video.features.num_steps
        batch[i, :steps] = video.features.features
        mask[i, :steps] = True
    return batch, mask


def batch_targets(videos: list[Video], behavior: str, video_index: np.ndarray, step_index: np.ndarray):
    """Targets for the valid rows of a padded batch, in the row order the heads produce."""
    per_video = [make_targets(v.track(behavior), v.features.time_grid) for v in videos]
    labels = np.array([per_video[b].labels[t] for b, t in zip(video_index, step_index)], dtype=np.int64)
    offsets = np.array([per_video[b].offsets[t] for b, t in zip(video_index, step_index)], dtype=np.float64)
    offsets = offsets.reshape(len(video_index), 2)
    return labels, offsets, labels == 1


def batch_loss(
    videos: list[Video],
    behavior: str,
    params: ModelParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Forward one padded batch and return (classification, regression, total) losses."""
    features, mask = pad_batch(videos, dtype=model_config.np_dtype)
    outputs = forward_batch(features, mask, params, model_config, mode, rng)
    labels, offsets, regression_mask = batch_targets(videos, behavior, outputs.video_index, outputs.step_index)

    cls = focal_loss(outputs.heads.p_event, labels, train_config.focal_alpha, train_config.focal_gamma)
    if outputs.heads.offsets is not None:
        reg = regression_loss(outputs.heads.offsets, offsets, regression_mask)
    else:
        reg = Tensor(np.zeros((), dtype=model_config.np_dtype))
    return cls, reg, total_loss(cls, reg, train_config.regression_weight)


def train(
    videos: list[Video],
    behavior: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ModelParams | None = None,
    dropout_seed: int | None = None,
) -> TrainResult:
    """
    Train one single-behavior model.

    Each epoch shuffles videos with the seeded generator, walks batches of
    batch_size padded videos through forward / backward / SGD, then feeds the
    epoch-mean total loss to the plateau scheduler.

    Raises:
        NonFiniteLossError: naming the videos of the offending batch.
        ValueError: when a batch cannot be scored, e.g. a single valid step
            under train-mode batch norm; names the videos of the batch.
    """
    if not videos:
        raise ValueError("train: dataset is empty")
    params = params or init_params(model_config)
    rng = np.random.default_rng(0 if train_config.seed is None else train_config.seed)
    dropout_rng = None
    if model_config.dropout_rate > 0:
        dropout_rng = np.random.default_rng(rng.integers(0, 2**32) if dropout_seed is None else dropout_seed)
    scheduler = PlateauScheduler(train_config.learning_rate, train_config.plateau_factor, train_config.plateau_patience)
    parameters = params.parameters()
    result = TrainResult(params=params)

    logger.info(
        f"Training '{behavior}' on {len(videos)} videos for {train_config.epochs} epochs "
        f"(batch {train_config.batch_size}, lr {train_config.learning_rate})"
    )
    for epoch in range(1, train_config.epochs + 1):
        lr = scheduler.lr
        order = rng.permutation(len(videos))
        cls_sum = reg_sum = total_sum = 0.0
        batches = 0

        for start in range(0, len(videos), train_config.batch_size):
            batch = [videos[i] for i in order[start:start + train_config.batch_size]]
            video_ids = [v.video_id for v in batch]
            try:
                cls, reg, total = batch_loss(batch, behavior, params, model_config, train_config, "train", dropout_rng)
            except NonFiniteLossError as e:
                raise NonFiniteLossError(f"Epoch {epoch}: {e} in batch {video_ids}", video_ids) from e
            except ValueError as e:
                raise ValueError(f"Epoch {epoch}: {e} in batch {video_ids}") from e

            record = ComputationRecord.trace(total)
            grads = nx.backward(record, total, parameters)
            try:
                sgd_step(parameters, grads, lr)
            except NonFiniteLossError as e:
                raise NonFiniteLossError(f"Epoch {epoch}: {e} in batch {video_ids}", video_ids) from e

            cls_sum += cls.item()
            reg_sum += reg.item()
            total_sum += total.item()
            batches += 1
            logger.debug(f"  batch {batches}: total {total.item():.6f}")

        entry = EpochRecord(
            epoch=epoch,
            cls_loss=cls_sum / batches,
            reg_loss=reg_sum / batches,
            total_loss=total_sum / batches,
            lr=lr,
        )
        result.history.append(entry)
        logger.info(
            f"Epoch {epoch}/{train_config.epochs}: cls {entry.cls_loss:.5f} reg {entry.reg_loss:.5f} "
            f"total {entry.total_loss:.5f} lr {lr:.3g}"
        )
        scheduler.step(entry.total_loss)

    return result
