"""Base-model training with the phased masking curriculum, Adam, L2 and early stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import numerics as nx
from .const import CLASSES_OUT, GROUP_EMBEDDINGS, GROUP_MLP_HEAD, NO_TARGET
from .encoding import ALL_STRATEGIES, MaskStrategy, SlotDataset, mask_dataset
from .errors import EmptyDatasetError, IncompleteTrainingDataError, InvalidConfigError
from .loss import LossConfig, combined_loss, masked_combined_loss
from .metrics import JsdReport, evaluate
from .model import ModelConfig, ModelParams, ReconstructMode, forward, init_model, reconstruct_dataset
from .utils import child_rng, round_half_up

_LOGGER = logging.getLogger(__name__)

CLASS_WEIGHT_MIN = 0.1
CLASS_WEIGHT_MAX = 10.0
# full-scale schedule: 5 warmup epochs and phase 3 from epoch 45 of 120
_WARMUP_SHARE = 5 / 120
_PHASE2_SHARE = 45 / 120
# fixed stream for validation masks
_VALIDATION_STREAM = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    warmup_epochs: int = 2
    phase2_end: int = 11
    phase2_fraction: float = 0.4
    phase3_fraction: float = 0.7
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-5
    patience: int = 5
    split: tuple[float, float, float] = (0.7, 0.2, 0.1)
    strategies: tuple[MaskStrategy, ...] = ALL_STRATEGIES
    auto_class_weights: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_epochs < self.phase2_end < self.epochs:
            raise InvalidConfigError(
                f"Need warmup_epochs < phase2_end < epochs, got {self.warmup_epochs}, {self.phase2_end}, {self.epochs}")
        if self.batch_size <= 0 or self.patience <= 0:
            raise InvalidConfigError("batch_size and patience must be positive")
        if self.lr <= 0 or self.l2 < 0:
            raise InvalidConfigError("lr must be positive and l2 non-negative")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise InvalidConfigError(f"split must be three non-negative shares summing to 1, got {self.split}")
        if not self.strategies:
            raise InvalidConfigError("At least one masking strategy is required")
        object.__setattr__(self, "strategies", tuple(MaskStrategy(s) for s in self.strategies))
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))

    @classmethod
    def scaled(cls, epochs: int, **overrides) -> TrainConfig:
        """ Config whose phase boundaries keep the 5/120 and 45/120 shares of ``epochs``. """
        warmup = max(1, math.ceil(epochs * _WARMUP_SHARE))
        phase2_end = max(warmup + 1, round_half_up(epochs * _PHASE2_SHARE))
        return cls(epochs=epochs, warmup_epochs=warmup, phase2_end=phase2_end, **overrides)


def phase_for_epoch(epoch: int, cfg: TrainConfig) -> tuple[int, float]:
    """ Curriculum phase (1..3) and mask fraction of an epoch: [0, warmup), [warmup, phase2_end), rest. """
    if epoch < cfg.warmup_epochs:
        return 1, 0.0
    if epoch < cfg.phase2_end:
        return 2, cfg.phase2_fraction
    return 3, cfg.phase3_fraction


def compute_class_weights(dataset: SlotDataset) -> np.ndarray:
    """
    Inverse-frequency class weights over the observed target slots.

    Seen classes get ``1 / frequency`` rescaled to mean 1, then clipped to
    [0.1, 10]; classes absent from the data get the clip maximum.

    Raises:
        EmptyDatasetError: If there is no target slot at all
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("Cannot compute class weights of an empty dataset")
    tokens = dataset.tokens[dataset.observed]
    tokens = tokens[(tokens >= 1) & (tokens <= CLASSES_OUT)]
    if tokens.size == 0:
        raise EmptyDatasetError("Dataset has no observed target slots")

    counts = np.bincount(tokens - 1, minlength=CLASSES_OUT).astype(np.float64)
    seen = counts > 0
    weights = np.full(CLASSES_OUT, CLASS_WEIGHT_MAX)
    inverse = counts.sum() / counts[seen]
    weights[seen] = np.clip(inverse / inverse.mean(), CLASS_WEIGHT_MIN, CLASS_WEIGHT_MAX)
    return weights


def split_dataset(dataset: SlotDataset, fractions: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0) -> tuple[SlotDataset, ...]:
    """ Shuffle and cut a dataset into consecutive parts of the given shares; the last part takes the rest. """
    order = np.random.default_rng(seed).permutation(len(dataset))
    # 0.7 + 0.2 sums to 0.8999...; snap before flooring
    cuts = np.floor(np.round(np.cumsum(fractions[:-1]) * len(dataset), 9)).astype(int)
    return tuple(dataset.subset(part) for part in np.split(order, cuts))


class AdamOptimizer:
    """Adam with coupled L2; tensors that are frozen at step time are left untouched."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, l2: float = 0.0) -> None:
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.l2 = l2
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._steps: dict[str, int] = {}

    @classmethod
    def from_config(cls, params: ModelParams, cfg: TrainConfig) -> AdamOptimizer:
        return cls(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.l2)

    def step(self, grads: dict[nx.Tensor, np.ndarray]) -> int:
        """ Apply one update; returns the number of tensors changed. """
        updated = 0
        for name, tensor in self.params.tensors.items():
            if not tensor.requires_grad:
                continue
            grad = grads.get(tensor)
            if grad is None:
                continue
            grad = grad.astype(np.float64)
            if self.l2:
                grad = grad + self.l2 * tensor.data
            first, second = self._moments.get(name, (np.zeros_like(grad), np.zeros_like(grad)))
            step = self._steps.get(name, 0) + 1
            first = self.beta1 * first + (1.0 - self.beta1) * grad
            second = self.beta2 * second + (1.0 - self.beta2) * grad * grad
            self._moments[name] = (first, second)
            self._steps[name] = step
            first_hat = first / (1.0 - self.beta1 ** step)
            second_hat = second / (1.0 - self.beta2 ** step)
            tensor.data = (tensor.data - self.lr * first_hat / (np.sqrt(second_hat) + self.eps)).astype(tensor.dtype)
            tensor.grad = None
            updated += 1
        return updated


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: int
    mask_fraction: float
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    class_weights: tuple[float, ...] = ()

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "phase", "mask_fraction", "train_loss", "val_loss", "lr"]
        return pd.DataFrame([vars(r) for r in self.records], columns=columns)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        return path


def _batch_loss(params: ModelParams, batch: SlotDataset, fraction: float, strategies, loss_cfg: LossConfig,
                rng: np.random.Generator, training: bool, use_real_mask: bool) -> nx.Tensor:
    masked = mask_dataset(batch, fraction, strategies, rng)
    probs = forward(params, masked.inputs, batch.day_of_week, training=training, rng=rng)
    if use_real_mask:
        return masked_combined_loss(probs, masked.targets, batch.real_mask, loss_cfg)
    ce_target = np.where(masked.hidden, masked.targets, NO_TARGET) if loss_cfg.masked_only else None
    return combined_loss(probs, masked.targets, loss_cfg, ce_target=ce_target)


def run_epoch(
    params: ModelParams,
    optimizer: AdamOptimizer,
    dataset: SlotDataset,
    fraction: float,
    loss_cfg: LossConfig,
    batch_size: int,
    rng: np.random.Generator,
    strategies: Sequence[MaskStrategy] = ALL_STRATEGIES,
    use_real_mask: bool = False,
) -> float:
    """ One pass over ``dataset`` in shuffled mini-batches; returns the example-weighted mean loss. """
    order = rng.permutation(len(dataset))
    total = 0.0
    for lo in range(0, len(order), batch_size):
        batch = dataset.subset(order[lo:lo + batch_size])
        loss = _batch_loss(params, batch, fraction, strategies, loss_cfg, rng, True, use_real_mask)
        optimizer.step(nx.backward(loss))
        total += loss.item() * len(batch)
    return total / max(len(dataset), 1)


def evaluate_loss(
    params: ModelParams,
    dataset: SlotDataset,
    fraction: float,
    loss_cfg: LossConfig,
    batch_size: int,
    seed: int,
    strategies: Sequence[MaskStrategy] = ALL_STRATEGIES,
    use_real_mask: bool = False,
) -> float:
    """ Eval-mode loss under masks drawn from a fixed seed, so values are comparable across epochs. """
    if len(dataset) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    total = 0.0
    with nx.no_grad():
        for lo in range(0, len(dataset), batch_size):
            batch = dataset.subset(range(lo, min(lo + batch_size, len(dataset))))
            total += _batch_loss(params, batch, fraction, strategies, loss_cfg, rng, False, use_real_mask).item() * len(batch)
    return total / len(dataset)


def fit(
    params: ModelParams,
    train: SlotDataset,
    validation: SlotDataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    on_best: Callable[[ModelParams, EpochRecord], None] | None = None,
) -> TrainingHistory:
    """
    Curriculum training loop with early stopping; restores the best-validation weights in place.
    """
    optimizer = AdamOptimizer.from_config(params, cfg)
    history = TrainingHistory()
    best_loss = math.inf
    best_params: ModelParams | None = None
    stale = 0

    for epoch in range(cfg.epochs):
        phase, fraction = phase_for_epoch(epoch, cfg)
        rng = child_rng(cfg.seed, epoch)
        train_loss = run_epoch(params, optimizer, train, fraction, loss_cfg, cfg.batch_size, rng, cfg.strategies)
        val_loss = evaluate_loss(params, validation, cfg.phase3_fraction, loss_cfg, cfg.batch_size,
                                 cfg.seed + _VALIDATION_STREAM, cfg.strategies)
        record = EpochRecord(epoch, phase, fraction, train_loss, val_loss, cfg.lr)
        history.records.append(record)
        _LOGGER.info("Epoch %d/%d phase %d mask %.2f: train %.4f val %.4f",
                     epoch + 1, cfg.epochs, phase, fraction, train_loss, val_loss)

        monitored = train_loss if math.isnan(val_loss) else val_loss
        if monitored < best_loss:
            best_loss = monitored
            best_params = params.copy()
            history.best_epoch = epoch
            stale = 0
            if on_best is not None:
                on_best(params, record)
        else:
            stale += 1
            if stale >= cfg.patience:
                _LOGGER.warning("Early stop at epoch %d; best epoch %d", epoch + 1, (history.best_epoch or 0) + 1)
                history.stopped_early = True
                break

    if best_params is not None:
        params.load_state(best_params)
    return history


def _resolve_loss_config(train: SlotDataset, cfg: TrainConfig, loss_cfg: LossConfig | None) -> LossConfig:
    loss_cfg = loss_cfg or LossConfig()
    if cfg.auto_class_weights:
        loss_cfg = loss_cfg.with_class_weights(compute_class_weights(train))
    return loss_cfg


def train_base(
    dataset: SlotDataset,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    loss_cfg: LossConfig | None = None,
    validation: SlotDataset | None = None,
    on_best: Callable[[ModelParams, EpochRecord], None] | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """
    Train a fresh model on complete days.

    Args:
        dataset: Complete encoded days; split 7:2:1 by ``cfg.split`` unless ``validation`` is given
        cfg: Training schedule
        model_cfg: Architecture; defaults when omitted
        loss_cfg: Loss weights; class weights are recomputed from the training part when ``cfg.auto_class_weights``
        validation: Explicit validation set
        on_best: Called with the params whenever validation loss improves

    Returns:
        Best-validation parameters and the epoch history

    Raises:
        EmptyDatasetError: If there is nothing to train on
        IncompleteTrainingDataError: If any input slot is unobserved
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("No training examples")
    if not dataset.is_complete:
        incomplete = int((~dataset.observed.all(axis=1)).sum())
        raise IncompleteTrainingDataError(f"{incomplete} training days have unobserved slots")

    if validation is None:
        train, validation, _ = split_dataset(dataset, cfg.split, cfg.seed)
    else:
        train = dataset
    if len(train) == 0:
        raise EmptyDatasetError("Training split is empty")

    model_cfg = model_cfg or ModelConfig(seed=cfg.seed)
    loss_cfg = _resolve_loss_config(train, cfg, loss_cfg)
    params = init_model(model_cfg)
    _LOGGER.info("Training on %d days, validating on %d", len(train), len(validation))
    history = fit(params, train, validation, cfg, loss_cfg, on_best)
    history.class_weights = loss_cfg.class_weights
    return params, history


def fine_tune_outer(
    params: ModelParams,
    dataset: SlotDataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """
    Supervised adaptation to a complete target dataset that only updates the
    embeddings and the MLP head. The transformer blocks stay frozen.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("No fine-tuning examples")
    if not dataset.is_complete:
        raise IncompleteTrainingDataError("Fine-tuning data must be complete")
    train, validation, _ = split_dataset(dataset, cfg.split, cfg.seed)
    loss_cfg = _resolve_loss_config(train, cfg, loss_cfg)
    tuned = params.copy().set_trainable({GROUP_EMBEDDINGS, GROUP_MLP_HEAD})
    history = fit(tuned, train, validation, cfg, loss_cfg)
    history.class_weights = loss_cfg.class_weights
    return tuned, history


def evaluate_reconstruction(
    params: ModelParams,
    test: SlotDataset,
    mask_fraction: float,
    strategies: Sequence[MaskStrategy] = ALL_STRATEGIES,
    seed: int = 0,
    temperature: float = 1.0,
    threads: int = 1,
    config: dict | None = None,
) -> JsdReport:
    """
    Mask the test days, reconstruct them by sampling and compare with the originals.

    Returns:
        JSD report stamped with the strategy mix and mask fraction
    """
    if len(test) == 0:
        raise EmptyDatasetError("Empty test set")
    rng = np.random.default_rng(seed)
    masked = mask_dataset(test, mask_fraction, strategies, rng)
    inputs = SlotDataset(masked.inputs, masked.observed, test.day_of_week, agent_ids=test.agent_ids, dates=test.dates)
    completed = reconstruct_dataset(params, inputs, ReconstructMode.SAMPLE, temperature, rng, threads=threads)
    used = sorted({str(s) for s in masked.strategies})
    return evaluate(completed.to_chains(), test.to_chains(), config=config, strategies=used, mask_fraction=mask_fraction)

