"""Iterative semi-supervised transfer to a region with fragmentary observations.

Each iteration completes the target region's incomplete days with the current
model, fine-tunes a copy on the completions (plus a retained share of the
previous iteration's training set) under progressive unfreezing and
real/synthetic loss weighting, then scores fresh syntheses of held-out target
days against their observed activities. The iteration with the lowest mean
JSD is returned, not necessarily the last.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .activity import ActivityChain
from .checkpoint import load_checkpoint, save_checkpoint
from .const import GROUP_BLOCK_1, GROUP_BLOCK_2, GROUP_EMBEDDINGS, GROUP_MLP_HEAD, STAT_NAMES
from .encoding import ALL_STRATEGIES, MaskStrategy, SlotDataset, encode_chains, read_dataset, write_dataset
from .errors import EmptyDatasetError, InvalidConfigError, NoTargetDataError
from .loss import LossConfig
from .metrics import JsdReport, evaluate
from .model import ModelParams, ReconstructMode, reconstruct_dataset
from .training import AdamOptimizer, run_epoch
from .utils import child_rng, json_digest, round_half_up

_LOGGER = logging.getLogger(__name__)

STATE_FILE = "state.json"
TRAJECTORY_FILE = "trajectory.csv"
BEST_CHECKPOINT = "best.ckpt"


@dataclass(frozen=True)
class TransferConfig:
    max_iterations: int = 6
    epochs_per_iteration: int = 8
    retention_fraction: float = 0.2
    convergence_epsilon: float = 1e-3
    temperature: float = 1.0
    unfreeze_fractions: tuple[float, float, float] = (0.25, 0.25, 0.5)
    mask_fraction: float = 0.7
    holdout_fraction: float = 0.2
    batch_size: int = 128
    lr: float = 5e-4
    l2: float = 1e-5
    strategies: tuple[MaskStrategy, ...] = ALL_STRATEGIES
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.epochs_per_iteration < 1:
            raise InvalidConfigError("max_iterations and epochs_per_iteration must be at least 1")
        if not 0.0 <= self.retention_fraction < 1.0:
            raise InvalidConfigError(f"retention_fraction must be in [0, 1), got {self.retention_fraction}")
        if len(self.unfreeze_fractions) != 3 or abs(sum(self.unfreeze_fractions) - 1.0) > 1e-9:
            raise InvalidConfigError("unfreeze_fractions must be three shares summing to 1")
        if not 0.0 <= self.mask_fraction <= 1.0 or not 0.0 < self.holdout_fraction < 1.0:
            raise InvalidConfigError("mask_fraction must be in [0, 1] and holdout_fraction in (0, 1)")
        if self.convergence_epsilon < 0 or self.temperature <= 0:
            raise InvalidConfigError("convergence_epsilon must be >= 0 and temperature > 0")
        object.__setattr__(self, "strategies", tuple(MaskStrategy(s) for s in self.strategies))
        object.__setattr__(self, "unfreeze_fractions", tuple(float(f) for f in self.unfreeze_fractions))


@dataclass
class TransferState:
    """Progress of the loop; ``trajectory[k]`` scores iteration ``k + 1``."""

    iteration: int = 0
    params: ModelParams | None = None
    synthetic: SlotDataset | None = None
    retained: SlotDataset | None = None
    trajectory: list[JsdReport] = field(default_factory=list)
    best_iteration: int | None = None
    baseline: JsdReport | None = None
    converged: bool = False

    @property
    def best_report(self) -> JsdReport | None:
        return None if self.best_iteration is None else self.trajectory[self.best_iteration - 1]

    def trajectory_frame(self) -> pd.DataFrame:
        """ One row per iteration: the five JSD values plus their ``mean``, the score the best iteration is chosen by. """
        rows = [
            {"iteration": index + 1, **{f"jsd_{name}": report.values[name] for name in STAT_NAMES}, "mean": report.mean}
            for index, report in enumerate(self.trajectory)
        ]
        columns = ["iteration", "jsd_length", "jsd_type", "jsd_start", "jsd_end", "jsd_duration", "mean"]
        return pd.DataFrame(rows, columns=columns)


def unfreeze_schedule(epoch: int, total_epochs: int, fractions: Sequence[float] = (0.25, 0.25, 0.5)) -> frozenset[str]:
    """
    Trainable layer groups for an epoch of a transfer iteration.

    The first share of epochs trains the MLP head and embeddings, the second
    adds the input-nearest block, the rest adds the middle block. The
    output-nearest block is never released.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{total_epochs - 1}")
    groups = {GROUP_MLP_HEAD, GROUP_EMBEDDINGS}
    if epoch >= total_epochs * fractions[0]:
        groups.add(GROUP_BLOCK_1)
    if epoch >= total_epochs * (fractions[0] + fractions[1]):
        groups.add(GROUP_BLOCK_2)
    return frozenset(groups)


def synthesize_dataset(
    params: ModelParams,
    target: SlotDataset,
    rng: np.random.Generator,
    temperature: float = 1.0,
    threads: int = 1,
) -> SlotDataset:
    """ Complete every target day by sampling; ``real`` marks the slots that were observed. """
    return reconstruct_dataset(params, target, ReconstructMode.SAMPLE, temperature, rng, threads=threads)


def retain(previous: SlotDataset, fraction: float, rng: np.random.Generator) -> SlotDataset:
    """ Uniform sample without replacement of ``round(fraction * len(previous))`` examples. """
    size = min(round_half_up(fraction * len(previous)), len(previous))
    if size == 0:
        return SlotDataset.empty()
    return previous.subset(np.sort(rng.choice(len(previous), size=size, replace=False)))


def _as_training_set(dataset: SlotDataset) -> SlotDataset:
    """ Complete source days are entirely real. """
    if dataset.real is not None:
        return dataset
    return SlotDataset(dataset.tokens, dataset.observed, dataset.day_of_week, dataset.observed.copy(),
                       dataset.agent_ids, dataset.dates)


def transfer_iteration(
    params: ModelParams,
    synthetic: SlotDataset,
    retained: SlotDataset,
    cfg: TransferConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, SlotDataset]:
    """
    Fine-tune a copy of ``params`` on the synthetic set plus the retained examples.

    Returns:
        The fine-tuned parameters and the training set used (the next retention pool)
    """
    if len(synthetic) == 0:
        raise EmptyDatasetError("Synthetic dataset is empty")
    train = synthetic.concat(_as_training_set(retained)) if len(retained) else synthetic
    tuned = params.copy()
    optimizer = AdamOptimizer(tuned, lr=cfg.lr, l2=cfg.l2)

    for epoch in range(cfg.epochs_per_iteration):
        tuned.set_trainable(unfreeze_schedule(epoch, cfg.epochs_per_iteration, cfg.unfreeze_fractions))
        loss = run_epoch(tuned, optimizer, train, cfg.mask_fraction, loss_cfg, cfg.batch_size, rng,
                         cfg.strategies, use_real_mask=True)
        _LOGGER.debug("Transfer epoch %d/%d (%s): loss %.4f", epoch + 1, cfg.epochs_per_iteration,
                      ",".join(sorted(tuned.trainable_groups)), loss)
    return tuned, train


def _split_target(chains: Sequence[ActivityChain], cfg: TransferConfig) -> tuple[list[int], list[int]]:
    order = np.random.default_rng(cfg.seed).permutation(len(chains))
    holdout = max(1, round_half_up(cfg.holdout_fraction * len(chains)))
    if len(chains) < 2:
        return list(order), list(order)
    return sorted(order[holdout:].tolist()), sorted(order[:holdout].tolist())


def _score(params: ModelParams, holdout: SlotDataset, reference: list[ActivityChain],
           cfg: TransferConfig, rng: np.random.Generator) -> JsdReport:
    fresh = synthesize_dataset(params, holdout, rng, cfg.temperature, cfg.threads)
    return evaluate(fresh.to_chains(), reference, config=asdict(cfg))


def _converged(trajectory: list[JsdReport], epsilon: float) -> bool:
    if len(trajectory) < 2:
        return False
    previous, current = trajectory[-2].values, trajectory[-1].values
    return all(abs(current[name] - previous[name]) < epsilon for name in STAT_NAMES)


def _persist(out_dir: Path, state: TransferState, train: SlotDataset, best: ModelParams, cfg: TransferConfig) -> None:
    iteration_dir = out_dir / f"iter_{state.iteration:02d}"
    save_checkpoint(iteration_dir / "model.ckpt", state.params, extra={"iteration": state.iteration})
    write_dataset(iteration_dir / "synthetic.jsonl", state.synthetic)
    write_dataset(iteration_dir / "train.jsonl", train)
    save_checkpoint(out_dir / BEST_CHECKPOINT, best, extra={"iteration": state.best_iteration})
    state.trajectory_frame().to_csv(out_dir / TRAJECTORY_FILE, index=False, float_format="%.10g")
    payload = {
        "iteration": state.iteration,
        "best_iteration": state.best_iteration,
        "converged": state.converged,
        "config_digest": json_digest(asdict(cfg)),
        "baseline": state.baseline.to_dict() if state.baseline else None,
        "trajectory": [report.to_dict() for report in state.trajectory],
    }
    (out_dir / STATE_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _restore(out_dir: Path, cfg: TransferConfig) -> tuple[TransferState, SlotDataset, ModelParams] | None:
    state_path = out_dir / STATE_FILE
    if not state_path.exists():
        return None
    payload = json.loads(state_path.read_text(encoding="utf-8"))
    if payload.get("config_digest") != json_digest(asdict(cfg)):
        raise InvalidConfigError(f"{state_path} was written with a different transfer config")
    iteration = int(payload["iteration"])
    iteration_dir = out_dir / f"iter_{iteration:02d}"
    params, _ = load_checkpoint(iteration_dir / "model.ckpt")
    best, _ = load_checkpoint(out_dir / BEST_CHECKPOINT)
    state = TransferState(
        iteration=iteration,
        params=params,
        synthetic=read_dataset(iteration_dir / "synthetic.jsonl"),
        trajectory=[JsdReport.from_dict(r) for r in payload["trajectory"]],
        best_iteration=payload["best_iteration"],
        baseline=JsdReport.from_dict(payload["baseline"]) if payload.get("baseline") else None,
        converged=bool(payload.get("converged")),
    )
    _LOGGER.info("Resuming transfer after iteration %d (best %s)", iteration, state.best_iteration)
    return state, read_dataset(iteration_dir / "train.jsonl"), best


def run_transfer_loop(
    base: ModelParams,
    target_chains: Sequence[ActivityChain],
    cfg: TransferConfig,
    loss_cfg: LossConfig | None = None,
    source: SlotDataset | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
) -> tuple[ModelParams, TransferState]:
    """
    Run synthesize / fine-tune / evaluate iterations until the five JSD deltas
    fall below ``cfg.convergence_epsilon`` or ``cfg.max_iterations`` is reached.

    Args:
        base: Base model; never modified
        target_chains: Filtered, fragmentary target-region chains
        cfg: Loop settings
        loss_cfg: Loss weights for fine-tuning
        source: Optional complete source dataset; the first iteration retains a share of it
        out_dir: Directory for per-iteration checkpoints, synthetic sets and the trajectory
        resume: Continue from the state stored in ``out_dir``

    Returns:
        Parameters of the iteration with the lowest mean JSD and the final state

    Raises:
        NoTargetDataError: If there are no target chains
    """
    if not target_chains:
        raise NoTargetDataError("Transfer needs at least one target chain")
    loss_cfg = loss_cfg or LossConfig()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    tune_index, holdout_index = _split_target(target_chains, cfg)
    dataset = encode_chains(target_chains)
    tune_set, holdout_set = dataset.subset(tune_index), dataset.subset(holdout_index)
    reference = [target_chains[i] for i in holdout_index]
    _LOGGER.info("Transfer on %d target days (%d fine-tune, %d held out)", len(dataset), len(tune_set), len(holdout_set))

    restored = _restore(out_path, cfg) if (resume and out_path is not None) else None
    if restored is not None:
        state, previous_train, best_params = restored
        current = state.params
    else:
        state = TransferState(params=base)
        state.baseline = _score(base, holdout_set, reference, cfg, child_rng(cfg.seed, 0, 1))
        _LOGGER.info("Base model mean JSD on target: %.4f", state.baseline.mean)
        previous_train = _as_training_set(source) if source is not None else SlotDataset.empty()
        best_params = base
        current = base

    while state.iteration < cfg.max_iterations and not state.converged:
        n = state.iteration + 1
        synthesis_rng, training_rng, scoring_rng = (child_rng(cfg.seed, n, k) for k in range(3))

        synthetic = synthesize_dataset(current, tune_set, synthesis_rng, cfg.temperature, cfg.threads)
        retained = retain(previous_train, cfg.retention_fraction, training_rng)
        current, previous_train = transfer_iteration(current, synthetic, retained, cfg, loss_cfg, training_rng)
        report = _score(current, holdout_set, reference, cfg, scoring_rng)

        state.iteration = n
        state.params = current
        state.synthetic = synthetic
        state.retained = retained
        state.trajectory.append(report)
        if state.best_iteration is None or report.mean < state.best_report.mean:
            state.best_iteration = n
            best_params = current.copy()
        state.converged = _converged(state.trajectory, cfg.convergence_epsilon)
        _LOGGER.info("Iteration %d: mean JSD %.4f (length %.4f), best iteration %d",
                     n, report.mean, report.jsd_length, state.best_iteration)

        if out_path is not None:
            _persist(out_path, state, previous_train, best_params, cfg)

    if state.converged:
        _LOGGER.info("JSD converged after %d iterations", state.iteration)
    return best_params, state
