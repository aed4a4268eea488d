"""Training objective: weighted cross-entropy, transition loss, soft-DTW and their weighted sums.

Every loss takes probabilities ``[L x 16]`` or ``[B x L x 16]`` and target
tokens where 0 marks a slot without target. A batch value is the mean of the
per-example values. Soft-DTW with ``gamma > 0`` can be negative; the hard
value (``gamma == 0``) is always non-negative.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import numerics as nx
from .const import CLASSES_OUT, NO_TARGET
from .errors import InvalidConfigError, ShapeMismatchError
from .numerics import Tensor

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, ...] = field(default_factory=lambda: (1.0,) * CLASSES_OUT)
    w1: float = 1.0
    w2: float = 0.2
    w3: float = 0.1
    w_l: float = 1.0
    w_s: float = 0.5
    dtw_gamma: float = 1.0
    eps: float = 1e-7
    masked_only: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if len(self.class_weights) != CLASSES_OUT or not np.all(np.isfinite(self.class_weights)):
            raise InvalidConfigError(f"class_weights must be {CLASSES_OUT} finite values")
        if min(self.class_weights) < 0:
            raise InvalidConfigError("class_weights must be non-negative")
        for name in ("w1", "w2", "w3", "w_l", "w_s", "dtw_gamma"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")
        if not 0.0 < self.eps < 1.0:
            raise InvalidConfigError("eps must be in (0, 1)")

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.class_weights, dtype=np.float64)

    def with_class_weights(self, weights: np.ndarray) -> LossConfig:
        return LossConfig(tuple(float(w) for w in weights), self.w1, self.w2, self.w3,
                          self.w_l, self.w_s, self.dtw_gamma, self.eps, self.masked_only)


def _batched(pred: Tensor, target: np.ndarray) -> tuple[Tensor, np.ndarray]:
    target = np.asarray(target, dtype=np.int64)
    if pred.ndim == 2:
        pred = nx.reshape(pred, (1,) + pred.shape)
        target = target.reshape(1, -1)
    if pred.ndim != 3 or target.shape != pred.shape[:2]:
        raise ShapeMismatchError("loss", pred.shape, target.shape)
    if target.size and (target.min() < 0 or target.max() > pred.shape[-1]):
        raise ShapeMismatchError("loss target", pred.shape, (int(target.min()), int(target.max())))
    return pred, target


def _zero(pred: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=pred.dtype), dtype=pred.dtype)


def _ce_from_weights(pred: Tensor, target: np.ndarray, slot_weights: np.ndarray, eps: float) -> Tensor:
    picked = nx.take_last(pred, np.clip(target - 1, 0, None))
    return nx.scale(nx.sum(nx.mul(nx.log(picked, eps), slot_weights.astype(pred.dtype))), -1.0)


def _per_example_norm(mask: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=1, keepdims=True)
    return np.where(counts > 0, mask / np.maximum(counts, 1), 0.0)


def weighted_cross_entropy(pred: Tensor, target: np.ndarray, class_weights: np.ndarray, eps: float = 1e-7) -> Tensor:
    """
    Mean over target slots of ``-w_c * log(clamp(p_c, eps, 1))``, averaged over the batch.

    Args:
        pred: Probabilities [L x 16] or [B x L x 16]
        target: Tokens 1..16; 0 means no target
        class_weights: One weight per output class
        eps: Lower clamp of probabilities

    Returns:
        Scalar loss tensor
    """
    pred, target = _batched(pred, target)
    valid = target != NO_TARGET
    weights = np.asarray(class_weights)[np.clip(target - 1, 0, None)]
    slot_weights = weights * _per_example_norm(valid) / len(target)
    return _ce_from_weights(pred, target, slot_weights, eps)


def transition_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """
    Binary cross-entropy on activity changes between adjacent slots.

    The predicted change probability is ``1 - sum_c p[i, c] * p[i+1, c]``;
    pairs where either slot has no target are skipped.
    """
    pred, target = _batched(pred, target)
    batch, length, _ = pred.shape
    if length < 2:
        return _zero(pred)

    same = nx.sum(nx.mul(nx.getitem(pred, np.s_[:, :-1]), nx.getitem(pred, np.s_[:, 1:])), axis=-1)
    changed = nx.shift(nx.scale(same, -1.0), 1.0)

    valid = (target[:, :-1] != NO_TARGET) & (target[:, 1:] != NO_TARGET)
    flips = (target[:, :-1] != target[:, 1:]) & valid
    norm = _per_example_norm(valid) / batch
    change_weights = (flips * norm).astype(pred.dtype)
    stay_weights = ((valid & ~flips) * norm).astype(pred.dtype)

    total = nx.add(
        nx.sum(nx.mul(nx.log(changed, eps), change_weights)),
        nx.sum(nx.mul(nx.log(same, eps), stay_weights)),
    )
    return nx.scale(total, -1.0)


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """ Pairwise squared Euclidean distances between rows, batched over a leading axis. """
    x_norm = (x ** 2).sum(axis=-1)[..., :, None]
    y_norm = (y ** 2).sum(axis=-1)[..., None, :]
    return np.maximum(x_norm + y_norm - 2.0 * x @ np.swapaxes(y, -1, -2), 0.0)


def _diagonals(n: int, m: int):
    for p in range(n + m - 1):
        i = np.arange(max(0, p - m + 1), min(n - 1, p) + 1)
        yield i + 1, p - i + 1


def _dtw_table(cost: np.ndarray, gamma: float) -> np.ndarray:
    """ Accumulated-cost table [B x (N+2) x (M+2)] with the value at [:, N, M]. """
    batch, n, m = cost.shape
    table = np.full((batch, n + 2, m + 2), np.inf)
    table[:, 0, 0] = 0.0
    for ii, jj in _diagonals(n, m):
        previous = np.stack([table[:, ii - 1, jj - 1], table[:, ii - 1, jj], table[:, ii, jj - 1]])
        if gamma > 0:
            soft = -gamma * logsumexp(-previous / gamma, axis=0)
        else:
            soft = previous.min(axis=0)
        table[:, ii, jj] = cost[:, ii - 1, jj - 1] + soft
    return table


def _soft_alignment(cost: np.ndarray, table: np.ndarray, gamma: float) -> np.ndarray:
    """ Expected alignment matrix E = dValue/dCost by the reverse recursion. """
    batch, n, m = cost.shape
    padded = np.zeros((batch, n + 2, m + 2))
    padded[:, 1:n + 1, 1:m + 1] = cost
    table = table.copy()
    table[:, :, -1] = -np.inf
    table[:, -1, :] = -np.inf
    table[:, -1, -1] = table[:, n, m]
    expected = np.zeros((batch, n + 2, m + 2))
    expected[:, -1, -1] = 1.0

    for ii, jj in reversed(list(_diagonals(n, m))):
        here = table[:, ii, jj]
        a = np.exp((table[:, ii + 1, jj] - here - padded[:, ii + 1, jj]) / gamma)
        b = np.exp((table[:, ii, jj + 1] - here - padded[:, ii, jj + 1]) / gamma)
        c = np.exp((table[:, ii + 1, jj + 1] - here - padded[:, ii + 1, jj + 1]) / gamma)
        expected[:, ii, jj] = expected[:, ii + 1, jj] * a + expected[:, ii, jj + 1] * b + expected[:, ii + 1, jj + 1] * c
    return expected[:, 1:n + 1, 1:m + 1]


def _hard_alignment(table: np.ndarray) -> np.ndarray:
    """ Indicator of the optimal warping path, preferring the diagonal on ties. """
    batch, rows, cols = table.shape
    n, m = rows - 2, cols - 2
    path = np.zeros((batch, n, m))
    for k in range(batch):
        i, j = n, m
        while i >= 1 and j >= 1:
            path[k, i - 1, j - 1] = 1.0
            if i == 1 and j == 1:
                break
            steps = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
            i, j = min(steps, key=lambda s: table[k, s[0], s[1]])
    return path


def dtw_value(x: np.ndarray, y: np.ndarray, gamma: float = 0.0) -> float:
    """
    (Soft-)DTW between two sequences of vectors under squared Euclidean cost.

    Args:
        x: [N x C] sequence
        y: [M x C] sequence
        gamma: 0 for classic DTW, > 0 for the soft-min relaxation

    Returns:
        The accumulated alignment cost
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    cost = squared_distances(np.asarray(x, dtype=np.float64)[None], np.asarray(y, dtype=np.float64)[None])
    table = _dtw_table(cost, gamma)
    return float(table[0, cost.shape[1], cost.shape[2]])


def soft_dtw_loss(pred: Tensor, target: np.ndarray, gamma: float = 1.0) -> Tensor:
    """
    DTW between predicted distributions and the one-hot target, as a differentiable op.

    Examples whose target has any slot without target contribute 0.

    Args:
        pred: Probabilities [L x 16] or [B x L x 16]
        target: Tokens 1..16; 0 means no target
        gamma: Soft-min temperature; 0 gives classic DTW with the optimal-path gradient

    Returns:
        Scalar loss tensor
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    pred, target = _batched(pred, target)
    batch, _, classes = pred.shape
    complete = np.all(target != NO_TARGET, axis=1)
    if not complete.any():
        return _zero(pred)

    rows = np.flatnonzero(complete)
    x = pred.data[rows].astype(np.float64)
    y = np.eye(classes)[target[rows] - 1]
    cost = squared_distances(x, y)
    table = _dtw_table(cost, gamma)
    n, m = cost.shape[1:]
    value = table[:, n, m].sum() / batch

    def backward_fn(grad: np.ndarray):
        alignment = _soft_alignment(cost, table, gamma) if gamma > 0 else _hard_alignment(table)
        grad_x = 2.0 * (alignment.sum(axis=2)[..., None] * x - alignment @ y)
        full = np.zeros(pred.shape, dtype=np.float64)
        full[rows] = grad_x * (float(grad) / batch)
        return (full,)

    return nx.custom_op((pred,), np.asarray(value, dtype=pred.dtype), backward_fn, "soft_dtw")


def _weighted_sum(terms: list[tuple[float, Tensor]], pred: Tensor) -> Tensor:
    total: Tensor | None = None
    for weight, term in terms:
        scaled = nx.scale(term, weight)
        total = scaled if total is None else nx.add(total, scaled)
    return _zero(pred) if total is None else total


def _structure_terms(pred: Tensor, target: np.ndarray, cfg: LossConfig) -> list[tuple[float, Tensor]]:
    terms: list[tuple[float, Tensor]] = []
    if cfg.w2 > 0:
        terms.append((cfg.w2, transition_loss(pred, target, cfg.eps)))
    if cfg.w3 > 0:
        terms.append((cfg.w3, soft_dtw_loss(pred, target, cfg.dtw_gamma)))
    return terms


def combined_loss(pred: Tensor, target: np.ndarray, cfg: LossConfig, ce_target: np.ndarray | None = None) -> Tensor:
    """
    ``w1 * CE + w2 * TR + w3 * DTW``.

    ``ce_target`` optionally restricts the CE term (masked-only training);
    the structural terms always see the full target.
    """
    pred, target = _batched(pred, target)
    terms: list[tuple[float, Tensor]] = []
    if cfg.w1 > 0:
        ce_on = target if ce_target is None else np.asarray(ce_target).reshape(target.shape)
        terms.append((cfg.w1, weighted_cross_entropy(pred, ce_on, cfg.weights, cfg.eps)))
    terms += _structure_terms(pred, target, cfg)
    return _weighted_sum(terms, pred)


def masked_combined_loss(pred: Tensor, target: np.ndarray, slot_mask: np.ndarray, cfg: LossConfig) -> Tensor:
    """
    Real/synthetic weighted objective.

    The CE part is ``w_l * L_real + w_s * L_synthetic`` where each term is the
    weighted CE averaged over that example's real (mask 1) or synthetic
    (mask 0) target slots, and is 0 when there are none.

    Args:
        pred: Probabilities [L x 16] or [B x L x 16]
        target: Tokens 1..16; 0 means no target
        slot_mask: 1 on real/observed slots, 0 on model-filled slots
        cfg: Loss weights
    """
    pred, target = _batched(pred, target)
    real = np.asarray(slot_mask, dtype=bool).reshape(target.shape)
    valid = target != NO_TARGET
    terms: list[tuple[float, Tensor]] = []

    if cfg.w1 > 0 and (cfg.w_l > 0 or cfg.w_s > 0):
        class_w = cfg.weights[np.clip(target - 1, 0, None)]
        slot_weights = (
            cfg.w_l * _per_example_norm(valid & real)
            + cfg.w_s * _per_example_norm(valid & ~real)
        ) * class_w / len(target)
        terms.append((cfg.w1, _ce_from_weights(pred, target, slot_weights, cfg.eps)))
    terms += _structure_terms(pred, target, cfg)
    return _weighted_sum(terms, pred)
