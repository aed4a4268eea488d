"""Masked-sequence reconstruction network.

Input path: token embedding, a linear projection of the slot's time label and
a day-of-week embedding are concatenated, projected to ``d_model`` and added
to learned position embeddings. Three stacked blocks follow, each an encoder
layer (self-attention) and a decoder layer whose learned per-slot queries
attend over that block's encoder output. An MLP head with dropout and a
softmax gives a distribution over the 16 output classes of every slot.

Output class ``c`` stands for token ``c + 1`` (activities 1..15, then TRAVEL).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import StrEnum
from typing import Iterable, Iterator

import numpy as np

from . import numerics as nx
from .const import (
    CLASSES_OUT,
    DAYS_PER_WEEK,
    GROUP_BLOCK_1,
    GROUP_BLOCK_2,
    GROUP_BLOCK_3,
    GROUP_EMBEDDINGS,
    GROUP_MLP_HEAD,
    LAYER_GROUPS,
    SLOTS_PER_DAY,
    VOCAB_IN,
)
from .encoding import SlotDataset, SlotSequence, default_segment_table
from .errors import InvalidConfigError, ShapeMismatchError, UnknownGroupError, UnknownTokenError
from .numerics import Tensor
from .utils import child_rng

_LOGGER = logging.getLogger(__name__)

BLOCK_GROUPS = (GROUP_BLOCK_1, GROUP_BLOCK_2, GROUP_BLOCK_3)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    blocks: int = 3
    mlp_hidden: int = 128
    ffn_hidden: int = 128
    dropout_p: float = 0.1
    token_embed_dim: int = 32
    time_embed_dim: int = 8
    dow_embed_dim: int = 8
    vocab_in: int = VOCAB_IN
    classes_out: int = CLASSES_OUT
    seq_len: int = SLOTS_PER_DAY
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            raise InvalidConfigError(f"d_model {self.d_model} must be a positive multiple of heads {self.heads}")
        if self.blocks != len(BLOCK_GROUPS):
            raise InvalidConfigError(f"The network has exactly {len(BLOCK_GROUPS)} blocks, got {self.blocks}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.vocab_in != VOCAB_IN or self.classes_out != CLASSES_OUT or self.seq_len != SLOTS_PER_DAY:
            raise InvalidConfigError("Vocabulary, class count and sequence length are fixed by the slot encoding")
        for name in ("mlp_hidden", "ffn_hidden", "token_embed_dim", "time_embed_dim", "dow_embed_dim"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


class ReconstructMode(StrEnum):
    ARGMAX = "argmax"
    SAMPLE = "sample"


def _layer_shapes(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.ffn_hidden
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for proj in ("q", "k", "v", "o"):
        shapes += [(f"{prefix}.attn.{proj}_w", (d, d)), (f"{prefix}.attn.{proj}_b", (d,))]
    shapes += [(f"{prefix}.norm1.gamma", (d,)), (f"{prefix}.norm1.beta", (d,))]
    shapes += [
        (f"{prefix}.ffn.in_w", (d, f)), (f"{prefix}.ffn.in_b", (f,)),
        (f"{prefix}.ffn.out_w", (f, d)), (f"{prefix}.ffn.out_b", (d,)),
    ]
    shapes += [(f"{prefix}.norm2.gamma", (d,)), (f"{prefix}.norm2.beta", (d,))]
    return shapes


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """ Ordered (name, shape) manifest of every parameter; names start with their layer group. """
    input_width = cfg.token_embed_dim + cfg.time_embed_dim + cfg.dow_embed_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embeddings.token", (cfg.vocab_in, cfg.token_embed_dim)),
        ("embeddings.time_w", (1, cfg.time_embed_dim)),
        ("embeddings.time_b", (cfg.time_embed_dim,)),
        ("embeddings.dow", (DAYS_PER_WEEK, cfg.dow_embed_dim)),
        ("embeddings.input_w", (input_width, cfg.d_model)),
        ("embeddings.input_b", (cfg.d_model,)),
        ("embeddings.position", (cfg.seq_len, cfg.d_model)),
        ("embeddings.query", (cfg.seq_len, cfg.d_model)),
    ]
    for group in BLOCK_GROUPS:
        shapes += _layer_shapes(f"{group}.encoder", cfg)
        shapes += _layer_shapes(f"{group}.decoder", cfg)
    shapes += [
        ("mlp_head.hidden_w", (cfg.d_model, cfg.mlp_hidden)),
        ("mlp_head.hidden_b", (cfg.mlp_hidden,)),
        ("mlp_head.out_w", (cfg.mlp_hidden, cfg.classes_out)),
        ("mlp_head.out_b", (cfg.classes_out,)),
    ]
    return shapes


def expected_parameter_count(cfg: ModelConfig) -> int:
    """
    Closed-form parameter count.

    With D = d_model, F = ffn_hidden, H = mlp_hidden, L = seq_len, C = classes_out:
    embeddings V*Et + 2*Etime + 7*Edow + (Et+Etime+Edow)*D + D + 2*L*D,
    each of the 2 * blocks attention layers 4D^2 + 9D + 2DF + F,
    head D*H + H + H*C + C.
    """
    d, f, h = cfg.d_model, cfg.ffn_hidden, cfg.mlp_hidden
    embeddings = (
        cfg.vocab_in * cfg.token_embed_dim
        + 2 * cfg.time_embed_dim
        + DAYS_PER_WEEK * cfg.dow_embed_dim
        + (cfg.token_embed_dim + cfg.time_embed_dim + cfg.dow_embed_dim) * d
        + d
        + 2 * cfg.seq_len * d
    )
    layer = 4 * d * d + 9 * d + 2 * d * f + f
    head = d * h + h + h * cfg.classes_out + cfg.classes_out
    return embeddings + 2 * cfg.blocks * layer + head


class ModelParams:
    """Named parameter tensors partitioned into layer groups, each trainable or frozen."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]) -> None:
        self.config = config
        self.tensors = tensors
        self._trainable: set[str] = set(LAYER_GROUPS)
        for name, tensor in tensors.items():
            if group_of(name) not in LAYER_GROUPS:
                raise UnknownGroupError(f"Parameter {name} belongs to no layer group")
            tensor.name = name
            tensor.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def trainable_groups(self) -> frozenset[str]:
        return frozenset(self._trainable)

    def group(self, group: str) -> list[Tensor]:
        if group not in LAYER_GROUPS:
            raise UnknownGroupError(f"Unknown layer group {group!r}; expected one of {LAYER_GROUPS}")
        return [t for name, t in self.tensors.items() if group_of(name) == group]

    def set_trainable(self, groups: Iterable[str]) -> ModelParams:
        groups = set(groups)
        unknown = groups - set(LAYER_GROUPS)
        if unknown:
            raise UnknownGroupError(f"Unknown layer groups {sorted(unknown)}; expected a subset of {LAYER_GROUPS}")
        self._trainable = groups
        for name, tensor in self.tensors.items():
            tensor.requires_grad = group_of(name) in groups
            if not tensor.requires_grad:
                tensor.grad = None
        _LOGGER.debug("Trainable groups: %s", sorted(groups))
        return self

    def copy(self) -> ModelParams:
        clone = ModelParams(
            self.config,
            {name: Tensor(t.data.copy(), dtype=t.dtype) for name, t in self.tensors.items()},
        )
        return clone.set_trainable(self._trainable)

    def load_state(self, other: ModelParams) -> None:
        """ Overwrite values in place with another snapshot of the same architecture. """
        for name, tensor in self.tensors.items():
            tensor.data = other.tensors[name].data.copy()


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def count_parameters(params: ModelParams) -> int:
    return int(np.sum([t.data.size for t in params]))


def set_trainable(params: ModelParams, groups: Iterable[str]) -> ModelParams:
    """ Make exactly ``groups`` trainable; every other group is frozen. """
    return params.set_trainable(groups)


def init_model(cfg: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """
    Glorot-uniform weights, zero biases, unit layer-norm gains.

    Args:
        cfg: Architecture
        rng: Generator; seeded from ``cfg.seed`` when omitted

    Returns:
        Freshly initialised parameters with every group trainable
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dtype = np.dtype(cfg.dtype)
    tensors: dict[str, Tensor] = {}

    for name, shape in parameter_shapes(cfg):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf == "beta" or leaf.endswith("_b"):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data.astype(dtype), name=name, dtype=dtype)

    params = ModelParams(cfg, tensors)
    _LOGGER.debug("Initialised model with %d parameters", count_parameters(params))
    return params


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return nx.add(nx.matmul(x, params[f"{prefix}_w"]), params[f"{prefix}_b"])


def _split_heads(x: Tensor, batch: int, length: int, cfg: ModelConfig) -> Tensor:
    return nx.transpose(nx.reshape(x, (batch, length, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))


def _attention(query_in: Tensor, memory: Tensor, params: ModelParams, prefix: str) -> Tensor:
    cfg = params.config
    batch, length, _ = query_in.shape
    q = _split_heads(_linear(query_in, params, f"{prefix}.q"), batch, length, cfg)
    k = _split_heads(_linear(memory, params, f"{prefix}.k"), batch, memory.shape[1], cfg)
    v = _split_heads(_linear(memory, params, f"{prefix}.v"), batch, memory.shape[1], cfg)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(cfg.head_dim))
    context = nx.matmul(nx.softmax(scores), v)
    merged = nx.reshape(nx.transpose(context, (0, 2, 1, 3)), (batch, length, cfg.d_model))
    return _linear(merged, params, f"{prefix}.o")


def _sublayer(x: Tensor, update: Tensor, params: ModelParams, norm: str, rng, training: bool) -> Tensor:
    residual = nx.add(x, nx.dropout(update, params.config.dropout_p, rng, training))
    return nx.layer_norm(residual, params[f"{norm}.gamma"], params[f"{norm}.beta"])


def _feed_forward(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return _linear(nx.relu(_linear(x, params, f"{prefix}.in")), params, f"{prefix}.out")


def _layer(x: Tensor, memory: Tensor, params: ModelParams, prefix: str, rng, training: bool) -> Tensor:
    x = _sublayer(x, _attention(x, memory, params, f"{prefix}.attn"), params, f"{prefix}.norm1", rng, training)
    return _sublayer(x, _feed_forward(x, params, f"{prefix}.ffn"), params, f"{prefix}.norm2", rng, training)


def forward(
    params: ModelParams,
    tokens: np.ndarray,
    day_of_week: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    time_labels: np.ndarray | None = None,
) -> Tensor:
    """
    Per-slot class probabilities for a batch of token sequences.

    Args:
        params: Model parameters
        tokens: Input tokens [B x 96] in 1..17
        day_of_week: Day of week [B] in 0..6
        training: Enables dropout
        rng: Dropout generator, required when training with dropout
        time_labels: Per-slot time labels; the shipped segment table when omitted

    Returns:
        Probabilities [B x 96 x 16]; every row sums to 1

    Raises:
        ShapeMismatchError: If tokens or day_of_week are malformed
        UnknownTokenError: If a token or day is outside its vocabulary
    """
    cfg = params.config
    dtype = np.dtype(cfg.dtype)
    tokens = np.asarray(tokens, dtype=np.int64)
    day_of_week = np.asarray(day_of_week, dtype=np.int64).reshape(-1)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len or day_of_week.shape[0] != tokens.shape[0]:
        raise ShapeMismatchError("forward", tokens.shape, day_of_week.shape)
    if tokens.size and (tokens.min() < 1 or tokens.max() > cfg.vocab_in):
        raise UnknownTokenError(f"Token ids must be in 1..{cfg.vocab_in}")
    if day_of_week.size and (day_of_week.min() < 0 or day_of_week.max() >= DAYS_PER_WEEK):
        raise UnknownTokenError("Day of week must be in 0..6")

    batch, length = tokens.shape
    labels = default_segment_table() if time_labels is None else np.asarray(time_labels)
    positions = np.broadcast_to(np.arange(length), (batch, length))

    token_part = nx.embedding_lookup(params["embeddings.token"], tokens - 1)
    label_input = Tensor(np.broadcast_to(labels.reshape(1, length, 1), (batch, length, 1)).astype(dtype), dtype=dtype)
    time_part = _linear(label_input, params, "embeddings.time")
    dow_part = nx.embedding_lookup(params["embeddings.dow"], np.broadcast_to(day_of_week[:, None], (batch, length)))
    x = _linear(nx.concat([token_part, time_part, dow_part]), params, "embeddings.input")
    x = nx.add(x, nx.embedding_lookup(params["embeddings.position"], positions))
    x = nx.dropout(x, cfg.dropout_p, rng, training)

    queries = nx.embedding_lookup(params["embeddings.query"], positions)
    for group in BLOCK_GROUPS:
        x = _layer(x, x, params, f"{group}.encoder", rng, training)
        queries = _layer(queries, x, params, f"{group}.decoder", rng, training)

    hidden = nx.relu(_linear(queries, params, "mlp_head.hidden"))
    hidden = nx.dropout(hidden, cfg.dropout_p, rng, training)
    return nx.softmax(_linear(hidden, params, "mlp_head.out"))


def predict_proba(params: ModelParams, tokens: np.ndarray, day_of_week: np.ndarray) -> np.ndarray:
    """ Eval-mode probabilities without recording a graph. """
    with nx.no_grad():
        return forward(params, tokens, day_of_week, training=False).data


def _fill(probs: np.ndarray, tokens: np.ndarray, observed: np.ndarray, mode: ReconstructMode,
          temperature: float, rng: np.random.Generator | None) -> np.ndarray:
    if mode is ReconstructMode.ARGMAX:
        predicted = probs.argmax(axis=-1) + 1
    else:
        if rng is None:
            raise ValueError("sample mode needs a generator")
        logits = np.log(np.clip(probs, 1e-12, 1.0)) / max(temperature, 1e-6)
        logits -= logits.max(axis=-1, keepdims=True)
        weights = np.exp(logits)
        cumulative = np.cumsum(weights / weights.sum(axis=-1, keepdims=True), axis=-1)
        draws = rng.random(cumulative.shape[:-1] + (1,))
        predicted = np.minimum((cumulative < draws).sum(axis=-1), probs.shape[-1] - 1) + 1
    return np.where(observed, tokens, predicted)


def reconstruct(
    params: ModelParams,
    seq: SlotSequence,
    mode: ReconstructMode | str = ReconstructMode.ARGMAX,
    temperature: float = 1.0,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> SlotSequence:
    """
    Complete a sequence: observed slots are kept verbatim, MASK slots are filled from the model.
    """
    mode = ReconstructMode(mode)
    if rng is None and mode is ReconstructMode.SAMPLE:
        rng = np.random.default_rng(seed)
    probs = predict_proba(params, seq.tokens[None, :], np.array([seq.day_of_week]))[0]
    tokens = _fill(probs, seq.tokens, seq.observed, mode, temperature, rng)
    return SlotSequence(tokens, np.ones_like(seq.observed), seq.day_of_week, seq.agent_id, seq.date)


def reconstruct_dataset(
    params: ModelParams,
    dataset: SlotDataset,
    mode: ReconstructMode | str = ReconstructMode.SAMPLE,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    batch_size: int = 256,
    threads: int = 1,
) -> SlotDataset:
    """
    Complete every sequence of a dataset in batches.

    Sampling draws one base seed from ``rng`` and derives a generator per
    batch, so results do not depend on ``threads``.

    Returns:
        A complete dataset whose ``real`` mask is the input's observation mask
    """
    mode = ReconstructMode(mode)
    base_seed = int(rng.integers(2**63)) if rng is not None else 0
    starts = list(range(0, len(dataset), batch_size))

    def run(batch_index: int) -> np.ndarray:
        lo = starts[batch_index]
        hi = min(lo + batch_size, len(dataset))
        probs = predict_proba(params, dataset.tokens[lo:hi], dataset.day_of_week[lo:hi])
        batch_rng = child_rng(base_seed, batch_index) if mode is ReconstructMode.SAMPLE else None
        return _fill(probs, dataset.tokens[lo:hi], dataset.observed[lo:hi], mode, temperature, batch_rng)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pieces = list(pool.map(run, range(len(starts))))
    else:
        pieces = [run(i) for i in range(len(starts))]

    tokens = np.concatenate(pieces) if pieces else dataset.tokens.copy()
    return SlotDataset(
        tokens,
        np.ones_like(dataset.observed),
        dataset.day_of_week.copy(),
        real=dataset.observed.copy(),
        agent_ids=list(dataset.agent_ids),
        dates=list(dataset.dates),
    )
