"""Seeded Adam fine-tuning from a shared base, plus evaluation.

Fine-tuning re-initializes the classification head from a sub-stream of the
training seed (tag 2, shared with nn.init_head) and shuffles batches from a
second sub-stream (tag 3), so two shards fine-tuned with the same seed differ
only through their data.  Everything is deterministic: (base, data, config)
fix the output state bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datasets import Dataset, class_weights
from .errors import EmptyDataset
from .nn import Batch, ModelState, backward, forward, init_head, trainable, weighted_cross_entropy
from .tensors import NamedTensorSet

_SHUFFLE_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 64
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 3315

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("learning_rate > 0, epochs >= 0, batch_size >= 1 required")

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        """Named presets: "desk" (default) and "paper-table4" (lr 1e-5)."""
        if name == "desk":
            return cls(**overrides)
        if name == "paper-table4":
            overrides.setdefault("learning_rate", 1e-5)
            return cls(**overrides)
        raise ValueError(f"unknown profile {name!r}")


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def initial(cls, params: NamedTensorSet) -> "AdamState":
        zeros = {n: np.zeros(a.shape, dtype=np.float64) for n, a, _ in params.items()}
        return cls(m=zeros, v={n: z.copy() for n, z in zeros.items()}, step=0)


def adam_step(
    params: NamedTensorSet, grads: NamedTensorSet, adam: AdamState, cfg: TrainConfig
) -> tuple[NamedTensorSet, AdamState]:
    """One bias-corrected Adam update in float64; returns the new params and moments."""
    params.require_compatible(grads)
    t = adam.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_m: dict = {}
    new_v: dict = {}
    updates = []
    for name, p, kind in params.items():
        g = grads.array(name).astype(np.float64)
        m = cfg.beta1 * adam.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * adam.v[name] + (1.0 - cfg.beta2) * g * g
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_epsilon)
        updates.append((name, (p.astype(np.float64) - step).astype(np.float32), kind))
        new_m[name] = m
        new_v[name] = v
    return NamedTensorSet(updates), AdamState(m=new_m, v=new_v, step=t)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def make_batches(data: Dataset, order: np.ndarray, batch_size: int) -> list[Batch]:
    """Chunk the permuted sample order into batches; the last partial batch is kept."""
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        out.append(Batch(data.features[idx], data.labels[idx]))
    return out


def _run_batches(
    state: ModelState,
    adam: AdamState,
    batches: list[Batch],
    weights: np.ndarray,
    cfg: TrainConfig,
) -> tuple[ModelState, AdamState, float, int, int]:
    """Fold one Adam step per batch; returns (state, adam, loss_sum, correct, seen)."""
    loss_sum = 0.0
    correct = 0
    seen = 0
    for batch in batches:
        logits, cache, state_fwd = forward(state, batch, "train")
        loss, dlogits = weighted_cross_entropy(logits, batch.labels, weights)
        grads = backward(state, cache, dlogits)
        params, adam = adam_step(trainable(state), grads, adam, cfg)
        state = state_fwd.replace_tensors({n: params.array(n) for n in params.names})
        loss_sum += loss * len(batch)
        correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
        seen += len(batch)
    return state, adam, loss_sum, correct, seen


def fine_tune(
    base: ModelState,
    data: Dataset,
    cfg: TrainConfig,
    history: list[EpochStats] | None = None,
) -> ModelState:
    """Fine-tune from `base` with a freshly initialized head.

    The head comes from init_head(config, cfg.seed); batches are drawn with a
    seeded shuffle per epoch (class weights are the shard's inverse
    frequencies).  epochs=0 returns the base with only the head replaced.
    The input state is never mutated.
    """
    if len(data) == 0:
        raise EmptyDataset("fine_tune needs at least one sample")
    state = base.replace_tensors(init_head(base.config, cfg.seed))
    weights = class_weights(data)
    shuffle_rng = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM])
    adam = AdamState.initial(trainable(state))
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(data))
        batches = make_batches(data, order, cfg.batch_size)
        state, adam, loss_sum, correct, seen = _run_batches(
            state, adam, batches, weights, cfg
        )
        if history is not None:
            history.append(EpochStats(epoch, loss_sum / seen, correct / seen))
    return state


@dataclass
class EvalMetrics:
    accuracy: float
    per_class_accuracy: tuple[float, ...]
    loss: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": list(self.per_class_accuracy),
            "loss": self.loss,
        }


def evaluate(state: ModelState, data: Dataset, chunk_size: int = 1024) -> EvalMetrics:
    """Eval-mode metrics: accuracy, per-class accuracy, and unweighted mean CE loss."""
    if len(data) == 0:
        raise EmptyDataset("evaluate needs at least one sample")
    unit = np.ones(state.config.num_classes, dtype=np.float64)
    correct = 0
    loss_sum = 0.0
    per_class_correct = np.zeros(state.config.num_classes, dtype=np.int64)
    per_class_total = np.zeros(state.config.num_classes, dtype=np.int64)
    for start in range(0, len(data), chunk_size):
        batch = Batch(
            data.features[start : start + chunk_size],
            data.labels[start : start + chunk_size],
        )
        logits, _, _ = forward(state, batch, "eval")
        loss, _ = weighted_cross_entropy(logits, batch.labels, unit)
        loss_sum += loss * len(batch)
        preds = np.argmax(logits, axis=1)
        hits = preds == batch.labels
        correct += int(hits.sum())
        np.add.at(per_class_total, batch.labels, 1)
        np.add.at(per_class_correct, batch.labels[hits], 1)
    per_class = tuple(
        float(per_class_correct[c] / per_class_total[c]) if per_class_total[c] else 0.0
        for c in range(state.config.num_classes)
    )
    return EvalMetrics(
        accuracy=correct / len(data),
        per_class_accuracy=per_class,
        loss=loss_sum / len(data),
    )


def derive_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Copy of the config with its seed replaced (per-run seeding helper)."""
    return replace(cfg, seed=seed)
