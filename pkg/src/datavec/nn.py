"""Batch-normalized MLP with an attachable classification head.

Desk-scale stand-in for a large pretrained classifier that still exercises
everything weight-space merging touches: plain parameter tensors, batch-norm
running statistics (buffers), and a freshly initialized final affine layer
(the head).  Forward/backward are hand-written numpy; all internal math runs
in float64 while stored state stays float32.

Layout of a model state, per hidden block k:

    block{k}.linear.weight  (h_k x d_in)   parameter
    block{k}.linear.bias    (h_k,)         parameter
    block{k}.bn.gamma       (h_k,)         parameter
    block{k}.bn.beta        (h_k,)         parameter
    block{k}.bn.running_mean (h_k,)        buffer
    block{k}.bn.running_var  (h_k,)        buffer

plus head.weight (C x h_last) / head.bias (C,) of kind head, and a scalar
buffer bn.batches_seen.

Seed discipline: sub-streams of a seed are derived as SeedSequence([seed, tag])
with tag 1 for body init and tag 2 for head init, so a head can be
re-initialized later from the training seed alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import CorruptFile, LabelOutOfRange, ShapeMismatch, StaleCache
from .tensors import NamedTensorSet

_BODY_STREAM = 1
_HEAD_STREAM = 2


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 32)
    num_classes: int = 4
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 1 or not self.hidden_dims:
            raise ValueError("dimensions must be >= 1")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be > 0")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_dim": self.input_dim,
                "hidden_dims": list(self.hidden_dims),
                "num_classes": self.num_classes,
                "bn_epsilon": self.bn_epsilon,
                "bn_momentum": self.bn_momentum,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        return cls(
            input_dim=raw["input_dim"],
            hidden_dims=tuple(raw["hidden_dims"]),
            num_classes=raw["num_classes"],
            bn_epsilon=raw["bn_epsilon"],
            bn_momentum=raw["bn_momentum"],
        )


@dataclass(frozen=True)
class ModelState:
    config: ModelConfig
    tensors: NamedTensorSet

    def replace_tensors(self, updates) -> "ModelState":
        return ModelState(self.config, self.tensors.replace(updates))


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or len(feats) < 1:
            raise ValueError("features must be a nonempty 2-D matrix")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        if labels.shape != (len(feats),):
            raise ValueError("labels must be one int per sample")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)


def expected_names(config: ModelConfig) -> list[str]:
    names = ["bn.batches_seen", "head.bias", "head.weight"]
    for k in range(len(config.hidden_dims)):
        names += [
            f"block{k}.bn.beta",
            f"block{k}.bn.gamma",
            f"block{k}.bn.running_mean",
            f"block{k}.bn.running_var",
            f"block{k}.linear.bias",
            f"block{k}.linear.weight",
        ]
    return sorted(names)


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)


def init_head(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Freshly initialized classification head, deterministic in the seed."""
    rng = np.random.default_rng([seed, _HEAD_STREAM])
    fan_in = config.hidden_dims[-1]
    return {
        "head.weight": _glorot(rng, config.num_classes, fan_in),
        "head.bias": np.zeros(config.num_classes, dtype=np.float32),
    }


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Glorot-uniform weights, identity batch norm, zeroed buffers."""
    rng = np.random.default_rng([seed, _BODY_STREAM])
    entries: list[tuple[str, np.ndarray, str]] = []
    fan_in = config.input_dim
    for k, width in enumerate(config.hidden_dims):
        entries += [
            (f"block{k}.linear.weight", _glorot(rng, width, fan_in), "parameter"),
            (f"block{k}.linear.bias", np.zeros(width, dtype=np.float32), "parameter"),
            (f"block{k}.bn.gamma", np.ones(width, dtype=np.float32), "parameter"),
            (f"block{k}.bn.beta", np.zeros(width, dtype=np.float32), "parameter"),
            (f"block{k}.bn.running_mean", np.zeros(width, dtype=np.float32), "buffer"),
            (f"block{k}.bn.running_var", np.ones(width, dtype=np.float32), "buffer"),
        ]
        fan_in = width
    for name, arr in init_head(config, seed).items():
        entries.append((name, arr, "head"))
    entries.append(("bn.batches_seen", np.zeros(1, dtype=np.float32), "buffer"))
    return ModelState(config, NamedTensorSet(entries))


def trainable(state: ModelState) -> NamedTensorSet:
    """The gradient-carrying subset: parameter and head tensors."""
    return state.tensors.filter(("parameter", "head"))


def head_of(state: ModelState) -> NamedTensorSet:
    return state.tensors.filter("head")


def _params_token(state: ModelState) -> tuple[int, ...]:
    return tuple(id(arr) for _, arr, kind in state.tensors.items() if kind != "buffer")


@dataclass
class _BlockCache:
    x_in: np.ndarray
    z: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    relu_mask: np.ndarray


@dataclass
class ForwardCache:
    mode: str
    blocks: list[_BlockCache] = field(default_factory=list)
    head_input: np.ndarray | None = None
    params_token: tuple[int, ...] = ()


def forward(
    state: ModelState, batch: Batch, mode: str = "eval"
) -> tuple[np.ndarray, ForwardCache, ModelState]:
    """Run the network; returns (logits, cache, updated_state).

    Per block: affine -> batch norm -> ReLU, then the head affine.  Train mode
    normalizes with the batch mean and biased batch variance and folds the
    batch statistics into the running buffers (unbiased variance for the
    running update); eval mode normalizes with the running buffers and returns
    the state unchanged.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = state.config
    if batch.features.shape[1] != cfg.input_dim:
        raise ShapeMismatch(
            f"batch has {batch.features.shape[1]} features, model expects {cfg.input_dim}"
        )
    x = batch.features.astype(np.float64)
    n = len(batch)
    cache = ForwardCache(mode=mode, params_token=_params_token(state))
    buffer_updates: dict[str, np.ndarray] = {}
    for k in range(len(cfg.hidden_dims)):
        t = state.tensors
        w = t.array(f"block{k}.linear.weight").astype(np.float64)
        b = t.array(f"block{k}.linear.bias").astype(np.float64)
        gamma = t.array(f"block{k}.bn.gamma").astype(np.float64)
        beta = t.array(f"block{k}.bn.beta").astype(np.float64)
        z = x @ w.T + b
        if mode == "train":
            mu = z.mean(axis=0)
            var = z.var(axis=0)  # biased, used for normalization
            inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
            xhat = (z - mu) * inv_std
            var_running = var * n / (n - 1) if n > 1 else var
            m = cfg.bn_momentum
            rm = t.array(f"block{k}.bn.running_mean").astype(np.float64)
            rv = t.array(f"block{k}.bn.running_var").astype(np.float64)
            buffer_updates[f"block{k}.bn.running_mean"] = (
                (1.0 - m) * rm + m * mu
            ).astype(np.float32)
            buffer_updates[f"block{k}.bn.running_var"] = (
                (1.0 - m) * rv + m * var_running
            ).astype(np.float32)
        else:
            rm = t.array(f"block{k}.bn.running_mean").astype(np.float64)
            rv = t.array(f"block{k}.bn.running_var").astype(np.float64)
            inv_std = 1.0 / np.sqrt(rv + cfg.bn_epsilon)
            xhat = (z - rm) * inv_std
        y = gamma * xhat + beta
        mask = y > 0.0
        cache.blocks.append(_BlockCache(x, z, xhat, inv_std, mask))
        x = np.where(mask, y, 0.0)
    cache.head_input = x
    wh = state.tensors.array("head.weight").astype(np.float64)
    bh = state.tensors.array("head.bias").astype(np.float64)
    logits = x @ wh.T + bh
    if mode == "train":
        seen = state.tensors.array("bn.batches_seen")
        buffer_updates["bn.batches_seen"] = seen + np.float32(1.0)
        updated = state.replace_tensors(buffer_updates)
    else:
        updated = state
    return logits, cache, updated


def weighted_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Per-class weighted softmax cross-entropy.

    loss    = sum_b w[y_b] * (-log softmax(z_b)[y_b]) / sum_b w[y_b]
    dlogits = w[y_b] * (softmax(z_b) - onehot(y_b)) / sum_b w[y_b]

    The log-sum-exp runs through logaddexp, so tiny losses keep full relative
    precision.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(class_weights, dtype=np.float64)
    n, c = z.shape
    if weights.shape != (c,) or not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("class_weights must be finite non-negative, one per class")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    w = weights[labels]
    w_sum = w.sum()
    if w_sum <= 0.0:
        raise ValueError("class weights of the present labels sum to zero")
    lse = np.logaddexp.reduce(z, axis=1)
    nll = lse - z[np.arange(n), labels]
    loss = float(np.dot(w, nll) / w_sum)
    probs = np.exp(z - lse[:, None])
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / w_sum)[:, None]
    return loss, grad


def backward(state: ModelState, cache: ForwardCache, dlogits: np.ndarray) -> NamedTensorSet:
    """Gradients of every parameter and head tensor given d(loss)/d(logits).

    Differentiates through the batch statistics (train-mode normalization),
    which is why the cache must come from a train-mode forward on this state.
    """
    if cache.mode != "train":
        raise StaleCache("backward needs a cache from a train-mode forward")
    if cache.params_token != _params_token(state):
        raise StaleCache("cache was produced by a different parameter set")
    cfg = state.config
    dl = np.asarray(dlogits, dtype=np.float64)
    if cache.head_input is None or dl.shape != (len(cache.head_input), cfg.num_classes):
        raise ShapeMismatch("dlogits shape does not match the cached forward")
    grads: dict[str, np.ndarray] = {}
    wh = state.tensors.array("head.weight").astype(np.float64)
    grads["head.weight"] = (dl.T @ cache.head_input).astype(np.float32)
    grads["head.bias"] = dl.sum(axis=0).astype(np.float32)
    dx = dl @ wh
    n = len(cache.head_input)
    for k in reversed(range(len(cfg.hidden_dims))):
        blk = cache.blocks[k]
        gamma = state.tensors.array(f"block{k}.bn.gamma").astype(np.float64)
        w = state.tensors.array(f"block{k}.linear.weight").astype(np.float64)
        dy = dx * blk.relu_mask
        grads[f"block{k}.bn.gamma"] = (dy * blk.xhat).sum(axis=0).astype(np.float32)
        grads[f"block{k}.bn.beta"] = dy.sum(axis=0).astype(np.float32)
        dxhat = dy * gamma
        # Batch-norm backward through the batch mean and biased variance.
        dz = (blk.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=0)
            - blk.xhat * (dxhat * blk.xhat).sum(axis=0)
        )
        grads[f"block{k}.linear.weight"] = (dz.T @ blk.x_in).astype(np.float32)
        grads[f"block{k}.linear.bias"] = dz.sum(axis=0).astype(np.float32)
        dx = dz @ w
    reference = trainable(state)
    return NamedTensorSet(
        [(name, grads[name], reference.kind(name)) for name in reference.names]
    )


def save_model(state: ModelState, path, metadata: dict[str, str] | None = None) -> bytes:
    meta = {"architecture": state.config.to_json()}
    if metadata:
        meta.update(metadata)
    return checkpoint.write_checkpoint(state.tensors, meta, path)


def load_model(path) -> tuple[ModelState, dict[str, str]]:
    tensors, metadata = checkpoint.read_checkpoint(path)
    if "architecture" not in metadata:
        raise CorruptFile(f"{path}: checkpoint lacks an architecture record")
    try:
        config = ModelConfig.from_json(metadata["architecture"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: bad architecture record: {exc}") from exc
    if list(tensors.names) != expected_names(config):
        raise CorruptFile(f"{path}: tensors do not match the declared architecture")
    return ModelState(config, tensors), metadata
