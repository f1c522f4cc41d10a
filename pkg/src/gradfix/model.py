"""Small deterministic MLP classifiers with exact reverse-mode gradients.

Parameters live in a :class:`~gradfix.param_space.ParamVector` whose layout is
``layer0.w, layer0.b, layer1.w, ...``; weights are stored ``(fan_in, fan_out)``
so a layer computes ``a @ w + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from .datasets import FeatureSet, LabeledDataset
from .errors import CongruenceError, DivergenceError, EmptyDatasetError, NumericError
from .param_space import ParamVector, TaskVector, add_scaled

__all__ = [
    "ModelSpec",
    "TrainConfig",
    "param_layout",
    "init_params",
    "logits",
    "predict",
    "loss",
    "grad",
    "loss_and_grad",
    "per_sample_grad",
    "per_sample_grads",
    "train",
    "finetune_one_epoch_fullbatch",
    "evaluate",
    "embed",
]


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    num_classes: int = 4
    activation: str = "tanh"
    init_scale: float = 1.0
    init_scheme: str = "normal_scaled"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if not (self.init_scale > 0 and math.isfinite(self.init_scale)):
            raise ValueError("init_scale must be positive and finite")
        if self.init_scheme != "normal_scaled":
            raise ValueError("only the 'normal_scaled' init scheme is supported")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1


OPTIMIZERS = ("full_batch_gd", "sgd", "adamw")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-2
    steps: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # number of leading layers kept frozen (their gradients are zeroed)
    frozen_layers: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.frozen_layers < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and frozen_layers >= 0 required")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay >= 0 and momentum in [0, 1) required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


_ACTIVATIONS = {"tanh": (_tanh, _tanh_grad), "relu": (_relu, _relu_grad)}


def param_layout(spec: ModelSpec) -> tuple[tuple[str, tuple[int, ...]], ...]:
    layout = []
    w = spec.widths
    for k in range(spec.n_layers):
        layout.append((f"layer{k}.w", (w[k], w[k + 1])))
        layout.append((f"layer{k}.b", (w[k + 1],)))
    return tuple(layout)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Weights ~ N(0, 1) * init_scale / sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    segments = []
    for name, shape in param_layout(spec):
        if name.endswith(".w"):
            arr = rng.standard_normal(shape) * (spec.init_scale / math.sqrt(shape[0]))
        else:
            arr = np.zeros(shape)
        segments.append((name, arr))
    return ParamVector.from_segments(segments)


def _check(theta: ParamVector, spec: ModelSpec):
    if theta.structure != param_layout(spec):
        raise CongruenceError(
            f"parameter layout {theta.structure} does not match model spec {param_layout(spec)}"
        )


def _features(data, spec):
    if isinstance(data, LabeledDataset):
        X, y = data.features, data.labels
    else:
        X, y = data
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.shape[0] == 0:
        raise EmptyDatasetError("dataset is empty")
    if X.shape[1] != spec.input_dim:
        raise CongruenceError(f"features have {X.shape[1]} columns, model expects {spec.input_dim}")
    return X, y


def _forward(theta, X, spec):
    """Returns pre-activations and activations; ``acts[0]`` is the input."""
    act, _ = _ACTIVATIONS[spec.activation]
    pre, acts = [], [X]
    a = X
    for k in range(spec.n_layers):
        z = a @ theta[f"layer{k}.w"] + theta[f"layer{k}.b"]
        pre.append(z)
        if k < spec.n_layers - 1:
            a = act(z)
            acts.append(a)
    return pre, acts


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(theta: ParamVector, X, spec: ModelSpec) -> np.ndarray:
    _check(theta, spec)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pre, _ = _forward(theta, X, spec)
    return pre[-1]


def predict(theta: ParamVector, X, spec: ModelSpec) -> np.ndarray:
    """Argmax class; ties go to the lowest class index."""
    return np.argmax(logits(theta, X, spec), axis=1)


def _per_sample_loss(theta, X, y, spec):
    pre, acts = _forward(theta, X, spec)
    logp = _log_softmax(pre[-1])
    return -logp[np.arange(len(y)), y], pre, acts, logp


def loss(theta: ParamVector, data, spec: ModelSpec) -> float:
    """Mean softmax cross-entropy."""
    _check(theta, spec)
    X, y = _features(data, spec)
    losses, *_ = _per_sample_loss(theta, X, y, spec)
    value = float(np.mean(losses))
    if not math.isfinite(value):
        raise NumericError("loss is not finite")
    return value


def _backprop(theta, X, y, spec, per_sample):
    """Gradients of the summed per-sample losses.

    With ``per_sample`` the result is an ``(n, d)`` matrix of individual
    gradients; otherwise the batch mean as a flat ``(d,)`` array.
    """
    _, act_grad = _ACTIVATIONS[spec.activation]
    losses, pre, acts, logp = _per_sample_loss(theta, X, y, spec)
    n = X.shape[0]
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    if not per_sample:
        dz /= n
    parts = {}
    for k in reversed(range(spec.n_layers)):
        a = acts[k]
        if per_sample:
            parts[f"layer{k}.w"] = np.einsum("ni,nj->nij", a, dz).reshape(n, -1)
            parts[f"layer{k}.b"] = dz
        else:
            parts[f"layer{k}.w"] = (a.T @ dz).reshape(-1)
            parts[f"layer{k}.b"] = dz.sum(axis=0)
        if k > 0:
            dz = (dz @ theta[f"layer{k}.w"].T) * act_grad(pre[k - 1], acts[k])
    order = [name for name, _ in param_layout(spec)]
    flat = np.concatenate([parts[name] for name in order], axis=-1)
    return losses, flat


def loss_and_grad(theta: ParamVector, data, spec: ModelSpec) -> tuple[float, ParamVector]:
    _check(theta, spec)
    X, y = _features(data, spec)
    losses, flat = _backprop(theta, X, y, spec, per_sample=False)
    value = float(np.mean(losses))
    if not (math.isfinite(value) and np.all(np.isfinite(flat))):
        raise NumericError("loss or gradient is not finite")
    return value, theta.like(flat, cls=ParamVector)


def grad(theta: ParamVector, data, spec: ModelSpec) -> ParamVector:
    """Exact gradient of the mean cross-entropy."""
    return loss_and_grad(theta, data, spec)[1]


def per_sample_grads(theta: ParamVector, data, spec: ModelSpec, chunk_size: int = 256) -> Iterator[np.ndarray]:
    """Yield ``(chunk, d)`` blocks of per-sample gradients in sample order."""
    _check(theta, spec)
    X, y = _features(data, spec)
    for start in range(0, X.shape[0], chunk_size):
        _, flat = _backprop(theta, X[start:start + chunk_size], y[start:start + chunk_size], spec, per_sample=True)
        yield flat


def per_sample_grad(theta: ParamVector, sample, spec: ModelSpec) -> ParamVector:
    """Gradient of the loss of a single ``(x, y)`` pair."""
    x, label = sample
    block = next(per_sample_grads(theta, (np.atleast_2d(x), np.atleast_1d(label)), spec))
    return theta.like(block[0], cls=ParamVector)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _frozen_mask(theta, spec, frozen_layers):
    mask = np.ones(theta.size)
    for k in range(min(frozen_layers, spec.n_layers)):
        for part in ("w", "b"):
            mask[theta.segment_slice(f"layer{k}.{part}")] = 0.0
    return mask


def _batches(n, cfg: TrainConfig) -> Iterator[np.ndarray | None]:
    """Index batches, reshuffled every epoch; ``None`` means full batch."""
    if cfg.optimizer == "full_batch_gd" or cfg.batch_size >= n:
        while True:
            yield None
    rng = np.random.default_rng(cfg.seed)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            yield perm[start:start + cfg.batch_size]


def train(theta0: ParamVector, data: LabeledDataset, cfg: TrainConfig, spec: ModelSpec, history: list | None = None) -> ParamVector:
    """Run ``cfg.steps`` optimizer steps from ``theta0``.

    If ``history`` is given, the mini-batch loss before each step is appended
    to it.  Raises DivergenceError naming the step on a non-finite loss.
    """
    _check(theta0, spec)
    X, y = _features(data, spec)
    if cfg.steps == 0:
        return theta0
    w = theta0.values.copy()
    frozen = _frozen_mask(theta0, spec, cfg.frozen_layers) if cfg.frozen_layers else None
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    batches = _batches(X.shape[0], cfg)
    for step in range(cfg.steps):
        idx = next(batches)
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        theta = theta0.like(w)
        with np.errstate(over="ignore", invalid="ignore"):
            losses, g = _backprop(theta, xb, yb, spec, per_sample=False)
        value = float(np.mean(losses))
        if not (math.isfinite(value) and np.all(np.isfinite(g))):
            raise DivergenceError(step, value)
        if history is not None:
            history.append(value)
        if frozen is not None:
            g = g * frozen
        lr = cfg.learning_rate
        if cfg.optimizer == "full_batch_gd":
            w = w - lr * g
        elif cfg.optimizer == "sgd":
            if cfg.weight_decay:
                g = g + cfg.weight_decay * w
            if cfg.momentum:
                m = cfg.momentum * m + g
                g = m
            w = w - lr * g
        else:
            t = step + 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** t)
            v_hat = v / (1 - cfg.beta2 ** t)
            decay = lr * cfg.weight_decay * w
            if frozen is not None:
                decay = decay * frozen
            w = w - lr * m_hat / (np.sqrt(v_hat) + cfg.eps) - decay
        if not np.all(np.isfinite(w)):
            raise DivergenceError(step, value)
    return theta0.like(w)


def finetune_one_epoch_fullbatch(theta: ParamVector, data: LabeledDataset, lr: float, spec: ModelSpec) -> tuple[ParamVector, TaskVector]:
    """One full-batch gradient step; returns ``(theta_ft, tau)``.

    ``tau`` is computed as ``-lr * g`` directly and ``theta_ft = theta + tau``,
    so ``tau`` is exactly the scaled negative gradient.
    """
    lr = float(lr)
    if not (lr > 0 and math.isfinite(lr)):
        raise ValueError(f"lr must be positive and finite, got {lr}")
    g = grad(theta, data, spec)
    tau = g.like(-lr * g.values, cls=TaskVector)
    return add_scaled(theta, tau, 1.0), tau


def evaluate(theta: ParamVector, data: LabeledDataset, spec: ModelSpec) -> float:
    X, y = _features(data, spec)
    return float(np.mean(predict(theta, X, spec) == y))


def embed(theta: ParamVector, features, spec: ModelSpec, labels=None, source_ids=None) -> FeatureSet:
    """L2-normalized penultimate activations.

    Accepts a LabeledDataset (labels are taken from it) or a raw feature
    matrix.  ``source_ids`` default to row positions.  All-zero activation
    rows stay zero and are marked invalid.
    """
    if not spec.hidden_dims:
        raise ValueError("embed needs at least one hidden layer")
    _check(theta, spec)
    if isinstance(features, LabeledDataset):
        labels = features.labels if labels is None else labels
        features = features.features
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _, acts = _forward(theta, X, spec)
    h = acts[-1]
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    valid = norms[:, 0] > 0
    rows = np.divide(h, norms, out=np.zeros_like(h), where=norms > 0)
    n = X.shape[0]
    labels = np.zeros(n, dtype=np.int64) if labels is None else labels
    source_ids = np.arange(n) if source_ids is None else source_ids
    return FeatureSet(rows, labels, source_ids, valid=valid)
