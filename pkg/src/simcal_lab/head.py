"""Fully-connected classification head, long-tail losses and SGD with momentum."""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from .core_types import BACKGROUND, ClassStats, ConfigError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

TINY = np.finfo(np.float64).tiny

CE = "ce"
REWEIGHT = "reweight"
FOCAL = "focal"
MARGIN = "margin"
LOSS_KINDS = (CE, REWEIGHT, FOCAL, MARGIN)

HEAD_FORMAT = "simcal-lab/head-v1"


@dataclass(frozen=True, eq=False)
class Layer:
    """Affine layer ``x @ weight + bias``; weight has shape (in, out)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.weight.shape)

    @property
    def size(self) -> int:
        return int(self.weight.size + self.bias.size)


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Layers of the head; every layer but the last is followed by a ReLU."""

    layers: Tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("a head needs at least one layer")
        for k, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ShapeError(
                    f"layer {k}: weight {layer.weight.shape} and bias {layer.bias.shape} do not match"
                )
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(
                    f"layer {k} outputs {a.weight.shape[1]} but layer {k + 1} expects {b.weight.shape[0]}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weight.shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].weight.shape[1])

    @property
    def num_classes(self) -> int:
        return self.output_dim - 1

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.input_dim,) + tuple(int(l.weight.shape[1]) for l in self.layers)

    @property
    def num_parameters(self) -> int:
        return sum(l.size for l in self.layers)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in self.layers)

    def copy(self) -> "HeadParams":
        return HeadParams(tuple(Layer(l.weight.copy(), l.bias.copy()) for l in self.layers))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])


@dataclass(frozen=True)
class HeadSpec:
    """Hidden layer widths; ``(1024, 1024)`` gives the three-layer original head."""

    hidden: Tuple[int, ...] = (1024, 1024)
    last_layer_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.last_layer_std <= 0:
            raise ConfigError("last_layer_std must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1


def init_head(
    input_dim: int, num_classes: int, spec: HeadSpec, rng: np.random.Generator
) -> HeadParams:
    """He-normal ReLU layers and a small Gaussian output layer, zero biases."""
    widths = (input_dim,) + spec.hidden + (num_classes + 1,)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        last = k == len(widths) - 2
        std = spec.last_layer_std if last else np.sqrt(2.0 / fan_in)
        layers.append(Layer(rng.normal(0.0, std, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return HeadParams(tuple(layers))


@dataclass(frozen=True)
class LossConfig:
    """Classification loss and its knobs.

    ``focal_alpha`` multiplies the foreground terms of the focal loss; at 1.0
    the loss is the alpha-free multi-class form.
    """

    kind: str = CE
    reweight_numerator: float = 100.0
    weight_clamp: Tuple[float, float] = (0.1, 10.0)
    background_weight: float = 1.0
    gamma: float = 3.0
    margin_c: float = 6.0
    focal_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weight_clamp", tuple(float(v) for v in self.weight_clamp))
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind: {self.kind!r} (expected one of {', '.join(LOSS_KINDS)})")
        if len(self.weight_clamp) != 2 or not self.weight_clamp[0] < self.weight_clamp[1]:
            raise ConfigError(f"weight_clamp must be (low, high) with low < high, got {self.weight_clamp}")
        if self.weight_clamp[0] <= 0:
            raise ConfigError("weight_clamp low must be positive")
        if self.reweight_numerator <= 0 or self.background_weight < 0:
            raise ConfigError("reweight_numerator must be positive and background_weight non-negative")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.margin_c < 0:
            raise ConfigError(f"margin_c must be >= 0, got {self.margin_c}")
        if self.focal_alpha <= 0:
            raise ConfigError("focal_alpha must be positive")

    @property
    def needs_stats(self) -> bool:
        return self.kind in (REWEIGHT, MARGIN)


def forward(params: HeadParams, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Logits and softmax probabilities for a (n, d) or (d,) feature array.

    Raises:
        ShapeError: if the feature dimension does not match the first layer.
    """
    logits = _forward_activations(params, features)[-1]
    return logits, softmax(logits, axis=-1)


def _forward_activations(params: HeadParams, features: np.ndarray) -> List[np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"features have dimension {x.shape[-1]}, head expects {params.input_dim}")
    acts = [x]
    for k, layer in enumerate(params.layers):
        x = x @ layer.weight + layer.bias
        if k < params.num_layers - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return acts


def predict_proba(params: HeadParams, features: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Probabilities in chunks, for evaluation over many proposals."""
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return np.empty((0, params.output_dim))
    return np.concatenate([forward(params, features[i : i + chunk])[1] for i in range(0, len(features), chunk)])


def reweight_weights(labels: np.ndarray, stats: ClassStats, cfg: LossConfig) -> np.ndarray:
    """Per-sample weights: clamp(N / N_label) for foreground, background_weight for 0."""
    counts = stats.instance_array().astype(np.float64)[np.asarray(labels)]
    with np.errstate(divide="ignore"):
        raw = np.where(counts > 0, cfg.reweight_numerator / np.maximum(counts, 1e-300), np.inf)
    weights = np.clip(raw, *cfg.weight_clamp)
    return np.where(np.asarray(labels) == BACKGROUND, cfg.background_weight, weights)


def class_margins(stats: ClassStats, margin_c: float) -> np.ndarray:
    """Margins ``C / N_j**0.25`` per label; background 0, unseen classes get C."""
    counts = stats.instance_array().astype(np.float64)
    with np.errstate(divide="ignore"):
        margins = np.where(counts > 0, margin_c / np.power(np.maximum(counts, 1.0), 0.25), margin_c)
    margins[BACKGROUND] = 0.0
    return margins


def _log_prob(p: np.ndarray, label: int) -> float:
    q = float(np.asarray(p, dtype=np.float64)[label])
    return float(np.log(max(q, TINY)))


def loss_ce(p: np.ndarray, label: int) -> float:
    return -_log_prob(p, label)


def loss_reweight(p: np.ndarray, label: int, stats: ClassStats, cfg: LossConfig) -> float:
    w = reweight_weights(np.asarray([label]), stats, cfg)[0]
    return float(w * loss_ce(p, label))


def loss_focal(p: np.ndarray, label: int, gamma: float) -> float:
    q = float(np.asarray(p, dtype=np.float64)[label])
    return float(-((1.0 - q) ** gamma) * _log_prob(p, label))


def loss_margin(logits: np.ndarray, label: int, stats: ClassStats, margin_c: float) -> float:
    shifted = np.array(logits, dtype=np.float64)
    shifted[label] -= class_margins(stats, margin_c)[label]
    return float(logsumexp(shifted) - shifted[label])


def batch_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    stats: Optional[ClassStats] = None,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean loss, per-sample losses and the gradient of the mean w.r.t. logits.

    Every kind works from ``log q = y[label] - logsumexp(y)``, so focal with
    gamma 0, margin with C 0 and reweight with unit weights give CE exactly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ShapeError("loss over an empty batch")
    if cfg.needs_stats and stats is None:
        raise ConfigError(f"{cfg.kind} loss needs class statistics")
    rows = np.arange(n)
    onehot = np.zeros_like(logits)
    onehot[rows, labels] = 1.0

    if cfg.kind == MARGIN:
        logits = logits - onehot * class_margins(stats, cfg.margin_c)[labels][:, None]
    log_p = logits - logsumexp(logits, axis=1, keepdims=True)
    p = np.exp(log_p)
    log_q = log_p[rows, labels]
    dce = p - onehot

    if cfg.kind in (CE, MARGIN) or (cfg.kind == FOCAL and cfg.gamma == 0 and cfg.focal_alpha == 1.0):
        per_sample, dlogits = -log_q, dce
    elif cfg.kind == REWEIGHT:
        w = reweight_weights(labels, stats, cfg)
        per_sample, dlogits = -w * log_q, w[:, None] * dce
    else:
        gamma = cfg.gamma
        q = np.exp(log_q)
        one_minus = np.maximum(1.0 - q, 0.0)
        mod = np.power(one_minus, gamma)
        if gamma > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                slope = np.where(one_minus > 0, gamma * np.power(one_minus, gamma - 1.0), 0.0)
        else:
            slope = np.zeros_like(q)
        per_sample = -mod * log_q
        # dL/dy = (mod - slope * q * log q) * (p - onehot)
        dlogits = (mod - slope * q * log_q)[:, None] * dce
        if cfg.focal_alpha != 1.0:
            alpha = np.where(labels == BACKGROUND, 1.0, cfg.focal_alpha)
            per_sample, dlogits = alpha * per_sample, alpha[:, None] * dlogits
    return float(per_sample.mean()), per_sample, dlogits / n


def backward(
    params: HeadParams,
    features: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    stats: Optional[ClassStats] = None,
) -> Tuple[float, HeadParams]:
    """Mean batch loss and its gradient w.r.t. every parameter.

    Raises:
        NonFiniteError: naming the first layer with a non-finite intermediate.
    """
    acts = _forward_activations(params, features)
    for k, a in enumerate(acts[1:]):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite activation in layer {k}")
    loss, _, delta = batch_loss(acts[-1], labels, loss_cfg, stats)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at output layer {params.num_layers - 1}")
    grads: List[Layer] = []
    for k in range(params.num_layers - 1, -1, -1):
        layer = params.layers[k]
        dw = acts[k].T @ delta
        db = delta.sum(axis=0)
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NonFiniteError(f"non-finite gradient in layer {k}")
        grads.append(Layer(dw, db))
        if k > 0:
            delta = (delta @ layer.weight.T) * (acts[k] > 0)
    return loss, HeadParams(tuple(reversed(grads)))


def grad_check(
    params: HeadParams,
    features: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    stats: Optional[ClassStats] = None,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = backward(params, features, labels, loss_cfg, stats)
    shifted = params.copy()
    worst = 0.0

    def loss_at() -> float:
        logits = _forward_activations(shifted, features)[-1]
        return batch_loss(logits, labels, loss_cfg, stats)[0]

    for layer, grad in zip(shifted.layers, grads.layers):
        for arr, analytic in ((layer.weight, grad.weight), (layer.bias, grad.bias)):
            flat, flat_grad = arr.reshape(-1), analytic.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                up = loss_at()
                flat[i] = original - eps
                down = loss_at()
                flat[i] = original
                numeric = (up - down) / (2.0 * eps)
                err = abs(flat_grad[i] - numeric) / max(1e-8, abs(flat_grad[i]) + abs(numeric))
                worst = max(worst, err)
    return worst


@dataclass
class OptState:
    """Momentum buffers mirroring the head layers."""

    velocity: List[Layer]
    lr: float
    momentum: float = 0.9

    @classmethod
    def zeros_like(cls, params: HeadParams, lr: float, momentum: float = 0.9) -> "OptState":
        return cls([Layer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers], lr, momentum)

    def state_dict(self) -> Dict[str, Any]:
        return {"lr": self.lr, "momentum": self.momentum, "velocity": [_layer_to_dict(v) for v in self.velocity]}


def sgd_step(
    params: HeadParams,
    grads: HeadParams,
    opt_state: OptState,
    trainable: Optional[Iterable[int]] = None,
) -> HeadParams:
    """Classic momentum step ``v = m*v + g; theta -= lr*v``.

    Layers outside ``trainable`` are returned as the very same arrays.
    """
    if grads.widths != params.widths or len(opt_state.velocity) != params.num_layers:
        raise ShapeError("gradients, velocity and parameters must have the same layer shapes")
    active = set(range(params.num_layers)) if trainable is None else set(trainable)
    layers = []
    for k, (layer, grad) in enumerate(zip(params.layers, grads.layers)):
        if k not in active:
            layers.append(layer)
            continue
        v = opt_state.velocity[k]
        vw = opt_state.momentum * v.weight + grad.weight
        vb = opt_state.momentum * v.bias + grad.bias
        opt_state.velocity[k] = Layer(vw, vb)
        layers.append(Layer(layer.weight - opt_state.lr * vw, layer.bias - opt_state.lr * vb))
    return HeadParams(tuple(layers))


def _layer_to_dict(layer: Layer) -> Dict[str, Any]:
    return {
        "shape": list(layer.weight.shape),
        "weight": layer.weight.ravel().tolist(),
        "bias": layer.bias.tolist(),
    }


def head_to_dict(params: HeadParams) -> Dict[str, Any]:
    return {
        "format": HEAD_FORMAT,
        "activation": "relu",
        "layers": [_layer_to_dict(l) for l in params.layers],
    }


def head_from_dict(data: Dict[str, Any]) -> HeadParams:
    """Rebuild a head, validating every stored shape and the layer chain."""
    try:
        raw_layers = data["layers"]
    except (KeyError, TypeError) as e:
        raise ShapeError("head file has no layers") from e
    layers = []
    for k, entry in enumerate(raw_layers):
        rows, cols = (int(v) for v in entry["shape"])
        weight = np.asarray(entry["weight"], dtype=np.float64)
        bias = np.asarray(entry["bias"], dtype=np.float64)
        if weight.size != rows * cols or bias.shape != (cols,):
            raise ShapeError(f"layer {k}: stored arrays do not match shape {rows}x{cols}")
        layers.append(Layer(weight.reshape(rows, cols), bias))
    return HeadParams(tuple(layers))


def save_head(params: HeadParams, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(head_to_dict(params), f)
    logger.debug("saved head %s to %s", params.widths, path)


def load_head(path: str) -> HeadParams:
    with open(path, "r", encoding="utf-8") as f:
        return head_from_dict(json.load(f))


def same_layers(a: HeadParams, b: HeadParams, indices: Sequence[int]) -> bool:
    """True if the given layers are bit-identical in both heads."""
    return all(
        np.array_equal(a.layers[k].weight, b.layers[k].weight) and np.array_equal(a.layers[k].bias, b.layers[k].bias)
        for k in indices
    )
