"""Small numpy MLP engine with a feature/head split.

A model ``f`` is a stack of affine layers, each followed by an activation.
``split_index`` cuts the stack into a feature map ``h`` (layers before the
split) and a prediction head ``g`` (layers from the split on), so that
``f = g(h(x))``.  Everything runs in float64.

ReLU derivative at exactly zero pre-activation is taken as 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
OUTPUT_KINDS = ("regression", "quantile_pair", "logits")
LOSSES = ("squared_error", "pinball", "cross_entropy")
MODEL_FORMAT = "ffcp-mlp"
MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class MlpModel:
    layers: tuple
    split_index: int
    output_kind: str = "regression"

    def __post_init__(self):
        if not self.layers:
            raise ModelError("model needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ModelError(
                    f"incompatible layer dims: {a.fan_out} -> {b.fan_in}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ModelError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.fan_out,):
                raise ModelError("bias shape does not match weight rows")
        if self.layers[-1].activation != "identity":
            raise ModelError("final layer must use identity activation")
        if not 0 <= self.split_index <= len(self.layers):
            raise ModelError(
                f"split_index {self.split_index} outside [0, {len(self.layers)}]")
        if self.output_kind not in OUTPUT_KINDS:
            raise ModelError(f"unknown output kind {self.output_kind!r}")
        if self.output_kind == "quantile_pair" and self.d_out != 2:
            raise ModelError("quantile_pair models need exactly two outputs")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].fan_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].fan_out

    @property
    def d_feature(self) -> int:
        if self.split_index == 0:
            return self.d_in
        return self.layers[self.split_index - 1].fan_out

    @property
    def dims(self) -> list:
        return [self.d_in] + [layer.fan_out for layer in self.layers]

    def with_split(self, split_index: int) -> "MlpModel":
        return replace(self, split_index=split_index)

    def head_layers(self) -> tuple:
        return self.layers[self.split_index:]

    def feature_layers(self) -> tuple:
        return self.layers[:self.split_index]


@dataclass(frozen=True)
class FeatureView:
    input: np.ndarray
    activations: list
    feature: np.ndarray
    prediction: np.ndarray


@dataclass(frozen=True)
class HeadJacobian:
    rows: np.ndarray  # (d_y, d_v), or (n, d_y, d_v) for a batch

    @property
    def row_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.rows ** 2, axis=-1))


@dataclass
class TrainConfig:
    loss: str = "squared_error"
    quantile_levels: tuple = (0.05, 0.95)
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        lo, hi = self.quantile_levels
        if self.loss == "pinball" and not 0 < lo < hi < 1:
            raise ValueError("pinball levels need 0 < lo < hi < 1")


def mlp_init(layer_dims: Sequence[int], activations=None, split_index: int = 0,
             output_kind: str = "regression", seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases.

    ``activations`` defaults to ReLU on hidden layers and identity on the
    output layer; a single string applies to every hidden layer.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ModelError(f"bad layer dims {dims}")
    n_layers = len(dims) - 1
    if activations is None or isinstance(activations, str):
        hidden = activations or "relu"
        activations = [hidden] * (n_layers - 1) + ["identity"]
    activations = list(activations)
    if len(activations) != n_layers:
        raise ModelError(
            f"{len(activations)} activations for {n_layers} layers")
    if not 0 <= split_index <= n_layers:
        raise ModelError(f"split_index {split_index} outside [0, {n_layers}]")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpModel(tuple(layers), split_index, output_kind)


def _act(z: np.ndarray, name: str) -> np.ndarray:
    return np.maximum(z, 0.0) if name == "relu" else z


def _act_grad(z: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def _check_input(model: MlpModel, x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width:
        raise ModelError(f"expected last dimension {width}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ModelError("input contains non-finite values")
    return x


def _run(layers, x):
    for layer in layers:
        x = _act(x @ layer.weight.T + layer.bias, layer.activation)
    return x


def forward(model: MlpModel, x) -> FeatureView:
    x = _check_input(model, x, model.d_in)
    activations = []
    a = x
    for layer in model.layers:
        a = _act(a @ layer.weight.T + layer.bias, layer.activation)
        activations.append(a)
    feature = x if model.split_index == 0 else activations[model.split_index - 1]
    return FeatureView(x, activations, feature, activations[-1])


def features(model: MlpModel, x) -> np.ndarray:
    """h(x) for a single input or a batch of rows."""
    x = _check_input(model, x, model.d_in)
    return _run(model.feature_layers(), x)


def predict(model: MlpModel, x) -> np.ndarray:
    x = _check_input(model, x, model.d_in)
    return _run(model.layers, x)


def head_forward(model: MlpModel, v) -> np.ndarray:
    v = _check_input(model, v, model.d_feature)
    return _run(model.head_layers(), v)


def _head_jacobian_at(model: MlpModel, v: np.ndarray) -> np.ndarray:
    # v: (n, d_v) -> (n, d_y, d_v)
    head = model.head_layers()
    if not head:
        eye = np.eye(v.shape[1])
        return np.broadcast_to(eye, (v.shape[0],) + eye.shape).copy()
    pre = []
    a = v
    for layer in head:
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = _act(z, layer.activation)
    d_y = head[-1].fan_out
    jac = np.broadcast_to(np.eye(d_y), (v.shape[0], d_y, d_y)).copy()
    for layer, z in zip(reversed(head), reversed(pre)):
        jac = jac * _act_grad(z, layer.activation)[:, None, :]
        jac = jac @ layer.weight
    return jac


def head_jacobian(model: MlpModel, x) -> HeadJacobian:
    """Jacobian of g at h(x), by a reverse sweep over the head layers.

    Accepts one input (rows of shape (d_y, d_v)) or a batch (n, d_y, d_v).
    """
    x = _check_input(model, x, model.d_in)
    single = x.ndim == 1
    v = _run(model.feature_layers(), np.atleast_2d(x))
    jac = _head_jacobian_at(model, v)
    return HeadJacobian(jac[0] if single else jac)


def head_jacobian_at_feature(model: MlpModel, v) -> HeadJacobian:
    v = _check_input(model, v, model.d_feature)
    single = v.ndim == 1
    jac = _head_jacobian_at(model, np.atleast_2d(v))
    return HeadJacobian(jac[0] if single else jac)


def input_jacobian(model: MlpModel, x) -> np.ndarray:
    """Jacobian of the whole network with respect to its input."""
    return head_jacobian(model.with_split(0), x).rows


def feature_jacobian(model: MlpModel, x) -> np.ndarray:
    """Jacobian of h with respect to the input, shape (d_v, d_x)."""
    x = _check_input(model, x, model.d_in)
    jac = np.eye(model.d_in)
    a = x
    for layer in model.feature_layers():
        z = layer.weight @ a + layer.bias
        jac = (_act_grad(z, layer.activation)[:, None] * layer.weight) @ jac
        a = _act(z, layer.activation)
    return jac


# -- training ---------------------------------------------------------------

def _loss_and_grad(loss: str, out: np.ndarray, y: np.ndarray, levels):
    n = out.shape[0]
    if loss == "squared_error":
        diff = out - y
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    if loss == "pinball":
        tau = np.asarray(levels, dtype=np.float64)
        y = np.broadcast_to(y.reshape(n, -1)[:, :1], out.shape)
        diff = y - out
        value = np.mean(np.maximum(tau * diff, (tau - 1.0) * diff))
        grad = np.where(diff > 0, -tau, 1.0 - tau) / diff.size
        return float(value), grad
    # cross-entropy on integer labels
    labels = y.reshape(-1).astype(np.int64)
    shifted = out - out.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = -np.mean(logp[np.arange(n), labels])
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(value), grad / n


def _backprop(layers, x, y, loss, levels):
    acts = [x]
    pres = []
    a = x
    for layer in layers:
        z = a @ layer.weight.T + layer.bias
        pres.append(z)
        a = _act(z, layer.activation)
        acts.append(a)
    value, delta = _loss_and_grad(loss, a, y, levels)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        delta = delta * _act_grad(pres[i], layers[i].activation)
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = delta @ layers[i].weight
    return value, grads


def evaluate_loss(model: MlpModel, x, y, config: TrainConfig) -> float:
    out = predict(model, x)
    return _loss_and_grad(config.loss, out, np.asarray(y, dtype=np.float64),
                          config.quantile_levels)[0]


def _check_targets(model: MlpModel, y: np.ndarray, config: TrainConfig):
    if config.loss == "cross_entropy":
        if model.output_kind != "logits":
            raise ModelError("cross_entropy needs a logits model")
        labels = y.reshape(-1)
        if np.any(labels < 0) or np.any(labels >= model.d_out) or np.any(
                labels != np.round(labels)):
            raise ModelError("class labels must be integers in [0, K)")
    elif config.loss == "pinball":
        if model.output_kind != "quantile_pair":
            raise ModelError("pinball loss needs a quantile_pair model")
    elif y.reshape(y.shape[0], -1).shape[1] != model.d_out:
        raise ModelError("target width does not match model output")


def train(model: MlpModel, x, y, config: TrainConfig,
          history: Optional[list] = None) -> MlpModel:
    """Minibatch training; returns a new model and leaves ``model`` intact.

    ``history``, if given, receives the full-data loss before training and
    after every epoch.
    """
    x = _check_input(model, x, model.d_in)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ModelError("empty training fold")
    if y.shape[0] != x.shape[0]:
        raise ModelError("features and targets have different lengths")
    _check_targets(model, y, config)
    if config.loss != "cross_entropy":
        y = y.reshape(y.shape[0], -1)
    if config.epochs == 0:
        return model

    rng = np.random.default_rng(config.seed)
    params = []
    for layer in model.layers:
        params += [layer.weight.copy(), layer.bias.copy()]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2 = config.betas
    step = 0
    n = x.shape[0]

    def current_layers():
        return tuple(Layer(params[2 * i], params[2 * i + 1], layer.activation)
                     for i, layer in enumerate(model.layers))

    if history is not None:
        history.append(evaluate_loss(model, x, y, config))

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = _backprop(current_layers(), x[idx], y[idx],
                                     config.loss, config.quantile_levels)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, value)
            flat = [g for pair in grads for g in pair]
            if config.weight_decay:
                # L2 penalty on weight matrices only
                for i in range(0, len(flat), 2):
                    flat[i] = flat[i] + config.weight_decay * params[i]
            step += 1
            if config.optimizer == "sgd":
                for p, g in zip(params, flat):
                    p -= config.learning_rate * g
                continue
            lr = config.learning_rate * math.sqrt(1 - beta2 ** step) / (
                1 - beta1 ** step)
            for p, g, mi, vi in zip(params, flat, m, v):
                mi *= beta1
                mi += (1 - beta1) * g
                vi *= beta2
                vi += (1 - beta2) * g * g
                p -= lr * mi / (np.sqrt(vi) + config.eps)
        if history is not None:
            trained = replace(model, layers=current_layers())
            loss = evaluate_loss(trained, x, y, config)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            history.append(loss)
    return replace(model, layers=current_layers())


# -- serialization ----------------------------------------------------------

def model_to_dict(model: MlpModel) -> dict:
    """Text form: weights row-major as JSON floats (shortest repr, exact)."""
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "dims": model.dims,
        "activations": [layer.activation for layer in model.layers],
        "split_index": model.split_index,
        "output_kind": model.output_kind,
        "weights": [layer.weight.reshape(-1).tolist() for layer in model.layers],
        "biases": [layer.bias.tolist() for layer in model.layers],
    }


def model_from_dict(data: dict) -> MlpModel:
    if data.get("format") != MODEL_FORMAT:
        raise ModelError(f"not a {MODEL_FORMAT} document")
    if data.get("version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model version {data.get('version')}")
    dims = data["dims"]
    layers = []
    for i, act in enumerate(data["activations"]):
        w = np.asarray(data["weights"][i], dtype=np.float64).reshape(
            dims[i + 1], dims[i])
        b = np.asarray(data["biases"][i], dtype=np.float64)
        layers.append(Layer(w, b, act))
    return MlpModel(tuple(layers), data["split_index"], data["output_kind"])


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
