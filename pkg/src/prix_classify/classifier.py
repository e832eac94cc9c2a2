"""Small multi-class MLPs trained from scratch with minibatch SGD.

Three fixed configurations share one implementation:

* ``mlp0`` -- no hidden layer (multinomial logistic regression)
* ``mlp1`` -- one 128-unit hidden layer
* ``mlp2`` -- two 128-unit hidden layers

Every layer except the output is followed by batch normalization and ReLU;
the output is a softmax over the classes, trained with cross-entropy loss.
Weights start Glorot-uniform, biases at zero, batch-norm at gamma=1/beta=0
with running statistics (0, 1).

Batch normalization uses population (biased) batch variance with epsilon
1e-5 inside the square root, so single-sample batches stay finite. Running
statistics update as running = 0.9 * running + 0.1 * batch and are only
used in eval mode. Training is plain SGD: no momentum, no weight decay, no
schedule. Everything is deterministic given (seed, data, config).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT = "prix-mlp"
MODEL_VERSION = 1

VARIANTS: dict[str, tuple[int, ...]] = {
    "mlp0": (),
    "mlp1": (128,),
    "mlp2": (128, 128),
}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class MlpArchitecture:
    variant: str
    input_dim: int
    num_classes: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return VARIANTS[self.variant]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def digest(self, arch: MlpArchitecture) -> str:
        payload = json.dumps(
            {
                "variant": arch.variant,
                "input_dim": arch.input_dim,
                "num_classes": arch.num_classes,
                "learning_rate": self.learning_rate,
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    batchnorm: BatchNormParams | None = None


@dataclass
class MlpModel:
    architecture: MlpArchitecture
    layers: list[DenseLayer]
    train_config_digest: str = ""


def init_model(arch: MlpArchitecture, seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases, identity batch norm.

    Deterministic: the same seed yields a bit-identical model.
    """
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        bias = np.zeros(fan_out)
        is_output = i == len(dims) - 2
        batchnorm = None
        if not is_output:
            batchnorm = BatchNormParams(
                gamma=np.ones(fan_out),
                beta=np.zeros(fan_out),
                running_mean=np.zeros(fan_out),
                running_var=np.ones(fan_out),
            )
        layers.append(DenseLayer(weights=weights, bias=bias, batchnorm=batchnorm))
    return MlpModel(architecture=arch, layers=layers)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_pass(model: MlpModel, inputs: np.ndarray, mode: str, caches=None) -> np.ndarray:
    """Logits of a (B, n) batch. `caches`, when a list, collects per-layer
    intermediates for backprop. Pure: no model state is touched."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = inputs
    for layer in model.layers:
        z = h @ layer.weights + layer.bias
        if layer.batchnorm is None:
            if caches is not None:
                caches.append({"h": h})
            h = z
            continue
        bn = layer.batchnorm
        if mode == "train":
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu = bn.running_mean
            var = bn.running_var
        std = np.sqrt(var + BN_EPS)
        xhat = (z - mu) / std
        y = bn.gamma * xhat + bn.beta
        if caches is not None:
            caches.append(
                {"h": h, "z": z, "mu": mu, "var": var, "std": std, "xhat": xhat, "y": y}
            )
        h = np.maximum(y, 0.0)
    return h


def forward(model: MlpModel, inputs, mode: str = "eval") -> np.ndarray:
    """Class-probability vector(s) for one input or a batch.

    Train mode normalizes with batch statistics, eval mode with the stored
    running statistics. A 1-D input yields a 1-D probability vector.
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.architecture.input_dim:
        raise ValueError(
            f"input dim {x.shape[1]} != model input dim {model.architecture.input_dim}"
        )
    probs = _softmax(_forward_pass(model, x, mode))
    return probs[0] if single else probs


def predict(model: MlpModel, inputs) -> tuple[int, np.ndarray]:
    """Most probable class (ties resolve to the lowest index) and the full
    posterior, computed in eval mode."""
    probs = forward(model, inputs, mode="eval")
    if probs.ndim != 1:
        raise ValueError("predict takes a single input vector")
    return int(np.argmax(probs)), probs


def batch_loss(model: MlpModel, inputs: np.ndarray, targets: np.ndarray, mode: str = "train") -> float:
    """Mean cross-entropy of a batch. Pure; used by training and by
    finite-difference checks."""
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.intp)
    logits = _forward_pass(model, x, mode)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(y)), y]
    return float(np.mean(logsumexp - picked))


def loss_and_grads(model: MlpModel, inputs: np.ndarray, targets: np.ndarray):
    """Train-mode loss and analytic gradients for every parameter.

    Returns (loss, grads) where grads[i] holds 'weights', 'bias' and, for
    batch-normalized layers, 'gamma' and 'beta'. Gradients flow through the
    batch statistics (mean and population variance), not around them.
    """
    loss, grads, _ = _loss_grads_caches(model, inputs, targets)
    return loss, grads


def _loss_grads_caches(model: MlpModel, inputs: np.ndarray, targets: np.ndarray):
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.intp)
    num_classes = model.architecture.num_classes
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError("class index out of range")
    batch = len(x)
    caches: list[dict] = []
    logits = _forward_pass(model, x, mode="train", caches=caches)
    probs = _softmax(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(batch), y]))

    onehot = np.zeros_like(probs)
    onehot[np.arange(batch), y] = 1.0
    d_out = (probs - onehot) / batch

    grads = [dict() for _ in model.layers]
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        cache = caches[idx]
        if layer.batchnorm is None:
            dz = d_out
        else:
            bn = layer.batchnorm
            dy = d_out * (cache["y"] > 0.0)
            grads[idx]["gamma"] = (dy * cache["xhat"]).sum(axis=0)
            grads[idx]["beta"] = dy.sum(axis=0)
            dxhat = dy * bn.gamma
            centered = cache["z"] - cache["mu"]
            inv_std = 1.0 / cache["std"]
            dvar = (dxhat * centered * -0.5 * inv_std**3).sum(axis=0)
            dmu = (dxhat * -inv_std).sum(axis=0) + dvar * (-2.0 * centered).mean(axis=0)
            dz = dxhat * inv_std + dvar * 2.0 * centered / batch + dmu / batch
        grads[idx]["weights"] = cache["h"].T @ dz
        grads[idx]["bias"] = dz.sum(axis=0)
        d_out = dz @ layer.weights.T
    return loss, grads, caches


def _update_running_stats(model: MlpModel, caches: list[dict]) -> None:
    for layer, cache in zip(model.layers, caches):
        if layer.batchnorm is None:
            continue
        bn = layer.batchnorm
        bn.running_mean = (1.0 - BN_MOMENTUM) * bn.running_mean + BN_MOMENTUM * cache["mu"]
        bn.running_var = (1.0 - BN_MOMENTUM) * bn.running_var + BN_MOMENTUM * cache["var"]


def train(model: MlpModel, inputs, targets, config: TrainConfig) -> tuple[MlpModel, list[float]]:
    """Run exactly config.epochs epochs of minibatch SGD, in place.

    Batches are reshuffled each epoch from the config seed. Returns the
    model and the per-epoch mean training loss (sample-weighted). Raises
    TrainingDivergedError the moment a batch loss is not finite.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.intp)
    if x.ndim != 2 or len(x) != len(y) or len(x) == 0:
        raise ValueError("need a non-empty (N, n) input matrix and N targets")
    if np.any(y < 0) or np.any(y >= model.architecture.num_classes):
        raise ValueError("class index out of range")
    rng = np.random.default_rng(config.seed)
    losses = []
    num = len(x)
    for epoch in range(config.epochs):
        order = rng.permutation(num)
        loss_sum = 0.0
        for start in range(0, num, config.batch_size):
            pick = order[start : start + config.batch_size]
            batch_size = len(pick)
            loss, grads, caches = _loss_grads_caches(model, x[pick], y[pick])
            _update_running_stats(model, caches)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            for layer, grad in zip(model.layers, grads):
                layer.weights -= config.learning_rate * grad["weights"]
                layer.bias -= config.learning_rate * grad["bias"]
                if layer.batchnorm is not None:
                    layer.batchnorm.gamma -= config.learning_rate * grad["gamma"]
                    layer.batchnorm.beta -= config.learning_rate * grad["beta"]
            loss_sum += loss * batch_size
        losses.append(loss_sum / num)
    model.train_config_digest = config.digest(model.architecture)
    return model, losses


def count_parameters(layer_dims, include_batchnorm: bool = True) -> int:
    """Trainable parameters of a dense stack given its layer widths.

    Every non-output layer carries batch norm (gamma and beta, 2 per unit),
    counted unless include_batchnorm is False.
    """
    dims = list(layer_dims)
    total = 0
    for i in range(len(dims) - 1):
        total += dims[i] * dims[i + 1] + dims[i + 1]
    if include_batchnorm:
        total += sum(2 * h for h in dims[1:-1])
    return total


def param_count(arch: MlpArchitecture, include_batchnorm: bool = True) -> int:
    """Exact trainable-parameter count of one architecture.

    With include_batchnorm=False the count covers weights and biases only.
    That is the convention under which the historical complexity figures for
    these architectures were quoted (with 5 output classes): mlp0 = 5n + 5,
    mlp1 = 128n + 773, mlp2 = 128n + 17285, e.g. 10245 / 262917 / 279429 at
    n = 2048. Batch-norm gamma and beta add 2 * 128 per hidden layer.
    """
    return count_parameters(arch.layer_dims, include_batchnorm)


def save_model(model: MlpModel, path) -> None:
    """Versioned JSON serialization of architecture and parameters."""

    def arr(a: np.ndarray):
        return np.asarray(a, dtype=np.float64).tolist()

    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "architecture": {
            "variant": model.architecture.variant,
            "input_dim": model.architecture.input_dim,
            "num_classes": model.architecture.num_classes,
        },
        "train_config_digest": model.train_config_digest,
        "layers": [
            {
                "weights": arr(layer.weights),
                "bias": arr(layer.bias),
                "batchnorm": None
                if layer.batchnorm is None
                else {
                    "gamma": arr(layer.batchnorm.gamma),
                    "beta": arr(layer.batchnorm.beta),
                    "running_mean": arr(layer.batchnorm.running_mean),
                    "running_var": arr(layer.batchnorm.running_var),
                },
            }
            for layer in model.layers
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, separators=(",", ":")), encoding="utf-8"
    )


def load_model(path) -> MlpModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != MODEL_FORMAT or payload.get("version") != MODEL_VERSION:
        raise ValueError(f"not a supported model file: {path}")
    arch = MlpArchitecture(**payload["architecture"])
    layers = []
    for entry in payload["layers"]:
        batchnorm = None
        if entry["batchnorm"] is not None:
            batchnorm = BatchNormParams(
                gamma=np.array(entry["batchnorm"]["gamma"], dtype=np.float64),
                beta=np.array(entry["batchnorm"]["beta"], dtype=np.float64),
                running_mean=np.array(entry["batchnorm"]["running_mean"], dtype=np.float64),
                running_var=np.array(entry["batchnorm"]["running_var"], dtype=np.float64),
            )
        layers.append(
            DenseLayer(
                weights=np.array(entry["weights"], dtype=np.float64),
                bias=np.array(entry["bias"], dtype=np.float64),
                batchnorm=batchnorm,
            )
        )
    return MlpModel(
        architecture=arch,
        layers=layers,
        train_config_digest=payload.get("train_config_digest", ""),
    )
