"""Feed-forward affine+ReLU classifier with softmax confidence, input
gradients and interval propagation support."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, ModelFormatError

ACTIVATIONS = ("relu", "identity")
LOSSES = ("margin_to_runnerup", "cross_entropy_true_class")


@dataclass(frozen=True)
class AffineLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise ModelFormatError(f"weight must be a matrix, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ModelFormatError(f"bias length {b.shape[0]} != weight rows {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError("layer contains non-finite entries")
        if self.activation not in ACTIVATIONS:
            raise ModelFormatError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    class_index: int
    confidence: float


@dataclass(frozen=True)
class MlpModel:
    """Layered classifier f: R^input_dim -> R^num_classes.

    Hidden layers are ReLU; only the last layer may be identity-activated.
    ``input_box`` holds per-dimension [lo, hi] clamp bounds.
    """

    layers: tuple
    input_box: np.ndarray = field(default=None)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ModelFormatError("model needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ModelFormatError(
                    f"layer {k} expects {layers[k].in_dim} inputs, previous layer gives "
                    f"{layers[k - 1].out_dim}"
                )
        for k, layer in enumerate(layers[:-1]):
            if layer.activation != "relu":
                raise ModelFormatError(f"hidden layer {k} must be relu")
        if layers[-1].out_dim < 2:
            raise ModelFormatError("classifier needs at least two classes")
        object.__setattr__(self, "layers", layers)

        box = self.input_box
        if box is None:
            box = np.tile([0.0, 1.0], (layers[0].in_dim, 1))
        box = np.array(box, dtype=np.float64)
        if box.shape != (layers[0].in_dim, 2):
            raise ModelFormatError(f"input_box must have shape ({layers[0].in_dim}, 2)")
        if np.any(np.isnan(box)) or np.any(box[:, 0] > box[:, 1]):
            raise ModelFormatError("input_box needs lo <= hi in every dimension")
        box.setflags(write=False)
        object.__setattr__(self, "input_box", box)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def lower(self) -> np.ndarray:
        return self.input_box[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.input_box[:, 1]

    def _check_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(f"expected inputs of dimension {self.input_dim}, got {X.shape}")
        return X

    def logits(self, X) -> np.ndarray:
        """Logits for a batch (n, input_dim) -> (n, num_classes)."""
        h = self._check_batch(X)
        for layer in self.layers:
            h = h @ layer.weight.T + layer.bias
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Class indices and softmax confidences for a batch."""
        z = self.logits(X)
        return predicted_class(z), softmax_confidence(z)

    def hash(self) -> str:
        return model_hash(self)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predicted_class(z: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie-break rule
    return np.argmax(z, axis=-1)


def softmax_confidence(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    # the predicted class has shifted logit 0, so its softmax is 1 / sum(exp)
    return 1.0 / np.exp(shifted).sum(axis=-1)


def forward(model: MlpModel, x) -> Prediction:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("forward expects a single input vector")
    if not np.all(np.isfinite(x)):
        raise DimensionError("input contains non-finite values")
    z = model.logits(x)[0]
    return Prediction(
        logits=z,
        class_index=int(predicted_class(z)),
        confidence=float(softmax_confidence(z)),
    )


def _runner_up(z: np.ndarray, label: np.ndarray) -> np.ndarray:
    masked = z.copy()
    masked[np.arange(len(z)), label] = -np.inf
    return np.argmax(masked, axis=-1)


def input_gradient_batch(model: MlpModel, X, loss="margin_to_runnerup", labels=None) -> np.ndarray:
    """Gradient of ``loss`` with respect to each row of X (reverse mode).

    ``labels`` defaults to the predicted classes. The margin loss is
    runner-up logit minus label logit; the cross-entropy loss is
    -log softmax at the label. ReLU has derivative 0 at exactly 0.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    X = model._check_batch(X)
    acts = [X]
    pre = []
    h = X
    for layer in model.layers:
        a = h @ layer.weight.T + layer.bias
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
        acts.append(h)
    z = h
    n = len(X)
    if labels is None:
        labels = predicted_class(z)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    rows = np.arange(n)

    g = np.zeros_like(z)
    if loss == "margin_to_runnerup":
        g[rows, _runner_up(z, labels)] += 1.0
        g[rows, labels] -= 1.0
    else:
        g = softmax(z)
        g[rows, labels] -= 1.0

    for layer, a in zip(reversed(model.layers), reversed(pre)):
        if layer.activation == "relu":
            g = g * (a > 0.0)
        g = g @ layer.weight
    return g


def input_gradient(model: MlpModel, x, loss="margin_to_runnerup", label=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("input_gradient expects a single input vector")
    labels = None if label is None else np.array([label])
    return input_gradient_batch(model, x[None, :], loss, labels)[0]


# -- serialization -----------------------------------------------------------


def model_to_dict(model: MlpModel) -> dict:
    return {
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "input_box": model.input_box.tolist(),
        "layers": [
            {
                "rows": layer.out_dim,
                "cols": layer.in_dim,
                "activation": layer.activation,
                "weight": layer.weight.reshape(-1).tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
    }


def _finite_list(values, what) -> list:
    if not isinstance(values, list):
        raise ModelFormatError(f"{what} must be an array")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ModelFormatError(f"{what} contains a non-finite or non-numeric entry: {v!r}")
        out.append(float(v))
    return out


def model_from_dict(data: dict) -> MlpModel:
    try:
        input_dim = int(data["input_dim"])
        num_classes = int(data["num_classes"])
        raw_layers = data["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"missing or invalid header field: {exc}") from exc
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ModelFormatError("layers must be a non-empty array")

    layers = []
    for k, spec in enumerate(raw_layers):
        try:
            rows, cols = int(spec["rows"]), int(spec["cols"])
            activation = spec.get("activation", "relu")
            weight = _finite_list(spec["weight"], f"layer {k} weight")
            bias = _finite_list(spec["bias"], f"layer {k} bias")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"layer {k}: {exc}") from exc
        if len(weight) != rows * cols:
            raise ModelFormatError(f"layer {k}: weight has {len(weight)} entries, expected {rows}x{cols}")
        if len(bias) != rows:
            raise ModelFormatError(f"layer {k}: bias has {len(bias)} entries, expected {rows}")
        layers.append(AffineLayer(np.array(weight).reshape(rows, cols), np.array(bias), activation))

    box = data.get("input_box")
    if box is not None:
        flat = _finite_list([v for pair in box for v in pair], "input_box")
        box = np.array(flat).reshape(-1, 2)
    model = MlpModel(tuple(layers), box)
    if model.input_dim != input_dim or model.num_classes != num_classes:
        raise ModelFormatError(
            f"header says {input_dim}->{num_classes}, layers give {model.input_dim}->{model.num_classes}"
        )
    return model


def save_model(model: MlpModel, path) -> None:
    # repr-based float output in json is shortest round-trip, so loads are bit-identical
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> MlpModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    return model_from_dict(data)


def model_hash(model: MlpModel) -> str:
    canonical = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canonical.encode()).hexdigest()


def random_mlp(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0, input_box=None) -> MlpModel:
    """Random model with Gaussian weights, used by tests and demos."""
    layers = []
    for k in range(len(sizes) - 1):
        fan_in = sizes[k]
        w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(sizes[k + 1], fan_in))
        b = rng.normal(0.0, 0.1 * scale, size=sizes[k + 1])
        act = "identity" if k == len(sizes) - 2 else "relu"
        layers.append(AffineLayer(w, b, act))
    return MlpModel(tuple(layers), input_box)


def linear_binary_model(w, b, input_box=None) -> MlpModel:
    """Two-class model with logits (w.x + b, -(w.x + b))."""
    w = np.asarray(w, dtype=np.float64)
    weight = np.stack([w, -w])
    bias = np.array([b, -b], dtype=np.float64)
    return MlpModel((AffineLayer(weight, bias, "identity"),), input_box)
