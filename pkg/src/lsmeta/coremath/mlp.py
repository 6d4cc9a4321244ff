"""Small fully connected binary classifier used at every stage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import autodiff as ad

ACTIVATIONS = ("sigmoid", "relu", "identity")
LOG_EPS = 1e-12


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]


@dataclass(frozen=True)
class MlpParams:
    """Ordered dense layers ending in a single sigmoid output unit.

    The output layer always applies a sigmoid, whatever its recorded
    activation, so the network emits a probability.
    """

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")
        if layers[-1].n_out != 1:
            raise ShapeError(f"output layer must have 1 unit, got {layers[-1].n_out}")
        object.__setattr__(self, "layers", layers)

    @property
    def dims(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def arrays(self):
        """Flat list [W1, b1, W2, b2, ...]."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays):
        arrays = [ad.value_of(a) for a in arrays]
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if np.shape(w) != layer.weight.shape or np.shape(b) != layer.bias.shape:
                raise ShapeError(f"layer {i}: array shapes do not match parameters")
            layers.append(Layer(np.array(w), np.array(b), layer.activation))
        return MlpParams(tuple(layers))

    def n_params(self):
        return sum(a.size for a in self.arrays())

    def to_dict(self):
        return {
            "dims": self.dims,
            "activations": self.activations,
            "weights": [layer.weight.tolist() for layer in self.layers],
            "biases": [layer.bias.tolist() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = [
            Layer(np.array(w, dtype=np.float64).reshape(d["dims"][i], d["dims"][i + 1]),
                  np.array(b, dtype=np.float64), act)
            for i, (w, b, act) in enumerate(zip(d["weights"], d["biases"], d["activations"]))
        ]
        return cls(tuple(layers))


def glorot_layer(n_in, n_out, rng, activation="sigmoid"):
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero bias."""
    r = np.sqrt(6.0 / (n_in + n_out))
    return Layer(rng.uniform(-r, r, size=(n_in, n_out)), np.zeros(n_out), activation)


def init_mlp(dims, rng, activation="sigmoid"):
    """Randomly initialised MLP with layer sizes ``dims`` (last must be 1)."""
    layers = [glorot_layer(a, b, rng, activation) for a, b in zip(dims[:-1], dims[1:])]
    last = layers[-1]
    layers[-1] = Layer(last.weight, last.bias, "sigmoid")
    return MlpParams(tuple(layers))


def _activate(z, name):
    if name == "sigmoid":
        return ad.sigmoid(z)
    if name == "relu":
        return ad.relu(z)
    return z


def logits_arrays(arrays, activations, X):
    """Pre-sigmoid output for a batch ``X`` of shape (..., n, d).

    ``arrays`` may be Vars; leading axes of ``X`` and the weights broadcast,
    which is how several tasks are evaluated in one pass.
    """
    h = X
    last = len(activations) - 1
    for i, act in enumerate(activations):
        z = ad.add(ad.matmul(h, arrays[2 * i]), arrays[2 * i + 1])
        if i == last:
            return z
        h = _activate(z, act)


def forward_arrays(arrays, activations, X):
    return ad.sigmoid(logits_arrays(arrays, activations, X))


def hidden_features(params, X, depth=None):
    """Activations after ``depth`` layers (default: all but the output layer)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    depth = len(params.layers) - 1 if depth is None else depth
    h = X
    for layer in params.layers[:depth]:
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
    return np.asarray(h)


def _check_input(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.layers[0].n_in:
        raise ShapeError(f"input dim {X.shape[-1]} does not match model input {params.layers[0].n_in}")
    return X


def predict_proba(params, X):
    """Probabilities (n,) for a batch of feature vectors."""
    X = _check_input(params, X)
    return forward_arrays(params.arrays(), params.activations, X).reshape(-1)


def forward(params, x):
    """Probability that a single feature vector is positive."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward takes a single feature vector; use predict_proba for batches")
    return float(predict_proba(params, x)[0])


def cross_entropy(p, y, eps=LOG_EPS):
    """Binary cross-entropy; ``p`` and ``y`` may be scalars or arrays.

    Returns the per-sample loss (same shape as the inputs).
    """
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def mean_cross_entropy(p, y, eps=LOG_EPS):
    """Batch mean cross-entropy of probabilities, differentiable in ``p``."""
    y = np.asarray(y, dtype=np.float64).reshape(ad.value_of(p).shape)
    pc = ad.clip(p, eps, 1.0 - eps)
    ll = ad.add(ad.mul(y, ad.log(pc)), ad.mul(1.0 - y, ad.log(ad.sub(1.0, pc))))
    return ad.neg(ad.mean(ll))


def mlp_loss(activations):
    """Return ``loss(arrays, batch)`` for a fixed architecture.

    ``batch`` is ``(X, y)`` (mean loss) or ``(X, y, w)`` with explicit
    per-sample weights; X may carry a leading task axis.
    """

    def loss(arrays, batch):
        X, y = batch[0], batch[1]
        z = logits_arrays(arrays, activations, X)
        shape = ad.value_of(z).shape
        y = np.asarray(y, dtype=np.float64).reshape(shape)
        if len(batch) > 2:
            w = np.asarray(batch[2], dtype=np.float64).reshape(shape)
        else:
            w = np.full(shape, 1.0 / shape[-2])
        return ad.bce_logits(z, y, w, LOG_EPS)

    return loss


def loss(params, X, y):
    X = _check_input(params, X)
    return float(mlp_loss(params.activations)(params.arrays(), (X, np.asarray(y, dtype=np.float64))))


def grad(params, X, y):
    """Gradient of the mean cross-entropy over a labelled batch.

    Returns an MlpParams-shaped object holding the gradient arrays.
    """
    X = _check_input(params, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("grad needs a non-empty batch")
    if y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} samples but {y.shape[0]} labels")
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in params.arrays()]
    value = mlp_loss(params.activations)(leaves, (X, y))
    return params.with_arrays(tape.gradient(value, leaves))
