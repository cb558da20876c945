"""Small differentiable classifiers over flat parameter vectors.

Two model kinds share one code path: ``logistic`` is a zero-hidden-layer
MLP. Losses are softmax cross-entropy. Gradients are hand-written
reverse-mode; Hessian-vector products propagate a forward tangent through
both the forward and the backward pass, so they are exact (no finite
differences). Everything is float64 and vectorized over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

Array = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. layer_sizes runs input d ... output C."""

    kind: str  # "logistic" | "mlp"
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"  # "tanh" | "relu"; hidden layers only

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise InvalidInputError(f"unknown model kind {self.kind!r}")
        if self.activation not in ("tanh", "relu"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise InvalidInputError(f"bad layer_sizes {sizes}")
        if sizes[-1] < 2:
            raise InvalidInputError("output size C must be >= 2")
        if self.kind == "logistic" and len(sizes) != 2:
            raise InvalidInputError("logistic model takes layer_sizes [d, C]")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]


@dataclass
class Dataset:
    """Feature matrix plus integer labels and per-row split tags."""

    features: Array  # (n, d) float64
    labels: Array  # (n,) int64 in 0..C-1
    split: Array = field(default=None)  # (n,) of {"train","val","test"}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("features/labels shape mismatch")
        if self.features.shape[0] < 1:
            raise InvalidInputError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")
        if self.labels.min() < 0:
            raise InvalidInputError("negative label")
        if self.split is None:
            self.split = np.full(self.n, "train", dtype=object)
        else:
            self.split = np.asarray(self.split, dtype=object)
            if self.split.shape[0] != self.n:
                raise InvalidInputError("split tag count mismatch")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def indices(self, split: str) -> Array:
        return np.nonzero(self.split == split)[0].astype(np.int64)


def _unpack(spec: ModelSpec, params: Array) -> list[tuple[Array, Array]]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise InvalidInputError(
            f"parameter vector has length {params.shape}, expected ({spec.param_count},)"
        )
    layers = []
    off = 0
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        W = params[off : off + fan_in * fan_out].reshape(fan_out, fan_in)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def _pack(parts: list[tuple[Array, Array]]) -> Array:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in parts])


def init_params(spec: ModelSpec, seed: int) -> Array:
    """Zero-mean uniform weights scaled by 1/sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    parts = []
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        parts.append((W, np.zeros(fan_out)))
    return _pack(parts)


def _act(spec: ModelSpec, Z: Array) -> Array:
    if spec.activation == "tanh":
        return np.tanh(Z)
    return np.maximum(Z, 0.0)


def _act_deriv(spec: ModelSpec, A: Array) -> Array:
    # Expressed through the activation value; for relu, A > 0 iff Z > 0.
    if spec.activation == "tanh":
        return 1.0 - A * A
    return (A > 0.0).astype(np.float64)


def _act_second_deriv(spec: ModelSpec, A: Array) -> Array:
    if spec.activation == "tanh":
        return -2.0 * A * (1.0 - A * A)
    return np.zeros_like(A)


def _forward(spec: ModelSpec, layers, X: Array) -> list[Array]:
    """Return activations [A0=X, A1, ..., Z_L]; the last entry is raw logits."""
    acts = [X]
    L = len(layers)
    for idx, (W, b) in enumerate(layers):
        Z = acts[-1] @ W.T + b
        acts.append(Z if idx == L - 1 else _act(spec, Z))
    return acts


def _softmax(Z: Array) -> Array:
    Zs = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Zs)
    return E / E.sum(axis=1, keepdims=True)


def _check_examples(spec: ModelSpec, X: Array, y: Array) -> tuple[Array, Array]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.shape[1] != spec.input_dim:
        raise InvalidInputError(
            f"feature dimension {X.shape[1]} != model input {spec.input_dim}"
        )
    if y.max(initial=-1) >= spec.num_classes or y.min(initial=0) < 0:
        raise InvalidInputError("label out of range for model output size")
    return X, y


def _batch_loss(spec: ModelSpec, params: Array, X: Array, y: Array) -> float:
    layers = _unpack(spec, params)
    Z = _forward(spec, layers, X)[-1]
    m = Z - Z.max(axis=1, keepdims=True)
    logp = m - np.log(np.exp(m).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].sum())


def example_loss(spec: ModelSpec, params: Array, example: tuple[Array, int]) -> float:
    """Softmax cross-entropy of one example."""
    x, y = example
    X, yv = _check_examples(spec, x, np.asarray([y]))
    return _batch_loss(spec, params, X, yv)


def _batch_loss_grad(spec: ModelSpec, params: Array, X: Array, y: Array):
    """Sum of per-example losses and the summed gradient over the batch."""
    layers = _unpack(spec, params)
    acts = _forward(spec, layers, X)
    Z = acts[-1]
    m = Z - Z.max(axis=1, keepdims=True)
    logp = m - np.log(np.exp(m).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].sum())

    P = np.exp(logp)
    delta = P.copy()
    delta[np.arange(len(y)), y] -= 1.0  # dLoss/dZ_L per example

    grads: list[tuple[Array, Array]] = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        A_prev = acts[l]
        grads[l] = (delta.T @ A_prev, delta.sum(axis=0))
        if l > 0:
            s = delta @ layers[l][0]
            delta = _act_deriv(spec, acts[l]) * s
    return loss, _pack(grads)


def subset_loss_grad(
    spec: ModelSpec,
    params: Array,
    dataset: Dataset,
    indices,
    scale: float = 1.0,
) -> tuple[float, Array]:
    """scale * (sum loss, sum gradient) over the given dataset rows."""
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.size == 0:
        raise InvalidInputError("subset_loss_grad: empty index set")
    if indices.min() < 0 or indices.max() >= dataset.n:
        raise InvalidInputError("subset_loss_grad: index out of range")
    X, y = _check_examples(spec, dataset.features[indices], dataset.labels[indices])
    loss, grad = _batch_loss_grad(spec, params, X, y)
    return scale * loss, scale * grad


def hvp(
    spec: ModelSpec,
    params: Array,
    dataset: Dataset,
    indices,
    v: Array,
    scale: float = 1.0,
) -> Array:
    """Exact Hessian-vector product scale * (sum_i d2 loss_i) v.

    Forward-mode tangents (seeded by v) are carried through the forward
    pass and then through the backward pass, yielding the directional
    derivative of the gradient.
    """
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.size == 0:
        raise InvalidInputError("hvp: empty index set")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.param_count,):
        raise InvalidInputError("hvp: tangent vector length mismatch")
    X, y = _check_examples(spec, dataset.features[indices], dataset.labels[indices])
    layers = _unpack(spec, params)
    tangents = _unpack(spec, v)

    # Forward pass with tangents; dZs keeps the pre-activation tangents,
    # needed by the second-derivative term of the backward sweep.
    acts = [X]
    dacts = [np.zeros_like(X)]
    dZs = [np.zeros_like(X)]
    L = len(layers)
    for l, ((W, b), (dW, db)) in enumerate(zip(layers, tangents)):
        Z = acts[-1] @ W.T + b
        dZ = acts[-1] @ dW.T + dacts[-1] @ W.T + db
        dZs.append(dZ)
        if l == L - 1:
            acts.append(Z)
            dacts.append(dZ)
        else:
            A = _act(spec, Z)
            acts.append(A)
            dacts.append(_act_deriv(spec, A) * dZ)

    Z, dZ = acts[-1], dacts[-1]
    P = _softmax(Z)
    delta = P.copy()
    delta[np.arange(len(y)), y] -= 1.0
    # Tangent of softmax: dP = P * (dZ - sum(P * dZ)).
    ddelta = P * (dZ - (P * dZ).sum(axis=1, keepdims=True))

    hparts: list[tuple[Array, Array]] = [None] * L
    for l in range(L - 1, -1, -1):
        A_prev, dA_prev = acts[l], dacts[l]
        hparts[l] = (ddelta.T @ A_prev + delta.T @ dA_prev, ddelta.sum(axis=0))
        if l > 0:
            W, dW = layers[l][0], tangents[l][0]
            s = delta @ W
            ds = ddelta @ W + delta @ dW
            A = acts[l]
            phi1 = _act_deriv(spec, A)
            phi2 = _act_second_deriv(spec, A)
            ddelta = phi2 * dZs[l] * s + phi1 * ds
            delta = phi1 * s
    return scale * _pack(hparts)


def predict(spec: ModelSpec, params: Array, x: Array) -> tuple[int, Array]:
    """Argmax label for one input; ties break toward the smallest class."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise InvalidInputError("predict: feature dimension mismatch")
    logits = _forward(spec, _unpack(spec, params), X)[-1][0]
    return int(np.argmax(logits)), logits


def predict_labels(spec: ModelSpec, params: Array, X: Array) -> Array:
    """Vectorized argmax labels for a matrix of inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    logits = _forward(spec, _unpack(spec, params), X)[-1]
    return np.argmax(logits, axis=1).astype(np.int64)


def accuracy(spec: ModelSpec, params: Array, dataset: Dataset, split: str = "test") -> float:
    """Fraction of correctly classified rows in the given split."""
    idx = dataset.indices(split)
    if idx.size == 0:
        raise InvalidInputError(f"accuracy: split {split!r} is empty")
    pred = predict_labels(spec, params, dataset.features[idx])
    return float(np.mean(pred == dataset.labels[idx]))
