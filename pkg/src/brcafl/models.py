"""Small numpy models over flat parameter vectors.

Three model kinds share one dense-network core:

* ``logistic-regression``: a single affine layer with softmax cross-entropy.
* ``mlp-classifier``: affine/activation stacks with softmax cross-entropy.
* ``mlp-autoencoder``: the same stack, trained to reproduce its input under
  mean squared error.

Gradients are written out by hand (backprop through the dense stack).
Weight matrices are stored as ``(fan_in, fan_out)`` so a forward pass is
``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .params import DimensionError, ParamVector, make_layout

KINDS = ("logistic-regression", "mlp-classifier", "mlp-autoencoder")
ACTIVATIONS = ("tanh", "linear")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = ()
    probe_block: Optional[str] = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim, *self.hidden_dims)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive, got {dims}")
        if self.kind == "logistic-regression" and self.hidden_dims:
            raise ValueError("logistic regression takes no hidden layers")
        if self.kind == "mlp-autoencoder" and self.output_dim != self.input_dim:
            raise ValueError("autoencoder output_dim must equal input_dim")
        if self.probe_block is None:
            object.__setattr__(self, "probe_block", self._default_probe())
        if self.probe_block not in {name for name, _ in self.block_shapes()}:
            raise ValueError(f"probe block {self.probe_block!r} not in layout")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "mlp-autoencoder"

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def _default_probe(self) -> str:
        # last hidden layer's incoming weights; the only weight block for LR
        if self.kind == "logistic-regression":
            return "w"
        return f"w{max(len(self.hidden_dims) - 1, 0)}"

    def layer_names(self) -> list[tuple[str, str]]:
        if self.kind == "logistic-regression":
            return [("w", "b")]
        return [(f"w{i}", f"b{i}") for i in range(self.n_layers)]

    def block_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        sizes = [self.input_dim, *self.hidden_dims, self.output_dim]
        shapes = []
        for (wname, bname), fan_in, fan_out in zip(self.layer_names(), sizes[:-1], sizes[1:]):
            shapes.append((wname, (fan_in, fan_out)))
            shapes.append((bname, (fan_out,)))
        return shapes

    def layout(self):
        return _layout(self)

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.block_shapes())

    def probe_length(self) -> int:
        return int(np.prod(dict(self.block_shapes())[self.probe_block]))


@dataclass(frozen=True, eq=False)
class Batch:
    """Samples as rows of ``inputs``; ``labels`` may be None for autoencoders."""

    inputs: np.ndarray
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise DimensionError(f"inputs must be 2-d, got shape {inputs.shape}")
        object.__setattr__(self, "inputs", inputs)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (inputs.shape[0],):
                raise DimensionError("labels must be one per input row")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        labels = None if self.labels is None else self.labels[idx]
        return Batch(self.inputs[idx], labels)

    @staticmethod
    def concat(batches) -> "Batch":
        batches = list(batches)
        inputs = np.concatenate([b.inputs for b in batches])
        if any(b.labels is None for b in batches):
            return Batch(inputs)
        return Batch(inputs, np.concatenate([b.labels for b in batches]))


@lru_cache(maxsize=64)
def _layout(spec: ModelSpec):
    return make_layout(spec.block_shapes())


def init_params(spec: ModelSpec, seed) -> ParamVector:
    """Glorot-uniform weights, zero biases, drawn block by block."""
    rng = np.random.default_rng(seed)
    params = ParamVector(np.zeros(spec.num_params()), spec.layout())
    for wname, _ in spec.layer_names():
        w = params.block(wname)
        fan_in, fan_out = w.shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-s, s, size=w.shape)
    return params


def _check(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> None:
    layout = spec.layout()
    if params.layout is not layout and params.layout != layout:
        raise DimensionError(f"params layout does not match {spec.kind} spec")
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionError(
            f"expected inputs of width {spec.input_dim}, got shape {inputs.shape}"
        )


@lru_cache(maxsize=64)
def _slices(spec: ModelSpec):
    index = {b.name: b for b in spec.layout()}
    out = []
    for wname, bname in spec.layer_names():
        w, b = index[wname], index[bname]
        out.append((slice(w.offset, w.offset + w.length), w.shape, slice(b.offset, b.offset + b.length)))
    return tuple(out)


def _unpack(spec: ModelSpec, values: np.ndarray):
    return [(values[ws].reshape(shape), values[bs]) for ws, shape, bs in _slices(spec)]


def _forward(spec: ModelSpec, layers, x: np.ndarray):
    """Return the final pre-softmax output and every layer's input."""
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < last:
            h = np.tanh(z) if spec.activation == "tanh" else z
            acts.append(h)
        else:
            h = z
    return h, acts


def forward(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Logits for classifiers, reconstructions for autoencoders."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    _check(spec, params, inputs)
    return _forward(spec, _unpack(spec, params.values), inputs)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _labels(spec: ModelSpec, batch: Batch) -> np.ndarray:
    if batch.labels is None:
        raise DimensionError("classifier batches need labels")
    y = batch.labels
    if y.size and (y.min() < 0 or y.max() >= spec.output_dim):
        raise DimensionError(f"labels must lie in [0, {spec.output_dim})")
    return y


def _value_and_grad(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: Optional[np.ndarray]):
    """Loss and flat gradient on raw arrays; inputs are assumed validated."""
    layers = _unpack(spec, values)
    out, acts = _forward(spec, layers, x)
    n = x.shape[0]
    if spec.is_classifier:
        logp = _log_softmax(out)
        rows = np.arange(n)
        value = float(-logp[rows, y].mean())
        dz = np.exp(logp)
        dz[rows, y] -= 1.0
        dz /= n
    else:
        diff = out - x
        value = float(np.mean(diff**2))
        dz = 2.0 * diff / diff.size

    grad = np.empty_like(values)
    slices = _slices(spec)
    for i in range(len(layers) - 1, -1, -1):
        ws, shape, bs = slices[i]
        h = acts[i]
        grad[ws] = (h.T @ dz).ravel()
        grad[bs] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ layers[i][0].T
            dz = dh * (1.0 - h**2) if spec.activation == "tanh" else dh
    return value, grad


def loss(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    _check(spec, params, batch.inputs)
    out, _ = _forward(spec, _unpack(spec, params.values), batch.inputs)
    if spec.is_classifier:
        y = _labels(spec, batch)
        return float(-_log_softmax(out)[np.arange(len(y)), y].mean())
    return float(np.mean((out - batch.inputs) ** 2))


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean-over-batch loss and its gradient, with the same layout as ``params``."""
    _check(spec, params, batch.inputs)
    if len(batch) == 0:
        raise DimensionError("empty batch")
    y = _labels(spec, batch) if spec.is_classifier else None
    value, grad = _value_and_grad(spec, params.values, batch.inputs, y)
    return value, ParamVector(grad, params.layout)


def sgd_epoch(
    spec: ModelSpec,
    params: ParamVector,
    data: Batch,
    lr: float,
    batch_size: Optional[int] = None,
    seed=None,
) -> ParamVector:
    """One pass of plain SGD over ``data``.

    ``batch_size=None`` (or any size >= len(data)) takes a single full-gradient
    step. Otherwise mini-batches follow a permutation drawn from ``seed``.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check(spec, params, data.inputs)
    n = len(data)
    if n == 0:
        raise DimensionError("empty batch")
    x = data.inputs
    y = _labels(spec, data) if spec.is_classifier else None
    values = params.values.copy()
    if batch_size is None or batch_size >= n:
        values -= lr * _value_and_grad(spec, values, x, y)[1]
        return ParamVector(values, params.layout)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        values -= lr * _value_and_grad(spec, values, x[idx], None if y is None else y[idx])[1]
    return ParamVector(values, params.layout)


def predict(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(forward(spec, params, inputs), axis=1)


def evaluate(spec: ModelSpec, params: ParamVector, data: Batch) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)`` of a classifier on ``data``."""
    if not spec.is_classifier:
        raise ValueError("evaluate() needs a classifier spec")
    _check(spec, params, data.inputs)
    y = _labels(spec, data)
    out, _ = _forward(spec, _unpack(spec, params.values), data.inputs)
    accuracy = float(np.mean(np.argmax(out, axis=1) == y))
    value = float(-_log_softmax(out)[np.arange(len(y)), y].mean())
    return accuracy, value


def reconstruction_errors(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Per-row mean squared reconstruction error of an autoencoder."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    out = forward(spec, params, inputs)
    return np.mean((out - inputs) ** 2, axis=1)


def _stacked_value_and_grad(spec: ModelSpec, values: np.ndarray, x: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Classifier gradients for ``m`` models at once.

    ``values`` is ``(m, P)``, ``x`` is ``(m, b, input_dim)`` and ``onehot``
    is ``(m, b, output_dim)``.
    """
    m, n = x.shape[0], x.shape[1]
    slices = _slices(spec)
    layers = [(values[:, ws].reshape(m, *shape), values[:, bs]) for ws, shape, bs in slices]
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b[:, None, :]
        if i < len(layers) - 1:
            h = np.tanh(z) if spec.activation == "tanh" else z
            acts.append(h)
        else:
            h = z
    shifted = h - h.max(axis=2, keepdims=True)
    dz = np.exp(shifted)
    dz /= dz.sum(axis=2, keepdims=True)
    dz -= onehot
    dz /= n
    grad = np.empty_like(values)
    for i in range(len(layers) - 1, -1, -1):
        ws, _, bs = slices[i]
        a = acts[i]
        grad[:, ws] = (a.transpose(0, 2, 1) @ dz).reshape(m, -1)
        grad[:, bs] = dz.sum(axis=1)
        if i > 0:
            dh = dz @ layers[i][0].transpose(0, 2, 1)
            dz = dh * (1.0 - a**2) if spec.activation == "tanh" else dh
    return grad


def sgd_epoch_many(
    spec: ModelSpec,
    params: list[ParamVector],
    data: list[Batch],
    lr: float,
    batch_size: Optional[int],
    seeds: list,
) -> list[ParamVector]:
    """``[sgd_epoch(spec, p, d, lr, batch_size, s) ...]`` computed in lockstep.

    Models whose datasets share one size are stepped together with stacked
    matrix products; each keeps its own shuffle seed. Results agree with the
    one-at-a-time loop to rounding. Unequal sizes, autoencoders and
    single models fall back to that loop.
    """
    sizes = {len(d) for d in data}
    if len(params) < 2 or len(sizes) != 1 or not spec.is_classifier:
        return [sgd_epoch(spec, p, d, lr, batch_size, s) for p, d, s in zip(params, data, seeds)]
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for p, d in zip(params, data):
        _check(spec, p, d.inputs)
    (n,) = sizes
    if n == 0:
        raise DimensionError("empty batch")
    x = np.stack([d.inputs for d in data])
    y = np.stack([_labels(spec, d) for d in data])
    onehot = np.eye(spec.output_dim)[y]
    values = np.stack([p.values for p in params])
    if batch_size is None or batch_size >= n:
        values -= lr * _stacked_value_and_grad(spec, values, x, onehot)
    else:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        orders = np.stack([np.random.default_rng(s).permutation(n) for s in seeds])
        models = np.arange(len(params))[:, None]
        for start in range(0, n, batch_size):
            idx = orders[:, start : start + batch_size]
            values -= lr * _stacked_value_and_grad(spec, values, x[models, idx], onehot[models, idx])
    return [ParamVector(v, p.layout) for v, p in zip(values, params)]
