"""Dense numerics: small MLPs with analytic gradients, Adam and a seeded RNG.

Every network in the package runs on float64 numpy arrays. A "vector" may
also be a batch of row vectors (shape ``(B, n)``); all operations act row-wise.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from src.codec import decode_array, encode_array
from src.config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LEARNING_RATE
from src.errors import InputError, OracleError, ShapeError, TrainingDivergenceError

ACTIVATIONS = ("tanh", "identity")


def matmul(x, w):
    """Row-wise product ``x @ w`` for a vector or a batch of row vectors.

    einsum (without BLAS dispatch) accumulates each output row in the same
    order whatever the batch size, so a series evaluated alone matches the
    same series evaluated inside a batch bit for bit.
    """
    return np.einsum("...i,ij->...j", x, w)


def outer_sum(a, b):
    """Sum over every leading axis of the outer products a[..., i] * b[..., j]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"Batch shapes differ: {a.shape} vs {b.shape}")
    return np.einsum("bi,bj->ij", a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1]))


def check_finite(name, array, error_cls=InputError):
    """Raises error_cls when array holds a NaN or an infinity."""
    if not np.all(np.isfinite(array)):
        raise error_cls(f"{name} contains non-finite entries")


def dense_matrix(data, rows, cols):
    """Builds a rows x cols float64 matrix from row-major data."""
    arr = np.asarray(data, dtype=np.float64).ravel()
    if rows < 0 or cols < 0 or arr.size != rows * cols:
        raise ShapeError(f"Expected {rows}x{cols}={rows * cols} entries, got {arr.size}")
    arr = arr.reshape(rows, cols)
    check_finite("matrix", arr)
    return arr


@dataclass
class DenseLayer:
    """One affine map followed by an activation."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def to_dict(self):
        return {
            "weight": encode_array(self.weight),
            "bias": encode_array(self.bias),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(decode_array(data["weight"]), decode_array(data["bias"]), data["activation"])


@dataclass
class MlpParams:
    """A chain of dense layers."""

    layers: List[DenseLayer]

    def __post_init__(self):
        self.validate(finite=False)

    def validate(self, finite=True):
        if not self.layers:
            raise ShapeError("An MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise InputError(f"Unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"Layer {i}: weight {layer.weight.shape}, bias {layer.bias.shape}")
            if i > 0 and self.layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"Layer {i} takes {layer.in_dim} inputs but layer {i - 1} "
                    f"emits {self.layers[i - 1].out_dim}"
                )
            if finite:
                check_finite(f"layer {i} weight", layer.weight)
                check_finite(f"layer {i} bias", layer.bias)

    @classmethod
    def init(cls, rng, sizes, hidden_activation="tanh", output_activation="identity",
             zero_output=True):
        """Random MLP with layer widths `sizes`; the output layer starts at zero by default."""
        layers = []
        n_layers = len(sizes) - 1
        for k in range(n_layers):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            last = k == n_layers - 1
            if last and zero_output:
                weight = np.zeros((fan_in, fan_out))
            else:
                weight = rng.normal((fan_in, fan_out)) / math.sqrt(max(fan_in, 1))
            activation = output_activation if last else hidden_activation
            layers.append(DenseLayer(weight, np.zeros(fan_out), activation))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def n_params(self):
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def flatten(self):
        """All weights and biases as one vector, layer by layer."""
        parts = []
        for layer in self.layers:
            parts.append(layer.weight.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def unflatten(self, vector):
        """Same architecture with parameters read from `vector`."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params:
            raise ShapeError(f"Expected {self.n_params} parameters, got {vector.size}")
        layers, offset = [], 0
        for layer in self.layers:
            w_size = layer.weight.size
            weight = vector[offset:offset + w_size].reshape(layer.weight.shape).copy()
            offset += w_size
            bias = vector[offset:offset + layer.out_dim].copy()
            offset += layer.out_dim
            layers.append(DenseLayer(weight, bias, layer.activation))
        return MlpParams(layers)

    def zeros_like(self):
        return self.unflatten(np.zeros(self.n_params))

    def to_dict(self):
        return [layer.to_dict() for layer in self.layers]

    @classmethod
    def from_dict(cls, data):
        params = cls([DenseLayer.from_dict(item) for item in data])
        params.validate()
        return params


@dataclass
class MlpCache:
    """Per-layer inputs and post-activation outputs of one forward pass."""

    inputs: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, x) -> Tuple[np.ndarray, MlpCache]:
    """Evaluates the MLP on a vector or a batch of row vectors."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] != params.in_dim:
        raise ShapeError(f"MLP expects {params.in_dim} inputs, got shape {a.shape}")
    cache = MlpCache()
    for layer in params.layers:
        cache.inputs.append(a)
        pre = matmul(a, layer.weight) + layer.bias
        a = np.tanh(pre) if layer.activation == "tanh" else pre
        cache.outputs.append(a)
    return a, cache


def mlp_backward(params: MlpParams, cache: MlpCache, grad_output) -> Tuple[MlpParams, np.ndarray]:
    """Reverse pass: parameter gradients (summed over the batch) and input gradient."""
    g = np.asarray(grad_output, dtype=np.float64)
    if len(cache.inputs) != len(params.layers) or g.shape != cache.outputs[-1].shape:
        raise ShapeError("Cache does not belong to these parameters")
    grads = []
    for layer, inp, out in zip(reversed(params.layers), reversed(cache.inputs),
                               reversed(cache.outputs)):
        if inp.shape[-1] != layer.in_dim or out.shape[-1] != layer.out_dim:
            raise ShapeError("Cache does not belong to these parameters")
        if layer.activation == "tanh":
            g = g * (1.0 - out * out)
        grad_w = outer_sum(inp, g)
        grad_b = g.reshape(-1, layer.out_dim).sum(axis=0)
        grads.append(DenseLayer(grad_w, grad_b, layer.activation))
        g = matmul(g, layer.weight.T)
    return MlpParams(grads[::-1]), g


@dataclass
class AdamState:
    """Moment estimates and hyperparameters of the Adam optimiser."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, n_params, lr=DEFAULT_LEARNING_RATE, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
              eps=ADAM_EPS):
        return cls(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeError(
            f"Adam shapes differ: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergenceError("Non-finite gradient entry")

    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise InputError("Finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        x_plus = x.copy()
        x_minus = x.copy()
        x_plus.flat[i] += h
        x_minus.flat[i] -= h
        f_plus, f_minus = float(f(x_plus)), float(f(x_minus))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleError(f"Non-finite function value around coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


class SeededRng:
    """Counter-based (Philox) random stream; one seed fixes every draw."""

    def __init__(self, seed):
        self.seed = int(seed) % (1 << 64)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"

    def random(self, size=None):
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def normal(self, size=None):
        """Standard normal draws via Box-Muller on the uniform stream."""
        if size is None:
            shape: Tuple[int, ...] = ()
        elif isinstance(size, (int, np.integer)):
            shape = (int(size),)
        else:
            shape = tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        draws = out[:n].reshape(shape)
        return float(draws) if size is None else draws

    def spawn(self, key):
        """Independent child stream derived from this seed and an integer key."""
        return SeededRng((self.seed * 0x9E3779B97F4A7C15 + int(key) + 1) % (1 << 64))


def standard_normal_sample(rng: SeededRng, n: int) -> np.ndarray:
    """n i.i.d. standard normal draws."""
    if n < 0:
        raise InputError("Sample count must be non-negative")
    return rng.normal(n)
