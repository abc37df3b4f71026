"""GRU context encoder: folds the context window x_{1:T} into a hidden state h_T.

Gate convention (row-vector form, x is the previous observation):

    z  = sigmoid(x W_z + h U_z + b_z)          update gate
    r  = sigmoid(x W_r + h U_r + b_r)          reset gate
    h~ = tanh(x W_h + (r * h) U_h + b_h)       candidate
    h' = (1 - z) * h + z * h~
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import expit

from src.codec import decode_array, encode_array
from src.errors import InputError, ShapeError
from src.numerics import check_finite, matmul, outer_sum

GRU_FIELDS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")


@dataclass
class GruParams:
    """Weights of a single GRU cell with input size D and hidden size R."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        d, r = self.w_z.shape
        for name in GRU_FIELDS:
            arr = getattr(self, name)
            if name.startswith("w_"):
                expected = (d, r)
            elif name.startswith("u_"):
                expected = (r, r)
            else:
                expected = (r,)
            if arr.shape != expected:
                raise ShapeError(f"GRU {name} has shape {arr.shape}, expected {expected}")

    @classmethod
    def zeros(cls, input_dim, hidden_dim):
        d, r = input_dim, hidden_dim
        return cls(*(np.zeros((d, r)) for _ in range(3)),
                   *(np.zeros((r, r)) for _ in range(3)),
                   *(np.zeros(r) for _ in range(3)))

    @classmethod
    def init(cls, rng, input_dim, hidden_dim):
        """Scaled-normal weights, zero biases."""
        d, r = input_dim, hidden_dim
        ws = [rng.normal((d, r)) / np.sqrt(d) for _ in range(3)]
        us = [rng.normal((r, r)) / np.sqrt(r) for _ in range(3)]
        return cls(*ws, *us, *(np.zeros(r) for _ in range(3)))

    @property
    def input_dim(self):
        return self.w_z.shape[0]

    @property
    def hidden_dim(self):
        return self.w_z.shape[1]

    @property
    def n_params(self):
        return sum(getattr(self, name).size for name in GRU_FIELDS)

    def flatten(self):
        return np.concatenate([getattr(self, name).ravel() for name in GRU_FIELDS])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params:
            raise ShapeError(f"Expected {self.n_params} GRU parameters, got {vector.size}")
        parts, offset = [], 0
        for name in GRU_FIELDS:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            parts.append(vector[offset:offset + size].reshape(shape).copy())
            offset += size
        return GruParams(*parts)

    def zeros_like(self):
        return GruParams.zeros(self.input_dim, self.hidden_dim)

    def to_dict(self):
        return {name: encode_array(getattr(self, name)) for name in GRU_FIELDS}

    @classmethod
    def from_dict(cls, data):
        params = cls(*(decode_array(data[name]) for name in GRU_FIELDS))
        for name in GRU_FIELDS:
            check_finite(f"GRU {name}", getattr(params, name))
        return params


@dataclass
class HiddenState:
    """Hidden vector (or batch of vectors) after t steps."""

    values: np.ndarray
    t: int = 0


@dataclass
class GruStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    candidate: np.ndarray


def _cell(params, x, h):
    z = expit(matmul(x, params.w_z) + matmul(h, params.u_z) + params.b_z)
    r = expit(matmul(x, params.w_r) + matmul(h, params.u_r) + params.b_r)
    candidate = np.tanh(matmul(x, params.w_h) + matmul(r * h, params.u_h) + params.b_h)
    h_new = (1.0 - z) * h + z * candidate
    return h_new, GruStepCache(x, h, z, r, candidate)


def gru_step(params: GruParams, x_prev, h_prev: HiddenState) -> HiddenState:
    """Advances the hidden state by one observation."""
    x = np.asarray(x_prev, dtype=np.float64)
    h = np.asarray(h_prev.values, dtype=np.float64)
    if x.shape[-1:] != (params.input_dim,):
        raise ShapeError(f"GRU expects inputs of size {params.input_dim}, got {x.shape}")
    if h.shape[-1:] != (params.hidden_dim,):
        raise ShapeError(f"GRU expects hidden size {params.hidden_dim}, got {h.shape}")
    h_new, _ = _cell(params, x, h)
    return HiddenState(h_new, h_prev.t + 1)


def _as_context(params, context):
    ctx = np.asarray(context, dtype=np.float64)
    if ctx.ndim not in (2, 3):
        raise ShapeError(f"Context must be (T, D) or (B, T, D), got {ctx.shape}")
    if ctx.shape[-2] < 1:
        raise InputError("Context window is empty")
    if ctx.shape[-1] != params.input_dim:
        raise ShapeError(
            f"Context has {ctx.shape[-1]} channels, encoder expects {params.input_dim}"
        )
    return ctx


def _initial_hidden(params, ctx, h0):
    if h0 is not None:
        return np.asarray(h0.values, dtype=np.float64)
    return np.zeros(ctx.shape[:-2] + (params.hidden_dim,))


def encode_context(params: GruParams, context, h0: Optional[HiddenState] = None) -> HiddenState:
    """Left fold of gru_step over the context rows, starting from h0 (zeros by default)."""
    ctx = _as_context(params, context)
    h = _initial_hidden(params, ctx, h0)
    for t in range(ctx.shape[-2]):
        h, _ = _cell(params, ctx[..., t, :], h)
    return HiddenState(h, ctx.shape[-2] + (h0.t if h0 is not None else 0))


def encode_with_cache(params: GruParams, context):
    """Forward pass from a zero state that keeps per-step activations for encoder_backward."""
    ctx = _as_context(params, context)
    h = _initial_hidden(params, ctx, None)
    caches: List[GruStepCache] = []
    for t in range(ctx.shape[-2]):
        h, cache = _cell(params, ctx[..., t, :], h)
        caches.append(cache)
    return HiddenState(h, ctx.shape[-2]), caches


def _bias_sum(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def encoder_backward(params: GruParams, context, grad_h_t, caches=None) -> GruParams:
    """Backpropagation through time: gradients of a loss with cotangent grad_h_t at h_T."""
    if caches is None:
        _, caches = encode_with_cache(params, context)
    g = np.asarray(grad_h_t, dtype=np.float64)
    if g.shape != caches[-1].h_prev.shape:
        raise ShapeError(f"Cotangent shape {g.shape} does not match hidden state")

    grads = {name: np.zeros_like(getattr(params, name)) for name in GRU_FIELDS}
    for cache in reversed(caches):
        x, h, z, r, c = cache.x, cache.h_prev, cache.z, cache.r, cache.candidate

        d_z = g * (c - h)
        d_h = g * (1.0 - z)

        d_cand = g * z * (1.0 - c * c)
        grads["w_h"] += outer_sum(x, d_cand)
        grads["u_h"] += outer_sum(r * h, d_cand)
        grads["b_h"] += _bias_sum(d_cand)
        d_rh = matmul(d_cand, params.u_h.T)
        d_h += d_rh * r

        d_r = d_rh * h * r * (1.0 - r)
        grads["w_r"] += outer_sum(x, d_r)
        grads["u_r"] += outer_sum(h, d_r)
        grads["b_r"] += _bias_sum(d_r)
        d_h += matmul(d_r, params.u_r.T)

        d_gate = d_z * z * (1.0 - z)
        grads["w_z"] += outer_sum(x, d_gate)
        grads["u_z"] += outer_sum(h, d_gate)
        grads["b_z"] += _bias_sum(d_gate)
        d_h += matmul(d_gate, params.u_z.T)

        g = d_h
    return GruParams(**grads)
