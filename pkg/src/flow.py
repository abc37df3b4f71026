"""Conditional normalising flow over the flattened H x D future.

The flow g maps a standard-normal latent z to a label y given the encoder
summary h_T. It is a stack of affine coupling layers; layer k keeps the
coordinates selected by its mask and rescales/shifts the others using networks
fed with (kept coordinates, h_T):

    inverse:  z_b = (y_b - t(y_a, h)) * exp(-s(y_a, h)),  log|det| = -sum(s)
    forward:  y_b = z_b * exp(s(z_a, h)) + t(z_a, h)

with s = s_clamp * tanh(raw / s_clamp). Densities are evaluated by running the
inverse layers in stack order; sampling runs the forward layers in reverse.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, NewType, Optional

import numpy as np

from src.codec import canonical_hash
from src.config import (
    DEFAULT_COUPLING_LAYERS,
    DEFAULT_HIDDEN_SIZE,
    DEFAULT_NET_DEPTH,
    DEFAULT_NET_WIDTH,
    DEFAULT_S_CLAMP,
)
from src.data import SeriesDataset, StandardStats
from src.encoder import GruParams, encode_context, encode_with_cache, encoder_backward
from src.errors import DensityEvaluationError, InputError, ShapeError, TrainingDivergenceError
from src.numerics import AdamState, MlpParams, adam_step, mlp_backward, mlp_forward
from src.run_config import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)

LogDensity = NewType("LogDensity", float)

LOG_2PI = math.log(2.0 * math.pi)


def alternating_masks(label_dim, n_layers):
    """Pass-through masks: even layers keep even coordinates, odd layers keep odd ones.

    With a single label coordinate nothing can be kept, so every layer
    transforms it conditioned on h_T alone.
    """
    index = np.arange(label_dim)
    masks = []
    for k in range(n_layers):
        if label_dim == 1:
            masks.append(np.zeros(1, dtype=bool))
        else:
            masks.append(index % 2 == k % 2)
    return masks


@dataclass
class CouplingLayer:
    """Affine coupling layer conditioned on the encoder summary."""

    mask: np.ndarray
    s_net: MlpParams
    t_net: MlpParams
    s_clamp: float = DEFAULT_S_CLAMP

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        n_pass, n_active = len(self.passive), len(self.active)
        if n_active == 0:
            raise InputError("Coupling mask must transform at least one coordinate")
        if self.label_dim >= 2 and n_pass == 0:
            raise InputError("Coupling mask must keep at least one coordinate when L >= 2")
        for name, net in (("s_net", self.s_net), ("t_net", self.t_net)):
            if net.out_dim != n_active or net.in_dim < n_pass:
                raise ShapeError(
                    f"{name} maps {net.in_dim} -> {net.out_dim}, layer needs "
                    f"{n_pass} + cond -> {n_active}"
                )
        if self.s_net.in_dim != self.t_net.in_dim:
            raise ShapeError("s_net and t_net must share their input size")
        if self.s_clamp <= 0:
            raise InputError("s_clamp must be positive")

    @classmethod
    def init(cls, rng, mask, cond_dim, width=DEFAULT_NET_WIDTH, depth=DEFAULT_NET_DEPTH,
             s_clamp=DEFAULT_S_CLAMP):
        """Random hidden layers; zero output layers so the coupling starts as the identity."""
        mask = np.asarray(mask, dtype=bool)
        sizes = [int(mask.sum()) + cond_dim] + [width] * depth + [int((~mask).sum())]
        return cls(mask, MlpParams.init(rng, sizes), MlpParams.init(rng, sizes), s_clamp)

    @property
    def label_dim(self):
        return self.mask.size

    @property
    def passive(self):
        return np.flatnonzero(self.mask)

    @property
    def active(self):
        return np.flatnonzero(~self.mask)

    @property
    def cond_dim(self):
        return self.s_net.in_dim - len(self.passive)

    @property
    def n_params(self):
        return self.s_net.n_params + self.t_net.n_params

    def flatten(self):
        return np.concatenate([self.s_net.flatten(), self.t_net.flatten()])

    def unflatten(self, vector):
        n_s = self.s_net.n_params
        return replace(self, s_net=self.s_net.unflatten(vector[:n_s]),
                       t_net=self.t_net.unflatten(vector[n_s:]))

    def to_dict(self):
        return {
            "mask": self.mask.astype(int).tolist(),
            "s_net": self.s_net.to_dict(),
            "t_net": self.t_net.to_dict(),
            "s_clamp": self.s_clamp,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            np.array(data["mask"], dtype=bool),
            MlpParams.from_dict(data["s_net"]),
            MlpParams.from_dict(data["t_net"]),
            float(data["s_clamp"]),
        )


@dataclass
class CouplingCache:
    s_cache: object
    t_cache: object
    bounded: np.ndarray
    scale: np.ndarray
    z_active: np.ndarray


def _conditioner_input(layer, y, h):
    y = np.asarray(y, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if y.shape[-1:] != (layer.label_dim,):
        raise ShapeError(
            f"Coupling layer expects {layer.label_dim} label coordinates, got {y.shape}"
        )
    if h.shape[-1:] != (layer.cond_dim,):
        raise ShapeError(
            f"Coupling layer expects conditioning of size {layer.cond_dim}, got {h.shape}"
        )
    batch = np.broadcast_shapes(y.shape[:-1], h.shape[:-1])
    y = np.broadcast_to(y, batch + y.shape[-1:])
    kept = y[..., layer.passive]
    cond = np.broadcast_to(h, batch + h.shape[-1:])
    return y, np.concatenate([kept, cond], axis=-1)


def _scale_and_shift(layer, u):
    raw, s_cache = mlp_forward(layer.s_net, u)
    shift, t_cache = mlp_forward(layer.t_net, u)
    bounded = np.tanh(raw / layer.s_clamp)
    scale = layer.s_clamp * bounded
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(shift))):
        raise DensityEvaluationError("Coupling network produced non-finite scale or shift")
    return scale, shift, bounded, s_cache, t_cache


def coupling_inverse(layer: CouplingLayer, x, h):
    """Label -> latent direction of one layer; returns (z, log|det J|)."""
    x, u = _conditioner_input(layer, x, h)
    scale, shift, _, _, _ = _scale_and_shift(layer, u)
    z = np.array(x, dtype=np.float64)
    z[..., layer.active] = (x[..., layer.active] - shift) * np.exp(-scale)
    return z, -np.sum(scale, axis=-1)


def coupling_forward(layer: CouplingLayer, z, h):
    """Latent -> label direction of one layer; exact inverse of coupling_inverse."""
    z, u = _conditioner_input(layer, z, h)
    scale, shift, _, _, _ = _scale_and_shift(layer, u)
    x = np.array(z, dtype=np.float64)
    x[..., layer.active] = z[..., layer.active] * np.exp(scale) + shift
    return x


def _coupling_inverse_cached(layer, x, h):
    x, u = _conditioner_input(layer, x, h)
    scale, shift, bounded, s_cache, t_cache = _scale_and_shift(layer, u)
    z = np.array(x, dtype=np.float64)
    z_active = (x[..., layer.active] - shift) * np.exp(-scale)
    z[..., layer.active] = z_active
    cache = CouplingCache(s_cache, t_cache, bounded, scale, z_active)
    return z, -np.sum(scale, axis=-1), cache


def _coupling_inverse_backward(layer, cache, grad_z, grad_log_det):
    """Gradients of an objective given its cotangents at z and at log|det|."""
    inv_scale = np.exp(-cache.scale)
    grad_z_active = grad_z[..., layer.active]
    grad_x = np.array(grad_z)
    grad_x[..., layer.active] = grad_z_active * inv_scale
    grad_shift = -grad_z_active * inv_scale
    grad_scale = -grad_z_active * cache.z_active - grad_log_det[..., None]
    grad_raw = grad_scale * (1.0 - cache.bounded * cache.bounded)

    s_grads, grad_u_s = mlp_backward(layer.s_net, cache.s_cache, grad_raw)
    t_grads, grad_u_t = mlp_backward(layer.t_net, cache.t_cache, grad_shift)
    grad_u = grad_u_s + grad_u_t
    n_pass = len(layer.passive)
    grad_x[..., layer.passive] += grad_u[..., :n_pass]
    layer_grads = replace(layer, s_net=s_grads, t_net=t_grads)
    return layer_grads, grad_x, grad_u[..., n_pass:]


@dataclass
class FlowModel:
    """GRU encoder plus a stack of conditional coupling layers over L = H * D labels."""

    encoder: GruParams
    layers: List[CouplingLayer]
    context_len: int
    horizon: int
    stats: Optional[StandardStats] = None
    config_hash: str = ""

    def __post_init__(self):
        if len(self.layers) < 2:
            raise InputError("A flow needs at least 2 coupling layers")
        transformed = np.zeros(self.label_dim, dtype=bool)
        for k, layer in enumerate(self.layers):
            if layer.label_dim != self.label_dim:
                raise ShapeError(
                    f"Layer {k} covers {layer.label_dim} coordinates, expected {self.label_dim}"
                )
            if layer.cond_dim != self.encoder.hidden_dim:
                raise ShapeError(f"Layer {k} is conditioned on {layer.cond_dim} values, "
                                 f"encoder emits {self.encoder.hidden_dim}")
            transformed |= ~layer.mask
        if not transformed.all():
            raise InputError("Every label coordinate must be transformed by some layer")

    @classmethod
    def init(cls, rng, context_len, horizon, dim, n_layers=DEFAULT_COUPLING_LAYERS,
             hidden_dim=DEFAULT_HIDDEN_SIZE, net_width=DEFAULT_NET_WIDTH,
             net_depth=DEFAULT_NET_DEPTH, s_clamp=DEFAULT_S_CLAMP, stats=None, config_hash=""):
        """Identity-initialised flow with a randomly initialised encoder."""
        encoder = GruParams.init(rng, dim, hidden_dim)
        layers = [
            CouplingLayer.init(rng, mask, hidden_dim, net_width, net_depth, s_clamp)
            for mask in alternating_masks(horizon * dim, n_layers)
        ]
        return cls(encoder, layers, context_len, horizon, stats, config_hash)

    @classmethod
    def from_config(cls, rng, context_len, horizon, dim, config: ModelConfig, stats=None,
                    config_hash=""):
        return cls.init(rng, context_len, horizon, dim, config.n_layers, config.hidden_dim,
                        config.net_width, config.net_depth, config.s_clamp, stats, config_hash)

    @property
    def dim(self):
        return self.encoder.input_dim

    @property
    def label_dim(self):
        return self.horizon * self.dim

    @property
    def n_params(self):
        return self.encoder.n_params + sum(layer.n_params for layer in self.layers)

    def flatten(self):
        return np.concatenate([self.encoder.flatten()] + [layer.flatten() for layer in self.layers])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params:
            raise ShapeError(f"Expected {self.n_params} model parameters, got {vector.size}")
        offset = self.encoder.n_params
        encoder = self.encoder.unflatten(vector[:offset])
        layers = []
        for layer in self.layers:
            layers.append(layer.unflatten(vector[offset:offset + layer.n_params]))
            offset += layer.n_params
        return replace(self, encoder=encoder, layers=layers)

    def raw_log_prob_offset(self):
        """Add to a standardised log-density to get the raw-space log-density."""
        return 0.0 if self.stats is None else self.stats.label_log_jacobian(self.horizon)

    def to_dict(self):
        return {
            "context_len": self.context_len,
            "horizon": self.horizon,
            "dim": self.dim,
            "label_dim": self.label_dim,
            "hidden_dim": self.encoder.hidden_dim,
            "base_distribution": "standard_normal",
            "stats": self.stats.to_dict() if self.stats is not None else None,
            "config_hash": self.config_hash,
            "encoder": self.encoder.to_dict(),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data):
        stats = StandardStats.from_dict(data["stats"]) if data.get("stats") else None
        return cls(
            GruParams.from_dict(data["encoder"]),
            [CouplingLayer.from_dict(item) for item in data["layers"]],
            int(data["context_len"]),
            int(data["horizon"]),
            stats,
            data.get("config_hash", ""),
        )

    def model_hash(self):
        return canonical_hash(self.to_dict())


def _check_labels(model, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1:] != (model.label_dim,):
        raise ShapeError(f"Labels must have {model.label_dim} coordinates, got shape {y.shape}")
    return y


def _base_log_prob(z, label_dim):
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * label_dim * LOG_2PI


def flow_log_prob(model: FlowModel, context, y):
    """Conditional log-density of standardised labels y given context.

    context (T, D) with y (L,) gives a float; context (T, D) with y (N, L)
    scores N candidate labels for one series; context (B, T, D) with y (B, L)
    scores B series.
    """
    y = _check_labels(model, y)
    h = encode_context(model.encoder, context).values
    z = y
    log_det = 0.0
    for layer in model.layers:
        z, layer_log_det = coupling_inverse(layer, z, h)
        log_det = log_det + layer_log_det
    out = _base_log_prob(z, model.label_dim) + log_det
    if not np.all(np.isfinite(out)):
        raise DensityEvaluationError("Log-density evaluation produced a non-finite value")
    if np.ndim(out) == 0:
        return LogDensity(float(out))
    return out


def flow_sample(model: FlowModel, context, rng, n, raw=False):
    """n label draws for one context; standardised unless raw is set."""
    if n < 0:
        raise InputError("Sample count must be non-negative")
    h = encode_context(model.encoder, context).values
    x = rng.normal((n, model.label_dim))
    for layer in reversed(model.layers):
        x = coupling_forward(layer, x, h)
    if raw:
        if model.stats is None:
            raise InputError("Model carries no standardisation statistics")
        x = model.stats.invert_labels(x)
    return x


def nll_and_grad(model: FlowModel, contexts, futures):
    """Mean negative log-likelihood over a minibatch and its flat parameter gradient."""
    futures = _check_labels(model, futures)
    batch = futures.shape[0]
    hidden, encoder_caches = encode_with_cache(model.encoder, contexts)
    h = hidden.values

    z = futures
    log_det = np.zeros(batch)
    caches = []
    for layer in model.layers:
        z, layer_log_det, cache = _coupling_inverse_cached(layer, z, h)
        log_det = log_det + layer_log_det
        caches.append(cache)
    loss = -float(np.mean(_base_log_prob(z, model.label_dim) + log_det))
    if not math.isfinite(loss):
        raise TrainingDivergenceError("Negative log-likelihood is not finite")

    grad_z = z / batch
    grad_log_det = np.full(batch, -1.0 / batch)
    grad_h = np.zeros_like(h)
    layer_grads = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        grads, grad_z, layer_grad_h = _coupling_inverse_backward(layer, cache, grad_z, grad_log_det)
        grad_h += layer_grad_h
        layer_grads.append(grads)
    encoder_grads = encoder_backward(model.encoder, contexts, grad_h, caches=encoder_caches)
    flat = np.concatenate([encoder_grads.flatten()] + [g.flatten() for g in reversed(layer_grads)])
    return loss, flat


def _check_dataset(model, dataset):
    if dataset.n < 1:
        raise InputError("Training set is empty")
    layout = (dataset.context_len, dataset.horizon, dataset.dim)
    if layout != (model.context_len, model.horizon, model.dim):
        raise ShapeError(
            f"Dataset layout (T={dataset.context_len}, H={dataset.horizon}, D={dataset.dim}) "
            f"does not match model (T={model.context_len}, H={model.horizon}, D={model.dim})"
        )


def epoch_learning_rate(config: TrainConfig, epoch):
    """Cosine decay from learning_rate at epoch 1 to final_lr_fraction x learning_rate last."""
    if config.epochs <= 1:
        return config.learning_rate
    progress = (epoch - 1) / (config.epochs - 1)
    floor = config.final_lr_fraction
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.learning_rate * (floor + (1.0 - floor) * cosine)


def train_mle(model: FlowModel, train_set: SeriesDataset, config: TrainConfig, rng):
    """Minibatch Adam on the conditional NLL; returns the fitted model and per-epoch mean NLL."""
    _check_dataset(model, train_set)
    contexts, futures = train_set.contexts, train_set.futures
    n = train_set.n
    params = model.flatten()
    state = AdamState.fresh(params.size, lr=config.learning_rate)
    trace: List[float] = []

    for epoch in range(1, config.epochs + 1):
        state = replace(state, lr=epoch_learning_rate(config, epoch))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grad = nll_and_grad(model.unflatten(params), contexts[idx], futures[idx])
                params, state = adam_step(state, params, grad)
            except (TrainingDivergenceError, DensityEvaluationError) as e:
                raise TrainingDivergenceError(f"Training diverged in epoch {epoch}: {e}",
                                              last_finite_epoch=len(trace)) from e
            total += loss * len(idx)
        mean_nll = total / n
        trace.append(mean_nll)
        if epoch == 1 or epoch % config.log_every == 0 or epoch == config.epochs:
            logger.info("epoch %d/%d mean NLL %.5f", epoch, config.epochs, mean_nll)

    if config.epochs == 0:
        return model, trace
    return model.unflatten(params), trace
