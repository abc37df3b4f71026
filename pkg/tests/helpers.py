"""Builders shared by the test modules."""

import numpy as np

from src.data import SeriesDataset
from src.flow import FlowModel, coupling_inverse
from src.encoder import encode_context
from src.numerics import SeededRng

LOG_2PI = np.log(2.0 * np.pi)


def normal_log_pdf(y):
    y = np.asarray(y, dtype=np.float64)
    return -0.5 * np.sum(y * y, axis=-1) - 0.5 * y.shape[-1] * LOG_2PI


def small_flow(seed=0, context_len=3, horizon=1, dim=2, n_layers=2, hidden_dim=3, net_width=4,
               net_depth=1, scale=None):
    """A tiny flow; with scale set, every parameter is redrawn as scale * N(0, 1)."""
    rng = SeededRng(seed)
    model = FlowModel.init(rng, context_len, horizon, dim, n_layers=n_layers, hidden_dim=hidden_dim,
                           net_width=net_width, net_depth=net_depth)
    if scale is not None:
        model = model.unflatten(scale * rng.normal(model.n_params))
    return model


def random_dataset(n, context_len, horizon, dim, seed=0):
    values = SeededRng(seed).normal((n, context_len + horizon, dim))
    return SeriesDataset(values, context_len, horizon, {"generator": "test", "seed": seed})


def full_inverse(model, context, y):
    """Label -> latent through every layer; returns (z, total log|det|)."""
    h = encode_context(model.encoder, context).values
    z, total = np.asarray(y, dtype=np.float64), 0.0
    for layer in model.layers:
        z, log_det = coupling_inverse(layer, z, h)
        total = total + log_det
    return z, total


def jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector function, one column per input coordinate."""
    x = np.asarray(x, dtype=np.float64)
    columns = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        columns.append((f(x + step) - f(x - step)) / (2.0 * h))
    return np.stack(columns, axis=1)
