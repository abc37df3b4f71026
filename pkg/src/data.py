"""Series datasets: synthetic generators, CSV ingestion, splitting and standardisation."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from src.config import (
    BIMODAL_CONTEXT_SIGMA,
    BIMODAL_MODE_OFFSET,
    BIMODAL_MODE_STD,
    PARTICLE_OMEGA_RANGE,
    PARTICLE_RHO,
    SERIES_ID_COLUMN,
    TIME_COLUMN,
    VALUE_PREFIX,
)
from src.errors import DegenerateDataError, ExportError, InputError, ParseError, ShapeError
from src.numerics import SeededRng, check_finite

logger = logging.getLogger(__name__)


@dataclass
class StandardStats:
    """Per-coordinate mean and standard deviation taken from the training split."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("Standardisation mean and std must be vectors of equal length")
        if not np.all(np.isfinite(self.std)) or np.any(self.std <= 0):
            raise DegenerateDataError("Standard deviation must be positive in every coordinate")

    @property
    def dim(self):
        return self.mean.size

    def apply(self, values):
        """z-scores an array whose last axis holds the D coordinates."""
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def apply_labels(self, labels):
        """z-scores flattened futures (last axis H*D, step-major)."""
        labels = np.asarray(labels, dtype=np.float64)
        horizon = labels.shape[-1] // self.dim
        return (labels - np.tile(self.mean, horizon)) / np.tile(self.std, horizon)

    def invert_labels(self, labels):
        labels = np.asarray(labels, dtype=np.float64)
        horizon = labels.shape[-1] // self.dim
        return labels * np.tile(self.std, horizon) + np.tile(self.mean, horizon)

    def label_log_jacobian(self, horizon):
        """log|det| of the raw -> standardised label map: -H * sum(log std)."""
        return -horizon * float(np.sum(np.log(self.std)))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["mean"], dtype=np.float64),
                   np.asarray(data["std"], dtype=np.float64))


@dataclass
class SeriesDataset:
    """n series of shape (T+H, D) sharing a context length T and horizon H."""

    values: np.ndarray
    context_len: int
    horizon: int
    provenance: dict = field(default_factory=dict)
    stats: Optional[StandardStats] = None
    latent: Optional[dict] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.context_len < 1 or self.horizon < 1:
            raise InputError("Context length and horizon must both be at least 1")
        if self.values.ndim != 3 or self.values.shape[1] != self.context_len + self.horizon:
            raise ShapeError(
                f"Series array must be (n, {self.context_len + self.horizon}, D), "
                f"got {self.values.shape}"
            )
        check_finite("series values", self.values)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[2]

    @property
    def label_dim(self):
        return self.horizon * self.dim

    @property
    def contexts(self):
        return self.values[:, :self.context_len, :]

    @property
    def futures(self):
        """Futures flattened step-major: label index j = step * D + d."""
        return self.values[:, self.context_len:, :].reshape(self.n, self.label_dim)

    def series(self, index):
        return self.values[index]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        latent = None
        if self.latent is not None:
            latent = {key: np.asarray(value)[indices] for key, value in self.latent.items()}
        return replace(self, values=self.values[indices], latent=latent)

    def metadata(self):
        return {
            "n": self.n,
            "context_len": self.context_len,
            "horizon": self.horizon,
            "dim": self.dim,
            "provenance": self.provenance,
            "standardized": self.stats is not None,
        }


@dataclass
class SplitIndices:
    """Disjoint train / calibration / test index lists."""

    train: np.ndarray
    calibration: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.calibration = np.asarray(self.calibration, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        joined = np.concatenate([self.train, self.calibration, self.test])
        if np.unique(joined).size != joined.size:
            raise InputError("Split index lists overlap")

    def to_dict(self):
        return {
            "train": self.train.tolist(),
            "calibration": self.calibration.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["train"], data["calibration"], data["test"])


def _particle_paths(rng, n, length, sigma, rho, omega_range):
    """Damped rotations x_{t+1} = rho R(omega) x_t + N(0, sigma^2 I)."""
    omega = rng.uniform(omega_range[0], omega_range[1], n)
    cos, sin = np.cos(omega), np.sin(omega)
    paths = np.empty((n, length, 2))
    paths[:, 0, :] = rng.uniform(-1.0, 1.0, (n, 2))
    noise = sigma * rng.normal((n, max(length - 1, 0), 2))
    for t in range(length - 1):
        prev = paths[:, t, :]
        rotated = np.stack(
            [cos * prev[:, 0] - sin * prev[:, 1], sin * prev[:, 0] + cos * prev[:, 1]], axis=1
        )
        paths[:, t + 1, :] = rho * rotated + noise[:, t, :]
    return paths, omega


def particle_drift(points, omega, rho=PARTICLE_RHO):
    """Deterministic part of one particle step for points of shape (n, 2)."""
    cos, sin = np.cos(omega), np.sin(omega)
    return rho * np.stack(
        [cos * points[:, 0] - sin * points[:, 1], sin * points[:, 0] + cos * points[:, 1]], axis=1
    )


def gen_particle(n, context_len, horizon, sigma, seed, rho=PARTICLE_RHO,
                 omega_range=PARTICLE_OMEGA_RANGE) -> SeriesDataset:
    """Two-dimensional noisy damped-rotation trajectories."""
    if n < 1 or context_len < 1 or horizon < 1:
        raise InputError("n, context length and horizon must be at least 1")
    if sigma <= 0:
        raise InputError("Noise level sigma must be positive")
    rng = SeededRng(seed)
    paths, omega = _particle_paths(rng, n, context_len + horizon, sigma, rho, omega_range)
    logger.info("Generated %d particle series (T=%d, H=%d, sigma=%g)",
                n, context_len, horizon, sigma)
    provenance = {
        "generator": "particle",
        "seed": int(seed),
        "sigma": float(sigma),
        "rho": float(rho),
    }
    return SeriesDataset(paths, context_len, horizon, provenance, latent={"omega": omega})


def gen_bimodal(n, context_len, horizon=1, seed=0, offset=BIMODAL_MODE_OFFSET,
                mode_std=BIMODAL_MODE_STD, sigma=BIMODAL_CONTEXT_SIGMA) -> SeriesDataset:
    """Particle contexts followed by a future drawn from one of two far-apart modes.

    The mode is a fair coin flip independent of the context; both coordinates of
    every future step sit at +offset or -offset plus N(0, mode_std^2) noise.
    """
    if n < 1 or context_len < 1 or horizon < 1:
        raise InputError("n, context length and horizon must be at least 1")
    if mode_std <= 0:
        raise InputError("Mode standard deviation must be positive")
    rng = SeededRng(seed)
    contexts, _ = _particle_paths(rng, n, context_len, sigma, PARTICLE_RHO, PARTICLE_OMEGA_RANGE)
    mode = (rng.random(n) < 0.5).astype(np.int64)
    centre = np.where(mode[:, None] == 1, offset, -offset) * np.ones((n, 2))
    futures = centre[:, None, :] + mode_std * rng.normal((n, horizon, 2))
    values = np.concatenate([contexts, futures], axis=1)
    logger.info("Generated %d bimodal series (T=%d, H=%d)", n, context_len, horizon)
    provenance = {
        "generator": "bimodal",
        "seed": int(seed),
        "offset": float(offset),
        "mode_std": float(mode_std),
        "sigma": float(sigma),
    }
    return SeriesDataset(values, context_len, horizon, provenance, latent={"mode": mode})


def bimodal_separation(offset=BIMODAL_MODE_OFFSET, dim=2):
    """Euclidean distance between the two bimodal mode centres."""
    return 2.0 * offset * np.sqrt(dim)


@dataclass
class SeriesSchema:
    """Expected layout of a series CSV; n and dim are inferred when None."""

    context_len: int
    horizon: int
    n: Optional[int] = None
    dim: Optional[int] = None


def _value_columns(dim):
    return [f"{VALUE_PREFIX}{d}" for d in range(dim)]


def write_csv(dataset: SeriesDataset, path):
    """Writes one row per (series, step): series_id, t, v0..v{D-1}."""
    n, length, dim = dataset.values.shape
    frame = pd.DataFrame(dataset.values.reshape(n * length, dim), columns=_value_columns(dim))
    frame.insert(0, TIME_COLUMN, np.tile(np.arange(length), n))
    frame.insert(0, SERIES_ID_COLUMN, np.repeat(np.arange(n), length))
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Wrote %d series to %s", n, path)


def _first_bad_row(column):
    """Index of the first cell that is missing or fails to parse as a number."""
    coerced = pd.to_numeric(column, errors="coerce")
    bad = np.flatnonzero(coerced.isna().to_numpy())
    return (int(bad[0]), coerced) if bad.size else (None, coerced)


def load_csv(path, schema: SeriesSchema) -> SeriesDataset:
    """Parses a series CSV, validating complete contiguous steps for every series."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"Series file {path} does not exist")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(f"Unreadable CSV: {e}") from e

    columns = list(frame.columns)
    dim = schema.dim if schema.dim is not None else len(columns) - 2
    expected = [SERIES_ID_COLUMN, TIME_COLUMN] + _value_columns(dim)
    if dim < 1 or columns != expected:
        raise ParseError(f"Expected header {','.join(expected)}, got {','.join(columns)}", row=1)

    numeric = {}
    for column in columns:
        bad, coerced = _first_bad_row(frame[column])
        if bad is not None:
            raw = frame[column].iloc[bad]
            raise ParseError(f"Non-numeric or missing value {raw!r} in column {column}",
                             row=bad + 2)
        numeric[column] = coerced.to_numpy(dtype=np.float64)

    for column in (SERIES_ID_COLUMN, TIME_COLUMN):
        ints = numeric[column]
        not_int = np.flatnonzero(ints != np.round(ints))
        if not_int.size:
            raise ParseError(f"Column {column} must hold integers", row=int(not_int[0]) + 2)

    length = schema.context_len + schema.horizon
    ids = numeric[SERIES_ID_COLUMN].astype(np.int64)
    steps = numeric[TIME_COLUMN].astype(np.int64)
    values = np.stack([numeric[c] for c in _value_columns(dim)], axis=1)

    series_ids = np.unique(ids)
    out = np.empty((series_ids.size, length, dim))
    for k, sid in enumerate(series_ids):
        rows = np.flatnonzero(ids == sid)
        order = rows[np.argsort(steps[rows], kind="stable")]
        seen = steps[order]
        repeated = np.flatnonzero(seen[1:] == seen[:-1])
        if repeated.size:
            dup = order[repeated[0] + 1]
            raise ParseError("Duplicate time step", row=int(dup) + 2, series_id=int(sid),
                             step=int(steps[dup]))
        for expected_step in range(length):
            if expected_step >= seen.size or seen[expected_step] != expected_step:
                raise ParseError("Missing time step", row=int(rows[0]) + 2,
                                 series_id=int(sid), step=expected_step)
        if seen.size != length:
            extra = order[length]
            raise ParseError(f"Unexpected step {steps[extra]}", row=int(extra) + 2,
                             series_id=int(sid), step=int(steps[extra]))
        out[k] = values[order]

    if schema.n is not None and series_ids.size != schema.n:
        raise ParseError(f"Expected {schema.n} series, found {series_ids.size}")

    logger.info("Loaded %d series from %s", series_ids.size, path)
    provenance = {"source": "csv", "path": str(path)}
    return SeriesDataset(out, schema.context_len, schema.horizon, provenance)


def split(dataset: SeriesDataset, m, l, seed) -> SplitIndices:
    """Uniformly random disjoint train/calibration split; the remainder is the test set."""
    n = dataset.n
    if m < 1 or l < 1:
        raise InputError("Training and calibration sets need at least one series each")
    if m + l >= n:
        raise InputError(f"m + l = {m + l} leaves no test series out of n = {n}")
    perm = SeededRng(seed).permutation(n)
    return SplitIndices(np.sort(perm[:m]), np.sort(perm[m:m + l]), np.sort(perm[m + l:]))


def apply_stats(dataset: SeriesDataset, stats: StandardStats) -> SeriesDataset:
    """Standardises a raw dataset with given statistics."""
    if stats.dim != dataset.dim:
        raise ShapeError(f"Statistics cover {stats.dim} coordinates, data has {dataset.dim}")
    return replace(dataset, values=stats.apply(dataset.values), stats=stats)


def standardize(dataset: SeriesDataset, train_indices):
    """z-scores every coordinate with statistics from the training series only."""
    train_values = dataset.values[np.asarray(train_indices, dtype=np.int64)]
    flat = train_values.reshape(-1, dataset.dim)
    if flat.shape[0] == 0:
        raise InputError("Cannot standardise with an empty training split")
    std = flat.std(axis=0)
    if np.any(std <= 0):
        zero = np.flatnonzero(std <= 0).tolist()
        raise DegenerateDataError(f"Zero variance in coordinate(s) {zero}")
    stats = StandardStats(flat.mean(axis=0), std)
    return apply_stats(dataset, stats), stats


def destandardize(dataset: SeriesDataset, stats: StandardStats) -> SeriesDataset:
    """Maps a standardised dataset back to raw units."""
    return replace(dataset, values=stats.invert(dataset.values), stats=None)
