"""Explicit prediction regions: grid and flow-sample scans, clustering, volume, baseline box."""

import json
import logging
import math
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from src.codec import decode_array, encode_array
from src.config import (
    BOX_MEDIAN_SAMPLES,
    CLUSTER_RADIUS_FACTOR,
    DENSITY_CHUNK_ROWS,
    GRID_MARGIN_STD,
    MAX_GRID_DIM,
    REGION_FORMAT_VERSION,
)
from src.conformal import CalibrationRecord, Threshold, threshold
from src.data import SeriesDataset
from src.errors import DimensionalityError, ExportError, InputError, ShapeError
from src.flow import FlowModel, flow_log_prob, flow_sample

logger = logging.getLogger(__name__)

GRID_MODE = "grid"
MC_MODE = "mc"


@dataclass
class GridSpec:
    """Axis-aligned grid over the label space, one (lower, upper, cells) triple per axis."""

    lower: np.ndarray
    upper: np.ndarray
    cells: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        self.cells = np.atleast_1d(np.asarray(self.cells, dtype=np.int64))
        if not (self.lower.shape == self.upper.shape == self.cells.shape) or self.lower.ndim != 1:
            raise ShapeError("Grid bounds and cell counts must be vectors of equal length")
        if self.dim > MAX_GRID_DIM:
            raise DimensionalityError(
                f"Grid regions support at most {MAX_GRID_DIM} label coordinates, got {self.dim}; "
                "use mc mode instead"
            )
        if np.any(self.lower >= self.upper):
            raise InputError("Grid lower bounds must be below upper bounds")
        if np.any(self.cells < 2):
            raise InputError("Grid needs at least 2 cells per dimension")

    @classmethod
    def uniform(cls, dim, low, high, cells):
        return cls(np.full(dim, low), np.full(dim, high), np.full(dim, cells))

    @classmethod
    def around(cls, futures, margin=GRID_MARGIN_STD, cells=200):
        """[min - margin*std, max + margin*std] per coordinate of the given labels."""
        futures = np.atleast_2d(np.asarray(futures, dtype=np.float64))
        std = futures.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        lower = futures.min(axis=0) - margin * std
        upper = futures.max(axis=0) + margin * std
        return cls(lower, upper, np.full(futures.shape[1], cells))

    @property
    def dim(self):
        return self.lower.size

    @property
    def widths(self):
        return (self.upper - self.lower) / self.cells

    @property
    def cell_volume(self):
        return float(np.prod(self.widths))

    @property
    def total_volume(self):
        return float(np.prod(self.upper - self.lower))

    @property
    def n_cells(self):
        return int(np.prod(self.cells))

    def cell_indices(self):
        """Integer index of every cell, lexicographic (first axis slowest)."""
        axes = [np.arange(c) for c in self.cells]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def centres(self, indices=None):
        indices = self.cell_indices() if indices is None else np.asarray(indices)
        return self.lower + (indices + 0.5) * self.widths

    def to_dict(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "cells": self.cells.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["lower"], data["upper"], data["cells"])


@dataclass
class VolumeEstimate:
    value: float
    method: str
    stderr: float = 0.0


@dataclass
class PredictionRegion:
    """Accepted label points of one context at one significance level."""

    mode: str
    epsilon: float
    threshold: Threshold
    points: np.ndarray
    log_density: np.ndarray
    components: np.ndarray
    n_candidates: int
    grid: Optional[GridSpec] = None
    cell_indices: Optional[np.ndarray] = None
    volume: float = 0.0
    volume_method: str = ""
    volume_stderr: float = 0.0
    model_hash: str = ""
    series: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.log_density = np.asarray(self.log_density, dtype=np.float64).ravel()
        self.components = np.asarray(self.components, dtype=np.int64).ravel()
        if self.points.ndim != 2:
            raise ShapeError("Region points must be a 2-d array")
        if not (self.points.shape[0] == self.log_density.size == self.components.size):
            raise ShapeError("Region points, densities and component labels differ in length")
        if self.volume < 0:
            raise InputError("Region volume cannot be negative")

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def empty(self):
        return self.size == 0

    @property
    def n_components(self):
        return int(self.components.max()) + 1 if self.size else 0

    def to_dict(self):
        return {
            "format": "ccnf-region",
            "version": REGION_FORMAT_VERSION,
            "mode": self.mode,
            "epsilon": self.epsilon,
            "threshold": self.threshold.to_dict(),
            "label_dim": int(self.points.shape[1]),
            "n_candidates": self.n_candidates,
            "n_points": self.size,
            "n_components": self.n_components,
            "grid": self.grid.to_dict() if self.grid is not None else None,
            "volume": {
                "value": self.volume,
                "method": self.volume_method,
                "stderr": self.volume_stderr,
            },
            "model_hash": self.model_hash,
            "series": self.series,
            "points": encode_array(self.points),
            "log_density": encode_array(self.log_density),
            "components": self.components.tolist(),
            "cell_indices": self.cell_indices.tolist() if self.cell_indices is not None else None,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "ccnf-region" or data.get("version") != REGION_FORMAT_VERSION:
            raise ExportError("Not a region document of a supported version")
        points = decode_array(data["points"]).reshape(-1, int(data["label_dim"]))
        cells = data.get("cell_indices")
        if cells is not None:
            cells = np.array(cells, dtype=np.int64).reshape(-1, points.shape[1])
        return cls(
            mode=data["mode"],
            epsilon=float(data["epsilon"]),
            threshold=Threshold.from_dict(data["threshold"]),
            points=points,
            log_density=decode_array(data["log_density"]),
            components=np.array(data["components"], dtype=np.int64),
            n_candidates=int(data["n_candidates"]),
            grid=GridSpec.from_dict(data["grid"]) if data.get("grid") else None,
            cell_indices=cells,
            volume=float(data["volume"]["value"]),
            volume_method=data["volume"]["method"],
            volume_stderr=float(data["volume"]["stderr"]),
            model_hash=data.get("model_hash", ""),
            series=data.get("series"),
        )


@dataclass
class BoxRegion:
    """Per-step, per-coordinate intervals; the product box over all H x D axes."""

    lower: np.ndarray
    upper: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        self.lower = np.atleast_2d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_2d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape:
            raise ShapeError("Box bounds differ in shape")
        if np.any(self.lower > self.upper):
            raise InputError("Box lower bounds must not exceed upper bounds")

    @property
    def centre(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def volume(self):
        return float(np.prod(self.upper - self.lower))

    def contains(self, y):
        """Whether a flattened (step-major) label lies inside the box."""
        y = np.asarray(y, dtype=np.float64).reshape(self.lower.shape)
        return bool(np.all((y >= self.lower) & (y <= self.upper)))

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "epsilon": self.epsilon}


class UnionFind:
    """Disjoint sets over 0..n-1 with union by rank and path compression."""

    def __init__(self, n):
        self._leader = list(range(n))
        self._rank = [0] * n
        self._size = [1] * n
        self.n_clusters = n

    def __repr__(self):
        return f"UnionFind: contains {self.n_clusters} clusters."

    def find(self, s):
        root = s
        while self._leader[root] != root:
            root = self._leader[root]
        while self._leader[s] != root:
            self._leader[s], s = root, self._leader[s]
        return root

    def size(self, s):
        return self._size[self.find(s)]

    def union(self, a, b):
        s1, s2 = self.find(a), self.find(b)
        if s1 == s2:
            return
        if self._rank[s2] > self._rank[s1]:
            s1, s2 = s2, s1
        if self._rank[s1] == self._rank[s2]:
            self._rank[s1] += 1
        self._leader[s2] = s1
        self._size[s1] += self._size[s2]
        self.n_clusters -= 1


@dataclass
class AdjacencyRule:
    """Face or diagonal neighbourhood on integer cell indices, or a distance radius on points."""

    kind: str = "face"
    radius: Optional[float] = None
    radius_factor: float = CLUSTER_RADIUS_FACTOR

    KINDS = ("face", "diagonal", "radius")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InputError(f"Unknown adjacency rule {self.kind!r}")
        if self.radius is not None and self.radius <= 0:
            raise InputError("Cluster radius must be positive")


def _neighbour_offsets(dim, diagonal):
    """Half of the neighbourhood; the other half is covered from the neighbour's side."""
    if not diagonal:
        return [tuple(int(i == k) for i in range(dim)) for k in range(dim)]
    return [o for o in product((-1, 0, 1), repeat=dim) if any(o) and o > tuple([0] * dim)]


def _grid_pairs(indices, diagonal):
    origin = indices.min(axis=0)
    local = indices - origin
    shape = tuple(local.max(axis=0) + 1)
    lookup = np.full(shape, -1, dtype=np.int64)
    lookup[tuple(local.T)] = np.arange(local.shape[0])
    pairs = []
    for offset in _neighbour_offsets(indices.shape[1], diagonal):
        moved = local + np.asarray(offset)
        inside = np.all((moved >= 0) & (moved < np.asarray(shape)), axis=1)
        source = np.flatnonzero(inside)
        target = lookup[tuple(moved[inside].T)]
        hit = target >= 0
        pairs.append(np.stack([source[hit], target[hit]], axis=1))
    return np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)


def cluster_radius(points, factor=CLUSTER_RADIUS_FACTOR):
    """factor x the largest k-th nearest-neighbour distance over the points, k = ceil(ln n).

    At factor 1 every point links to at least k others, rim points included.
    """
    n = points.shape[0]
    if n < 2:
        return 0.0
    k = min(max(1, math.ceil(math.log(n))), n - 1)
    distances, _ = cKDTree(points).query(points, k=k + 1)
    return float(factor * np.max(distances[:, k]))


def cluster_components(points, rule: AdjacencyRule = None):
    """Connected-component label per point, numbered by lexicographically smallest member.

    Without a rule, integer arrays are treated as grid cells (face adjacency) and
    anything else as sample points (radius rule).
    """
    points = np.asarray(points)
    if rule is None:
        rule = AdjacencyRule("face" if np.issubdtype(points.dtype, np.integer) else "radius")
    n = points.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if rule.kind == "radius":
        radius = rule.radius
        if radius is None:
            radius = cluster_radius(points, rule.radius_factor)
        pairs = np.empty((0, 2), dtype=np.int64)
        if radius > 0:
            pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    else:
        if not np.array_equal(points, np.round(points)):
            raise InputError(f"{rule.kind.capitalize()} adjacency needs integer cell indices; "
                             "use the radius rule for sample points")
        pairs = _grid_pairs(points.astype(np.int64), rule.kind == "diagonal")

    sets = UnionFind(n)
    for a, b in pairs.tolist():
        sets.union(a, b)

    labels = np.full(n, -1, dtype=np.int64)
    by_root = {}
    for i in np.lexsort(points.T[::-1]).tolist():
        root = sets.find(i)
        if root not in by_root:
            by_root[root] = len(by_root)
        labels[i] = by_root[root]
    return labels


def _chunked_log_prob(model, context, candidates):
    out = np.empty(candidates.shape[0])
    for start in range(0, candidates.shape[0], DENSITY_CHUNK_ROWS):
        chunk = candidates[start:start + DENSITY_CHUNK_ROWS]
        out[start:start + chunk.shape[0]] = flow_log_prob(model, context, chunk)
    return out


def _accepted(cut: Threshold, log_density):
    if cut.include_all:
        return np.ones(log_density.size, dtype=bool)
    return log_density >= cut.q


def grid_region(model: FlowModel, context, record: CalibrationRecord, epsilon, grid: GridSpec,
                diagonal=False) -> PredictionRegion:
    """Grid cell centres whose conditional log-density clears the threshold."""
    if model.label_dim > MAX_GRID_DIM:
        raise DimensionalityError(
            f"Label space has {model.label_dim} coordinates; grid regions support at most "
            f"{MAX_GRID_DIM}, use mc mode instead"
        )
    if grid.dim != model.label_dim:
        raise ShapeError(f"Grid covers {grid.dim} coordinates, model labels have {model.label_dim}")
    cut = threshold(record, epsilon)
    indices = grid.cell_indices()
    log_density = _chunked_log_prob(model, context, grid.centres(indices))
    keep = _accepted(cut, log_density)
    kept_indices = indices[keep]
    rule = AdjacencyRule("diagonal" if diagonal else "face")
    region = PredictionRegion(
        mode=GRID_MODE,
        epsilon=float(epsilon),
        threshold=cut,
        points=grid.centres(kept_indices),
        log_density=log_density[keep],
        components=cluster_components(kept_indices, rule),
        n_candidates=grid.n_cells,
        grid=grid,
        cell_indices=kept_indices,
        model_hash=model.model_hash(),
    )
    _attach_volume(region)
    logger.info("Grid region at epsilon=%.3f: %d/%d cells, %d component(s), volume %.4f",
                epsilon, region.size, grid.n_cells, region.n_components, region.volume)
    return region


def mc_region(model: FlowModel, context, record: CalibrationRecord, epsilon, n_samples, rng,
              radius_factor=CLUSTER_RADIUS_FACTOR, radius=None) -> PredictionRegion:
    """Flow samples whose log-density clears the threshold, clustered by distance."""
    if n_samples < 1:
        raise InputError("n_samples must be at least 1")
    cut = threshold(record, epsilon)
    samples = flow_sample(model, context, rng, n_samples)
    log_density = _chunked_log_prob(model, context, samples)
    keep = _accepted(cut, log_density)
    points = samples[keep]
    rule = AdjacencyRule("radius", radius=radius, radius_factor=radius_factor)
    region = PredictionRegion(
        mode=MC_MODE,
        epsilon=float(epsilon),
        threshold=cut,
        points=points,
        log_density=log_density[keep],
        components=cluster_components(points, rule),
        n_candidates=int(n_samples),
        model_hash=model.model_hash(),
    )
    _attach_volume(region)
    if region.empty:
        logger.warning("MC region at epsilon=%.3f kept none of %d samples", epsilon, n_samples)
    else:
        logger.info("MC region at epsilon=%.3f: kept %d/%d samples, %d component(s), volume %.4f",
                    epsilon, region.size, n_samples, region.n_components, region.volume)
    return region


def estimate_volume(region: PredictionRegion) -> VolumeEstimate:
    """Cell count times cell volume for grids; importance estimate for flow samples.

    With samples y_i ~ p, the mean of 1_R(y_i) / p(y_i) over all n draws is an
    unbiased estimate of the region volume. Rejected draws contribute zero.
    """
    if region.empty:
        return VolumeEstimate(0.0, "empty")
    if region.mode == GRID_MODE:
        if region.grid is None:
            raise InputError("Grid region carries no grid")
        return VolumeEstimate(region.size * region.grid.cell_volume, "grid-cell-count")
    n = region.n_candidates
    weights = np.exp(-region.log_density)
    mean = float(weights.sum() / n)
    if n > 1:
        var = (float(np.sum(weights * weights)) - n * mean * mean) / (n - 1)
        stderr = math.sqrt(max(var, 0.0) / n)
    else:
        stderr = float("inf")
    return VolumeEstimate(mean, "importance", stderr)


def _attach_volume(region):
    estimate = estimate_volume(region)
    region.volume = estimate.value
    region.volume_method = estimate.method
    region.volume_stderr = estimate.stderr


def median_forecast(model: FlowModel, context, rng, n_samples=BOX_MEDIAN_SAMPLES):
    """Coordinate-wise median of flow samples, shaped (H, D)."""
    samples = flow_sample(model, context, rng, n_samples)
    return np.median(samples, axis=0).reshape(model.horizon, model.dim)


def box_residual_scores(model: FlowModel, cal_set: SeriesDataset, rng,
                        n_samples=BOX_MEDIAN_SAMPLES):
    """Per-step max-abs residual of each calibration future around its median forecast, (l, H)."""
    if cal_set.n < 1:
        raise InputError("Calibration set is empty")
    scores = np.empty((cal_set.n, model.horizon))
    futures = cal_set.futures.reshape(cal_set.n, model.horizon, model.dim)
    for i in range(cal_set.n):
        median = median_forecast(model, cal_set.contexts[i], rng, n_samples)
        scores[i] = np.max(np.abs(futures[i] - median), axis=1)
    return scores


def bonferroni_widths(residual_scores, epsilon):
    """Half-widths per step: the conformal quantile at level epsilon / H of each step's scores."""
    residual_scores = np.atleast_2d(np.asarray(residual_scores, dtype=np.float64))
    l, horizon = residual_scores.shape
    if not 0.0 < epsilon < 1.0:
        raise InputError(f"Significance level {epsilon} is outside (0, 1)")
    level = epsilon / horizon
    rank = math.ceil((1.0 - level) * (l + 1))
    if rank > l:
        return np.full(horizon, np.inf)
    return np.sort(residual_scores, axis=0)[rank - 1]


def bonferroni_box(model: FlowModel, context, residual_scores, epsilon, rng,
                   n_samples=BOX_MEDIAN_SAMPLES) -> BoxRegion:
    """Baseline box: median forecast +/- per-step widths, equal across the D coordinates."""
    widths = bonferroni_widths(residual_scores, epsilon)
    centre = median_forecast(model, context, rng, n_samples)
    half = np.repeat(widths[:, None], model.dim, axis=1)
    return BoxRegion(centre - half, centre + half, float(epsilon))


def export_region(region: PredictionRegion, json_path, csv_path, run_config=None):
    """Writes the region document and a flat points CSV (dim0..dimk, log_density, component)."""
    doc = region.to_dict()
    doc["run_config"] = run_config
    dim = region.points.shape[1]
    frame = pd.DataFrame(region.points, columns=[f"dim{k}" for k in range(dim)])
    frame["log_density"] = region.log_density
    frame["component"] = region.components
    try:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=4, ensure_ascii=False)
        frame.to_csv(csv_path, index=False, lineterminator="\n")
    except OSError as e:
        raise ExportError(f"Cannot write region files: {e}") from e
    logger.info("Wrote region to %s and %s", json_path, csv_path)


def load_region(json_path) -> PredictionRegion:
    try:
        with open(json_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ExportError(f"Cannot read region file {json_path}: {e}") from e
    return PredictionRegion.from_dict(data)
