"""Inductive conformal calibration with the conditional log-density as conformity score.

A candidate label y for a context is accepted at significance level epsilon when

    (|{i : alpha_i <= alpha*}| + 1) / (l + 1) > epsilon,   alpha* = log p(y | context)

where alpha_1..alpha_l are the calibration scores. Ties count towards membership.
The same rule is available precomputed as a score threshold q_epsilon.
"""

import logging
from dataclasses import dataclass
from typing import NewType

import numpy as np

from src.data import SeriesDataset
from src.errors import InputError, ShapeError
from src.flow import FlowModel, flow_log_prob

logger = logging.getLogger(__name__)

ConformityScore = NewType("ConformityScore", float)


@dataclass
class CalibrationRecord:
    """Sorted calibration scores of one model."""

    scores: np.ndarray
    model_hash: str = ""
    standardized: bool = True

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if scores.size < 1:
            raise InputError("A calibration record needs at least one score")
        if not np.all(np.isfinite(scores)):
            raise InputError("Calibration scores must be finite")
        self.scores = np.sort(scores, kind="stable")

    @property
    def size(self):
        return self.scores.size

    def to_dict(self):
        return {
            "scores": self.scores.tolist(),
            "size": self.size,
            "model_hash": self.model_hash,
            "standardized": self.standardized,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["scores"], dtype=np.float64), data.get("model_hash", ""),
                   bool(data.get("standardized", True)))


@dataclass
class Threshold:
    """Score cut-off equivalent to the rank rule at one significance level."""

    epsilon: float
    q: float
    include_all: bool = False

    def to_dict(self):
        q = None if self.include_all else self.q
        return {"epsilon": self.epsilon, "q": q, "include_all": self.include_all}

    @classmethod
    def from_dict(cls, data):
        q = data["q"]
        return cls(float(data["epsilon"]), float("-inf") if q is None else float(q),
                   bool(data["include_all"]))


@dataclass
class CoverageResult:
    epsilon: float
    hits: int
    total: int
    coverage: float
    mean_score: float
    threshold: Threshold


def _check_epsilon(epsilon):
    if not 0.0 < epsilon < 1.0:
        raise InputError(f"Significance level {epsilon} is outside (0, 1)")


def _rank_passes(count, size, epsilon):
    return (count + 1) / (size + 1) > epsilon


def conformity_score(model: FlowModel, series) -> ConformityScore:
    """log p(true future | context) for one standardised (T+H, D) series."""
    series = np.asarray(series, dtype=np.float64)
    expected = (model.context_len + model.horizon, model.dim)
    if series.shape != expected:
        raise ShapeError(f"Series must have shape {expected}, got {series.shape}")
    context = series[:model.context_len]
    future = series[model.context_len:].reshape(model.label_dim)
    return ConformityScore(float(flow_log_prob(model, context, future)))


def score_dataset(model: FlowModel, dataset: SeriesDataset) -> np.ndarray:
    """Conformity scores of every series, in dataset order."""
    if dataset.n == 0:
        return np.empty(0)
    if dataset.context_len != model.context_len or dataset.horizon != model.horizon:
        raise ShapeError("Dataset context length or horizon does not match the model")
    return np.atleast_1d(flow_log_prob(model, dataset.contexts, dataset.futures))


def calibrate(model: FlowModel, cal_set: SeriesDataset) -> CalibrationRecord:
    """Scores every calibration series and keeps the sorted list."""
    if cal_set.n < 1:
        raise InputError("Calibration set is empty")
    scores = score_dataset(model, cal_set)
    record = CalibrationRecord(scores, model.model_hash(), cal_set.stats is not None)
    logger.info("Calibrated on %d series: scores in [%.4f, %.4f]",
                record.size, record.scores[0], record.scores[-1])
    return record


def threshold(record: CalibrationRecord, epsilon) -> Threshold:
    """Smallest calibration score whose rank already satisfies the membership rule."""
    _check_epsilon(epsilon)
    size = record.size
    k = 0
    while not _rank_passes(k, size, epsilon):
        k += 1
    if k == 0:
        return Threshold(float(epsilon), float("-inf"), include_all=True)
    return Threshold(float(epsilon), float(record.scores[k - 1]))


def p_value(record: CalibrationRecord, alpha) -> float:
    """Conformal p-value of a postulated label with score alpha."""
    count = int(np.searchsorted(record.scores, alpha, side="right"))
    return (count + 1) / (record.size + 1)


def rank_member(scores, alpha, epsilon) -> bool:
    """Membership by counting calibration scores <= alpha; scores must be sorted."""
    scores = np.asarray(scores, dtype=np.float64)
    count = int(np.searchsorted(scores, alpha, side="right"))
    return _rank_passes(count, scores.size, epsilon)


def threshold_member(threshold_: Threshold, alpha) -> bool:
    return threshold_.include_all or alpha >= threshold_.q


def is_member(model: FlowModel, context, y, record: CalibrationRecord, epsilon) -> bool:
    """Whether candidate label y lies in the prediction region for context."""
    _check_epsilon(epsilon)
    alpha = float(flow_log_prob(model, context, y))
    return rank_member(record.scores, alpha, epsilon)


def evaluate_coverage(model: FlowModel, record: CalibrationRecord, test_set: SeriesDataset,
                      epsilon) -> CoverageResult:
    """Fraction of test series whose true future falls inside its region."""
    _check_epsilon(epsilon)
    if test_set.n < 1:
        raise InputError("Test set is empty")
    scores = score_dataset(model, test_set)
    return coverage_from_scores(record, scores, epsilon)


def coverage_from_scores(record: CalibrationRecord, scores, epsilon) -> CoverageResult:
    """Coverage of precomputed test scores against a record."""
    _check_epsilon(epsilon)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise InputError("Test set is empty")
    cut = threshold(record, epsilon)
    total = int(scores.size)
    hits = total if cut.include_all else int(np.count_nonzero(scores >= cut.q))
    result = CoverageResult(float(epsilon), hits, total, hits / total, float(np.mean(scores)), cut)
    logger.info("epsilon=%.3f coverage %.4f (%d/%d)", epsilon, result.coverage, hits, total)
    return result
