"""Saving and loading of run artifacts: model, calibration record, metadata and tables."""

import json
import logging
import os
from pathlib import Path

import pandas as pd

from src.conformal import CalibrationRecord
from src.config import (
    COVERAGE_FORMAT_VERSION,
    DATA_META_VERSION,
    DEFAULT_OUT_DIR,
    MODEL_FORMAT_VERSION,
    OUT_DIR_ENV,
    RECORD_FORMAT_VERSION,
)
from src.errors import ArtifactMismatchError, ExportError
from src.flow import FlowModel

logger = logging.getLogger(__name__)

MODEL_FORMAT = "ccnf-model"
RECORD_FORMAT = "ccnf-calibration"
DATA_META_FORMAT = "ccnf-data"
COVERAGE_FORMAT = "ccnf-coverage"


def resolve_out_dir(cli_value=None, config_value=None):
    """--out, then the config file, then $CCNF_OUT_DIR, then ./ccnf-out."""
    return Path(cli_value or config_value or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def write_json(doc, path):
    """Writes one JSON document with stable key order."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=4, ensure_ascii=False, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Wrote %s", path)


def read_json(path, expected_format, expected_version):
    """Reads a versioned JSON document, checking its format tag."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise ExportError(f"Missing artifact {path}; run the preceding command first") from e
    except (OSError, json.JSONDecodeError) as e:
        raise ExportError(f"Can't read {path}: {e}") from e
    if doc.get("format") != expected_format or doc.get("version") != expected_version:
        raise ExportError(
            f"{path} is not a {expected_format} v{expected_version} document "
            f"(found {doc.get('format')} v{doc.get('version')})"
        )
    return doc


def save_model(model: FlowModel, path, run_config=None):
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "model": model.to_dict(),
        "model_hash": model.model_hash(),
        "run_config": run_config,
    }
    write_json(doc, path)


def load_model(path) -> FlowModel:
    doc = read_json(path, MODEL_FORMAT, MODEL_FORMAT_VERSION)
    model = FlowModel.from_dict(doc["model"])
    if model.model_hash() != doc["model_hash"]:
        raise ArtifactMismatchError(f"{path}: stored model hash does not match its contents")
    return model


def save_record(record: CalibrationRecord, path, run_config=None):
    doc = {"format": RECORD_FORMAT, "version": RECORD_FORMAT_VERSION, "run_config": run_config}
    doc.update(record.to_dict())
    write_json(doc, path)


def load_record(path) -> CalibrationRecord:
    return CalibrationRecord.from_dict(read_json(path, RECORD_FORMAT, RECORD_FORMAT_VERSION))


def check_pair(model: FlowModel, record: CalibrationRecord):
    """Refuses a calibration record produced by a different model."""
    model_hash = model.model_hash()
    if record.model_hash != model_hash:
        raise ArtifactMismatchError(
            f"Calibration record belongs to model {record.model_hash[:12]}, "
            f"loaded model is {model_hash[:12]}; rerun calibrate"
        )


def save_metadata(metadata, path):
    doc = {"format": DATA_META_FORMAT, "version": DATA_META_VERSION}
    doc.update(metadata)
    write_json(doc, path)


def load_metadata(path):
    return read_json(path, DATA_META_FORMAT, DATA_META_VERSION)


def write_table(rows, columns, path):
    """Writes a list of row tuples as CSV with a fixed header."""
    frame = pd.DataFrame(rows, columns=columns)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.info("Wrote %s", path)


def save_loss_trace(trace, path):
    write_table([(epoch, nll) for epoch, nll in enumerate(trace, start=1)],
                ["epoch", "mean_nll"], path)


def save_coverage(report, path):
    doc = {"format": COVERAGE_FORMAT, "version": COVERAGE_FORMAT_VERSION}
    doc.update(report)
    write_json(doc, path)


def load_coverage(path):
    return read_json(path, COVERAGE_FORMAT, COVERAGE_FORMAT_VERSION)
