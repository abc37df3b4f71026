"""Array encoding for JSON artifact documents."""

import base64
import hashlib
import json

import numpy as np

from src.errors import ExportError

ARRAY_DTYPE = "<f8"


def encode_array(array):
    """Encodes a float array as {shape, dtype, data} with explicit little-endian bytes."""
    arr = np.ascontiguousarray(array, dtype=ARRAY_DTYPE)
    return {
        "shape": list(arr.shape),
        "dtype": ARRAY_DTYPE,
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(doc):
    """Inverse of encode_array; returns a native float64 array."""
    try:
        if doc["dtype"] != ARRAY_DTYPE:
            raise ExportError(f"Unsupported array dtype {doc['dtype']!r}")
        raw = base64.b64decode(doc["data"])
        arr = np.frombuffer(raw, dtype=ARRAY_DTYPE).reshape(doc["shape"])
    except (KeyError, ValueError, TypeError) as e:
        raise ExportError(f"Malformed array entry: {e}") from e
    return arr.astype(np.float64)


def canonical_json(doc):
    """Compact sorted-key JSON used for hashing documents."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_hash(doc):
    """SHA-256 hex digest of a document's canonical JSON."""
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()
