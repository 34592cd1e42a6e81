"""On-disk formats for feature matrices and probe models.

Feature cache (all integers little-endian)::

    offset  size  field
    0       4     magic b"NRF1"
    4       2     version (uint16)
    6       2     flags (uint16; bit 0 = 1/sqrt(n) scaling)
    8       8     N, examples (uint64)
    16      8     n, sampled networks (uint64)
    24      8     base_seed (uint64)
    32      8     dataset fingerprint (uint64)
    40      4     length L of the architecture JSON (uint32)
    44      L     ArchitectureSpec as UTF-8 JSON
    44+L    ...   N x (n*k) float32 raw logits, row-major

Probe model::

    magic b"PRB1", k_classes (uint32), n features (uint32), l2 (float64),
    W as k x n float64 row-major, b as k float64
"""

import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from nrflab.constants import FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION, PROBE_MAGIC
from nrflab.errors import CorruptCacheError, StaleCacheError
from nrflab.features import FeatureManifest, FeatureMatrix
from nrflab.models.architecture import ArchitectureSpec
from nrflab.probe import ProbeModel
from nrflab.utils import format_bytes

logger = logging.getLogger(__name__)

FEATURE_HEADER = struct.Struct("<4sHHQQQQI")
PROBE_HEADER = struct.Struct("<4sIId")
FLAG_SCALED = 0x1


def encode_features(features: FeatureMatrix) -> bytes:
    manifest = features.manifest
    arch_json = manifest.arch.model_dump_json().encode("utf-8")
    header = FEATURE_HEADER.pack(
        FEATURE_CACHE_MAGIC,
        FEATURE_CACHE_VERSION,
        FLAG_SCALED if manifest.scaled else 0,
        features.num_examples,
        manifest.n,
        manifest.base_seed,
        manifest.dataset_fingerprint,
        len(arch_json),
    )
    body = np.ascontiguousarray(features.raw, dtype="<f4").tobytes()
    return header + arch_json + body


def decode_features(data: bytes, expected_fingerprint: int | None = None) -> FeatureMatrix:
    """Parse a feature cache.

    Raises:
        CorruptCacheError: bad magic, unknown version, malformed header or wrong length.
        StaleCacheError: ``expected_fingerprint`` is given and differs from the cached one.
    """
    if len(data) < FEATURE_HEADER.size:
        raise CorruptCacheError(f"feature cache is {len(data)} bytes, shorter than its header")
    magic, version, flags, num_examples, n, base_seed, fingerprint, arch_len = FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_CACHE_MAGIC:
        raise CorruptCacheError(f"bad feature cache magic {magic!r}")
    if version != FEATURE_CACHE_VERSION:
        raise CorruptCacheError(f"unsupported feature cache version {version}")
    arch_end = FEATURE_HEADER.size + arch_len
    if len(data) < arch_end:
        raise CorruptCacheError("feature cache truncated inside the architecture header")
    try:
        arch = ArchitectureSpec.model_validate_json(data[FEATURE_HEADER.size : arch_end])
    except ValidationError as e:
        raise CorruptCacheError(f"feature cache has an invalid architecture header: {e}") from e

    columns = n * arch.output_dim
    expected = arch_end + num_examples * columns * 4
    if len(data) != expected:
        raise CorruptCacheError(f"feature cache is {len(data)} bytes, expected {expected}")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise StaleCacheError(
            f"feature cache was built for dataset {fingerprint:016x}, current data is {expected_fingerprint:016x}"
        )

    raw = np.frombuffer(data, dtype="<f4", offset=arch_end).reshape(num_examples, columns).astype(np.float32)
    manifest = FeatureManifest(
        arch=arch,
        base_seed=base_seed,
        n=n,
        scaled=bool(flags & FLAG_SCALED),
        dataset_fingerprint=fingerprint,
    )
    return FeatureMatrix(raw=raw, manifest=manifest)


def save_features(features: FeatureMatrix, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_features(features)
    path.write_bytes(data)
    logger.info(f"wrote {features.num_examples}x{features.n} features ({format_bytes(len(data))}) to {path}")
    return path


def load_features(path: Path, expected_fingerprint: int | None = None) -> FeatureMatrix:
    """Read a feature cache, optionally checking it against the fingerprint of the loaded data."""
    return decode_features(Path(path).read_bytes(), expected_fingerprint)


def encode_probe(model: ProbeModel) -> bytes:
    if model.feature_mean is not None:
        raise ValueError("standardized probes can't be stored in the PRB1 format")
    header = PROBE_HEADER.pack(PROBE_MAGIC, model.num_classes, model.num_features, model.l2)
    weights = np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
    bias = np.ascontiguousarray(model.bias, dtype="<f8").tobytes()
    return header + weights + bias


def decode_probe(data: bytes) -> ProbeModel:
    if len(data) < PROBE_HEADER.size:
        raise CorruptCacheError(f"probe file is {len(data)} bytes, shorter than its header")
    magic, k, n, l2 = PROBE_HEADER.unpack_from(data)
    if magic != PROBE_MAGIC:
        raise CorruptCacheError(f"bad probe magic {magic!r}")
    expected = PROBE_HEADER.size + 8 * (k * n + k)
    if len(data) != expected:
        raise CorruptCacheError(f"probe file is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f8", offset=PROBE_HEADER.size).astype(np.float64)
    return ProbeModel(weights=values[: k * n].reshape(k, n), bias=values[k * n :].copy(), l2=l2)


def save_probe(model: ProbeModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_probe(model))
    logger.info(f"wrote {model.num_classes}-class probe on {model.num_features} features to {path}")
    return path


def load_probe(path: Path) -> ProbeModel:
    return decode_probe(Path(path).read_bytes())
