import hashlib
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from datetime import datetime, timezone
from time import perf_counter

import numpy as np
from dateutil.parser import parse as parse_date

logger = logging.getLogger(__name__)


def fingerprint_arrays(*arrays: np.ndarray) -> int:
    """Stable 64-bit content hash of one or more arrays.

    Each array contributes its dtype, shape and little-endian bytes, so the hash is the same on
    every platform and changes whenever any value changes.
    """
    digest = hashlib.blake2b(digest_size=8)
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        canonical = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        digest.update(canonical.dtype.str.encode("ascii"))
        digest.update(repr(canonical.shape).encode("ascii"))
        digest.update(canonical.tobytes())
    return int.from_bytes(digest.digest(), "little")


@contextmanager
def timed(label: str, level: int = logging.DEBUG) -> Iterator[dict[str, float]]:
    """Context manager that logs and records the wall time of its body.

    The yielded dict gets an ``elapsed`` key (seconds) once the block exits.
    """
    result: dict[str, float] = {}
    start = perf_counter()
    try:
        yield result
    finally:
        result["elapsed"] = perf_counter() - start
        logger.log(level, f"{label} took {result['elapsed']:.3f}s")


def format_bytes(num: int | float, decimal: bool = False) -> str:
    """Human readable size for download and cache logs, e.g. ``162.6MiB``.

    Binary units (KiB, MiB, ...) by default; ``decimal=True`` uses powers of 1000 (KB, MB, ...).
    """
    divisor = 1000 if decimal else 1024
    suffix = "B" if decimal else "iB"
    value = float(num)
    if abs(value) < divisor:
        return f"{value:0.0f}B"
    for prefix in "KMGTP":
        value /= divisor
        if abs(value) < divisor:
            return f"{value:0.1f}{prefix}{suffix}"
    return f"{value / divisor:0.1f}E{suffix}"


def parse_http_date(value: str | None) -> datetime | None:
    """Parse a ``Last-Modified`` style header into an aware UTC datetime.

    Returns None for a missing or unparseable header; naive dates are taken as UTC.
    """
    if value is None:
        return None
    try:
        parsed = parse_date(value)
    except (ValueError, OverflowError) as e:
        logger.debug(f"ignoring unparseable date header {value!r}: {e}")
        return None
    if parsed.tzinfo is None:
        return parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)
