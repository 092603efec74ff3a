"""Canonical serialization and digests shared by every subsystem.

Digests must be reproducible across processes and languages, so everything
funnels through one canonical JSON form: sorted keys, compact separators,
UTF-8, no NaN/Infinity, dates as ISO-8601 strings, and integral floats
collapsed to ints so `1991` and `1991.0` hash identically.
"""
from __future__ import annotations

import hashlib
import json
import math
from datetime import date, datetime, timezone
from typing import Any

DIGEST_ALGORITHM = "sha256"
GENESIS_DIGEST = "0" * 64

# Float deltas are quantized before they are stored or compared so that
# artifacts like 0.71 - 0.42 = 0.29000000000000004 never leak into reports.
_DELTA_DECIMALS = 12


def quantize(value: float) -> float:
    """Round to 12 decimal places, normalizing -0.0 to 0.0."""
    out = round(value, _DELTA_DECIMALS)
    return 0.0 if out == 0 else out


def normalize_value(value: Any) -> Any:
    """Normalize a scalar for canonical serialization."""
    if isinstance(value, bool):
        return value
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise ValueError("non-finite numbers are not canonicalizable")
        if value.is_integer():
            return int(value)
        return value
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return value.astimezone(timezone.utc).isoformat()
    if isinstance(value, date):
        return value.isoformat()
    return value


def _canonicalize(obj: Any) -> Any:
    if isinstance(obj, dict):
        out = {}
        for key in obj:
            if not isinstance(key, str):
                raise TypeError(f"canonical object keys must be strings, got {key!r}")
            out[key] = _canonicalize(obj[key])
        return out
    if isinstance(obj, (list, tuple)):
        return [_canonicalize(item) for item in obj]
    return normalize_value(obj)


def canonical_json(obj: Any) -> str:
    """Serialize ``obj`` to its canonical JSON form."""
    return json.dumps(
        _canonicalize(obj),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def payload_digest(obj: Any) -> str:
    """256-bit hex digest of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def utc(ts: datetime) -> datetime:
    """Coerce a timestamp to timezone-aware UTC."""
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def iso(ts: datetime) -> str:
    return utc(ts).isoformat()
