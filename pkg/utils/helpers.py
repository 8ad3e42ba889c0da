from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Tuple
import hashlib
import json
import math
import numpy as np


def safe_divide(numerator: float, denominator: float, default: float = 0.0) -> float:
    """Safely divide two numbers, returning default if denominator is zero"""
    return numerator / denominator if denominator != 0 else default


def round_to_precision(value: Optional[float], precision: int = 4) -> Optional[float]:
    """Round value to specified precision, passing None/NaN through as None"""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return round(float(value), precision)


def sample_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream for sample `index` of a run seeded with `seed`.

    Streams are derived as SeedSequence([seed, index]), so adding samples never
    changes the draws of earlier ones.
    """
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def mean_std(values: Iterable[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    """Mean and population std over the finite entries; (None, None) if there are none"""
    arr = np.asarray([v for v in values if v is not None], dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return None, None
    return float(arr.mean()), float(arr.std())


def file_digest(path: Path, chunk_size: int = 1 << 20) -> str:
    """sha256 of a file, hex encoded"""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


class NumpyJSONEncoder(json.JSONEncoder):
    """JSON encoder aware of numpy scalars/arrays, enums and datetimes"""
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return None if not np.isfinite(obj) else float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, (set, frozenset)):
            return sorted(obj)
        elif isinstance(obj, datetime):
            return obj.isoformat()
        return super().default(obj)
