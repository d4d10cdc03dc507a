"""Out-of-distribution gating via nearest-cosine scores against an index.

The familiarity score of a query embedding is its maximum cosine similarity
to any indexed demonstration embedding. The alarm threshold is a low
quantile of scores collected on held-out nominal episodes, so roughly that
fraction of nominal steps false-alarm while far-off queries fall below.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

INDEX_FORMAT = "aba-index"
INDEX_VERSION = 1


def unit_rows(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValidationError(f"index needs a non-empty 2d array, got shape {v.shape}")
    norms = np.sqrt(np.sum(v * v, axis=1))
    if np.any(norms == 0.0):
        raise ValidationError("cannot unit-normalize a zero embedding")
    return v / norms[:, None]


@dataclass(frozen=True)
class IdIndex:
    """Unit-normalized demonstration embeddings."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", unit_rows(self.vectors))

    @property
    def size(self) -> int:
        return len(self.vectors)

    def score(self, z: np.ndarray) -> float:
        """Max cosine similarity of z against the index."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.vectors.shape[1],):
            raise ValidationError(f"query shape {z.shape} != ({self.vectors.shape[1]},)")
        n = math.sqrt(float(z @ z))
        if n == 0.0:
            raise ValidationError("cannot score a zero embedding")
        return float(np.max(self.vectors @ (z / n)))


def quantile_linear(values: Sequence[float], p: float) -> float:
    """Linear-interpolation quantile at fraction p of sorted values."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"quantile fraction must be in [0, 1], got {p}")
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValidationError("quantile of an empty sample")
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


@dataclass(frozen=True)
class OodGate:
    """An index plus a calibrated alarm threshold."""

    index: IdIndex
    threshold: float
    percentile: float = 0.02

    def score(self, z: np.ndarray) -> float:
        return self.index.score(z)

    def is_ood(self, z: np.ndarray) -> bool:
        """Strictly below threshold; a score at the threshold stays nominal."""
        return self.score(z) < self.threshold


def calibrate_gate(
    index: IdIndex, holdout_scores: Sequence[float], percentile: float = 0.02
) -> OodGate:
    """Set the alarm at the given quantile of held-out nominal scores."""
    return OodGate(
        index=index,
        threshold=quantile_linear(holdout_scores, percentile),
        percentile=percentile,
    )


def save_gate(gate: OodGate, path: str) -> None:
    meta = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "threshold": gate.threshold,
        "percentile": gate.percentile,
    }
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".idx.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(
                fh,
                meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                vectors=gate.index.vectors,
            )
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_gate(path: str) -> OodGate:
    try:
        with np.load(path) as npz:
            raw = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read index file {path}: {e}") from e
    if "meta" not in raw or "vectors" not in raw:
        raise FormatError(f"index file {path} missing arrays")
    try:
        meta = json.loads(bytes(raw["meta"].tolist()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"index file {path} has a corrupt header: {e}") from e
    if meta.get("format") != INDEX_FORMAT:
        raise FormatError(f"index file {path} missing format marker")
    if meta.get("version") != INDEX_VERSION:
        raise FormatError(
            f"index file {path} version {meta.get('version')} != supported {INDEX_VERSION}"
        )
    return OodGate(
        index=IdIndex(vectors=raw["vectors"]),
        threshold=float(meta["threshold"]),
        percentile=float(meta["percentile"]),
    )
