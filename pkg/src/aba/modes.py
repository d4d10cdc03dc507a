"""Behavior-mode bookkeeping: plan clustering, entropy, and refinement.

Retrieved candidates are clustered by their flattened action plans into a
small number of behavior modes. The mode entropy of the current top-ranked
subset measures how contradictory the retrieval still is; while it stays
above a confidence bound, the expert is asked for another correspondence
statement and the ranking is recomputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .correspond import (
    CandidateObservation,
    CorrespondenceDescription,
    RankedRetrieval,
    Segmenter,
    decode_description,
    rank_retrieval,
)
from .core import Observation
from .errors import ValidationError

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray  # (n,) int
    centers: np.ndarray  # (k, d)
    inertia: float


def _improve_moves(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Best-improvement single-point moves until none reduces the objective.

    The move delta uses the exact post-move centroids, so a partition stable
    here is also stable under plain reassignment.
    """
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        centers = np.empty((k, points.shape[1]), dtype=np.float64)
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0) if counts[c] else 0.0
        best_gain = 1e-12
        best_move: tuple[int, int] | None = None
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        for i in range(len(points)):
            a = int(labels[i])
            if counts[a] <= 1:
                continue
            loss_a = counts[a] / (counts[a] - 1.0) * d2[i, a]
            for b in range(k):
                if b == a or counts[b] == 0:
                    continue
                gain = loss_a - counts[b] / (counts[b] + 1.0) * d2[i, b]
                if gain > best_gain:
                    best_gain = gain
                    best_move = (i, b)
        if best_move is None:
            return labels
        labels[best_move[0]] = best_move[1]


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> ClusterResult:
    k = len(centers)
    labels = np.full(len(points), -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)  # ties pick the lowest center index
        assigned_d2 = d2[np.arange(len(points)), new_labels]
        for c in range(k):
            hits = new_labels == c
            if np.any(hits):
                centers[c] = points[hits].mean(axis=0)
            else:
                # reseed an empty cluster at the worst-explained point; if
                # everything is already explained exactly, leave it empty
                far = int(np.argmax(assigned_d2))
                if assigned_d2[far] > 0.0:
                    centers[c] = points[far]
                    new_labels[far] = c
                    assigned_d2[far] = 0.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    labels = _improve_moves(points, labels, k)
    centers = np.empty_like(centers)
    for c in range(k):
        hits = labels == c
        centers[c] = points[hits].mean(axis=0) if np.any(hits) else points[0]
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    inertia = float(np.sum(d2[np.arange(len(points)), labels]))
    return ClusterResult(labels=labels, centers=centers, inertia=inertia)


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy distance-squared weighted seeding.

    Each new center is the best of a few weighted draws, judged by the
    potential it leaves behind.
    """
    n = len(points)
    trials = 2 + int(math.log(max(k, 2)))
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total == 0.0:
            picks = [int(rng.integers(n)) for _ in range(trials)]
        else:
            picks = [int(i) for i in rng.choice(n, size=trials, p=d2 / total)]
        options = [(float(np.minimum(d2, np.sum((points - points[i]) ** 2, axis=1)).sum()), i) for i in picks]
        _, best = min(options)
        centers[c] = points[best]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    restarts: int = KMEANS_RESTARTS,
    max_iter: int = KMEANS_MAX_ITER,
) -> ClusterResult:
    """Restarted Lloyd clustering; fully deterministic for given inputs.

    The best restart wins by lowest inertia, ties by restart order. With at
    most k points every point becomes its own center.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValidationError(f"kmeans needs a non-empty 2d array, got shape {pts.shape}")
    if k < 1:
        raise ValidationError(f"cluster count must be >= 1, got {k}")
    n = len(pts)
    if n <= k:
        centers = np.vstack([pts, np.repeat(pts[-1:], k - n, axis=0)])
        return ClusterResult(labels=np.arange(n, dtype=np.int64), centers=centers, inertia=0.0)
    best: ClusterResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([0xC1, r]))
        result = _lloyd(pts, _seed_centers(pts, k, rng), max_iter)
        if best is None or result.inertia < best.inertia - 1e-12:
            best = result
    assert best is not None
    return best


def mode_entropy(labels: Sequence[int]) -> float:
    """Shannon entropy (natural log) of the label distribution; empty -> 0."""
    n = len(labels)
    if n == 0:
        return 0.0
    counts: dict[int, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    h = 0.0
    for c in counts.values():
        p = c / n
        h -= p * math.log(p)
    return h


# --- refinement loop -----------------------------------------------------------

Expert = Callable[["RefineContext"], str]


@dataclass(frozen=True)
class RefineConfig:
    n_clusters: int = 2
    entropy_max: float = 0.45
    max_queries: int = 5
    top_m: int = 5


@dataclass(frozen=True)
class RefineContext:
    """What an expert gets to see when asked for another statement."""

    observation: Observation
    ranked: RankedRetrieval
    description: CorrespondenceDescription
    entropy: float
    queries_used: int


@dataclass(frozen=True)
class RefineResult:
    description: CorrespondenceDescription
    ranked: RankedRetrieval
    entropy_trace: tuple[float, ...]
    queries: int
    cluster_labels: dict[tuple[int, int], int]


def cluster_candidate_plans(
    candidates: Sequence[CandidateObservation],
    plan_lookup: Callable[[int, int], np.ndarray],
    n_clusters: int,
) -> dict[tuple[int, int], int]:
    """Cluster candidates by flattened plan; returns (traj, t) -> mode label."""
    if not candidates:
        return {}
    keys = [(c.trajectory_id, c.timestep) for c in candidates]
    flat = np.asarray([np.asarray(plan_lookup(*k), dtype=np.float64).ravel() for k in keys])
    result = kmeans(flat, min(n_clusters, len(candidates)))
    return {k: int(lab) for k, lab in zip(keys, result.labels)}


def _top_entropy(ranked: RankedRetrieval, labels: dict[tuple[int, int], int], m: int) -> float:
    top = ranked.ids(m)
    return mode_entropy([labels[k] for k in top])


def refine_until_confident(
    observation: Observation,
    candidates: Sequence[CandidateObservation],
    plan_lookup: Callable[[int, int], np.ndarray],
    expert: Expert,
    ood_namespace: dict[str, int],
    id_namespace: dict[str, int],
    segmenter: Segmenter,
    config: RefineConfig = RefineConfig(),
    initial: CorrespondenceDescription | None = None,
) -> RefineResult:
    """Query the expert until the top-ranked modes agree, then stop.

    The entropy trace always has one more entry than queries were spent: the
    pre-query entropy plus one recomputation after each answer. A pass
    statement ends the loop after its recomputation.
    """
    description = initial if initial is not None else CorrespondenceDescription(features=())
    labels = cluster_candidate_plans(candidates, plan_lookup, config.n_clusters)
    ranked = rank_retrieval(observation, candidates, description, segmenter)
    entropy = _top_entropy(ranked, labels, config.top_m)
    trace = [entropy]
    queries = 0
    while entropy > config.entropy_max and queries < config.max_queries and not description.has_pass:
        answer = expert(
            RefineContext(
                observation=observation,
                ranked=ranked,
                description=description,
                entropy=entropy,
                queries_used=queries,
            )
        )
        queries += 1
        statement = decode_description(answer, ood_namespace, id_namespace)
        description = description.extended(statement)
        ranked = rank_retrieval(observation, candidates, description, segmenter)
        entropy = _top_entropy(ranked, labels, config.top_m)
        trace.append(entropy)
    return RefineResult(
        description=description,
        ranked=ranked,
        entropy_trace=tuple(trace),
        queries=queries,
        cluster_labels=labels,
    )
