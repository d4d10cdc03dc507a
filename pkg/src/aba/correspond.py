"""Functional correspondences between an out-of-distribution scene and
in-distribution demonstrations.

An expert describes how a novel scene relates to familiar ones with a small
feature grammar. Decoded features pair ground-truth segment masks across the
two images (optionally shifting the novel mask so named bounding-box edges
coincide), and the alignment score of the pairing is the sum of per-pair
IoUs. Retrieval ranks proprioception-matched demonstration observations by
that score.

Grammar (statements separated by ";"):
    match <ood-label> with <id-label>
    overlap <ood-label> <id-label>
    align-edge left|right <ood-label> <id-label>
    align-vert top|base <ood-label> <id-label>
    pass
At most one pass, and only as the final statement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .core import Dataset, LabelGridImage, Observation, Proprioception
from .errors import GrammarError, ValidationError

log = logging.getLogger(__name__)

Cell = tuple[int, int]  # (row, col)


@dataclass(frozen=True, slots=True)
class SegmentMask:
    """Cells of one labelled segment."""

    label: int
    cells: frozenset[Cell]

    def __post_init__(self) -> None:
        if not self.cells:
            raise ValidationError(f"segment mask for label {self.label} has no cells")

    def bbox(self) -> tuple[int, int, int, int]:
        """(row_min, row_max, col_min, col_max), inclusive."""
        rows = [r for r, _ in self.cells]
        cols = [c for _, c in self.cells]
        return min(rows), max(rows), min(cols), max(cols)

    def shifted(self, drow: int, dcol: int) -> "SegmentMask":
        return SegmentMask(
            label=self.label,
            cells=frozenset((r + drow, c + dcol) for r, c in self.cells),
        )


Segmenter = Callable[[LabelGridImage], Sequence[SegmentMask]]


def iou(a: frozenset[Cell], b: frozenset[Cell]) -> float:
    """Intersection over union of two cell sets."""
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


# --- feature grammar --------------------------------------------------------


@dataclass(frozen=True, slots=True)
class CorrespondenceFeature:
    """One decoded statement; kind is the template name."""

    kind: str  # "match" | "overlap" | "align-edge" | "align-vert" | "pass"
    ood_name: str = ""
    ood_label: int = -1
    id_name: str = ""
    id_label: int = -1
    side: str = ""  # left|right for align-edge, top|base for align-vert

    @property
    def is_pass(self) -> bool:
        return self.kind == "pass"


@dataclass(frozen=True, slots=True)
class CorrespondenceDescription:
    """Ordered feature list accumulated across expert queries."""

    features: tuple[CorrespondenceFeature, ...]

    def __post_init__(self) -> None:
        passes = [i for i, f in enumerate(self.features) if f.is_pass]
        if len(passes) > 1:
            raise ValidationError("at most one pass statement is allowed")
        if passes and passes[0] != len(self.features) - 1:
            raise ValidationError("pass must be the final statement")

    @property
    def has_pass(self) -> bool:
        return bool(self.features) and self.features[-1].is_pass

    def extended(self, more: "CorrespondenceDescription") -> "CorrespondenceDescription":
        return CorrespondenceDescription(features=self.features + more.features)


def _resolve(name: str, namespace: Mapping[str, int], role: str, position: int) -> int:
    if name not in namespace:
        raise GrammarError(f"unknown {role} label {name!r}", position)
    return namespace[name]


def decode_description(
    text: str,
    ood_namespace: Mapping[str, int],
    id_namespace: Mapping[str, int],
) -> CorrespondenceDescription:
    """Parse feedback text into features; raises GrammarError with position."""
    features: list[CorrespondenceFeature] = []
    cursor = 0
    parts = text.split(";")
    for idx, raw in enumerate(parts):
        position = cursor
        cursor += len(raw) + 1
        statement = raw.strip()
        if not statement:
            if idx == len(parts) - 1 and features:
                continue  # tolerate a trailing semicolon
            raise GrammarError("empty statement", position)
        tokens = statement.split()
        head = tokens[0]
        if head == "pass":
            if len(tokens) != 1:
                raise GrammarError("pass takes no arguments", position)
            features.append(CorrespondenceFeature(kind="pass"))
        elif head == "match":
            if len(tokens) != 4 or tokens[2] != "with":
                raise GrammarError("expected: match <ood-label> with <id-label>", position)
            features.append(
                CorrespondenceFeature(
                    kind="match",
                    ood_name=tokens[1],
                    ood_label=_resolve(tokens[1], ood_namespace, "ood", position),
                    id_name=tokens[3],
                    id_label=_resolve(tokens[3], id_namespace, "id", position),
                )
            )
        elif head == "overlap":
            if len(tokens) != 3:
                raise GrammarError("expected: overlap <ood-label> <id-label>", position)
            features.append(
                CorrespondenceFeature(
                    kind="overlap",
                    ood_name=tokens[1],
                    ood_label=_resolve(tokens[1], ood_namespace, "ood", position),
                    id_name=tokens[2],
                    id_label=_resolve(tokens[2], id_namespace, "id", position),
                )
            )
        elif head == "align-edge":
            if len(tokens) != 4 or tokens[1] not in ("left", "right"):
                raise GrammarError(
                    "expected: align-edge left|right <ood-label> <id-label>", position
                )
            features.append(
                CorrespondenceFeature(
                    kind="align-edge",
                    side=tokens[1],
                    ood_name=tokens[2],
                    ood_label=_resolve(tokens[2], ood_namespace, "ood", position),
                    id_name=tokens[3],
                    id_label=_resolve(tokens[3], id_namespace, "id", position),
                )
            )
        elif head == "align-vert":
            if len(tokens) != 4 or tokens[1] not in ("top", "base"):
                raise GrammarError(
                    "expected: align-vert top|base <ood-label> <id-label>", position
                )
            features.append(
                CorrespondenceFeature(
                    kind="align-vert",
                    side=tokens[1],
                    ood_name=tokens[2],
                    ood_label=_resolve(tokens[2], ood_namespace, "ood", position),
                    id_name=tokens[3],
                    id_label=_resolve(tokens[3], id_namespace, "id", position),
                )
            )
        else:
            raise GrammarError(f"unknown statement {head!r}", position)
    return CorrespondenceDescription(features=tuple(features))


# --- functional maps --------------------------------------------------------


@dataclass(frozen=True, slots=True)
class FunctionalPair:
    """A paired (possibly shifted) ood mask and id mask plus the transform tag."""

    ood_mask: SegmentMask
    id_mask: SegmentMask
    transform: str  # "none" | "edge-shift" | "vertical-shift"


@dataclass(frozen=True, slots=True)
class FunctionalMap:
    """All mask pairs produced by a description for one (ood, id) image pair."""

    pairs: tuple[FunctionalPair, ...]


def _transformed(ood_mask: SegmentMask, id_mask: SegmentMask, feat: CorrespondenceFeature):
    if feat.kind in ("match", "overlap"):
        return ood_mask, "none"
    o_rmin, o_rmax, o_cmin, o_cmax = ood_mask.bbox()
    i_rmin, i_rmax, i_cmin, i_cmax = id_mask.bbox()
    if feat.kind == "align-edge":
        dcol = (i_cmin - o_cmin) if feat.side == "left" else (i_cmax - o_cmax)
        return ood_mask.shifted(0, dcol), "edge-shift"
    if feat.kind == "align-vert":
        drow = (i_rmin - o_rmin) if feat.side == "top" else (i_rmax - o_rmax)
        return ood_mask.shifted(drow, 0), "vertical-shift"
    raise ValidationError(f"feature kind {feat.kind!r} produces no pairs")


def functional_map(
    ood_image: LabelGridImage,
    id_image: LabelGridImage,
    description: CorrespondenceDescription,
    segmenter: Segmenter,
) -> FunctionalMap:
    """Pair segment masks across the two images per the description."""
    ood_masks = list(segmenter(ood_image))
    id_masks = list(segmenter(id_image))
    pairs: list[FunctionalPair] = []
    for feat in description.features:
        if feat.is_pass:
            continue
        own = [m for m in ood_masks if m.label == feat.ood_label]
        theirs = [m for m in id_masks if m.label == feat.id_label]
        if not own and not theirs:
            log.debug(
                "feature %s(%s, %s): labels absent from both images, empty contribution",
                feat.kind,
                feat.ood_name,
                feat.id_name,
            )
            continue
        for om in own:
            for im in theirs:
                shifted, tag = _transformed(om, im, feat)
                pairs.append(FunctionalPair(ood_mask=shifted, id_mask=im, transform=tag))
    return FunctionalMap(pairs=tuple(pairs))


def alignment(fmap: FunctionalMap) -> float:
    """Sum of per-pair IoUs; in [0, number of pairs]."""
    return sum(iou(p.ood_mask.cells, p.id_mask.cells) for p in fmap.pairs)


# --- proprioception filter and ranked retrieval -----------------------------


@dataclass(frozen=True, slots=True)
class CandidateObservation:
    """A demonstration observation with its provenance for tie-breaking."""

    trajectory_id: int
    timestep: int
    observation: Observation
    mode_label: str


def filter_by_proprio(
    dataset: Dataset, query: Proprioception, radius: float
) -> list[CandidateObservation]:
    """Per trajectory, the proprio-closest observation, kept iff within radius.

    At most one candidate per trajectory; within-trajectory distance ties keep
    the earliest timestep.
    """
    out: list[CandidateObservation] = []
    for ti, traj in enumerate(dataset.trajectories):
        best = None
        best_d = float("inf")
        for obs, _ in traj.pairs:
            d = obs.proprio.distance(query)
            if d < best_d:
                best_d = d
                best = obs
        if best is not None and best_d <= radius:
            out.append(
                CandidateObservation(
                    trajectory_id=ti,
                    timestep=best.timestep,
                    observation=best,
                    mode_label=traj.mode_label,
                )
            )
    return out


@dataclass(frozen=True, slots=True)
class RetrievalEntry:
    candidate: CandidateObservation
    score: float
    fmap: FunctionalMap


@dataclass(frozen=True, slots=True)
class RankedRetrieval:
    """Candidates ordered by descending alignment; ties by trajectory then timestep."""

    entries: tuple[RetrievalEntry, ...]

    def top(self, m: int) -> tuple[RetrievalEntry, ...]:
        return self.entries[: max(0, m)]

    def ids(self, m: int | None = None) -> list[tuple[int, int]]:
        ent = self.entries if m is None else self.top(m)
        return [(e.candidate.trajectory_id, e.candidate.timestep) for e in ent]


def rank_retrieval(
    ood_observation: Observation,
    candidates: Iterable[CandidateObservation],
    description: CorrespondenceDescription,
    segmenter: Segmenter,
) -> RankedRetrieval:
    """Score every candidate against the ood observation and sort."""
    entries = []
    for cand in candidates:
        fmap = functional_map(
            ood_observation.image, cand.observation.image, description, segmenter
        )
        entries.append(RetrievalEntry(candidate=cand, score=alignment(fmap), fmap=fmap))
    entries.sort(key=lambda e: (-e.score, e.candidate.trajectory_id, e.candidate.timestep))
    return RankedRetrieval(entries=tuple(entries))
