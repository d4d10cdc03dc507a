"""Domain types and dataset persistence.

Everything downstream (simulator, encoder, retrieval, benchmark) speaks in
terms of these types. Datasets are stored as line-delimited JSON: one header
line with format metadata, then one trajectory per line. Floats survive the
round trip bit-exactly (json uses shortest round-trip repr).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass

from .errors import FormatError, ValidationError

DSLOG_VERSION = 1


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValidationError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True, slots=True)
class Proprioception:
    """Agent configuration: planar position plus gripper openness in [0, 1]."""

    x: float
    y: float
    gripper: float

    def __post_init__(self) -> None:
        _require_finite("proprioception", self.x, self.y, self.gripper)
        if not 0.0 <= self.gripper <= 1.0:
            raise ValidationError(f"gripper must be in [0, 1], got {self.gripper}")

    def distance(self, other: "Proprioception") -> float:
        return math.sqrt(
            (self.x - other.x) ** 2
            + (self.y - other.y) ** 2
            + (self.gripper - other.gripper) ** 2
        )


@dataclass(frozen=True, slots=True)
class LabelGridImage:
    """Dense label grid; cells are row-major integer label ids."""

    width: int
    height: int
    cells: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"grid dims must be positive, got {self.width}x{self.height}")
        if len(self.cells) != self.width * self.height:
            raise ValidationError(
                f"cells length {len(self.cells)} != width*height {self.width * self.height}"
            )
        for c in self.cells:
            if c < 0:
                raise ValidationError(f"label ids must be non-negative, got {c}")

    def at(self, row: int, col: int) -> int:
        return self.cells[row * self.width + col]

    def labels_present(self) -> set[int]:
        return set(self.cells)


@dataclass(frozen=True, slots=True)
class Observation:
    """One timestep of sensing: image plus proprioception."""

    image: LabelGridImage
    proprio: Proprioception
    timestep: int

    def __post_init__(self) -> None:
        if self.timestep < 0:
            raise ValidationError(f"timestep must be >= 0, got {self.timestep}")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.image.cells).encode())
        h.update(repr((self.proprio.x, self.proprio.y, self.proprio.gripper)).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class ActionPlan:
    """Fixed-length sequence of (dx, dy, dgripper) deltas."""

    steps: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValidationError("action plan must have at least one step")
        for s in self.steps:
            _require_finite("action step", *s)

    def require_length(self, t: int) -> None:
        if len(self.steps) != t:
            raise ValidationError(f"plan length {len(self.steps)} != expected {t}")


@dataclass(frozen=True, slots=True)
class Trajectory:
    """One demonstration: per-timestep (observation, plan) pairs plus provenance."""

    pairs: tuple[tuple[Observation, ActionPlan], ...]
    environment_id: str
    mode_label: str

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValidationError("trajectory must contain at least one pair")
        last = -1
        for obs, _ in self.pairs:
            if obs.timestep <= last:
                raise ValidationError(
                    f"timesteps must increase strictly, got {obs.timestep} after {last}"
                )
            last = obs.timestep


@dataclass(frozen=True)
class Dataset:
    """Demonstration collection with its label registry and format metadata."""

    trajectories: tuple[Trajectory, ...]
    label_registry: dict[int, str]
    plan_length: int
    grid_width: int
    grid_height: int
    config_hash: str = ""

    def __post_init__(self) -> None:
        ids = sorted(self.label_registry)
        if ids != list(range(len(ids))):
            raise ValidationError(f"label ids must be dense from 0, got {ids}")
        registered = set(self.label_registry)
        for ti, traj in enumerate(self.trajectories):
            for obs, plan in traj.pairs:
                plan.require_length(self.plan_length)
                if obs.image.width != self.grid_width or obs.image.height != self.grid_height:
                    raise ValidationError(
                        f"trajectory {ti}: image {obs.image.width}x{obs.image.height} "
                        f"!= dataset grid {self.grid_width}x{self.grid_height}"
                    )
                unknown = obs.image.labels_present() - registered
                if unknown:
                    raise ValidationError(
                        f"trajectory {ti}: unregistered label id {sorted(unknown)[0]}"
                    )

    @property
    def unknown_label(self) -> int:
        """First id outside the registry; encoder folds all such ids here."""
        return len(self.label_registry)


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serializable config snapshot."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- serialization ---------------------------------------------------------


def _obs_to_json(obs: Observation) -> dict:
    return {
        "t": obs.timestep,
        "q": [obs.proprio.x, obs.proprio.y, obs.proprio.gripper],
        "cells": list(obs.image.cells),
    }


def _obs_from_json(d: dict, width: int, height: int) -> Observation:
    return Observation(
        image=LabelGridImage(width=width, height=height, cells=tuple(d["cells"])),
        proprio=Proprioception(*d["q"]),
        timestep=d["t"],
    )


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write line-delimited dataset; atomic rename so failures leave no partial file."""
    header = {
        "format": "dslog",
        "version": DSLOG_VERSION,
        "plan_length": dataset.plan_length,
        "grid": [dataset.grid_width, dataset.grid_height],
        "labels": {str(k): v for k, v in sorted(dataset.label_registry.items())},
        "config_hash": dataset.config_hash,
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for traj in dataset.trajectories:
                rec = {
                    "environment_id": traj.environment_id,
                    "mode_label": traj.mode_label,
                    "pairs": [
                        {"obs": _obs_to_json(obs), "plan": [list(s) for s in plan.steps]}
                        for obs, plan in traj.pairs
                    ],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str) -> Dataset:
    """Read a dataset written by save_dataset; validates before returning."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise FormatError(f"cannot read dataset {path}: {e}") from e
    if not lines:
        raise FormatError(f"dataset {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"dataset {path}: bad header: {e}") from e
    if header.get("format") != "dslog":
        raise FormatError(f"dataset {path}: not a dslog file")
    if header.get("version") != DSLOG_VERSION:
        raise FormatError(
            f"dataset {path}: version {header.get('version')} != supported {DSLOG_VERSION}"
        )
    width, height = header["grid"]
    trajectories = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            pairs = tuple(
                (
                    _obs_from_json(p["obs"], width, height),
                    ActionPlan(steps=tuple(tuple(s) for s in p["plan"])),
                )
                for p in rec["pairs"]
            )
            trajectories.append(
                Trajectory(
                    pairs=pairs,
                    environment_id=rec["environment_id"],
                    mode_label=rec["mode_label"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"dataset {path}: bad trajectory at line {ln}: {e}") from e
    return Dataset(
        trajectories=tuple(trajectories),
        label_registry={int(k): v for k, v in header["labels"].items()},
        plan_length=header["plan_length"],
        grid_width=width,
        grid_height=height,
        config_hash=header.get("config_hash", ""),
    )
