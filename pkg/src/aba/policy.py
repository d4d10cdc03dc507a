"""Nonparametric retrieval policy over demonstration embeddings.

The policy stores every demonstration embedding with its action plan. At
query time it takes the k nearest stored embeddings, softmax-weights them by
distance above the minimum, samples one plan, and perturbs it with small
action noise. A zero temperature or zero noise scale degrades to exact
replay of the single nearest plan.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .core import ActionPlan, Dataset
from .encoding import Encoder, EncoderConfig
from .errors import FormatError, ValidationError

POLICY_FORMAT = "aba-policy"
POLICY_VERSION = 1

MEDIAN_SAMPLE_CAP = 1024


@dataclass(frozen=True)
class PolicyConfig:
    knn: int = 8
    tau_scale: float = 0.05
    sigma_scale: float = 0.02
    action_bound: float = 1.0


@dataclass(frozen=True)
class SampleInfo:
    """Provenance of one sampled plan."""

    index: int
    trajectory_id: int
    timestep: int
    neighbor_indices: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class PolicyModel:
    encoder: Encoder
    embeddings: np.ndarray  # (n, d)
    plans: np.ndarray  # (n, T, 3)
    traj_ids: np.ndarray  # (n,)
    timesteps: np.ndarray  # (n,)
    mode_labels: tuple[str, ...]  # per entry
    tau_w: float
    sigma_a: float
    config: PolicyConfig
    dataset_hash: str = ""

    def __post_init__(self) -> None:
        n, d = self.embeddings.shape
        if d != self.encoder.dim:
            raise ValidationError(f"embedding dim {d} != encoder dim {self.encoder.dim}")
        if not (len(self.plans) == len(self.traj_ids) == len(self.timesteps) == n):
            raise ValidationError("policy arrays disagree on entry count")
        if len(self.mode_labels) != n:
            raise ValidationError("mode labels disagree on entry count")
        if n == 0:
            raise ValidationError("policy needs at least one demonstration entry")
        lookup: dict[tuple[int, int], list[int]] = {}
        for i, key in enumerate(zip(self.traj_ids.tolist(), self.timesteps.tolist())):
            lookup.setdefault(key, []).append(i)
        object.__setattr__(self, "_entry_lookup", lookup)

    @property
    def size(self) -> int:
        return len(self.embeddings)

    @property
    def plan_length(self) -> int:
        return self.plans.shape[1]

    def entry_index(self, trajectory_id: int, timestep: int) -> int:
        hits = self._entry_lookup.get((trajectory_id, timestep), [])
        if len(hits) != 1:
            raise ValidationError(
                f"no unique entry for trajectory {trajectory_id} timestep {timestep}"
            )
        return hits[0]

    def plan_at(self, trajectory_id: int, timestep: int) -> ActionPlan:
        return _to_plan(self.plans[self.entry_index(trajectory_id, timestep)])

    def embedding_at(self, trajectory_id: int, timestep: int) -> np.ndarray:
        return self.embeddings[self.entry_index(trajectory_id, timestep)]


def _to_plan(arr: np.ndarray) -> ActionPlan:
    return ActionPlan(steps=tuple((float(a), float(b), float(c)) for a, b, c in arr))


def median_pairwise_distance(z: np.ndarray, cap: int = MEDIAN_SAMPLE_CAP) -> float:
    """Median Euclidean distance over an even-stride subsample of rows.

    Exact when the row count is at most the cap; otherwise the subsample is
    deterministic, so the statistic is stable for a given array.
    """
    n = len(z)
    if n < 2:
        return 0.0
    if n > cap:
        idx = np.linspace(0, n - 1, cap).round().astype(np.int64)
        z = z[np.unique(idx)]
        n = len(z)
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    iu = np.triu_indices(n, k=1)
    return float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))


def fit_policy(
    dataset: Dataset,
    encoder_config: EncoderConfig | None = None,
    config: PolicyConfig = PolicyConfig(),
) -> PolicyModel:
    """Embed every demonstration pair and freeze the retrieval temperature."""
    encoder = Encoder(
        label_registry=dict(dataset.label_registry),
        config=encoder_config or EncoderConfig(),
        grid_width=dataset.grid_width,
        grid_height=dataset.grid_height,
    )
    rows, plans, tids, steps, modes = [], [], [], [], []
    for ti, traj in enumerate(dataset.trajectories):
        window: list = []
        for obs, plan in traj.pairs:
            window.append(obs)
            rows.append(encoder.encode(window))
            plans.append(plan.steps)
            tids.append(ti)
            steps.append(obs.timestep)
            modes.append(traj.mode_label)
    z = np.asarray(rows, dtype=np.float64)
    tau = config.tau_scale * median_pairwise_distance(z)
    return PolicyModel(
        encoder=encoder,
        embeddings=z,
        plans=np.asarray(plans, dtype=np.float64),
        traj_ids=np.asarray(tids, dtype=np.int64),
        timesteps=np.asarray(steps, dtype=np.int64),
        mode_labels=tuple(modes),
        tau_w=tau,
        sigma_a=config.sigma_scale * config.action_bound,
        config=config,
        dataset_hash=dataset.config_hash,
    )


def nearest_entries(model: PolicyModel, z: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the k nearest entries, deterministically tied.

    Ties in distance break by trajectory id, then by timestep.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.encoder.dim,):
        raise ValidationError(f"query shape {z.shape} != ({model.encoder.dim},)")
    diff = model.embeddings - z[None, :]
    d = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.lexsort((model.timesteps, model.traj_ids, d))
    take = order[: min(k, len(order))]
    return take, d[take]


def sample_plan(
    model: PolicyModel, z: np.ndarray, rng: np.random.Generator
) -> tuple[ActionPlan, SampleInfo]:
    """Sample one noisy plan from the soft k-nearest mixture around z."""
    idx, d = nearest_entries(model, z, model.config.knn)
    if model.tau_w > 0.0:
        w = np.exp(-(d - d[0]) / model.tau_w)
    else:
        w = np.zeros(len(idx))
        w[0] = 1.0
    w = w / np.sum(w)
    choice = int(rng.choice(len(idx), p=w))
    entry = int(idx[choice])
    plan = model.plans[entry]
    if model.sigma_a > 0.0:
        plan = plan + rng.normal(0.0, model.sigma_a, size=plan.shape)
    info = SampleInfo(
        index=entry,
        trajectory_id=int(model.traj_ids[entry]),
        timestep=int(model.timesteps[entry]),
        neighbor_indices=idx,
        weights=w,
    )
    return _to_plan(plan), info


# --- persistence ---------------------------------------------------------------


def save_policy(model: PolicyModel, path: str) -> None:
    """Write the model to a single .pmod file (zipped arrays + json header)."""
    meta = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "labels": {str(k): v for k, v in sorted(model.encoder.label_registry.items())},
        "pool_grid": model.encoder.config.pool_grid,
        "history": model.encoder.config.history,
        "position_scale": model.encoder.config.position_scale,
        "grid": [model.encoder.grid_width, model.encoder.grid_height],
        "knn": model.config.knn,
        "tau_scale": model.config.tau_scale,
        "sigma_scale": model.config.sigma_scale,
        "action_bound": model.config.action_bound,
        "tau_w": model.tau_w,
        "sigma_a": model.sigma_a,
        "dataset_hash": model.dataset_hash,
        "modes": list(model.mode_labels),
    }
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".pmod.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(
                fh,
                meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                embeddings=model.embeddings,
                plans=model.plans,
                traj_ids=model.traj_ids,
                timesteps=model.timesteps,
            )
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_policy(path: str) -> PolicyModel:
    try:
        with np.load(path) as npz:
            raw = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read policy file {path}: {e}") from e
    required = {"meta", "embeddings", "plans", "traj_ids", "timesteps"}
    missing = required - set(raw)
    if missing:
        raise FormatError(f"policy file {path} missing arrays {sorted(missing)}")
    try:
        meta = json.loads(bytes(raw["meta"].tolist()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"policy file {path} has a corrupt header: {e}") from e
    if meta.get("format") != POLICY_FORMAT:
        raise FormatError(f"policy file {path} missing format marker")
    if meta.get("version") != POLICY_VERSION:
        raise FormatError(
            f"policy file {path} version {meta.get('version')} != supported {POLICY_VERSION}"
        )
    encoder = Encoder(
        label_registry={int(k): v for k, v in meta["labels"].items()},
        config=EncoderConfig(
            pool_grid=meta["pool_grid"],
            history=meta["history"],
            position_scale=meta["position_scale"],
        ),
        grid_width=meta["grid"][0],
        grid_height=meta["grid"][1],
    )
    return PolicyModel(
        encoder=encoder,
        embeddings=np.asarray(raw["embeddings"], dtype=np.float64),
        plans=np.asarray(raw["plans"], dtype=np.float64),
        traj_ids=np.asarray(raw["traj_ids"], dtype=np.int64),
        timesteps=np.asarray(raw["timesteps"], dtype=np.int64),
        mode_labels=tuple(meta["modes"]),
        tau_w=meta["tau_w"],
        sigma_a=meta["sigma_a"],
        config=PolicyConfig(
            knn=meta["knn"],
            tau_scale=meta["tau_scale"],
            sigma_scale=meta["sigma_scale"],
            action_bound=meta["action_bound"],
        ),
        dataset_hash=meta.get("dataset_hash", ""),
    )
