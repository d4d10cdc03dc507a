"""Closed-loop adaptation: gate each replan, consult, intervene, act.

A rollout executes receding-horizon plans from the imitative policy. At
every replanning point the observation window is embedded and scored against
the nominal index. Methods other than vanilla react to a low score by
retrieving proprio-compatible demonstration observations and re-planning
from a surrogate embedding; the expert-guided method keeps one
correspondence description per rollout and spends queries only while its
retrieval stays mode-ambiguous.
"""

from __future__ import annotations

import json
import os
import queue
import tempfile
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import sim
from .core import Dataset, LabelGridImage, Observation, Proprioception
from .correspond import (
    CandidateObservation,
    CorrespondenceDescription,
    FunctionalMap,
    RankedRetrieval,
    RetrievalEntry,
    SegmentMask,
    decode_description,
    rank_retrieval,
)
from .errors import ExpertAbort, SimulationError, ValidationError
from .modes import (
    RefineConfig,
    RefineContext,
    cluster_candidate_plans,
    mode_entropy,
    refine_until_confident,
)
from .ood import OodGate
from .policy import PolicyModel, sample_plan

METHODS = ("vanilla", "policy-embed", "visual-embed", "aba")

EMPTY_DESCRIPTION = CorrespondenceDescription(features=())


class CachedSegmenter:
    """Ground-truth segmentation memoized per distinct image.

    Dataset images recur across replans and rollouts, so each is segmented
    once. Keys are the identity of the cells tuple; a strong reference to the
    keyed tuple keeps ids from being recycled.
    """

    def __init__(self) -> None:
        self._cache: dict[int, tuple[tuple[int, ...], tuple[SegmentMask, ...]]] = {}

    def __call__(self, image: LabelGridImage) -> tuple[SegmentMask, ...]:
        key = id(image.cells)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is image.cells:
            return hit[1]
        masks = tuple(sim.ground_truth_segment(image))
        self._cache[key] = (image.cells, masks)
        return masks


class CandidateIndex:
    """Vectorized per-trajectory proprio filter over a dataset.

    Produces exactly what filter_by_proprio produces; the distance math is
    the same sum-of-squares form, so ties resolve identically.
    """

    def __init__(self, dataset: Dataset) -> None:
        rows: list[tuple[float, float, float]] = []
        bounds = [0]
        observations: list[Observation] = []
        for traj in dataset.trajectories:
            for obs, _ in traj.pairs:
                rows.append((obs.proprio.x, obs.proprio.y, obs.proprio.gripper))
                observations.append(obs)
            bounds.append(len(rows))
        self._rows = np.asarray(rows, dtype=np.float64).reshape(len(rows), 3)
        self._bounds = bounds
        self._observations = observations
        self._modes = [t.mode_label for t in dataset.trajectories]

    def query(self, q: Proprioception, radius: float) -> list[CandidateObservation]:
        if radius < 0:
            raise ValidationError(f"radius must be >= 0, got {radius}")
        diff = self._rows - np.array([q.x, q.y, q.gripper])
        d = np.sqrt(np.sum(diff * diff, axis=1))
        out: list[CandidateObservation] = []
        for ti in range(len(self._bounds) - 1):
            lo, hi = self._bounds[ti], self._bounds[ti + 1]
            if lo == hi:
                continue
            j = int(np.argmin(d[lo:hi]))  # first minimum = earliest timestep
            if d[lo + j] <= radius:
                obs = self._observations[lo + j]
                out.append(
                    CandidateObservation(
                        trajectory_id=ti,
                        timestep=obs.timestep,
                        observation=obs,
                        mode_label=self._modes[ti],
                    )
                )
        return out


# --- experts -------------------------------------------------------------------


class ScriptedExpert:
    """Replays a fixed statement list; anything past the script is a pass."""

    def __init__(self, lines: Sequence[str]) -> None:
        self._lines = tuple(lines)
        self._served = 0

    def __call__(self, ctx: RefineContext) -> str:
        line = self._lines[self._served] if self._served < len(self._lines) else "pass"
        self._served += 1
        return line


class InteractiveExpert:
    """Blocking single-query mailbox bridging a rollout thread to a human.

    The rollout thread calls the expert and blocks; another thread answers
    via answer() or ends the session via abort(). At most one query is
    outstanding at a time because the rollout thread is suspended while it
    waits.
    """

    def __init__(self, timeout: float | None = None) -> None:
        self._answers: queue.Queue[tuple[str, str]] = queue.Queue()
        self._pending: RefineContext | None = None
        self.timeout = timeout

    @property
    def pending(self) -> RefineContext | None:
        return self._pending

    def __call__(self, ctx: RefineContext) -> str:
        self._pending = ctx
        try:
            kind, payload = self._answers.get(timeout=self.timeout)
        except queue.Empty:
            raise ExpertAbort("no answer arrived before the query timeout") from None
        finally:
            self._pending = None
        if kind == "abort":
            raise ExpertAbort(payload or "query aborted")
        return payload

    def answer(self, statement: str) -> None:
        self._answers.put(("answer", statement))

    def abort(self, reason: str = "") -> None:
        self._answers.put(("abort", reason))


# --- configuration and records ---------------------------------------------------


@dataclass(frozen=True)
class InterventionConfig:
    """Per-rollout adaptation knobs; the method is fixed for the rollout."""

    method: str
    top_m: int = 5
    lambda_q: float = 2.0
    n_clusters: int = 2
    entropy_max: float = 0.45
    max_queries: int = 5

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.top_m < 1:
            raise ValidationError(f"top_m must be >= 1, got {self.top_m}")

    @classmethod
    def from_task(cls, cfg: sim.TaskConfig, method: str) -> "InterventionConfig":
        return cls(
            method=method,
            top_m=cfg.top_m,
            lambda_q=cfg.lambda_q,
            n_clusters=cfg.n_clusters,
            entropy_max=cfg.entropy_max,
            max_queries=cfg.max_queries,
        )


@dataclass(frozen=True)
class FeedbackEvent:
    """One answered expert query."""

    t: int
    context_digest: str
    statement: str


@dataclass(frozen=True)
class StepEntry:
    """One executed timestep; retrieval fields are filled at replan steps."""

    t: int
    digest: str
    id_score: float
    ood: bool
    method: str
    action: tuple[float, float, float]
    retrieval: tuple[tuple[int, int, float], ...] = ()
    counterfactual: tuple[tuple[int, int], ...] = ()
    feedback: tuple[FeedbackEvent, ...] = ()
    fallback: bool = False


@dataclass(frozen=True)
class RolloutRecord:
    """Everything observable about one rollout, replayable into reports."""

    scenario_id: str
    method: str
    seed: int
    horizon: int
    entries: tuple[StepEntry, ...]
    subgoals: tuple[tuple[str, bool], ...]
    success: bool
    cumulative: float
    detected_mode: str | None
    feedback_total: int
    complete: bool = True
    failure: str = ""

    def __post_init__(self) -> None:
        if len(self.entries) > self.horizon:
            raise ValidationError(
                f"{len(self.entries)} entries exceed horizon {self.horizon}"
            )
        counted = sum(len(e.feedback) for e in self.entries)
        if counted != self.feedback_total:
            raise ValidationError(
                f"feedback_total {self.feedback_total} != recorded events {counted}"
            )


@dataclass(frozen=True)
class StepSnapshot:
    """Live view of the rollout published before every simulator step."""

    t: int
    observation: Observation
    id_score: float
    ood: bool
    method: str
    action: tuple[float, float, float]
    entropy: float | None = None
    ranked: RankedRetrieval | None = None
    description: CorrespondenceDescription | None = None


StepObserver = Callable[[StepSnapshot], None]


# --- intervention ----------------------------------------------------------------


def intervene(ranked: RankedRetrieval, top_m: int, model: PolicyModel) -> np.ndarray:
    """Mean embedding of the top-ranked retrieved observations."""
    if not ranked.entries:
        raise ValidationError("intervention needs a non-empty retrieval")
    take = ranked.top(min(top_m, len(ranked.entries)))
    vecs = [model.embedding_at(e.candidate.trajectory_id, e.candidate.timestep) for e in take]
    return np.mean(np.asarray(vecs, dtype=np.float64), axis=0)


def rank_by_embedding(
    z: np.ndarray,
    candidates: Sequence[CandidateObservation],
    model: PolicyModel,
    visual_only: bool,
) -> RankedRetrieval:
    """Rank candidates by cosine similarity in the chosen feature space.

    The full embedding space stands in for a policy-native feature space;
    the image-only slice stands in for an off-the-shelf visual one. Neither
    consults an expert.
    """
    q = model.encoder.visual_slice(z) if visual_only else np.asarray(z, dtype=np.float64)
    qn = float(np.linalg.norm(q))
    entries = []
    for cand in candidates:
        v = model.embedding_at(cand.trajectory_id, cand.timestep)
        if visual_only:
            v = model.encoder.visual_slice(v)
        denom = qn * float(np.linalg.norm(v))
        score = float(np.dot(q, v) / denom) if denom > 0 else 0.0
        entries.append(RetrievalEntry(candidate=cand, score=score, fmap=FunctionalMap(pairs=())))
    entries.sort(key=lambda e: (-e.score, e.candidate.trajectory_id, e.candidate.timestep))
    return RankedRetrieval(entries=tuple(entries))


def decode_oracle(
    scenario: sim.Scenario, cfg: sim.TaskConfig
) -> CorrespondenceDescription:
    """The scenario's full oracle script as one decoded description."""
    ood_ns, id_ns = sim.expert_namespaces(scenario, cfg)
    description = EMPTY_DESCRIPTION
    for line in scenario.oracle:
        description = description.extended(decode_description(line, ood_ns, id_ns))
    return description


# --- the rollout loop --------------------------------------------------------------


def _retrieval_rows(ranked: RankedRetrieval, top_m: int) -> tuple[tuple[int, int, float], ...]:
    return tuple(
        (e.candidate.trajectory_id, e.candidate.timestep, e.score) for e in ranked.top(top_m)
    )


def _restrict_to(ranked: RankedRetrieval, traj_ids: Sequence[int]) -> RankedRetrieval:
    """Ranked entries for the given trajectories, in the given order."""
    by_traj = {e.candidate.trajectory_id: e for e in ranked.entries}
    return RankedRetrieval(
        entries=tuple(by_traj[ti] for ti in traj_ids if ti in by_traj)
    )


def rollout(
    scenario: sim.Scenario,
    cfg: sim.TaskConfig,
    model: PolicyModel,
    gate: OodGate,
    candidates_index: CandidateIndex,
    expert: Callable[[RefineContext], str],
    icfg: InterventionConfig,
    seed: int,
    segmenter: Callable[[LabelGridImage], Sequence[SegmentMask]] | None = None,
    on_step: StepObserver | None = None,
) -> RolloutRecord:
    """Run one closed-loop episode and return its full record.

    Deterministic given (scenario, method, seed) and a deterministic expert.
    Simulator faults are recorded as failures rather than raised; an expert
    abort ends the rollout early and marks it incomplete.
    """
    seg = segmenter if segmenter is not None else CachedSegmenter()
    ood_ns, id_ns = sim.expert_namespaces(scenario, cfg)
    refine_cfg = RefineConfig(
        n_clusters=icfg.n_clusters,
        entropy_max=icfg.entropy_max,
        max_queries=icfg.max_queries,
        top_m=icfg.top_m,
    )
    counterfactual_desc = None
    if icfg.method in ("policy-embed", "visual-embed"):
        counterfactual_desc = decode_oracle(scenario, cfg)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B]))
    ep, state = sim.episode_init(scenario, cfg, seed)
    states = [state]
    obs = sim.observe(state, ep)
    keep = max(model.encoder.config.history, 1)
    window: list[Observation] = [obs]

    def plan_lookup(ti: int, t: int) -> np.ndarray:
        return model.plans[model.entry_index(ti, t)]

    description: CorrespondenceDescription | None = None
    held_ids: list[int] = []
    entries: list[StepEntry] = []
    complete = True
    failure = ""

    while state.t < cfg.horizon and not failure and complete:
        z = model.encoder.encode(window)
        score = gate.score(z)
        flagged = gate.is_ood(z)
        plan_z = z
        retrieval_rows: tuple[tuple[int, int, float], ...] = ()
        counterfactual_rows: tuple[tuple[int, int], ...] = ()
        events: list[FeedbackEvent] = []
        fallback = False
        entropy: float | None = None
        ranked: RankedRetrieval | None = None

        if icfg.method != "vanilla" and flagged:
            candidates = candidates_index.query(obs.proprio, icfg.lambda_q)
            if not candidates:
                fallback = True  # nothing comparable demonstrated; act as-is
            elif icfg.method == "aba":
                query_t = state.t

                def counted(ctx: RefineContext) -> str:
                    answer = expert(ctx)
                    events.append(
                        FeedbackEvent(
                            t=query_t,
                            context_digest=ctx.observation.digest(),
                            statement=answer,
                        )
                    )
                    return answer

                try:
                    if description is None:
                        # first detection: always solicit an opening statement
                        ranked0 = rank_retrieval(obs, candidates, EMPTY_DESCRIPTION, seg)
                        labels0 = cluster_candidate_plans(
                            candidates, plan_lookup, refine_cfg.n_clusters
                        )
                        entropy0 = mode_entropy(
                            [labels0[k] for k in ranked0.ids(refine_cfg.top_m)]
                        )
                        opening = counted(
                            RefineContext(
                                observation=obs,
                                ranked=ranked0,
                                description=EMPTY_DESCRIPTION,
                                entropy=entropy0,
                                queries_used=0,
                            )
                        )
                        description = EMPTY_DESCRIPTION.extended(
                            decode_description(opening, ood_ns, id_ns)
                        )
                    probe = rank_retrieval(obs, candidates, description, seg)
                    held = (
                        _restrict_to(probe, held_ids)
                        if held_ids and all(e.score <= 0.0 for e in probe.top(icfg.top_m))
                        else None
                    )
                    if held is not None and held.entries:
                        # footprints stop overlapping mid-carry and every
                        # alignment score collapses to zero; stay committed to
                        # the trajectories chosen while evidence was informative,
                        # re-matched at the current proprioception
                        ranked = held
                        retrieval_rows = _retrieval_rows(ranked, icfg.top_m)
                        plan_z = intervene(ranked, icfg.top_m, model)
                    else:
                        result = refine_until_confident(
                            obs,
                            candidates,
                            plan_lookup,
                            counted,
                            ood_ns,
                            id_ns,
                            seg,
                            refine_cfg,
                            initial=description,
                        )
                        description = result.description
                        ranked = result.ranked
                        entropy = result.entropy_trace[-1]
                        retrieval_rows = _retrieval_rows(ranked, icfg.top_m)
                        plan_z = intervene(ranked, icfg.top_m, model)
                        held_ids = [
                            e.candidate.trajectory_id for e in ranked.top(icfg.top_m)
                        ]
                except ExpertAbort:
                    complete = False
                    break
            else:
                ranked = rank_by_embedding(
                    z, candidates, model, visual_only=icfg.method == "visual-embed"
                )
                retrieval_rows = _retrieval_rows(ranked, icfg.top_m)
                assert counterfactual_desc is not None
                shadow = rank_retrieval(obs, candidates, counterfactual_desc, seg)
                counterfactual_rows = tuple(shadow.ids(icfg.top_m))
                plan_z = intervene(ranked, icfg.top_m, model)

        plan, _ = sample_plan(model, plan_z, rng)
        executed = 0
        while executed < cfg.exec_horizon and state.t < cfg.horizon:
            action = plan.steps[executed]
            if on_step is not None:
                on_step(
                    StepSnapshot(
                        t=state.t,
                        observation=obs,
                        id_score=score,
                        ood=flagged,
                        method=icfg.method,
                        action=action,
                        entropy=entropy,
                        ranked=ranked,
                        description=description,
                    )
                )
            entry = StepEntry(
                t=state.t,
                digest=obs.digest(),
                id_score=score,
                ood=flagged,
                method=icfg.method,
                action=action,
                retrieval=retrieval_rows if executed == 0 else (),
                counterfactual=counterfactual_rows if executed == 0 else (),
                feedback=tuple(events) if executed == 0 else (),
                fallback=fallback if executed == 0 else False,
            )
            try:
                state = sim.step(state, action, ep)
            except SimulationError as e:
                failure = str(e)
                entries.append(entry)
                break
            entries.append(entry)
            states.append(state)
            executed += 1
            obs = sim.observe(state, ep)
            window.append(obs)
            del window[:-keep]

    outcome = sim.episode_outcome(states, ep)
    return RolloutRecord(
        scenario_id=scenario.scenario_id,
        method=icfg.method,
        seed=seed,
        horizon=cfg.horizon,
        entries=tuple(entries),
        subgoals=outcome.subgoals,
        success=outcome.success and complete and not failure,
        cumulative=outcome.cumulative,
        detected_mode=outcome.detected_mode,
        feedback_total=sum(len(e.feedback) for e in entries),
        complete=complete,
        failure=failure,
    )


# --- record persistence --------------------------------------------------------------


def record_to_json(record: RolloutRecord) -> dict:
    return {
        "scenario": record.scenario_id,
        "method": record.method,
        "seed": record.seed,
        "horizon": record.horizon,
        "subgoals": [[name, ok] for name, ok in record.subgoals],
        "success": record.success,
        "cumulative": record.cumulative,
        "detected_mode": record.detected_mode,
        "feedback_total": record.feedback_total,
        "complete": record.complete,
        "failure": record.failure,
        "entries": [
            {
                "t": e.t,
                "digest": e.digest,
                "id_score": e.id_score,
                "ood": e.ood,
                "method": e.method,
                "action": list(e.action),
                "retrieval": [[ti, ts, s] for ti, ts, s in e.retrieval],
                "counterfactual": [[ti, ts] for ti, ts in e.counterfactual],
                "feedback": [
                    {"t": f.t, "digest": f.context_digest, "statement": f.statement}
                    for f in e.feedback
                ],
                "fallback": e.fallback,
            }
            for e in record.entries
        ],
    }


def record_from_json(d: dict) -> RolloutRecord:
    try:
        entries = tuple(
            StepEntry(
                t=e["t"],
                digest=e["digest"],
                id_score=e["id_score"],
                ood=e["ood"],
                method=e["method"],
                action=tuple(e["action"]),
                retrieval=tuple((ti, ts, s) for ti, ts, s in e["retrieval"]),
                counterfactual=tuple((ti, ts) for ti, ts in e["counterfactual"]),
                feedback=tuple(
                    FeedbackEvent(t=f["t"], context_digest=f["digest"], statement=f["statement"])
                    for f in e["feedback"]
                ),
                fallback=e["fallback"],
            )
            for e in d["entries"]
        )
        return RolloutRecord(
            scenario_id=d["scenario"],
            method=d["method"],
            seed=d["seed"],
            horizon=d["horizon"],
            entries=entries,
            subgoals=tuple((name, ok) for name, ok in d["subgoals"]),
            success=d["success"],
            cumulative=d["cumulative"],
            detected_mode=d["detected_mode"],
            feedback_total=d["feedback_total"],
            complete=d["complete"],
            failure=d["failure"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed rollout record: {e}") from e


def save_records(records: Sequence[RolloutRecord], path: str) -> None:
    """Write records as line-delimited JSON, atomically."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".jsonl.tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            for record in records:
                fh.write(json.dumps(record_to_json(record), sort_keys=True))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_records(path: str) -> list[RolloutRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path} line {lineno}: not valid JSON: {e}") from e
            out.append(record_from_json(doc))
    return out
