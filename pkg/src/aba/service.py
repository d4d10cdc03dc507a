"""Live rollout service.

One rollout runs on a worker thread; the HTTP layer observes it through
immutable JSON snapshots and steers it through a control endpoint and a
single-query feedback mailbox. Stepping suspends while an interactive
query is outstanding, and malformed feedback is rejected at the boundary
so it can never influence the simulator.

Wire protocol: WebSocket `/ws/state` pushes versioned state snapshots;
`GET /state` returns the latest one; `POST /feedback` answers the pending
query with a feature-grammar string; `POST /control` accepts
{"command": "pause" | "resume" | "step"}.
"""

from __future__ import annotations

import asyncio
import threading
from typing import Any

from fastapi import FastAPI, WebSocket
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import bench, sim
from . import runtime as rt
from .core import LabelGridImage, Observation
from .correspond import decode_description
from .errors import GrammarError, ValidationError
from .modes import RefineContext

SCHEMA_VERSION = 1

# fixed label palette; ids beyond it cycle, the unknown label renders gray
_PALETTE = (
    "#f5f0e6",  # 0: ground
    "#3a5fcd",  # 1: agent
    "#d97706",  # 2
    "#15803d",  # 3
    "#b91c1c",  # 4
    "#7c3aed",  # 5
    "#0e7490",  # 6
)
_UNKNOWN_COLOR = "#6b7280"


def render_thumbnail(image: LabelGridImage, known_labels: int) -> dict:
    """Label grid -> flat row-major hex-color list; no label semantics leak."""
    pixels = [
        _PALETTE[c % len(_PALETTE)] if c < known_labels else _UNKNOWN_COLOR
        for c in image.cells
    ]
    return {"width": image.width, "height": image.height, "pixels": pixels}


def _mode_summary(ranked, top_m: int) -> list[dict]:
    counts: dict[str, int] = {}
    for e in ranked.top(top_m):
        counts[e.candidate.mode_label] = counts.get(e.candidate.mode_label, 0) + 1
    return [{"mode": m, "count": c} for m, c in sorted(counts.items())]


class _ServiceExpert(rt.InteractiveExpert):
    """Interactive expert that publishes its pending query to the session."""

    def __init__(self, session: "RolloutSession", timeout: float | None) -> None:
        super().__init__(timeout=timeout)
        self._session = session

    def __call__(self, ctx: RefineContext) -> str:
        self._session._query_opened(ctx)
        try:
            return super().__call__(ctx)
        finally:
            self._session._query_closed()


class RolloutSession:
    """A rollout worker plus the snapshot it exposes.

    The worker publishes an immutable snapshot dict before every simulator
    step and whenever a query opens or closes; readers only ever see the
    latest complete snapshot. The pause gate sits in the step observer, so
    a paused session holds the simulator still without losing state.
    """

    def __init__(
        self,
        root: str,
        scenario: sim.Scenario,
        cfg: sim.TaskConfig,
        method: str,
        seed: int,
        expert_timeout: float | None = None,
    ) -> None:
        self.scenario = scenario
        self.cfg = cfg
        self.method = method
        self.seed = seed
        self.root = root
        _, dataset, model, gate = bench.load_artifacts(root, cfg.name)
        self._model = model
        self._gate = gate
        self._candidates = rt.CandidateIndex(dataset)
        self._ood_ns, self._id_ns = sim.expert_namespaces(scenario, cfg)
        self.expert = _ServiceExpert(self, expert_timeout)
        self._known_labels = len(cfg.label_registry)
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._running = threading.Event()  # cleared = paused
        self._step_credits = 0
        self._seq = 0
        self._status = "paused"
        self._pending_ctx: RefineContext | None = None
        self._snapshot: dict = self._base_snapshot()
        self.record: rt.RolloutRecord | None = None
        self._thread = threading.Thread(target=self._run, daemon=True)

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._thread.start()

    def _run(self) -> None:
        record = rt.rollout(
            self.scenario,
            self.cfg,
            self._model,
            self._gate,
            self._candidates,
            self.expert,
            rt.InterventionConfig.from_task(self.cfg, self.method),
            self.seed,
            on_step=self._on_step,
        )
        self.record = record
        run = bench.run_dir(
            self.root, f"live-{self.scenario.scenario_id.replace('/', '-')}", self.seed
        )
        with self._changed:
            self._status = "done"
            self._snapshot = {
                **self._snapshot,
                "seq": self._next_seq(),
                "status": "done",
                "pending_query": None,
                "record": {
                    "success": record.success,
                    "complete": record.complete,
                    "subgoals": [{"name": n, "ok": ok} for n, ok in record.subgoals],
                    "detected_mode": record.detected_mode,
                    "feedback_total": record.feedback_total,
                    "failure": record.failure,
                },
            }
            self._changed.notify_all()
        rt.save_records([record], f"{run}/records.jsonl")

    # --- worker-side publishing ------------------------------------------------

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _base_snapshot(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seq": 0,
            "status": self._status,
            "scenario": self.scenario.scenario_id,
            "task": self.cfg.name,
            "method": self.method,
            "seed": self.seed,
            "horizon": self.cfg.horizon,
            "labels": {
                "scene": sorted(self._ood_ns),
                "demo": sorted(self._id_ns),
            },
            "t": 0,
            "observation": None,
            "proprio": None,
            "id_score": None,
            "ood": False,
            "action": None,
            "entropy": None,
            "retrieval": [],
            "clusters": [],
            "pending_query": None,
            "record": None,
        }

    def _observation_payload(self, obs: Observation) -> dict:
        return {
            "thumbnail": render_thumbnail(obs.image, self._known_labels),
            "proprio": {
                "x": obs.proprio.x,
                "y": obs.proprio.y,
                "gripper": obs.proprio.gripper,
            },
            "timestep": obs.timestep,
        }

    def _publish_step(self, snap: rt.StepSnapshot) -> None:
        retrieval = []
        clusters: list[dict] = []
        if snap.ranked is not None:
            for e in snap.ranked.top(self.cfg.top_m):
                retrieval.append(
                    {
                        "trajectory_id": e.candidate.trajectory_id,
                        "timestep": e.candidate.timestep,
                        "score": e.score,
                        "mode": e.candidate.mode_label,
                        "thumbnail": render_thumbnail(
                            e.candidate.observation.image, self._known_labels
                        ),
                    }
                )
            clusters = _mode_summary(snap.ranked, self.cfg.top_m)
        with self._changed:
            self._snapshot = {
                **self._snapshot,
                "seq": self._next_seq(),
                "status": self._status,
                "t": snap.t,
                "observation": self._observation_payload(snap.observation),
                "proprio": {
                    "x": snap.observation.proprio.x,
                    "y": snap.observation.proprio.y,
                    "gripper": snap.observation.proprio.gripper,
                },
                "id_score": snap.id_score,
                "ood": snap.ood,
                "action": list(snap.action),
                "entropy": snap.entropy,
                "retrieval": retrieval,
                "clusters": clusters,
                "pending_query": None,
            }
            self._changed.notify_all()

    def _on_step(self, snap: rt.StepSnapshot) -> None:
        self._publish_step(snap)
        while True:
            if self._running.is_set():
                return
            with self._lock:
                if self._step_credits > 0:
                    self._step_credits -= 1
                    return
            # paused: poll cheaply; control changes flip the event
            if self._running.wait(timeout=0.02):
                return

    def _query_opened(self, ctx: RefineContext) -> None:
        with self._changed:
            self._pending_ctx = ctx
            self._status = "waiting_feedback"
            self._snapshot = {
                **self._snapshot,
                "seq": self._next_seq(),
                "status": self._status,
                "entropy": ctx.entropy,
                "pending_query": {
                    "queries_used": ctx.queries_used,
                    "entropy": ctx.entropy,
                    "observation": self._observation_payload(ctx.observation),
                    "retrieval": [
                        {
                            "trajectory_id": e.candidate.trajectory_id,
                            "timestep": e.candidate.timestep,
                            "score": e.score,
                            "mode": e.candidate.mode_label,
                            "thumbnail": render_thumbnail(
                                e.candidate.observation.image, self._known_labels
                            ),
                        }
                        for e in ctx.ranked.top(self.cfg.top_m)
                    ],
                    "clusters": _mode_summary(ctx.ranked, self.cfg.top_m),
                },
            }
            self._changed.notify_all()

    def _query_closed(self) -> None:
        with self._changed:
            self._pending_ctx = None
            self._status = "paused" if not self._running.is_set() else "running"
            self._snapshot = {
                **self._snapshot,
                "seq": self._next_seq(),
                "status": self._status,
                "pending_query": None,
            }
            self._changed.notify_all()

    # --- reader API ------------------------------------------------------------

    @property
    def snapshot(self) -> dict:
        with self._lock:
            return self._snapshot

    def wait_for_change(self, last_seq: int, timeout: float) -> dict:
        with self._changed:
            if self._snapshot["seq"] == last_seq:
                self._changed.wait(timeout)
            return self._snapshot

    def control(self, command: str) -> str:
        if command == "pause":
            self._running.clear()
            status = "paused"
        elif command == "resume":
            self._running.set()
            status = "running"
        elif command == "step":
            with self._lock:
                self._step_credits += 1
            status = "stepping"
        else:
            raise ValidationError(f"unknown control command {command!r}")
        with self._changed:
            if self._status not in ("waiting_feedback", "done"):
                self._status = "paused" if not self._running.is_set() else "running"
                self._snapshot = {
                    **self._snapshot,
                    "seq": self._next_seq(),
                    "status": self._status,
                }
                self._changed.notify_all()
        return status

    def feedback(self, statement: str) -> None:
        """Validate and deliver one statement to the pending query.

        Validation happens here, before the statement crosses into the
        rollout thread; a malformed statement leaves the query pending and
        the simulator untouched.
        """
        if self._pending_ctx is None:
            raise ValidationError("no pending query")
        decode_description(statement, self._ood_ns, self._id_ns)
        self.expert.answer(statement)


class FeedbackBody(BaseModel):
    statement: str


class ControlBody(BaseModel):
    command: str


def create_app(
    root: str,
    scenario_id: str,
    method: str = "aba",
    seed: int = 0,
    expert_timeout: float | None = None,
    autostart: bool = True,
) -> FastAPI:
    """Build the service around one rollout session, initially paused."""
    scenario, cfg = sim.find_scenario(scenario_id)
    if method not in rt.METHODS:
        raise ValidationError(f"unknown method {method!r}; expected one of {rt.METHODS}")
    session = RolloutSession(root, scenario, cfg, method, seed, expert_timeout)
    app = FastAPI(title="aba live rollout")
    # the operator console is served as a static page from elsewhere, so the
    # JSON endpoints must answer cross-origin preflights
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.session = session
    if autostart:
        session.start()

    @app.get("/state")
    def state() -> Any:
        return JSONResponse(session.snapshot)

    @app.post("/control")
    def control(body: ControlBody) -> Any:
        try:
            status = session.control(body.command)
        except ValidationError as e:
            return JSONResponse({"error": str(e)}, status_code=422)
        return {"status": status}

    @app.post("/feedback")
    def feedback(body: FeedbackBody) -> Any:
        try:
            session.feedback(body.statement)
        except GrammarError as e:
            return JSONResponse(
                {"error": str(e), "position": e.position}, status_code=422
            )
        except ValidationError as e:
            return JSONResponse({"error": str(e)}, status_code=409)
        return {"accepted": True}

    @app.websocket("/ws/state")
    async def ws_state(ws: WebSocket) -> None:
        await ws.accept()
        last = -1
        try:
            while True:
                snap = await asyncio.to_thread(session.wait_for_change, last, 0.25)
                if snap["seq"] != last:
                    last = snap["seq"]
                    await ws.send_json(snap)
                else:
                    # let disconnects surface even while the state is idle
                    await asyncio.sleep(0)
        except Exception:
            return

    return app
