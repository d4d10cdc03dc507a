"""Benchmark harness: demo generation, fitting, calibration, and reports.

A bench run executes the scenario x method matrix with scripted experts,
persists every rollout record, and derives the report purely from those
records, so every reported number can be recomputed offline. Report
assembly is a deterministic single-threaded reduce over sorted record ids;
with a fixed seed the rendered text and CSV files are byte-identical
across reruns.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import runtime as rt
from . import sim
from .core import Dataset, config_hash, load_dataset, save_dataset
from .encoding import EncoderConfig
from .errors import AbaError, RuntimeFailure, ValidationError
from .ood import IdIndex, OodGate, calibrate_gate, load_gate, save_gate
from .policy import PolicyConfig, PolicyModel, fit_policy, load_policy, save_policy
from .runtime import RolloutRecord, load_records, save_records

# Disjoint seed-stream tags: demonstrations, calibration rollouts, and bench
# episodes each draw from their own SeedSequence family so extending one
# never perturbs the others.
DEMO_STREAM = 0xDA7A
CALIBRATION_STREAM = 0xCA1
EPISODE_STREAM = 0xA1

DEFAULT_CALIBRATION_ROLLOUTS = 60


# --- artifact layout -----------------------------------------------------------


def dataset_path(root: str, task: str) -> str:
    return os.path.join(root, "data", f"{task}.dslog")


def model_path(root: str, task: str) -> str:
    return os.path.join(root, "data", f"{task}.pmod")


def gate_path(root: str, task: str) -> str:
    return os.path.join(root, "data", f"{task}.idx")


def run_dir(root: str, task: str, seed: int) -> str:
    return os.path.join(root, "runs", f"{task}-s{seed}")


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise ValidationError(f"missing artifact {path}; run `aba {hint}` first")
    return path


def load_artifacts(root: str, task: str) -> tuple[sim.TaskConfig, Dataset, PolicyModel, OodGate]:
    """Load the dataset, fitted model, and calibrated gate for a task."""
    cfg = sim.task_config(task)
    dataset = load_dataset(_require(dataset_path(root, task), "gen-data"))
    model = load_policy(_require(model_path(root, task), "fit"))
    gate = load_gate(_require(gate_path(root, task), "calibrate"))
    if model.dataset_hash and dataset.config_hash and model.dataset_hash != dataset.config_hash:
        raise ValidationError(
            f"model at {model_path(root, task)} was fitted on a different dataset config"
        )
    return cfg, dataset, model, gate


# --- dataset generation and fitting ----------------------------------------------


def id_scenarios(cfg: sim.TaskConfig) -> list[sim.Scenario]:
    """The task's in-distribution conditions, in stable id order."""
    suite = sim.make_benchmark_suite(cfg.name)
    return sorted((s for s in suite if s.ood_kind == "none"), key=lambda s: s.scenario_id)

def gen_data(cfg: sim.TaskConfig, demos_per_mode: int, seed: int) -> Dataset:
    """Collect scripted demonstrations, alternating the ID conditions.

    Both ID scenarios, one per behavior mode, are interleaved so any prefix
    of the dataset stays mode-balanced.
    """
    if demos_per_mode < 1:
        raise ValidationError(f"demos_per_mode must be >= 1, got {demos_per_mode}")
    ids = id_scenarios(cfg)
    n = 2 * demos_per_mode
    seeds = np.random.SeedSequence([seed, DEMO_STREAM]).generate_state(n)
    trajectories = []
    for i in range(n):
        scenario = ids[i % len(ids)]
        demo_seed = int(seeds[i])
        try:
            trajectories.append(sim.demonstrate(scenario, cfg, demo_seed))
        except AbaError as e:
            raise RuntimeFailure(
                f"demonstration {i} ({scenario.scenario_id}, seed {demo_seed}) failed: {e}"
            ) from e
    return Dataset(
        trajectories=tuple(trajectories),
        label_registry=dict(cfg.label_registry),
        plan_length=cfg.plan_length,
        grid_width=cfg.grid_width,
        grid_height=cfg.grid_height,
        config_hash=config_hash(cfg.config_payload()),
    )


def fit_task(dataset: Dataset, cfg: sim.TaskConfig) -> PolicyModel:
    """Fit the retrieval policy with the task's encoder and sampling knobs."""
    return fit_policy(
        dataset,
        encoder_config=EncoderConfig(pool_grid=cfg.pool_grid, history=cfg.history),
        config=PolicyConfig(
            knn=cfg.knn,
            tau_scale=cfg.tau_scale,
            sigma_scale=cfg.sigma_scale,
            action_bound=cfg.action_bound,
        ),
    )


# --- calibration -----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    """The calibrated gate plus the evidence it was cut from."""

    gate: OodGate
    scores: tuple[float, ...]
    rollouts_run: int
    rollouts_kept: int


def calibrate_task(
    cfg: sim.TaskConfig,
    model: PolicyModel,
    dataset: Dataset,
    seed: int,
    percentile: float | None = None,
    rollouts: int = DEFAULT_CALIBRATION_ROLLOUTS,
) -> CalibrationResult:
    """Calibrate the OOD threshold on closed-loop in-distribution replans.

    Runs vanilla rollouts on the ID conditions with the gate disarmed and
    pools the replan-time scores. Only successful rollouts contribute: a
    failed replay has drifted somewhere no demonstration covers, and its
    scores would drag the quantile below the nominal band.
    """
    p = cfg.percentile if percentile is None else percentile
    if not 0.0 < p < 1.0:
        raise ValidationError(f"percentile must be in (0, 1), got {p}")
    if rollouts < 1:
        raise ValidationError(f"calibration needs at least one rollout, got {rollouts}")
    index = IdIndex(model.embeddings)
    disarmed = OodGate(index=index, threshold=-1.0, percentile=p)
    candidates = rt.CandidateIndex(dataset)
    segmenter = rt.CachedSegmenter()
    vanilla = rt.InterventionConfig.from_task(cfg, "vanilla")
    ids = id_scenarios(cfg)
    seeds = np.random.SeedSequence([seed, CALIBRATION_STREAM]).generate_state(rollouts)
    scores: list[float] = []
    kept = 0
    for j in range(rollouts):
        record = rt.rollout(
            ids[j % len(ids)],
            cfg,
            model,
            disarmed,
            candidates,
            rt.ScriptedExpert(()),
            vanilla,
            int(seeds[j]),
            segmenter=segmenter,
        )
        if not record.success:
            continue
        kept += 1
        scores.extend(e.id_score for e in record.entries[:: cfg.exec_horizon])
    if not scores:
        raise RuntimeFailure("no calibration rollout succeeded; cannot set a threshold")
    gate = calibrate_gate(index, scores, p)
    return CalibrationResult(
        gate=gate, scores=tuple(scores), rollouts_run=rollouts, rollouts_kept=kept
    )


# --- bench matrix ----------------------------------------------------------------


def record_id(record: RolloutRecord) -> str:
    return f"{record.scenario_id}/{record.method}/s{record.seed}"


def _sort_key(record: RolloutRecord) -> tuple[str, str, int]:
    return (record.scenario_id, record.method, record.seed)


def run_bench(
    cfg: sim.TaskConfig,
    model: PolicyModel,
    gate: OodGate,
    dataset: Dataset,
    methods: Sequence[str],
    rollouts_per_scenario: int,
    seed: int,
    out_dir: str | None = None,
) -> "BenchReport":
    """Execute the scenario x method matrix and build the report.

    Episode seeds are shared across scenarios and methods so method
    comparisons are paired. A crashing rollout becomes a failure record and
    the bench continues. When out_dir is given the records are persisted
    there first and the report is rebuilt from the reloaded file, so the
    report provably derives from what is on disk.
    """
    if rollouts_per_scenario < 1:
        raise ValidationError(f"rollouts must be >= 1, got {rollouts_per_scenario}")
    for m in methods:
        if m not in rt.METHODS:
            raise ValidationError(f"unknown method {m!r}; expected one of {rt.METHODS}")
    if len(set(methods)) != len(methods):
        raise ValidationError("duplicate methods requested")
    scenarios = sorted(sim.make_benchmark_suite(cfg.name), key=lambda s: s.scenario_id)
    seeds = np.random.SeedSequence([seed, EPISODE_STREAM]).generate_state(rollouts_per_scenario)
    candidates = rt.CandidateIndex(dataset)
    segmenter = rt.CachedSegmenter()
    records: list[RolloutRecord] = []
    for scenario in scenarios:
        for method in methods:
            icfg = rt.InterventionConfig.from_task(cfg, method)
            for episode_seed in seeds:
                records.append(
                    _contained_rollout(
                        scenario, cfg, model, gate, candidates, icfg, int(episode_seed), segmenter
                    )
                )
    records.sort(key=_sort_key)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "records.jsonl")
        save_records(records, path)
        _write_manifest(out_dir, cfg, methods, rollouts_per_scenario, seed, len(records))
        records = load_records(path)
    return build_report(records)


def _contained_rollout(
    scenario: sim.Scenario,
    cfg: sim.TaskConfig,
    model: PolicyModel,
    gate: OodGate,
    candidates: rt.CandidateIndex,
    icfg: rt.InterventionConfig,
    episode_seed: int,
    segmenter: rt.CachedSegmenter,
) -> RolloutRecord:
    expert = rt.ScriptedExpert(tuple(scenario.oracle))
    try:
        return rt.rollout(
            scenario, cfg, model, gate, candidates, expert, icfg, episode_seed,
            segmenter=segmenter,
        )
    except Exception as e:  # crash containment: the bench must finish
        return RolloutRecord(
            scenario_id=scenario.scenario_id,
            method=icfg.method,
            seed=episode_seed,
            horizon=cfg.horizon,
            entries=(),
            subgoals=(),
            success=False,
            cumulative=0.0,
            detected_mode=None,
            feedback_total=0,
            complete=False,
            failure=f"{type(e).__name__}: {e}",
        )


def _write_manifest(
    out_dir: str,
    cfg: sim.TaskConfig,
    methods: Sequence[str],
    rollouts_per_scenario: int,
    seed: int,
    record_count: int,
) -> None:
    manifest = {
        "task": cfg.name,
        "seed": seed,
        "methods": list(methods),
        "rollouts_per_scenario": rollouts_per_scenario,
        "records": record_count,
        "config_hash": config_hash(cfg.config_payload()),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


# --- report ----------------------------------------------------------------------


@dataclass(frozen=True)
class BenchCell:
    """Aggregates for one scenario x method cell."""

    scenario_id: str
    ood_kind: str
    method: str
    rollouts: int
    success_rate: float
    subgoal_rates: tuple[tuple[str, float], ...]
    feedback_mean: float
    feedback_se: float
    failures: int

    def __post_init__(self) -> None:
        rates = [self.success_rate] + [r for _, r in self.subgoal_rates]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValidationError(f"{self.scenario_id}/{self.method}: rate outside [0, 1]")
        if self.rollouts < 1:
            raise ValidationError(f"{self.scenario_id}/{self.method}: empty cell")
        if self.feedback_se < 0.0:
            raise ValidationError(f"{self.scenario_id}/{self.method}: negative standard error")


@dataclass(frozen=True)
class PrecisionRow:
    """Retrieval precision of one baseline rollout against the expert ranking.

    precision averages, over the rollout's retrieval timesteps, the overlap
    between the baseline's top-M retrieved pairs and the top-M the
    correspondence ranking would have fetched at the same observation.
    paper_subset marks the place-task ID and background conditions, the
    slice with meaningful coverage of both successes and failures.
    """

    scenario_id: str
    method: str
    seed: int
    retrieval_steps: int
    precision: float
    cumulative: float
    paper_subset: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.precision <= 1.0:
            raise ValidationError(f"precision {self.precision} outside [0, 1]")
        if not 0.0 <= self.cumulative <= 1.0:
            raise ValidationError(f"cumulative success {self.cumulative} outside [0, 1]")


@dataclass(frozen=True)
class BenchReport:
    """Everything the renderer needs, derived from persisted records only."""

    cells: tuple[BenchCell, ...]
    precision: tuple[PrecisionRow, ...]
    record_count: int


def _mean_se(counts: Sequence[int]) -> tuple[float, float]:
    n = len(counts)
    mean = sum(counts) / n
    if n < 2:
        return mean, 0.0
    var = sum((c - mean) ** 2 for c in counts) / (n - 1)
    return mean, math.sqrt(var / n)


def _check_monotone(record: RolloutRecord) -> None:
    # subgoals are ordered: a later one cannot hold once an earlier one failed
    reached = True
    for name, ok in record.subgoals:
        if ok and not reached:
            raise RuntimeFailure(
                f"rollout {record_id(record)}: subgoal {name!r} holds after an earlier miss"
            )
        reached = ok


def _ood_kinds() -> dict[str, str]:
    kinds: dict[str, str] = {}
    for task in sim.TASKS:
        for s in sim.load_scenarios(task):
            kinds[s.scenario_id] = s.ood_kind
    return kinds


def build_report(records: Sequence[RolloutRecord]) -> BenchReport:
    """Reduce records into the report; pure given the record list."""
    ordered = sorted(records, key=_sort_key)
    ids = [record_id(r) for r in ordered]
    dupes = {i for i, j in zip(ids, ids[1:]) if i == j}
    if dupes:
        raise ValidationError(f"duplicate rollout records: {sorted(dupes)[0]}")
    kinds = _ood_kinds()
    cells: list[BenchCell] = []
    groups: dict[tuple[str, str], list[RolloutRecord]] = {}
    for r in ordered:
        if r.scenario_id not in kinds:
            raise ValidationError(f"record {record_id(r)} names an unknown scenario")
        _check_monotone(r)
        groups.setdefault((r.scenario_id, r.method), []).append(r)
    for (scenario_id, method), recs in sorted(groups.items()):
        names: list[str] = []
        for r in recs:
            for name, _ in r.subgoals:
                if name not in names:
                    names.append(name)
        # a crashed record has no subgoal flags; it counts as missing them all
        subgoal_rates = tuple(
            (name, sum(1 for r in recs if dict(r.subgoals).get(name, False)) / len(recs))
            for name in names
        )
        mean, se = _mean_se([r.feedback_total for r in recs])
        cells.append(
            BenchCell(
                scenario_id=scenario_id,
                ood_kind=kinds[scenario_id],
                method=method,
                rollouts=len(recs),
                success_rate=sum(1 for r in recs if r.success) / len(recs),
                subgoal_rates=subgoal_rates,
                feedback_mean=mean,
                feedback_se=se,
                failures=sum(1 for r in recs if not r.complete or r.failure),
            )
        )
    baselines = [r for r in ordered if r.method in ("policy-embed", "visual-embed")]
    aba = [r for r in ordered if r.method == "aba"]
    precision = precision_analysis(baselines, aba) if baselines and aba else ()
    return BenchReport(cells=tuple(cells), precision=precision, record_count=len(ordered))


def precision_analysis(
    baseline_records: Sequence[RolloutRecord],
    aba_records: Sequence[RolloutRecord],
) -> tuple[PrecisionRow, ...]:
    """Per baseline rollout: mean top-M overlap with the expert ranking.

    Each baseline replan stores, alongside its own retrieval, the pairs the
    correspondence ranking would have fetched at that same observation; the
    overlap of the two top-M sets is the precision at that timestep. Pairing
    separately executed rollouts timestep-by-timestep would be ill-posed
    once executions diverge, so the comparison rides inside the baseline's
    own records. Rollouts that never retrieved yield no row.
    """
    covered = {(r.scenario_id, r.seed) for r in aba_records}
    kinds = _ood_kinds()
    rows: list[PrecisionRow] = []
    for r in sorted(baseline_records, key=_sort_key):
        if r.method not in ("policy-embed", "visual-embed"):
            raise ValidationError(f"{record_id(r)} is not a baseline rollout")
        if (r.scenario_id, r.seed) not in covered:
            raise RuntimeFailure(
                f"rollout {record_id(r)} has no matching expert-method rollout"
            )
        overlaps: list[float] = []
        for e in r.entries:
            if not e.retrieval:
                continue
            if not e.counterfactual or len(e.counterfactual) != len(e.retrieval):
                raise RuntimeFailure(
                    f"rollout {record_id(r)}: retrieval at t={e.t} is misaligned "
                    f"with its expert-ranked counterpart"
                )
            retrieved = {(ti, ts) for ti, ts, _ in e.retrieval}
            expected = set(e.counterfactual)
            overlaps.append(len(retrieved & expected) / len(expected))
        if not overlaps:
            continue
        task = r.scenario_id.split("/", 1)[0]
        rows.append(
            PrecisionRow(
                scenario_id=r.scenario_id,
                method=r.method,
                seed=r.seed,
                retrieval_steps=len(overlaps),
                precision=sum(overlaps) / len(overlaps),
                cumulative=r.cumulative,
                paper_subset=(
                    task == "place-in-cup" and kinds.get(r.scenario_id) in ("none", "background")
                ),
            )
        )
    return tuple(rows)


# --- rendering -------------------------------------------------------------------

_METHOD_ORDER = {m: i for i, m in enumerate(rt.METHODS)}


def _method_columns(cells: Sequence[BenchCell]) -> list[str]:
    present = sorted({c.method for c in cells}, key=lambda m: _METHOD_ORDER[m])
    return present


def _matrix_lines(
    title: str,
    cells: Sequence[BenchCell],
    value: "callable",
) -> list[str]:
    methods = _method_columns(cells)
    by_key = {(c.scenario_id, c.method): c for c in cells}
    scenario_ids = sorted({c.scenario_id for c in cells})
    kind_of = {c.scenario_id: c.ood_kind for c in cells}
    left = max([len("scenario")] + [len(s) for s in scenario_ids])
    kindw = max([len("kind")] + [len(kind_of[s]) for s in scenario_ids])
    width = max([12] + [len(m) for m in methods])
    lines = [title, "-" * len(title)]
    header = f"{'scenario':<{left}}  {'kind':<{kindw}}"
    for m in methods:
        header += f"  {m:>{width}}"
    lines.append(header)
    for sid in scenario_ids:
        row = f"{sid:<{left}}  {kind_of[sid]:<{kindw}}"
        for m in methods:
            cell = by_key.get((sid, m))
            row += f"  {value(cell) if cell else '-':>{width}}"
        lines.append(row)
    return lines


def render_text(report: BenchReport) -> str:
    """The scenario x method tables as one plain-text page."""
    out: list[str] = ["benchmark report", "================", ""]
    out.append(f"records: {report.record_count}")
    out.append("")
    if not report.cells:
        out.extend(["success rate", "------------", "(no records)", ""])
        out.extend(["feedback per rollout", "--------------------", "(no records)", ""])
        out.extend(["retrieval precision", "-------------------", "(no rows)", ""])
        return "\n".join(out)
    out.extend(
        _matrix_lines("success rate", report.cells, lambda c: f"{c.success_rate:.3f}")
    )
    out.append("")
    out.extend(
        _matrix_lines(
            "feedback per rollout",
            report.cells,
            lambda c: f"{c.feedback_mean:.2f}+-{c.feedback_se:.2f}",
        )
    )
    out.append("")
    out.extend(["subgoal rates", "-------------"])
    for c in sorted(report.cells, key=lambda c: (c.scenario_id, _METHOD_ORDER[c.method])):
        for name, rate in c.subgoal_rates:
            out.append(f"{c.scenario_id}  {c.method:<12}  {name:<9}  {rate:.3f}")
    out.append("")
    out.extend(["retrieval precision", "-------------------"])
    if not report.precision:
        out.append("(no rows)")
    else:
        for row in report.precision:
            star = " *" if row.paper_subset else ""
            out.append(
                f"{row.scenario_id}  {row.method:<12}  s{row.seed:<11}"
                f"  precision {row.precision:.4f}  cumulative {row.cumulative:.3f}{star}"
            )
        out.append("(* = place-task ID and background conditions)")
    out.append("")
    return "\n".join(out)


def _csv_bytes(header: Sequence[str], rows: Sequence[Sequence[object]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue().encode()


def render_csvs(report: BenchReport) -> dict[str, bytes]:
    """Plot-data files keyed by filename: success, feedback, precision."""
    success_rows = []
    feedback_rows = []
    for c in sorted(report.cells, key=lambda c: (c.scenario_id, _METHOD_ORDER[c.method])):
        success_rows.append(
            [c.scenario_id, c.ood_kind, c.method, c.rollouts, f"{c.success_rate:.6f}"]
            + [f"{rate:.6f}" for _, rate in c.subgoal_rates]
        )
        feedback_rows.append(
            [
                c.scenario_id,
                c.ood_kind,
                c.method,
                c.rollouts,
                f"{c.feedback_mean:.6f}",
                f"{c.feedback_se:.6f}",
            ]
        )
    subgoal_names: list[str] = []
    for c in report.cells:
        for name, _ in c.subgoal_rates:
            if name not in subgoal_names:
                subgoal_names.append(name)
    precision_rows = [
        [
            row.scenario_id,
            row.method,
            row.seed,
            row.retrieval_steps,
            f"{row.precision:.6f}",
            f"{row.cumulative:.6f}",
            int(row.paper_subset),
        ]
        for row in report.precision
    ]
    return {
        "success.csv": _csv_bytes(
            ["scenario", "kind", "method", "rollouts", "success_rate"]
            + [f"subgoal_{n}" for n in subgoal_names],
            success_rows,
        ),
        "feedback.csv": _csv_bytes(
            ["scenario", "kind", "method", "rollouts", "feedback_mean", "feedback_se"],
            feedback_rows,
        ),
        "precision.csv": _csv_bytes(
            [
                "scenario",
                "method",
                "seed",
                "retrieval_steps",
                "precision",
                "cumulative_success",
                "paper_subset",
            ],
            precision_rows,
        ),
    }


def _render_figures(report: BenchReport, fig_dir: str) -> list[str]:
    # figures accompany the delimited outputs; everything they show is
    # recomputable from the CSVs next to them
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written: list[str] = []
    os.makedirs(fig_dir, exist_ok=True)
    methods = _method_columns(report.cells)
    scenario_ids = sorted({c.scenario_id for c in report.cells})
    by_key = {(c.scenario_id, c.method): c for c in report.cells}

    def save(fig, name: str) -> None:
        path = os.path.join(fig_dir, name)
        # a None Software entry keeps the encoder version string out of the
        # file so reruns produce the same bytes
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    x = np.arange(len(scenario_ids))
    bar_w = 0.8 / max(len(methods), 1)
    for name, field in (("success.png", "success_rate"), ("feedback.png", "feedback_mean")):
        fig, ax = plt.subplots(figsize=(8, 4))
        for i, m in enumerate(methods):
            vals = [getattr(by_key[(s, m)], field) if (s, m) in by_key else 0.0 for s in scenario_ids]
            errs = None
            if field == "feedback_mean":
                errs = [by_key[(s, m)].feedback_se if (s, m) in by_key else 0.0 for s in scenario_ids]
            ax.bar(x + (i - (len(methods) - 1) / 2) * bar_w, vals, bar_w, yerr=errs, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels(scenario_ids, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("success rate" if field == "success_rate" else "feedback per rollout")
        ax.legend(fontsize=8)
        fig.tight_layout()
        save(fig, name)

    if report.precision:
        fig, ax = plt.subplots(figsize=(5, 4))
        for subset, marker, label in ((True, "o", "place ID+background"), (False, "x", "other")):
            xs = [r.precision for r in report.precision if r.paper_subset == subset]
            ys = [r.cumulative for r in report.precision if r.paper_subset == subset]
            if xs:
                ax.scatter(xs, ys, marker=marker, label=label)
        ax.set_xlabel("retrieval precision vs expert ranking")
        ax.set_ylabel("cumulative subgoal success")
        ax.set_xlim(-0.05, 1.05)
        ax.set_ylim(-0.05, 1.05)
        ax.legend(fontsize=8)
        fig.tight_layout()
        save(fig, "precision.png")
    return written


def report_render(report: BenchReport, out_dir: str) -> list[str]:
    """Write the text table, CSV plot data, and figures; returns the paths.

    Text and CSV bytes are a pure function of the report, so rerunning on
    the same records rewrites identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    text_path = os.path.join(out_dir, "report.txt")
    with open(text_path, "w") as fh:
        fh.write(render_text(report))
    written.append(text_path)
    for name, blob in render_csvs(report).items():
        path = os.path.join(out_dir, name)
        with open(path, "wb") as fh:
            fh.write(blob)
        written.append(path)
    if report.cells:
        written.extend(_render_figures(report, os.path.join(out_dir, "figures")))
    return written


def analyze(runs_dir: str) -> BenchReport:
    """Rebuild and re-render the report for a persisted run directory."""
    path = os.path.join(runs_dir, "records.jsonl")
    if not os.path.exists(path):
        raise ValidationError(f"{runs_dir} has no records.jsonl; point --runs at a bench run")
    report = build_report(load_records(path))
    report_render(report, runs_dir)
    return report


# --- workflow entry points used by the CLI -----------------------------------------


def do_gen_data(root: str, task: str, demos_per_mode: int | None, seed: int) -> str:
    cfg = sim.task_config(task)
    per_mode = cfg.demos_per_mode if demos_per_mode is None else demos_per_mode
    dataset = gen_data(cfg, per_mode, seed)
    path = dataset_path(root, task)
    save_dataset(dataset, path)
    return path


def do_fit(root: str, task: str) -> str:
    cfg = sim.task_config(task)
    dataset = load_dataset(_require(dataset_path(root, task), "gen-data"))
    model = fit_task(dataset, cfg)
    path = model_path(root, task)
    save_policy(model, path)
    return path


def do_calibrate(
    root: str, task: str, percentile: float | None, seed: int, rollouts: int
) -> tuple[str, CalibrationResult]:
    cfg = sim.task_config(task)
    dataset = load_dataset(_require(dataset_path(root, task), "gen-data"))
    model = load_policy(_require(model_path(root, task), "fit"))
    result = calibrate_task(cfg, model, dataset, seed, percentile, rollouts)
    path = gate_path(root, task)
    save_gate(result.gate, path)
    return path, result


def do_bench(
    root: str,
    task: str,
    methods: Sequence[str],
    rollouts: int,
    seed: int,
) -> tuple[str, BenchReport]:
    cfg, dataset, model, gate = load_artifacts(root, task)
    out = run_dir(root, task, seed)
    report = run_bench(cfg, model, gate, dataset, methods, rollouts, seed, out_dir=out)
    report_render(report, out)
    return out, report
