"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation error (bad names, bad
files, out-of-contract values), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from . import bench, sim
from . import runtime as rt
from .errors import AbaError, ExpertAbort, ValidationError
from .modes import RefineContext

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the documented contract reserves 2
    # for validation, so usage problems are rerouted to 1
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageExit(f"{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="aba", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--root",
        default=".",
        help="workspace holding data/ and runs/ (default: current directory)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect scripted demonstrations")
    p.add_argument("--task", required=True, choices=sorted(sim.TASKS))
    p.add_argument(
        "--demos-per-mode",
        type=int,
        default=None,
        help="demonstrations per behavior mode (default: the task's setting)",
    )
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fit", help="fit the retrieval policy on the dataset")
    p.add_argument("--task", required=True, choices=sorted(sim.TASKS))

    p = sub.add_parser("calibrate", help="set the OOD threshold from ID rollouts")
    p.add_argument("--task", required=True, choices=sorted(sim.TASKS))
    p.add_argument(
        "--percentile",
        type=float,
        default=None,
        help="nominal-score quantile for the alarm (default: the task's setting)",
    )
    p.add_argument("--rollouts", type=int, default=bench.DEFAULT_CALIBRATION_ROLLOUTS)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("rollout", help="run one episode and print its outcome")
    p.add_argument("--scenario", required=True, help="scenario id, e.g. sweep-sort/ood-tack")
    p.add_argument("--method", default="aba", choices=list(rt.METHODS))
    p.add_argument("--expert", default="scripted", choices=["scripted", "interactive"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also append the record to this JSONL file")

    p = sub.add_parser("bench", help="run the scenario x method matrix")
    p.add_argument("--task", required=True, choices=sorted(sim.TASKS))
    p.add_argument(
        "--methods",
        default=",".join(rt.METHODS),
        help="comma-separated subset of: " + ", ".join(rt.METHODS),
    )
    p.add_argument("--rollouts", type=int, default=10, help="rollouts per scenario")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="re-render the report for a persisted run")
    p.add_argument("--runs", required=True, help="run directory containing records.jsonl")

    p = sub.add_parser("serve", help="serve a live rollout for the operator console")
    p.add_argument("--scenario", required=True)
    p.add_argument("--method", default="aba", choices=list(rt.METHODS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    return parser


def _print_record(record: rt.RolloutRecord) -> None:
    status = "success" if record.success else "failure"
    if not record.complete:
        status += " (incomplete)"
    print(f"{record.scenario_id} {record.method} seed {record.seed}: {status}")
    for name, ok in record.subgoals:
        print(f"  subgoal {name}: {'yes' if ok else 'no'}")
    if record.detected_mode:
        print(f"  detected mode: {record.detected_mode}")
    print(f"  feedback events: {record.feedback_total}")
    if record.failure:
        print(f"  failure: {record.failure}")


def _stdin_expert(ctx: RefineContext) -> str:
    """Prompt a human on the terminal for one feedback statement."""
    top = ctx.ranked.top(5)
    print(f"\nfeedback query {ctx.queries_used + 1}: mode entropy {ctx.entropy:.3f}")
    for e in top:
        print(
            f"  candidate traj {e.candidate.trajectory_id} t={e.candidate.timestep}"
            f" ({e.candidate.mode_label}) alignment {e.score:.3f}"
        )
    print('state a correspondence, e.g. "match pencil with pen", or "pass":')
    line = sys.stdin.readline()
    if not line:
        raise ExpertAbort("stdin closed")
    return line.strip()


def _cmd_gen_data(args: argparse.Namespace) -> int:
    path = bench.do_gen_data(args.root, args.task, args.demos_per_mode, args.seed)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_fit(args: argparse.Namespace) -> int:
    path = bench.do_fit(args.root, args.task)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_calibrate(args: argparse.Namespace) -> int:
    path, result = bench.do_calibrate(
        args.root, args.task, args.percentile, args.seed, args.rollouts
    )
    print(
        f"kept {result.rollouts_kept}/{result.rollouts_run} rollouts,"
        f" {len(result.scores)} replan scores,"
        f" threshold {result.gate.threshold:.6f} (p={result.gate.percentile})"
    )
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_rollout(args: argparse.Namespace) -> int:
    scenario, cfg = sim.find_scenario(args.scenario)
    _, dataset, model, gate = bench.load_artifacts(args.root, cfg.name)
    candidates = rt.CandidateIndex(dataset)
    expert = (
        _stdin_expert
        if args.expert == "interactive"
        else rt.ScriptedExpert(tuple(scenario.oracle))
    )
    record = rt.rollout(
        scenario,
        cfg,
        model,
        gate,
        candidates,
        expert,
        rt.InterventionConfig.from_task(cfg, args.method),
        args.seed,
    )
    _print_record(record)
    if args.out:
        existing = []
        try:
            existing = rt.load_records(args.out)
        except FileNotFoundError:
            pass
        rt.save_records(existing + [record], args.out)
        print(f"appended record to {args.out}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    methods = [m for m in (s.strip() for s in args.methods.split(",")) if m]
    if not methods:
        raise ValidationError("no methods requested")
    out, report = bench.do_bench(args.root, args.task, methods, args.rollouts, args.seed)
    print(f"wrote {out}")
    print()
    print(bench.render_text(report))
    return EXIT_OK


def _cmd_analyze(args: argparse.Namespace) -> int:
    report = bench.analyze(args.runs)
    print(bench.render_text(report))
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.root, args.scenario, method=args.method, seed=args.seed)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "fit": _cmd_fit,
    "calibrate": _cmd_calibrate,
    "rollout": _cmd_rollout,
    "bench": _cmd_bench,
    "analyze": _cmd_analyze,
    "serve": _cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except (AbaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
