"""End-to-end acceptance gate.

One test per headline claim, run against full-scale artifacts built once per
session (both tasks, default demo counts, 50 benchmark rollouts per
condition). Each test prints a single summary line with the measured
numbers; run with `-rA` to see them on passing runs.
"""

import dataclasses
import itertools
import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from aba import bench, cli, sim
from aba import runtime as rt
from aba.correspond import alignment, decode_description, functional_map, iou
from aba.modes import kmeans, mode_entropy
from aba.sim import ground_truth_segment
from conftest import paint
from oracles import brute_alignment
from test_modes import brute_best_inertia

TASKS = ("sweep-sort", "place-in-cup")
BENCH_ROLLOUTS = 50
SUBGOAL_B = {"sweep-sort": "direction", "place-in-cup": "mode"}

OOD_NAMES = {"napkin": 100, "tack": 102}
ID_NAMES = {"paper": 2, "mnm": 3}
STATEMENTS = (
    "match napkin with paper",
    "match tack with mnm",
    "overlap napkin mnm",
    "overlap tack paper",
    "align-edge left napkin paper",
    "align-edge right tack mnm",
    "align-vert top napkin mnm",
    "align-vert base tack paper",
)


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Full artifacts plus one 50-rollout benchmark per task."""
    root = str(tmp_path_factory.mktemp("acceptance"))
    for task in TASKS:
        bench.do_gen_data(root, task, None, 0)
        bench.do_fit(root, task)
        bench.do_calibrate(root, task, percentile=None, seed=0, rollouts=60)
    start = time.perf_counter()
    reports = {}
    for task in TASKS:
        _, report = bench.do_bench(
            root, task, methods=list(rt.METHODS), rollouts=BENCH_ROLLOUTS, seed=0
        )
        reports[task] = report
    bench_seconds = time.perf_counter() - start
    return SimpleNamespace(root=root, reports=reports, bench_seconds=bench_seconds)


def _cells(workspace, **match):
    out = []
    for report in workspace.reports.values():
        for cell in report.cells:
            if all(getattr(cell, key) == val for key, val in match.items()):
                out.append(cell)
    return out


def _pooled_success(cells):
    total = sum(c.rollouts for c in cells)
    return sum(c.success_rate * c.rollouts for c in cells) / total


def _pooled_feedback(cells):
    total = sum(c.rollouts for c in cells)
    return sum(c.feedback_mean * c.rollouts for c in cells) / total


def _pooled_subgoal(cells):
    total = sum(c.rollouts for c in cells)
    acc = 0.0
    for c in cells:
        task = c.scenario_id.split("/", 1)[0]
        rates = dict(c.subgoal_rates)
        acc += rates[SUBGOAL_B[task]] * c.rollouts
    return acc / total


def _random_rects(rng, labels):
    rects = []
    for _ in range(int(rng.integers(0, 3))):
        lbl = int(rng.choice(labels))
        c = sorted(rng.integers(0, 8, size=2).tolist())
        r = sorted(rng.integers(0, 8, size=2).tolist())
        rects.append((lbl, c[0], c[1], r[0], r[1]))
    return rects


def test_criterion_1_alignment_matches_bruteforce_oracle():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        ood = paint(8, 8, _random_rects(rng, (100, 102)))
        idi = paint(8, 8, _random_rects(rng, (2, 3)))
        picks = rng.integers(0, len(STATEMENTS), size=int(rng.integers(1, 5)))
        desc = decode_description(
            "; ".join(STATEMENTS[i] for i in picks), OOD_NAMES, ID_NAMES
        )
        got = alignment(functional_map(ood, idi, desc, ground_truth_segment))
        want = brute_alignment(
            ood, idi, [(f.kind, f.side, f.ood_label, f.id_label) for f in desc.features]
        )
        worst = max(worst, abs(got - want))
        assert abs(got - want) <= 1e-12
        masks = [m.cells for m in ground_truth_segment(ood)]
        masks += [m.cells for m in ground_truth_segment(idi)]
        for a, b in itertools.product(masks, repeat=2):
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    print(
        f"criterion 1: PASS alignment matches the cell-enumeration oracle on "
        f"1000 random 8x8 pairs (worst gap {worst:.2e}, {elapsed:.1f}s)"
    )


def test_criterion_2_mode_clustering_matches_bruteforce():
    rng = np.random.default_rng(23)
    optimal = 0
    trials = 500
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(1, 4))
        pts = rng.normal(size=(n, d))
        got = kmeans(pts, 2).inertia
        best = brute_best_inertia(pts, 2)
        assert got >= best - 1e-9  # the optimum is a hard floor
        optimal += got <= best + 1e-9
    assert optimal / trials >= 0.99

    assert mode_entropy([4] * 7) == 0.0
    assert abs(mode_entropy([0, 1]) - math.log(2.0)) <= 1e-9
    labels = rng.integers(0, 4, size=200).tolist()
    counts = np.bincount(labels, minlength=4).astype(np.float64)
    p = counts[counts > 0] / len(labels)
    assert abs(mode_entropy(labels) - float(-(p * np.log(p)).sum())) <= 1e-9
    print(
        f"criterion 2: PASS clustering found the optimal 2-way partition in "
        f"{optimal}/{trials} trials; entropy identities hold to 1e-9"
    )


def test_criterion_3_gate_false_rate_and_unknown_label_detection(workspace):
    start = time.perf_counter()
    lines = []
    for task in TASKS:
        cfg, dataset, model, gate = bench.load_artifacts(workspace.root, task)
        assert gate.percentile == pytest.approx(0.02)
        fresh = bench.calibrate_task(cfg, model, dataset, seed=1, rollouts=60).scores
        assert len(fresh) >= 500
        false_rate = float(np.mean([s < gate.threshold for s in fresh]))
        assert false_rate <= 0.07

        flags = []
        for sc in sim.make_benchmark_suite(task):
            if sc.ood_kind != "object":
                continue
            for k in range(20):
                ep, state = sim.episode_init(sc, cfg, 5000 + k)
                obs = sim.observe(state, ep)
                flags.append(gate.is_ood(model.encoder.encode([obs])))
        detection = float(np.mean(flags))
        assert detection >= 0.95
        lines.append(
            f"{task}: false-OOD {false_rate:.3f} on {len(fresh)} fresh scores, "
            f"unknown-label detection {detection:.2f}"
        )
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    print(f"criterion 3: PASS {'; '.join(lines)} ({elapsed:.0f}s)")


def test_criterion_4_noiseless_vanilla_succeeds_in_distribution(workspace):
    successes = 0
    total = 0
    for task in TASKS:
        cfg, dataset, model, gate = bench.load_artifacts(workspace.root, task)
        quiet = dataclasses.replace(model, sigma_a=0.0)
        candidates = rt.CandidateIndex(dataset)
        icfg = rt.InterventionConfig.from_task(cfg, "vanilla")
        ids = bench.id_scenarios(cfg)
        seeds = np.random.SeedSequence([0, 0xACC]).generate_state(25)
        for j, s in enumerate(seeds):
            record = rt.rollout(
                ids[j % len(ids)], cfg, quiet, gate, candidates,
                rt.ScriptedExpert(()), icfg, int(s),
            )
            successes += record.success
            total += 1
    assert total == 50
    rate = successes / total
    assert rate >= 0.95
    print(f"criterion 4: PASS noiseless vanilla succeeded in {successes}/{total} rollouts")


def test_criterion_5_guided_adaptation_beats_baselines(workspace):
    assert workspace.bench_seconds < 1800.0
    vanilla_ood = _pooled_success(_cells(workspace, method="vanilla", ood_kind="object"))
    aba_ood = _pooled_success(_cells(workspace, method="aba", ood_kind="object"))
    assert vanilla_ood <= 0.30
    assert aba_ood >= 0.80
    assert aba_ood - vanilla_ood >= 0.50

    for report in workspace.reports.values():
        id_cells = [c for c in report.cells if c.method == "aba" and c.ood_kind == "none"]
        bg_cells = [c for c in report.cells if c.method == "aba" and c.ood_kind == "background"]
        assert abs(_pooled_success(bg_cells) - _pooled_success(id_cells)) <= 0.10

    by_cell = {
        (c.scenario_id, c.method): c.success_rate
        for report in workspace.reports.values()
        for c in report.cells
    }
    ood_ids = [c.scenario_id for c in _cells(workspace, method="aba", ood_kind="object")]
    for baseline in ("policy-embed", "visual-embed"):
        witnesses = [
            sid
            for sid in ood_ids
            if by_cell[(sid, "vanilla")] < by_cell[(sid, baseline)] < by_cell[(sid, "aba")]
        ]
        assert witnesses, f"{baseline} is never strictly between vanilla and aba"
        base_b = _pooled_subgoal(_cells(workspace, method=baseline, ood_kind="object"))
        aba_b = _pooled_subgoal(_cells(workspace, method="aba", ood_kind="object"))
        assert base_b < aba_b

    print(
        f"criterion 5: PASS unseen-object success vanilla {vanilla_ood:.2f} vs "
        f"guided {aba_ood:.2f} (gap {aba_ood - vanilla_ood:.2f}); embedding "
        f"baselines sit between them and lose the mode subgoal "
        f"({workspace.bench_seconds:.0f}s for both benchmarks)"
    )


def test_criterion_6_feedback_stays_sparse(workspace):
    for task in TASKS:
        budget = 0.1 * sim.task_config(task).horizon
        for report in (workspace.reports[task],):
            for c in report.cells:
                if c.method == "aba":
                    assert c.feedback_mean <= budget, c.scenario_id
    fb_ood = _pooled_feedback(_cells(workspace, method="aba", ood_kind="object"))
    fb_id = _pooled_feedback(_cells(workspace, method="aba", ood_kind="none"))
    assert fb_ood > fb_id
    print(
        f"criterion 6: PASS guided feedback stays within 10% of the horizon "
        f"everywhere (unseen-object mean {fb_ood:.2f} > nominal {fb_id:.2f})"
    )


def test_criterion_7_retrieval_precision_tracks_success(workspace):
    rows = [
        row
        for report in workspace.reports.values()
        for row in report.precision
        if row.paper_subset
    ]
    assert len(rows) >= 50
    precision = np.array([row.precision for row in rows])
    cumulative = np.array([row.cumulative for row in rows])
    assert precision.std() > 0.0 and cumulative.std() > 0.0
    r = float(np.corrcoef(precision, cumulative)[0, 1])
    assert r > 0.0
    print(
        f"criterion 7: PASS Pearson r between baseline retrieval precision and "
        f"cumulative subgoal success is {r:.3f} over {len(rows)} rollouts"
    )


def test_criterion_8_bench_reports_are_byte_reproducible(workspace):
    args = [
        "--root", workspace.root, "bench", "--task", "sweep-sort",
        "--methods", "vanilla,policy-embed,aba", "--rollouts", "2", "--seed", "7",
    ]

    def tree(root):
        return {
            str(p.relative_to(root)): p.read_bytes()
            for p in sorted(Path(root).rglob("*"))
            if p.is_file()
        }

    assert cli.main(args) == 0
    out = bench.run_dir(workspace.root, "sweep-sort", 7)
    first = tree(out)
    assert cli.main(args) == 0
    second = tree(out)
    assert first.keys() == second.keys()
    differing = [name for name in first if first[name] != second[name]]
    assert not differing
    print(
        f"criterion 8: PASS repeated bench runs reproduced {len(first)} output "
        f"files byte for byte"
    )
