import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aba.correspond import (
    SegmentMask,
    alignment,
    decode_description,
    filter_by_proprio,
    functional_map,
    iou,
    rank_retrieval,
)
from aba.errors import GrammarError, ValidationError
from aba.sim import ground_truth_segment
from conftest import obs_at, paint, single_obs_trajectory
from oracles import brute_alignment, brute_iou, cells_of_label

OOD_NAMES = {"napkin": 100, "tack": 102}
ID_NAMES = {"paper": 2, "mnm": 3}


# --- grammar -----------------------------------------------------------------


def test_parses_every_statement_form():
    text = (
        "match napkin with paper; overlap tack mnm; "
        "align-edge left napkin paper; align-vert base tack mnm; pass"
    )
    desc = decode_description(text, OOD_NAMES, ID_NAMES)
    kinds = [f.kind for f in desc.features]
    assert kinds == ["match", "overlap", "align-edge", "align-vert", "pass"]
    assert desc.features[0].ood_label == 100
    assert desc.features[0].id_label == 2
    assert desc.features[2].side == "left"
    assert desc.features[3].side == "base"
    assert desc.has_pass


def test_trailing_semicolon_tolerated():
    desc = decode_description("match napkin with paper;", OOD_NAMES, ID_NAMES)
    assert len(desc.features) == 1


def test_error_position_points_at_offending_statement():
    text = "match napkin with paper; frobnicate tack"
    with pytest.raises(GrammarError) as ei:
        decode_description(text, OOD_NAMES, ID_NAMES)
    assert ei.value.position == text.index(" frobnicate")
    assert "position" in str(ei.value)


def test_unknown_label_name_rejected():
    with pytest.raises(GrammarError, match="unknown ood"):
        decode_description("match ghost with paper", OOD_NAMES, ID_NAMES)
    with pytest.raises(GrammarError, match="unknown id"):
        decode_description("match napkin with ghost", OOD_NAMES, ID_NAMES)


def test_malformed_statements_rejected():
    for text in (
        "match napkin paper",
        "overlap napkin",
        "align-edge up napkin paper",
        "align-vert left napkin paper",
        "pass now",
        "",
        "match napkin with paper;;match tack with mnm",
    ):
        with pytest.raises(GrammarError):
            decode_description(text, OOD_NAMES, ID_NAMES)


def test_pass_must_be_terminal_and_unique():
    with pytest.raises(ValidationError):
        decode_description("pass; match napkin with paper", OOD_NAMES, ID_NAMES)
    with pytest.raises(ValidationError):
        decode_description("pass; pass", OOD_NAMES, ID_NAMES)


# --- masks and iou -------------------------------------------------------------


def test_mask_bbox_and_shift():
    m = SegmentMask(label=2, cells=frozenset({(5, 10), (6, 13)}))
    assert m.bbox() == (5, 6, 10, 13)
    s = m.shifted(-2, 3)
    assert s.cells == frozenset({(3, 13), (4, 16)})
    assert s.label == 2


def test_iou_frozen_example():
    a = frozenset((r, c) for r in range(0, 2) for c in range(0, 4))
    b = frozenset((r, c) for r in range(1, 3) for c in range(0, 4))
    assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou(a, a) == 1.0
    assert iou(frozenset(), frozenset()) == 0.0


def test_alignment_two_pair_frozen_example():
    # both features pair masks overlapping by exactly one third
    ood = paint(8, 8, [(100, 0, 3, 0, 1), (102, 4, 7, 4, 5)])
    idi = paint(8, 8, [(2, 0, 3, 1, 2), (3, 4, 7, 5, 6)])
    desc = decode_description("match napkin with paper; overlap tack mnm", OOD_NAMES, ID_NAMES)
    fmap = functional_map(ood, idi, desc, ground_truth_segment)
    assert len(fmap.pairs) == 2
    assert alignment(fmap) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_align_edge_left_shift_frozen_example():
    ood = paint(16, 16, [(100, 10, 13, 2, 4)])
    idi = paint(16, 16, [(2, 4, 7, 2, 4)])
    desc = decode_description("align-edge left napkin paper", OOD_NAMES, ID_NAMES)
    fmap = functional_map(ood, idi, desc, ground_truth_segment)
    (pair,) = fmap.pairs
    assert pair.transform == "edge-shift"
    # left edges coincide after shifting by 4 - 10 = -6; same size, same rows
    assert pair.ood_mask.cells == pair.id_mask.cells
    assert alignment(fmap) == 1.0


def test_align_vert_base_shift():
    ood = paint(16, 16, [(100, 3, 5, 0, 1)])
    idi = paint(16, 16, [(2, 3, 5, 8, 9)])
    desc = decode_description("align-vert base napkin paper", OOD_NAMES, ID_NAMES)
    fmap = functional_map(ood, idi, desc, ground_truth_segment)
    assert alignment(fmap) == 1.0


def test_label_absent_from_both_contributes_nothing():
    ood = paint(8, 8, [(100, 0, 1, 0, 1)])
    idi = paint(8, 8, [(2, 0, 1, 0, 1)])
    desc = decode_description("match tack with mnm", OOD_NAMES, ID_NAMES)
    fmap = functional_map(ood, idi, desc, ground_truth_segment)
    assert fmap.pairs == ()
    assert alignment(fmap) == 0.0


def test_pass_only_description_scores_zero():
    ood = paint(8, 8, [(100, 0, 1, 0, 1)])
    idi = paint(8, 8, [(2, 0, 1, 0, 1)])
    desc = decode_description("pass", OOD_NAMES, ID_NAMES)
    assert alignment(functional_map(ood, idi, desc, ground_truth_segment)) == 0.0


# --- randomized cross-check against the brute-force oracle --------------------

_rect = st.tuples(
    st.integers(0, 7), st.integers(0, 7), st.integers(0, 7), st.integers(0, 7)
).map(lambda t: (min(t[0], t[1]), max(t[0], t[1]), min(t[2], t[3]), max(t[2], t[3])))

_statement = st.sampled_from(
    [
        "match napkin with paper",
        "match tack with mnm",
        "overlap napkin mnm",
        "overlap tack paper",
        "align-edge left napkin paper",
        "align-edge right tack mnm",
        "align-vert top napkin mnm",
        "align-vert base tack paper",
    ]
)


@settings(max_examples=150, deadline=None)
@given(
    ood_rects=st.lists(st.tuples(st.sampled_from([100, 102]), _rect), max_size=2),
    id_rects=st.lists(st.tuples(st.sampled_from([2, 3]), _rect), max_size=2),
    statements=st.lists(_statement, min_size=1, max_size=4),
)
def test_alignment_matches_bruteforce(ood_rects, id_rects, statements):
    ood = paint(8, 8, [(lbl, cmin, cmax, rmin, rmax) for lbl, (cmin, cmax, rmin, rmax) in ood_rects])
    idi = paint(8, 8, [(lbl, cmin, cmax, rmin, rmax) for lbl, (cmin, cmax, rmin, rmax) in id_rects])
    desc = decode_description("; ".join(statements), OOD_NAMES, ID_NAMES)
    got = alignment(functional_map(ood, idi, desc, ground_truth_segment))
    want = brute_alignment(
        ood, idi, [(f.kind, f.side, f.ood_label, f.id_label) for f in desc.features]
    )
    assert got == pytest.approx(want, abs=1e-12)
    assert 0.0 <= got <= len(desc.features) + 1e-12


@settings(max_examples=100, deadline=None)
@given(a=st.sets(st.tuples(st.integers(0, 5), st.integers(0, 5))), b=st.sets(st.tuples(st.integers(0, 5), st.integers(0, 5))))
def test_iou_matches_bruteforce(a, b):
    fa, fb = frozenset(a), frozenset(b)
    assert iou(fa, fb) == pytest.approx(brute_iou(fa, fb), abs=1e-15)
    assert iou(fa, fb) == iou(fb, fa)
    assert 0.0 <= iou(fa, fb) <= 1.0


def test_oracle_cells_agree_with_segmenter():
    img = paint(8, 8, [(2, 0, 3, 0, 1), (3, 5, 6, 5, 6)])
    for mask in ground_truth_segment(img):
        assert mask.cells == frozenset(cells_of_label(img, mask.label))


# --- proprio filter and ranking ------------------------------------------------


def test_filter_keeps_only_within_radius(tiny_dataset):
    from aba.core import Proprioception

    # trajectory agents sit at x = 0, 1, 2; query at x = 0.5 gives distances
    # 0.5, 0.5, 1.5; then shift query to produce 0.5 / 0.2 / 0.9 exactly
    q = Proprioception(1.2, 0.0, 0.0)
    dists = [abs(t.pairs[0][0].proprio.x - q.x) for t in tiny_dataset.trajectories]
    assert dists == pytest.approx([1.2, 0.2, 0.8])
    kept = filter_by_proprio(tiny_dataset, q, radius=0.3)
    assert [k.trajectory_id for k in kept] == [1]


def test_filter_one_candidate_per_trajectory_earliest_tie():
    from aba.core import ActionPlan, Dataset, Proprioception, Trajectory

    plan = ActionPlan(steps=((0.0, 0.0, 0.0),) * 2)
    # two observations equidistant from the query; earliest timestep wins
    o0 = obs_at(1.0, 0.0, t=0)
    o1 = obs_at(-1.0, 0.0, t=5)
    traj = Trajectory(pairs=((o0, plan), (o1, plan)), environment_id="e", mode_label="m")
    ds = Dataset(
        trajectories=(traj,),
        label_registry={0: "floor", 1: "agent"},
        plan_length=2,
        grid_width=8,
        grid_height=8,
    )
    kept = filter_by_proprio(ds, Proprioception(0.0, 0.0, 0.0), radius=2.0)
    assert len(kept) == 1
    assert kept[0].timestep == 0


def test_rank_retrieval_orders_by_score_then_provenance():
    from aba.core import Proprioception
    from aba.correspond import CandidateObservation

    ood_img = paint(8, 8, [(100, 0, 3, 0, 2)])
    ood_obs = obs_at(0.0, 0.0, image=ood_img)
    near = paint(8, 8, [(2, 0, 3, 0, 2)])  # identical footprint: iou 1
    far = paint(8, 8, [(2, 4, 7, 5, 7)])  # disjoint: iou 0
    cands = [
        CandidateObservation(2, 0, obs_at(0.0, 0.0, image=far), "sweep-up"),
        CandidateObservation(1, 3, obs_at(0.0, 0.0, image=near), "sweep-up"),
        CandidateObservation(0, 1, obs_at(0.0, 0.0, image=near), "sweep-up"),
    ]
    desc = decode_description("match napkin with paper", OOD_NAMES, ID_NAMES)
    ranked = rank_retrieval(ood_obs, cands, desc, ground_truth_segment)
    assert ranked.ids() == [(0, 1), (1, 3), (2, 0)]
    assert [e.score for e in ranked.entries] == [1.0, 1.0, 0.0]
    assert ranked.ids(2) == [(0, 1), (1, 3)]
    assert math.isclose(ranked.top(1)[0].score, 1.0)
