import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import ccma.harness as harness
from ccma.agent import hazard_mask
from ccma.coord import (
    ActionScores,
    CommMessage,
    MemberDecision,
    Region,
    RegionalDecision,
    arbitrate,
    broadcast,
    coordinate,
    form_regions,
    rule_oracle_scores,
    softmax_policy,
)
from ccma.errors import CoordinationError, InputError
from ccma.reward import DEFAULT_WEIGHTS, best_response
from ccma.scenario import ScenarioConfig
from ccma.sim.observe import distance, on_ramp
from ccma.sim.types import ACTIONS, MetaAction, VehicleKind

from conftest import cav, hdv, random_world, world_of

M = MetaAction


def _top(scores, vid):
    row = scores.scores[vid]
    return ACTIONS[row.index(max(row))]


# ---------------------------------------------------------------- regions

def test_no_ramp_cav_no_regions():
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 120.0, 20.0))
    assert form_regions(w) == []


def test_region_counts_vehicles_in_range():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 230.0, 20.0), hdv(2, 1, 280.0, 20.0),
                 hdv(3, 0, 255.0, 20.0), hdv(4, 0, 330.0, 20.0))
    (r,) = form_regions(w)
    assert r.center_id == 0 and r.member_ids == {0, 1, 2, 3}


def test_overlapping_regions_merge():
    w = world_of(cav(5, 2, 250.0, 20.0), cav(2, 2, 220.0, 20.0), hdv(1, 1, 180.0, 20.0),
                 hdv(7, 0, 299.0, 20.0))
    (r,) = form_regions(w, 50.0)
    assert r.center_id == 2 and r.member_ids == {1, 2, 5, 7}
    with pytest.raises(InputError):
        form_regions(w, 0.0)


def test_region_partition_on_random_worlds():
    rng = random.Random(11)
    for _ in range(200):
        w = random_world(rng, 14)
        regions = form_regions(w)
        ramp = [v.id for v in w.vehicles if v.kind is VehicleKind.CAV and not v.frozen and on_ramp(w, v)]
        for vid in ramp:
            assert sum(vid in r.member_ids for r in regions) == 1
        for i, a in enumerate(regions):
            for b in regions[i + 1:]:
                assert not a.member_ids & b.member_ids
        assert [r.center_id for r in regions] == sorted(r.center_id for r in regions)


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    assert softmax_policy({0: [1.0] * 5})[0] == pytest.approx([0.2] * 5)
    assert softmax_policy({0: [math.log(2), 0.0]})[0] == pytest.approx([2 / 3, 1 / 3])
    p = softmax_policy({0: [0.0, 1.0, 0.5, 0.2, 0.9]}, 1e-6)[0]
    assert p[1] >= 1 - 1e-6
    p = softmax_policy({0: [4.0, 0.0, 0.0, 0.0, 0.0]})[0]
    assert p[0] == pytest.approx(math.exp(4) / (math.exp(4) + 4))


def test_softmax_rejects_bad_input():
    with pytest.raises(InputError):
        softmax_policy({0: [0.0, float("nan"), 0, 0, 0]})
    with pytest.raises(InputError):
        softmax_policy({0: [0.0] * 5}, 1e-7)
    with pytest.raises(InputError):
        ActionScores({0: (0.0, 1.0)})


@given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5), st.floats(1e-3, 50),
       st.permutations(range(5)))
def test_softmax_sums_to_one_and_is_equivariant(row, tau, perm):
    p = softmax_policy({0: row}, tau)[0]
    assert abs(sum(p) - 1.0) <= 1e-9
    q = softmax_policy({0: [row[i] for i in perm]}, tau)[0]
    assert q == pytest.approx([p[i] for i in perm], abs=1e-12)


# ---------------------------------------------------------------- rule oracle

def test_open_gap_in_zone_merges():
    w = world_of(cav(0, 2, 270.0, 25.0), hdv(1, 1, 230.0, 25.0), hdv(2, 1, 315.0, 25.0))
    (r,) = form_regions(w)
    s = rule_oracle_scores(r, w)
    assert _top(s, 0) is M.LANE_LEFT
    assert s.tags[0] == "merge"
    # bystanders keep lane
    assert _top(s, 2) is M.IDLE


def test_tight_lag_yields_left():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 240.0, 20.0))
    (r,) = form_regions(w)
    s = rule_oracle_scores(r, w)
    assert _top(s, 1) is M.LANE_LEFT
    assert s.tags[1] == "yield"


def test_tight_lag_without_room_slows():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 240.0, 20.0), hdv(2, 0, 242.0, 20.0))
    (r,) = form_regions(w)
    assert _top(rule_oracle_scores(r, w), 1) is M.SLOWER


def test_lone_ego_is_best_response():
    w = world_of(cav(0, 2, 150.0, 15.0))
    (r,) = form_regions(w)
    s = rule_oracle_scores(r, w)
    assert r.member_ids == {0}
    br = best_response(w, 0, hazard_mask(w, 0), DEFAULT_WEIGHTS, 50.0)
    assert _top(s, 0) is br
    dec = coordinate(r, w)
    assert dec.action_of(0) is br and dec.source == "rule_oracle"


def test_scores_cover_region_and_are_deterministic():
    rng = random.Random(3)
    for _ in range(40):
        w = random_world(rng, 12)
        for r in form_regions(w):
            a = rule_oracle_scores(r, w)
            assert set(a.scores) == set(r.member_ids)
            assert a == rule_oracle_scores(r, w)


# ---------------------------------------------------------------- coordinate

class _Broken:
    def decide(self, region, world, inbox):
        raise RuntimeError("backend down")


def test_fallback_equals_rule_oracle():
    rng = random.Random(8)
    for _ in range(30):
        w = random_world(rng, 12)
        for r in form_regions(w):
            ref = coordinate(r, w)
            fb = coordinate(r, w, "remote_lm", lm=_Broken())
            assert fb.source == "fallback" and ref.same_choices(fb)
            with pytest.raises(CoordinationError):
                coordinate(r, w, "remote_lm", lm=_Broken(), fallback=False)
    with pytest.raises(InputError):
        coordinate(r, w, "carrier_pigeon")


def test_one_message_per_acting_member():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 240.0, 20.0), hdv(2, 1, 280.0, 20.0))
    (r,) = form_regions(w)
    dec = coordinate(r, w)
    acting = [d for d in dec.decisions if d.action is not M.IDLE]
    assert len(acting) == 2
    assert len(dec.messages) == 2
    assert {m.sender for m in dec.messages} == {d.id for d in acting}
    yielder = next(m for m in dec.messages if m.sender == 1)
    assert yielder.reason == "yield_left" and yielder.target == 0
    assert all(m.tick == w.tick // 10 for m in dec.messages)


def test_decision_json_round_trip():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 240.0, 20.0))
    (r,) = form_regions(w)
    d = coordinate(r, w).to_dict()
    assert list(d) == ["region", "source", "decisions", "messages"]
    for m in d["messages"]:
        assert CommMessage.from_dict(m).to_dict() == m
    with pytest.raises(InputError):
        RegionalDecision(0, "rule_oracle", [MemberDecision(1, M.IDLE, "x"), MemberDecision(1, M.SLOWER, "y")])
    with pytest.raises(InputError):
        CommMessage(0, 0, M.IDLE, "gossip")


# ---------------------------------------------------------------- broadcast

def _decision(*msgs):
    return RegionalDecision(0, "rule_oracle", [], list(msgs))


def test_broadcast_examples():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 240.0, 20.0), hdv(2, 1, 280.0, 20.0),
                 hdv(3, 0, 400.0, 20.0))
    assert all(v == [] for v in broadcast([], w).values())
    m = CommMessage(0, 3, M.LANE_LEFT, "merge_request", 1)
    inbox = broadcast([_decision(m)], w)
    assert inbox[1] == [m] and inbox[2] == [m]
    assert inbox[3] == [] and inbox[0] == []


def test_broadcast_orders_by_tick_then_sender():
    w = world_of(cav(0, 2, 250.0, 20.0), hdv(1, 1, 240.0, 20.0), cav(2, 2, 260.0, 20.0))
    a = CommMessage(2, 1, M.SLOWER, "hold")
    b = CommMessage(0, 1, M.LANE_LEFT, "merge_request")
    c = CommMessage(2, 0, M.FASTER, "hold")
    inbox = broadcast([_decision(a, b), _decision(c)], w)
    assert inbox[1] == [c, b, a]


def test_message_locality_on_random_worlds():
    rng = random.Random(21)
    for _ in range(100):
        w = random_world(rng, 14)
        decs = [coordinate(r, w) for r in form_regions(w)]
        for vid, msgs in broadcast(decs, w).items():
            me = w.get(vid)
            for m in msgs:
                assert m.sender != vid and distance(w, w.get(m.sender), me) <= 50.0


# ---------------------------------------------------------------- arbitrate

def test_arbitrate_examples():
    p1 = {0: M.IDLE, 4: M.FASTER}
    masks = {0: (M.IDLE, M.SLOWER), 4: (M.FASTER, M.IDLE)}
    assert arbitrate(p1, None, masks).actions == p1
    dec = RegionalDecision(0, "rule_oracle", [MemberDecision(0, M.LANE_LEFT, "merge"),
                                              MemberDecision(4, M.IDLE, "keep"),
                                              MemberDecision(9, M.SLOWER, "yield"),
                                              MemberDecision(8, M.SLOWER, "yield")])
    j = arbitrate(p1, [dec], masks, cooperative=[9])
    assert j.actions == {0: M.IDLE, 4: M.IDLE}
    assert j.advisories == {9: M.SLOWER}


def test_safety_dominance_over_random_episodes(policy, monkeypatch):
    seen = []

    def checked(p1, p2, masks, cooperative=()):
        joint = arbitrate(p1, p2, masks, cooperative)
        for vid, act in joint.actions.items():
            assert act in masks[vid]
        seen.append(len(joint.actions))
        return joint

    monkeypatch.setattr(harness, "arbitrate", checked)
    rng = random.Random(99)
    for k in range(200):
        scen = ScenarioConfig(density=rng.choice(["easy", "medium", "hard"]), n_cavs=rng.randint(1, 3))
        cfg = harness.ExperimentConfig(level="P1P2", scenario=scen, episodes=1)
        harness.run_episode(cfg, 5000 + k, policy)
    assert sum(seen) > 1000
