import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccma.errors import InputError
from ccma.reward import (
    DEFAULT_WEIGHTS,
    RewardWeights,
    argmax_tie,
    best_response,
    breakdown,
    ego_reward,
    joint_reward,
    r_comf,
    r_coop,
    r_flow,
    r_safe,
    total_reward,
    weighted_total,
)
from ccma.sim.types import MetaAction
from ccma.sim.world import step

from conftest import cav, hdv, world_of

weights = st.builds(
    RewardWeights,
    w_flow=st.floats(0, 1), w_comf=st.floats(0, 1), w_coop=st.floats(0, 1), w_safe=st.floats(0, 1),
    w_ego=st.floats(0.01, 1), w_coop_total=st.floats(0.01, 1),
)


def test_r_flow():
    assert r_flow(world_of(cav(0, 1, 0, 35.0), hdv(1, 0, 50, 35.0))) == 1.0
    assert r_flow(world_of(cav(0, 1, 0, 0.0), hdv(1, 0, 50, 0.0))) == 0.0
    assert r_flow(world_of(cav(0, 1, 0, 20.0), hdv(1, 0, 50, 30.0))) == pytest.approx(25 / 35)
    assert r_flow(world_of()) == 0.0


def test_r_comf():
    assert r_comf(1.0, 1.0, 3.0) == 1.0
    assert r_comf(4.5, 0.0, 3.0) == pytest.approx(0.5)
    assert r_comf(-3.0, 3.0, 3.0) == 0.0
    assert r_comf(5.0, -5.0, 3.0) == 0.0
    with pytest.raises(InputError):
        r_comf(0, 0, 0)


def test_r_safe():
    w = world_of(cav(0, 1, 100.0, 30.0), hdv(1, 1, 106.0, 0.0, desired_speed=1.0))
    nxt, _ = step(w, {0: MetaAction.IDLE})
    assert r_safe(nxt, 0) == -1.0
    assert r_safe(world_of(cav(0, 1, 100.0, 20.0)), 0) == 1.0
    # bumper gap 20 m, closing 10 m/s -> ttc 2 s
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 1, 125.0, 10.0))
    assert r_safe(w, 0, 4.0) == pytest.approx(0.5)


def test_r_coop():
    assert r_coop(world_of(cav(0, 1, 100.0, 20.0)), 0) == 0.0
    # neighbour at 28 m/s with a free road: score 0.5 * 0.8 + 0.5 = 0.9
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 100.0, 28.0))
    assert r_coop(w, 0) == pytest.approx(0.8)
    # two stopped neighbours score 0.5 each
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 100.0, 0.0), hdv(2, 0, 80.0, 0.0))
    assert r_coop(w, 0) == pytest.approx(0.0)


def test_r_coop_mirror_symmetry():
    ahead = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 110.0, 25.0), hdv(2, 0, 130.0, 25.0))
    behind = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 90.0, 25.0), hdv(2, 0, 70.0, 25.0))
    assert r_coop(ahead, 0) == pytest.approx(r_coop(behind, 0), abs=1e-12)


def test_joint_reward_examples():
    s = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 110.0, 25.0))
    s2, _ = step(s, {0: MetaAction.FASTER})
    zero = RewardWeights(0, 0, 0, 0)
    assert joint_reward(s, {0: MetaAction.FASTER}, s2, zero)[0].total == 0.0
    only_flow = RewardWeights(1, 0, 0, 0)
    assert joint_reward(s, {0: MetaAction.FASTER}, s2, only_flow)[0].total == pytest.approx(r_flow(s2), abs=1e-15)
    quarter = RewardWeights(0.25, 0.25, 0.25, 0.25)
    assert weighted_total(0.5, 1, 0.8, 1, quarter) == pytest.approx(0.825, abs=1e-12)


def test_total_reward_examples():
    w = RewardWeights(w_ego=1.0, w_coop_total=0.0)
    assert total_reward(0.37, 0.9, w) == 0.37
    half = RewardWeights(w_ego=0.5, w_coop_total=0.5)
    assert total_reward(0.6, 0.8, half) == pytest.approx(0.7)


@given(weights, st.floats(-1, 1))
def test_total_reward_fixed_point(w, x):
    w = w.normalized()
    assert total_reward(x, x, w) == pytest.approx(x, abs=1e-12)


def test_best_response_examples():
    w = world_of(cav(0, 1, 100.0, 20.0))
    assert best_response(w, 0, [MetaAction.SLOWER]) is MetaAction.SLOWER
    same = {a: 0.3 for a in MetaAction}
    assert best_response(w, 0, list(MetaAction), values=same) is MetaAction.IDLE
    with pytest.raises(InputError):
        best_response(w, 0, [])


def test_best_response_open_road_prefers_faster():
    w = world_of(cav(0, 1, 100.0, 20.0))
    cands = [MetaAction.IDLE, MetaAction.FASTER, MetaAction.SLOWER]
    wt = DEFAULT_WEIGHTS
    # enumerate the one-step rewards by hand: lone ego, no leader, no neighbours
    hand = {}
    for a in cands:
        nxt, _ = step(w, {0: a})
        u = nxt.get(0)
        comf = r_comf(u.accel, u.prev_accel)
        ego = (wt.w_flow * u.speed / 35 + wt.w_comf * comf + wt.w_safe * 1.0) / (wt.w_flow + wt.w_comf + wt.w_safe)
        hand[a] = wt.w_ego * ego
    assert max(hand, key=hand.get) is MetaAction.FASTER
    assert best_response(w, 0, cands) is MetaAction.FASTER


@given(st.dictionaries(st.sampled_from(list(MetaAction)), st.floats(-1, 1), min_size=1),
       st.floats(1e-3, 1e3))
def test_argmax_scaling_invariance(values, c):
    scaled = {a: v * c for a, v in values.items()}
    if len(set(values.values())) == len(values):
        assert argmax_tie(values) is argmax_tie(scaled)


def test_breakdown_bounds_on_spawned_world():
    from ccma.scenario import ScenarioConfig

    w = ScenarioConfig(density="hard", n_cavs=3).spawn(4)
    for _ in range(6):
        w, _ = step(w, {v.id: MetaAction.FASTER for v in w.active_cavs()})
        for v in w.cavs():
            b = breakdown(w, v.id, DEFAULT_WEIGHTS)
            assert 0 <= b.flow <= 1 and 0 <= b.comf <= 1
            assert -1 <= b.safe <= 1 and -1 <= b.coop <= 1
            assert -1 <= b.total <= 1
            assert -1 <= ego_reward(b, DEFAULT_WEIGHTS) <= 1


@settings(max_examples=200)
@given(weights)
def test_normalization(w):
    n = w.normalized()
    if w.w_flow + w.w_comf + w.w_coop + w.w_safe > 0:
        assert math.isclose(sum(n.components()), 1.0, abs_tol=1e-9)
    assert math.isclose(n.w_ego + n.w_coop_total, 1.0, abs_tol=1e-9)
    assert n.normalized().to_dict() == pytest.approx(n.to_dict(), abs=1e-15)


def test_weights_validation_and_roundtrip():
    with pytest.raises(InputError):
        RewardWeights(w_flow=-0.1)
    with pytest.raises(InputError):
        RewardWeights(w_safe=float("nan"))
    w = RewardWeights(0.1, 0.2, 0.3, 0.4)
    assert RewardWeights.from_dict(w.to_dict()) == w
