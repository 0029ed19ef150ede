import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccma.agent import (
    PolicyArtifact,
    TrainConfig,
    Transition,
    act_individual,
    discretize,
    hazard_mask,
    q_update,
    run_q_learning,
    speed_bucket,
    train,
)
from ccma.errors import ConfigError, InputError
from ccma.reward import DEFAULT_WEIGHTS
from ccma.scenario import ScenarioConfig
from ccma.sim.observe import observe
from ccma.sim.types import MetaAction

from conftest import GEO, cav, hdv, random_world, world_of
from oracles import brute_hazard_mask

M = MetaAction


# ---------------------------------------------------------------- discretize

def test_discretize_lone_ramp_vehicle():
    w = world_of(cav(0, 2, 250.0, 0.0))
    key = discretize(observe(w, 0))
    # speed bin 0, all gaps open, 70 m to the ramp end -> middle bin, ramp class
    assert key == (0, 3, 3, 3, 1, 0)


def test_discretize_speed_boundary_is_half_open():
    assert speed_bucket(6.999) == 0
    assert speed_bucket(7.0) == 1
    assert speed_bucket(35.0) == 4
    assert speed_bucket(0.0) == 0


def _brute_bucket(x, edges):
    # scan every bin [lo, hi) explicitly
    bounds = [-math.inf, *edges, math.inf]
    for i in range(len(bounds) - 1):
        if bounds[i] <= x < bounds[i + 1]:
            return i
    return len(edges)


def test_discretize_matches_edge_scan():
    rng = random.Random(5)
    for _ in range(300):
        w = random_world(rng, 15)
        ego = w.get(0)
        obs = observe(w, 0)
        key = discretize(obs)
        assert key[0] == min(4, _brute_bucket(ego.speed, (7.0, 14.0, 21.0, 28.0)))
        if ego.lane == GEO.ramp_lane:
            assert key[5] == 0
            assert key[4] == _brute_bucket(GEO.merge_end - ego.pos, (30.0, 80.0))
        else:
            assert key[4] == 2
        lead = min((n.pos - ego.pos - 5.0 for n in obs.neighbors
                    if n.lane == ego.lane and (n.pos, n.id) > (ego.pos, ego.id)), default=math.inf)
        assert key[1] == _brute_bucket(lead, (10.0, 25.0, 50.0))


# ---------------------------------------------------------------- hazard mask

def test_hazard_mask_lone_vehicle():
    w = world_of(cav(0, 1, 100.0, 20.0))
    assert hazard_mask(w, 0) == (M.LANE_LEFT, M.IDLE, M.FASTER, M.SLOWER)
    w = world_of(cav(0, 0, 100.0, 20.0))
    assert hazard_mask(w, 0) == (M.IDLE, M.LANE_RIGHT, M.FASTER, M.SLOWER)


def test_hazard_mask_ramp_before_zone_blocks_left():
    w = world_of(cav(0, 2, 100.0, 10.0))
    assert M.LANE_LEFT not in hazard_mask(w, 0)


def test_hazard_mask_closing_leader_leaves_only_slower():
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 1, 107.0, 10.0))
    assert hazard_mask(w, 0) == (M.SLOWER,)


def test_hazard_mask_occupied_target_lane():
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 102.0, 20.0))
    assert hazard_mask(w, 0) == (M.IDLE, M.FASTER, M.SLOWER)
    assert hazard_mask(w, 0) == brute_hazard_mask(w, 0)


def test_hazard_mask_all_unsafe_falls_back():
    # boxed in: stopped car just ahead in its own lane and traffic alongside in lane 0
    w = world_of(cav(0, 1, 100.0, 30.0), hdv(1, 1, 112.0, 0.0, desired_speed=1.0),
                 hdv(2, 0, 100.0, 30.0))
    assert hazard_mask(w, 0) == (M.SLOWER,)
    assert brute_hazard_mask(w, 0) == (M.SLOWER,)


def test_hazard_mask_unknown_id():
    w = world_of(cav(0, 1, 100.0, 20.0), hdv(1, 0, 0.0, 20.0))
    with pytest.raises(InputError):
        hazard_mask(w, 7)
    with pytest.raises(InputError):
        hazard_mask(w, 1)


def test_hazard_mask_matches_brute_force_sample():
    rng = random.Random(17)
    for _ in range(60):
        w = random_world(rng, 10)
        assert hazard_mask(w, 0) == brute_hazard_mask(w, 0)


# ---------------------------------------------------------------- q_update

def test_q_update_examples():
    assert q_update(5.0, 0.7, 3.0, 1.0, 0.0) == 0.7
    assert q_update(0.0, 1.0, 2.0, 0.5, 0.9) == pytest.approx(1.4)
    assert q_update(10.0, 1.0, 10.0, 0.3, 0.9) == pytest.approx(10.0)


def test_q_update_rejects_bad_input():
    with pytest.raises(InputError):
        q_update(float("nan"), 0, 0, 0.1, 0.9)
    with pytest.raises(InputError):
        q_update(0, 0, 0, 0.0, 0.9)
    with pytest.raises(InputError):
        q_update(0, 0, 0, 0.5, 1.0)


@given(st.floats(-10, 10), st.floats(-1, 1), st.floats(-10, 10), st.floats(0.01, 1), st.floats(0, 0.99))
def test_q_update_is_convex_combination(q, r, nxt, alpha, gamma):
    out = q_update(q, r, nxt, alpha, gamma)
    target = r + gamma * nxt
    assert min(q, target) - 1e-9 <= out <= max(q, target) + 1e-9


# ---------------------------------------------------------------- chain MDP

class ChainEnv:
    """Three states in a row; 'go' moves right, reaching state 2 pays 1 and ends."""

    STAY, GO = 0, 1

    def reset(self, episode):
        self.s = episode % 2
        self.t = 0
        return {0: ((self.s,), (self.STAY, self.GO))}

    def step(self, actions):
        a = actions[0]
        self.t += 1
        if a == self.GO:
            self.s += 1
        if self.s == 2:
            return {0: Transition(1.0)}, {}
        if self.t >= 6:
            return {0: Transition(0.0, (self.s,), (self.STAY, self.GO))}, {}
        return ({0: Transition(0.0, (self.s,), (self.STAY, self.GO))},
                {0: ((self.s,), (self.STAY, self.GO))})


def _value_iteration(gamma):
    q = {(s, a): 0.0 for s in (0, 1) for a in (0, 1)}
    for _ in range(500):
        v = {s: max(q[(s, 0)], q[(s, 1)]) for s in (0, 1)}
        v[2] = 0.0
        q = {(0, 0): gamma * v[0], (0, 1): gamma * v[1],
             (1, 0): gamma * v[1], (1, 1): 1.0 + gamma * v[2]}
    return q


def test_chain_mdp_matches_value_iteration():
    tc = TrainConfig(episodes=400, alpha=1.0, gamma=0.9, eps_start=1.0, eps_end=1.0, seed=3)
    q, _ = run_q_learning(ChainEnv(), tc, n_actions=2, index_of=lambda a: a)
    ref = _value_iteration(0.9)
    for (s, a), val in ref.items():
        assert q[(s,)][a] == pytest.approx(val, abs=1e-6)


# ---------------------------------------------------------------- train / serve

def test_train_zero_episodes():
    pol, returns = train(ScenarioConfig(density="easy"), DEFAULT_WEIGHTS, TrainConfig(episodes=0))
    assert pol.q == {} and returns == []
    w = world_of(cav(0, 2, 150.0, 10.0))
    mask = hazard_mask(w, 0)
    assert act_individual(pol, observe(w, 0), mask) is M.IDLE


def test_train_deterministic(tmp_path):
    tc = TrainConfig(episodes=6, seed=4)
    a, ra = train(ScenarioConfig(density="medium"), DEFAULT_WEIGHTS, tc)
    b, rb = train(ScenarioConfig(density="medium"), DEFAULT_WEIGHTS, tc)
    assert a.to_dict() == b.to_dict() and ra == rb
    a.save(tmp_path / "p.json")
    assert PolicyArtifact.load(tmp_path / "p.json").to_dict() == a.to_dict()
    assert (tmp_path / "p.json").read_text() == (a.save(tmp_path / "q.json") or (tmp_path / "q.json").read_text())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(episodes=-1)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.0)
    tc = TrainConfig(episodes=11)
    assert tc.epsilon(0) == 1.0 and tc.epsilon(10) == pytest.approx(0.05)


def test_training_return_improves():
    tc = TrainConfig(episodes=80, seed=2)
    _, returns = train(ScenarioConfig(density="easy"), DEFAULT_WEIGHTS, tc)
    k = len(returns) // 10
    assert sum(returns[-k:]) / k >= sum(returns[:k]) / k


def test_act_individual_examples():
    w = world_of(cav(0, 2, 250.0, 10.0))
    key = discretize(observe(w, 0))
    pol = PolicyArtifact(q={key: [0.0] * 5})
    assert act_individual(pol, observe(w, 0), (M.SLOWER,)) is M.SLOWER
    assert act_individual(pol, observe(w, 0), tuple(M)) is M.IDLE
    pol.q[key] = [0.1, 0.2, 0.0, 0.9, 0.3]
    assert act_individual(pol, observe(w, 0), tuple(M)) is M.FASTER
    assert act_individual(pol, observe(w, 0), (M.LANE_LEFT, M.SLOWER)) is M.SLOWER
    with pytest.raises(InputError):
        act_individual(pol, observe(w, 0), ())


def test_policy_rejects_non_finite():
    with pytest.raises(ConfigError):
        PolicyArtifact.from_dict({"q": {"0,0,0,0,0,0": [0, 0, float("inf"), 0, 0]}})
    with pytest.raises(ConfigError):
        PolicyArtifact.load("/nonexistent/policy.json")


def test_shipped_policy_is_bounded(policy):
    bound = 1.0 / (1.0 - policy.meta["train_config"]["gamma"])
    assert policy.q
    for row in policy.q.values():
        assert all(-bound - 1e-9 <= x <= bound + 1e-9 for x in row)


def test_serving_stays_in_mask(policy):
    for seed in range(3):
        w = ScenarioConfig(density="hard", n_cavs=2).spawn(seed)
        for _ in range(15):
            acts = {}
            for v in w.active_cavs():
                mask = hazard_mask(w, v.id)
                acts[v.id] = act_individual(policy, observe(w, v.id), mask)
                assert acts[v.id] in mask
            from ccma.sim.world import step
            w, _ = step(w, acts)
