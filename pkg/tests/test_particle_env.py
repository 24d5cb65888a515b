import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bwcomm import particle_env as pe
from bwcomm.tensor_nn import ConfigError


def state_of(pos, landmarks, vel=None):
    pos = np.asarray(pos, float)[None]
    vel = np.zeros_like(pos) if vel is None else np.asarray(vel, float)[None]
    return pe.WorldState(pos, vel, np.asarray(landmarks, float)[None], 0, [0])


def test_reset_is_deterministic_and_seed_sensitive():
    cfg = pe.EnvConfig()
    a, oa = pe.reset(cfg, 5)
    b, ob = pe.reset(cfg, 5)
    c, _ = pe.reset(cfg, 6)
    assert a.pos.tobytes() == b.pos.tobytes() and oa.tobytes() == ob.tobytes()
    assert not np.array_equal(a.landmarks, c.landmarks)


def test_batched_reset_matches_single():
    cfg = pe.EnvConfig(task="predator_prey")
    batch, obs = pe.reset(cfg, [3, 9, 27])
    single, obs1 = pe.reset(cfg, 9)
    np.testing.assert_array_equal(batch.pos[1], single.pos[0])
    np.testing.assert_array_equal(obs[1], obs1[0])


@pytest.mark.parametrize("kw", [dict(n_landmarks=0), dict(n_agents=0), dict(dt=0.0), dict(agent_radius=-1.0),
                                dict(task="soccer"), dict(damping=1.0), dict(nearest_k=0),
                                dict(task="predator_prey", n_preys=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        pe.EnvConfig(**kw)


def test_config_mapping_round_trip():
    cfg = pe.EnvConfig(task="predator_prey", nearest_k=None, dt=0.05)
    assert pe.EnvConfig.from_mapping({k: str(v) for k, v in cfg.to_mapping().items()}) == cfg
    with pytest.raises(ConfigError):
        pe.EnvConfig.from_mapping({"gravity": "9.8"})


def test_zero_actions_keep_positions():
    cfg = pe.EnvConfig()
    s, _ = pe.reset(cfg, 1)
    s2, _, _, _ = pe.step(cfg, s, np.zeros_like(s.pos))
    np.testing.assert_array_equal(s2.pos, s.pos)


def test_double_integration_three_steps():
    # no damping, unit accel, dt 0.1, force +x: v = 0.1, 0.2, 0.3 and p = 0.01, 0.03, 0.06
    cfg = pe.EnvConfig(n_agents=1, n_landmarks=1, damping=0.0, max_speed=10.0)
    s = state_of([[0.0, 0.0]], [[0.5, 0.5]])
    xs, vs = [], []
    for _ in range(3):
        s, _, _, _ = pe.step(cfg, s, np.array([[[1.0, 0.0]]]))
        xs.append(s.pos[0, 0, 0])
        vs.append(s.vel[0, 0, 0])
    np.testing.assert_allclose(vs, [0.1, 0.2, 0.3], atol=1e-15)
    np.testing.assert_allclose(xs, [0.01, 0.03, 0.06], atol=1e-15)
    assert s.pos[0, 0, 1] == 0.0


def test_speed_clamp_holds_at_max():
    cfg = pe.EnvConfig(n_agents=1, n_landmarks=1, damping=0.0)
    s = state_of([[0.0, 0.0]], [[0.5, 0.5]], vel=[[1.0, 0.0]])
    for _ in range(3):
        s, _, _, _ = pe.step(cfg, s, np.array([[[1.0, 0.0]]]))
        assert np.linalg.norm(s.vel[0, 0]) == pytest.approx(1.0, abs=1e-15)


def test_actions_are_clamped_and_nan_aborts():
    cfg = pe.EnvConfig(n_agents=1, n_landmarks=1, damping=0.0, max_speed=10.0)
    s = state_of([[0.0, 0.0]], [[0.5, 0.5]])
    big, _, _, _ = pe.step(cfg, s, np.array([[[50.0, 0.0]]]))
    one, _, _, _ = pe.step(cfg, s, np.array([[[1.0, 0.0]]]))
    np.testing.assert_array_equal(big.pos, one.pos)
    with pytest.raises(pe.EnvAbort):
        pe.step(cfg, s, np.array([[[np.nan, 0.0]]]))


def test_episode_end_and_overrun():
    cfg = pe.EnvConfig(episode_len=2)
    s, _ = pe.reset(cfg, 0)
    a = np.zeros_like(s.pos)
    s, _, _, done = pe.step(cfg, s, a)
    assert not done
    s, _, _, done = pe.step(cfg, s, a)
    assert done and s.step == 2
    with pytest.raises(pe.EnvAbort):
        pe.step(cfg, s, a)


@given(st.integers(0, 2**31), st.sampled_from(["coop_nav", "predator_prey"]))
@settings(max_examples=25, deadline=None)
def test_speed_limits_and_step_counter(seed, task):
    cfg = pe.EnvConfig(task=task, episode_len=10)
    s, obs = pe.reset(cfg, [seed, seed + 1])
    rng = np.random.default_rng(seed)
    vmax = cfg.role_array("max_speed", "predator_max_speed", "prey_max_speed")
    for t in range(10):
        s, obs, rew, _ = pe.step(cfg, s, rng.uniform(-3, 3, size=s.pos.shape))
        assert np.all(np.linalg.norm(s.vel, axis=-1) <= vmax[None] * (1 + 1e-12))
        assert s.step == t + 1 <= cfg.episode_len
        assert obs.shape == (2, cfg.n, cfg.obs_dim) and np.all(np.isfinite(obs))
        if task == "coop_nav":
            assert np.all(rew <= 0) and np.all(rew == rew[:, :1])


def test_trajectory_is_deterministic():
    cfg = pe.EnvConfig(task="predator_prey")
    acts = np.random.default_rng(0).uniform(-1, 1, size=(5, 1, cfg.n, 2))

    def run():
        s, _ = pe.reset(cfg, 42)
        out = []
        for a in acts:
            s, _, r, _ = pe.step(cfg, s, a)
            out.append(np.concatenate([s.pos.ravel(), s.vel.ravel(), r.ravel()]))
        return np.concatenate(out).tobytes()
    assert run() == run()


def test_coop_reward_examples():
    cfg = pe.EnvConfig(n_agents=2, n_landmarks=2)
    on_top = state_of([[0.0, 0.0], [0.5, 0.5]], [[0.0, 0.0], [0.5, 0.5]])
    assert pe.reward_coop_nav(cfg, on_top)[0] == 0.0
    cfg1 = pe.EnvConfig(n_agents=1, n_landmarks=1)
    assert pe.reward_coop_nav(cfg1, state_of([[0.0, 0.0]], [[2.0, 0.0]]))[0] == -2.0
    overlap = state_of([[0.0, 0.0], [0.05, 0.0]], [[0.0, 0.0], [0.05, 0.0]])
    assert pe.reward_coop_nav(cfg, overlap)[0] == -1.0


def test_predator_prey_reward_examples():
    cfg = pe.EnvConfig(task="predator_prey", n_predators=1, n_preys=1, n_landmarks=1, world_bound=5.0)
    far = state_of([[0.0, 0.0], [3.0, 0.0]], [[1.0, 1.0]])
    pred, prey = pe.reward_predator_prey(cfg, far)
    assert pred[0] == pytest.approx(-0.3, abs=1e-15) and prey[0] == 0.0
    hit = state_of([[0.0, 0.0], [0.05, 0.0]], [[1.0, 1.0]])
    pred, prey = pe.reward_predator_prey(cfg, hit)
    assert pred[0] == pytest.approx(10 - 0.1 * 0.05) and prey[0] == -10.0


def test_boundary_penalty_shape():
    assert pe.boundary_penalty(np.array([0.0, 0.5, 0.89]))[0] == 0.0
    np.testing.assert_allclose(pe.boundary_penalty(np.array([0.95, 1.0, 2.0, 50.0])),
                               [0.5, 1.0, min(np.exp(2.0), 10.0), 10.0])


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_collision_term_is_zero_sum(seed):
    cfg = pe.EnvConfig(task="predator_prey", world_bound=0.3)
    s, _ = pe.reset(cfg, seed)
    pred, prey = pe.reward_predator_prey(cfg, s)
    d = np.linalg.norm(s.pos[0, :4, None] - s.pos[0, None, 4:], axis=-1)
    pred_catch = pred[0] + cfg.group_dist_coef * d.min()
    prey_catch = prey[0] + pe.boundary_penalty(np.abs(s.pos[0, 4:]) / cfg.world_bound).sum()
    assert pred_catch == pytest.approx(-prey_catch, abs=1e-12)


def test_observation_length_independent_of_agent_count():
    dims = {pe.EnvConfig(n_agents=n, nearest_k=3).obs_dim for n in (5, 6, 10)}
    assert dims == {4 + 2 * (3 + 3)}
    pp = {pe.EnvConfig(task="predator_prey", n_predators=p, n_preys=q).obs_dim for p, q in ((5, 5), (6, 7))}
    assert len(pp) == 1


def test_observation_layout_coop_nav():
    cfg = pe.EnvConfig(n_agents=2, n_landmarks=1, nearest_k=3)
    s = state_of([[0.0, 0.0], [0.5, 0.0]], [[0.0, 1.0]], vel=[[0.1, 0.2], [0.0, 0.0]])
    obs = pe.observe(cfg, s)[0]
    assert cfg.obs_dim == 4 + 2 + 2
    np.testing.assert_allclose(obs[0], [0.1, 0.2, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0])
    np.testing.assert_allclose(obs[1], [0.0, 0.0, 0.5, 0.0, -0.5, 1.0, -0.5, 0.0])


def test_predator_prey_opponent_slots_padded():
    cfg = pe.EnvConfig(task="predator_prey", n_predators=2, n_preys=1, n_landmarks=1, nearest_k=3)
    s = state_of([[0.0, 0.0], [1.0, 0.0], [0.0, 0.5]], [[0.0, 0.0]], vel=[[0, 0], [0, 0], [0.3, -0.1]])
    obs = pe.observe(cfg, s)[0]
    # slots: landmark 1, team 1, opp 2 -> 4 + 2 + 2 + 4 + 4
    assert cfg.obs_dim == 16
    pred0 = obs[0]
    np.testing.assert_allclose(pred0[8:12], [0.0, 0.5, 0.0, 0.0])     # one prey, one empty slot
    np.testing.assert_allclose(pred0[12:16], [0.3, -0.1, 0.0, 0.0])
    prey = obs[2]
    np.testing.assert_allclose(prey[6:8], [0.0, 0.0])                  # no teammates
    np.testing.assert_allclose(prey[8:12], [0.0, -0.5, 1.0, -0.5])


def test_write_trajectory(tmp_path):
    cfg = pe.EnvConfig(n_agents=2, n_landmarks=1)
    s, _ = pe.reset(cfg, 0)
    rows = pe.trajectory_rows(0, s)
    s, _, r, _ = pe.step(cfg, s, np.ones_like(s.pos))
    rows += pe.trajectory_rows(0, s, r)
    path = tmp_path / "traj.csv"
    pe.write_trajectory(path, rows)
    read = list(csv.reader(path.open()))
    assert read[0] == pe.TRAJECTORY_HEADER
    assert len(read) == 1 + 1 + 2 + 2
    assert read[-1][2] == "agent1" and float(read[-1][7]) == r[0, 1]
