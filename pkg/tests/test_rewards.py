import numpy as np
import pytest

from estloco.rewards import (TERM_NAMES, GaitPhase, RewardConfig, RewardInputs, compute_reward,
                             gait_phase_coefficients)

H_STAR = 0.62
WEIGHT = 14.0 * 9.81


def inputs(n=1, **over):
    base = dict(
        base_velocity=np.tile([0.5, 0.0], (n, 1)), pitch=np.zeros(n), pitch_rate=np.zeros(n),
        base_height=np.full(n, H_STAR), foot_speed=np.zeros((n, 2)), foot_force=np.zeros((n, 2)),
        foot_force_vec=np.zeros((n, 2, 2)), prev_foot_force_vec=np.zeros((n, 2, 2)),
        torques=np.zeros((n, 4)), prev_torques=np.zeros((n, 4)), joint_qdot=np.zeros((n, 4)),
        prev_joint_qdot=np.zeros((n, 4)), weight=np.full(n, WEIGHT), vx_des=np.full(n, 0.5))
    base.update(over)
    return RewardInputs(**base)


def stance(n=1):
    return GaitPhase(np.zeros((n, 2)), np.ones((n, 2)), np.zeros((n, 2)))


def test_default_kernel_peaks_sum():
    # Nine terms peak at 0.1 and the height term at 0.2.
    assert RewardConfig().max_total == pytest.approx(9 * 0.1 + 0.2, abs=1e-12)


def test_perfect_tracking_hits_peaks():
    total, t = compute_reward(inputs(), stance(), RewardConfig(), H_STAR)
    assert t["r_v"][0] == 0.1 and t["r_omega"][0] == 0.1 and t["r_r"][0] == 0.1 and t["r_h"][0] == 0.2
    assert t["r_CoT"][0] == 0.1 and t["r_tau"][0] == 0.1
    assert total[0] == pytest.approx(1.1, abs=1e-12)


def test_force_jump_at_sigma_gives_half():
    f = np.zeros((1, 2, 2))
    f[0, 0, 1] = 0.2 * WEIGHT
    _, t = compute_reward(inputs(foot_force_vec=f), stance(), RewardConfig(), H_STAR)
    assert t["r_i"][0] == pytest.approx(0.05, abs=1e-15)


def test_breakdown_sums_to_total_and_terms_bounded():
    rng = np.random.default_rng(0)
    n = 200
    inp = inputs(n, base_velocity=rng.normal(size=(n, 2)), pitch=rng.normal(size=n),
                 pitch_rate=rng.normal(size=n), base_height=rng.uniform(0.2, 0.8, n),
                 foot_speed=rng.uniform(0, 2, (n, 2)), foot_force=rng.uniform(0, 400, (n, 2)),
                 foot_force_vec=rng.normal(0, 100, (n, 2, 2)), torques=rng.normal(0, 30, (n, 4)),
                 joint_qdot=rng.normal(0, 5, (n, 4)), vx_des=rng.uniform(-1.2, 1.2, n))
    phase = gait_phase_coefficients(1.9, 0.4, 0.5, rng.uniform(0, 5, n))
    cfg = RewardConfig()
    total, terms = compute_reward(inp, phase, cfg, H_STAR)
    assert set(terms) == set(TERM_NAMES)
    acc = np.zeros(n)
    for name in TERM_NAMES:
        acc = acc + terms[name]
        assert np.all(terms[name] >= 0) and np.all(terms[name] <= cfg.kernels[name].alpha)
    assert np.array_equal(acc, total)
    assert np.all(total <= cfg.max_total)


def test_tracking_reward_decreases_with_error():
    cfg = RewardConfig()
    errors = np.linspace(0, 0.1, 11)
    vals = [compute_reward(inputs(vx_des=np.array([0.5 + e])), stance(), cfg, H_STAR)[1]["r_v"][0]
            for e in errors]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_force_terms_invariant_to_common_scaling():
    rng = np.random.default_rng(1)
    ff = rng.uniform(0, 300, (4, 2))
    fv = rng.normal(0, 100, (4, 2, 2))
    phase = gait_phase_coefficients(1.9, 0.4, 0.5, rng.uniform(0, 1, 4))
    a = compute_reward(inputs(4, foot_force=ff, foot_force_vec=fv), phase, RewardConfig(), H_STAR)[1]
    b = compute_reward(inputs(4, foot_force=3 * ff, foot_force_vec=3 * fv, weight=np.full(4, 3 * WEIGHT)),
                       phase, RewardConfig(), H_STAR)[1]
    for name in ("r_i", "r_eFrc"):
        assert np.allclose(a[name], b[name], rtol=1e-14)


def test_velocity_floor_guards_standstill():
    still = inputs(base_velocity=np.zeros((1, 2)), vx_des=np.zeros(1), torques=np.ones((1, 4)),
                   joint_qdot=np.ones((1, 4)))
    _, t = compute_reward(still, stance(), RewardConfig(), H_STAR)
    assert np.isfinite(t["r_CoT"][0]) and np.isfinite(t["r_qdot"][0])


def test_gait_phase_defining_cases():
    duty, freq = 0.4, 1.0
    mid_swing = gait_phase_coefficients(freq, duty, 0.5, 0.2)
    assert mid_swing.q_f[0, 0] == 1.0 and mid_swing.q_v[0, 0] == 0.0
    mid_stance = gait_phase_coefficients(freq, duty, 0.5, 0.7)
    assert mid_stance.q_f[0, 0] == 0.0 and mid_stance.q_v[0, 0] == 1.0
    # The right foot is half a cycle behind.
    assert mid_swing.q_f[0, 1] == 0.0 and mid_stance.q_f[0, 1] == 1.0


def test_gait_phase_complementary_and_continuous():
    t = np.linspace(0, 3, 30001)
    g = gait_phase_coefficients(1.7, 0.38, 0.5, t)
    assert np.allclose(g.q_v + g.q_f, 1.0, atol=0)
    assert np.all((g.q_f >= 0) & (g.q_f <= 1))
    # Smooth transitions: no jump larger than a fine time step allows.
    assert np.abs(np.diff(g.q_f, axis=0)).max() < 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(kernels={})
    with pytest.raises(ValueError):
        RewardConfig(velocity_floor=0.0)
    cfg = RewardConfig().with_kernel("r_v", sigma=0.5)
    assert cfg.kernels["r_v"].sigma == 0.5 and cfg.kernels["r_v"].alpha == 0.1
