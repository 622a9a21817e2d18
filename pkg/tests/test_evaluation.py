from types import SimpleNamespace

import numpy as np
import pytest

from estloco import evaluation
from estloco.env import EnvConfig
from estloco.evaluation import (EvalConfig, TemplateTrajectory, eval_orientation, eval_traversal,
                                eval_velocity_tracking, gravity_deviation, rms)
from estloco.experiment import MetricsRecord, aggregate, read_records, write_records, write_table

ENV = EnvConfig()


def standstill(ob):
    return np.zeros((ob.obs.shape[0], 4))


class StubEnv:
    """Stand-in for the biped: the robot's velocity and pitch are set directly."""

    pitch = 0.0
    fall_at = None
    velocity_error = 0.0

    def __init__(self, cfg, n, seed, command_override=None, terrain_maps=None):
        self.cfg, self.num_envs = cfg, n
        self.command = command_override
        self.k = 0

    def _obs(self):
        n = self.num_envs
        return SimpleNamespace(obs=np.zeros((n, 15)), history=np.zeros((n, 50, 15)), cmd=np.zeros((n, 4)))

    def reset(self):
        return self._obs()

    def _observation_bundle(self):
        return self._obs()

    def set_vx_command(self, vx):
        self.command.vx_des[:] = vx

    def step(self, action):
        self.k += 1
        n = self.num_envs
        self.last_state = SimpleNamespace(base_vx=self.command.vx_des + self.velocity_error,
                                          base_pitch=np.full(n, self.pitch), base_x=np.zeros(n))
        done = np.full(n, self.fall_at is not None and self.k >= self.fall_at)
        self.last_terminated = done
        return SimpleNamespace(obs=self._obs(), done=done)


@pytest.fixture
def stub(monkeypatch):
    monkeypatch.setattr(evaluation, "BipedEnv", StubEnv)
    StubEnv.pitch, StubEnv.fall_at, StubEnv.velocity_error = 0.0, None, 0.0
    return StubEnv


# -- arithmetic oracles --------------------------------------------------------------

def test_rms_arithmetic():
    assert rms(np.full(40, 0.1)) == pytest.approx(0.1, abs=1e-15)
    assert rms([3.0, -4.0]) == pytest.approx(np.sqrt(12.5))
    assert rms([]) == 0.0


@pytest.mark.parametrize("theta", [0.0, 0.1, -0.4, 1.3, np.pi])
def test_gravity_deviation_is_spherical_chord(theta):
    g_up = np.array([0.0, -1.0])
    g_body = np.array([np.sin(theta), -np.cos(theta)])
    assert gravity_deviation(theta) == pytest.approx(np.linalg.norm(g_body - g_up), abs=1e-14)


def test_template_shape():
    tpl = TemplateTrajectory()
    assert tpl.duration == 60.0
    t = np.arange(0, 60, 0.01)
    v = tpl.command_at(t)
    assert np.max(np.abs(v)) == pytest.approx(1.2, abs=1e-3) and np.max(np.abs(v)) <= 1.2
    assert v.min() < 0 < v.max()
    assert tpl.command_at(15.0) == pytest.approx(1.2) and tpl.command_at(22.0) == 0.0
    with pytest.raises(ValueError):
        TemplateTrajectory(((5.0, 0.0, 2.0),))


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(traversal_trials=0)


# -- suites with a stub environment ---------------------------------------------------------

def test_teleporting_policy_tracks_perfectly(stub):
    assert eval_velocity_tracking(standstill, ENV, EvalConfig(tracking_trials=8, tracking_duration=1.0)) == 0.0


def test_constant_velocity_error(stub):
    stub.velocity_error = 0.1
    val = eval_velocity_tracking(standstill, ENV, EvalConfig(tracking_trials=8, tracking_duration=1.0))
    assert val == pytest.approx(0.1, abs=1e-12)


def test_upright_orientation_is_zero(stub):
    assert eval_orientation(standstill, ENV, EvalConfig(orientation_trials=2)) == 0.0


def test_constant_pitch_orientation(stub):
    stub.pitch = 0.3
    val = eval_orientation(standstill, ENV, EvalConfig(orientation_trials=2))
    assert val == pytest.approx(2 * abs(np.sin(0.15)), abs=1e-12)


def test_fallen_robot_keeps_standstill_error(stub):
    # After the fall the robot counts as stopped, so its error becomes the full command.
    stub.fall_at = 1
    cfg = EvalConfig(tracking_trials=64, tracking_duration=2.0)
    val = eval_velocity_tracking(standstill, ENV, cfg)
    vx = np.random.default_rng(cfg.seed).uniform(-1.2, 1.2, 64)
    steps = 200
    expected = np.sqrt(((steps - 1) * np.mean(vx ** 2)) / steps)
    assert val == pytest.approx(expected, rel=1e-12)


def test_always_fall_policy_never_succeeds(stub):
    stub.fall_at = 1
    for kind in ("flat", "stairs"):
        assert eval_traversal(standstill, ENV, EvalConfig(traversal_trials=3), kind) == 0.0


# -- suites on the simulated biped ------------------------------------------------------------

def test_tracking_is_deterministic():
    cfg = EvalConfig(tracking_trials=6, tracking_duration=1.0)
    a = eval_velocity_tracking(standstill, ENV, cfg)
    assert a == eval_velocity_tracking(standstill, ENV, cfg)
    assert np.isfinite(a) and a > 0
    assert a != eval_velocity_tracking(standstill, ENV, cfg, seed=cfg.seed + 1)


def test_standing_robot_does_not_cross_terrain():
    tsr = eval_traversal(standstill, ENV, EvalConfig(traversal_trials=2, traversal_time=1.0), "flat")
    assert tsr == 0.0


# -- records and aggregation ----------------------------------------------------------------

def test_metrics_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord("FullEst", 0, 1.0, rms_dv=-0.1)
    with pytest.raises(ValueError):
        MetricsRecord("FullEst", 0, 1.0, tsr={"flat": 1.5})


def test_aggregate_matches_hand_average(tmp_path):
    records = [
        MetricsRecord("A", 0, 10.0, 0.2, 0.1, {"flat": 1.0}),
        MetricsRecord("A", 1, 14.0, 0.4, 0.3, {"flat": 0.5}),
        MetricsRecord("B", 0, 11.0, 0.5, None, {"flat": 0.0}),
    ]
    table = aggregate(records)
    assert table["r_final"]["A"] == {"mean": 12.0, "std": 2.0, "n": 2}
    assert table["rms_dv"]["A"]["mean"] == pytest.approx(0.3)
    assert table["rms_dg"]["B"] == {"mean": None, "std": None, "n": 0}
    assert table["tsr_flat"]["A"]["mean"] == 0.75
    write_records(records, tmp_path)
    assert read_records(tmp_path / "records.jsonl") == records
    write_table(table, tmp_path / "table.csv")
    lines = (tmp_path / "table.csv").read_text().splitlines()
    assert lines[0] == "metric,A,B"
    assert lines[1] == "r_final,12.0,11.0"
