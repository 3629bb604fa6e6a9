import math

import numpy as np
import pytest

from maic import arm as A
from maic import harness as H
from maic import mvae as M
from maic import plots
from maic.controllers import aif, vae
from maic.free_energy import GeneralizedBelief, Goal, PrecisionSet

GOALS = np.array([[0.45, -0.38, 0.32], [0.70, -0.15, 0.10], [-0.03, -0.73, -0.25], [0.31, -0.47, 0.38]])


def synthetic_trace(err, dt):
    """Trace whose joint goal error is ``err[k]`` on every joint."""
    err = np.asarray(err, dtype=float)
    n = len(err)
    q = np.repeat(err[:, None], 3, axis=1)
    nan = np.full(n, np.nan)
    return H.Trace(np.arange(n) * dt, np.zeros(n, dtype=int), q, np.zeros((n, 3)), q.copy(), np.zeros((n, 3)),
                   nan, nan.copy(), nan.copy(), np.zeros(n, dtype=bool))


def test_metric_arithmetic():
    dt = 0.01
    err = np.r_[np.full(1000, 0.1), np.full(1000, 0.01)]
    m = H.compute_metrics(synthetic_trace(err, dt), 1, 2000, dt)["phases"]["goal"]
    assert m["transient"]["rmse"] == pytest.approx(0.1, rel=1e-12)
    assert m["steady"]["rmse"] == pytest.approx(0.01, rel=1e-12)
    assert m["full"]["rmse"] == pytest.approx(math.sqrt((0.1**2 + 0.01**2) / 2), rel=1e-12)
    assert m["steady"]["std"] == pytest.approx(0.0, abs=1e-15)


def test_zero_error_metrics():
    m = H.compute_metrics(synthetic_trace(np.zeros(400), 0.1), 2, 200, 0.1)
    assert all(m["phases"]["goal"][ph]["rmse"] == 0.0 for ph in H.PHASES)
    assert m["phases"]["perception"]["full"]["rmse"] == 0.0
    assert m["phases"]["image"]["full"]["rmse"] is None
    assert [g["full"]["rmse"] for g in m["per_goal"]] == [0.0, 0.0]


@pytest.mark.parametrize("n_goals,ticks,dt", [(4, 20000, 0.001), (3, 500, 0.001), (2, 7, 0.5), (1, 1, 0.001)])
def test_phase_windows_tile_each_goal(n_goals, ticks, dt):
    w = H.phase_windows(n_goals, ticks, dt)
    for g in range(n_goals):
        (ta, tb), (sa, sb), (fa, fb) = w["transient"][g], w["steady"][g], w["full"][g]
        assert (ta, tb, sb) == (fa, sa, fb) and ta <= tb
        covered = np.zeros(ticks * n_goals, dtype=int)
        covered[ta:tb] += 1
        covered[sa:sb] += 1
        assert np.all(covered[fa:fb] == 1)
    if ticks == 20000:
        assert w["transient"][1] == (20000, 30000)


def test_image_error_is_the_frobenius_norm():
    m = M.init_model(16, 3, latent_dim=2, hidden_enc=3, hidden_q=3, hidden_v=3)
    m.params["Wv2"][:] = 0.0
    m.params["bv2"][:] = 50.0  # decoded image is all ones
    st = vae.initial_state(m, None, use_encoder=False)
    snap = A.SensorSnapshot(st.belief.mu, np.zeros(3), np.zeros(2), np.zeros((4, 4)))
    new, _ = vae.maic_vae_tick(st, snap, Goal(st.belief.mu), aif.ControllerGains(), PrecisionSet(var_v=1.0), m)
    assert new.extra["image_error"] == 4.0


def test_recovery_levels():
    dt = 0.01
    e = np.full(3000, 0.02)
    e[1000:1100] = 0.5
    e[1100:1500] = 0.1
    rec = H.recovery(synthetic_trace(e, dt), [(10.0, 11.0)], dt, horizon=5.0, pre_window=1.0)[0]
    assert rec["pre"] == pytest.approx(0.02) and rec["post"] == pytest.approx(0.02) and rec["ratio"] == pytest.approx(1)


def test_switch_peaks_and_overshoot():
    dt = 0.01
    e = np.r_[np.linspace(1, 0.01, 100), np.linspace(1, 0.01, 100)]
    tr = synthetic_trace(e, dt)
    assert H.goal_switch_peaks(tr, 2, 100, dt, window=0.5)
    assert not H.goal_switch_peaks(synthetic_trace(np.r_[np.ones(100), 0.5 * np.ones(100)], dt), 2, 100, dt)
    q = np.zeros((100, 3))
    q[:, 0] = np.r_[np.linspace(0, 1.2, 50), np.linspace(1.2, 1.0, 50)]
    q[:, 1] = np.linspace(0, 1.0, 100)
    tr = synthetic_trace(np.zeros(100), dt)
    tr.q, tr.q_d = q, np.tile([1.0, 1.0, 0.0], (100, 1))
    assert H.overshoot_flags(tr, 1, 100) == [True]
    tr.q[:, 0] = np.minimum(tr.q[:, 0], 1.04)
    assert H.overshoot_flags(tr, 1, 100) == [False]


def test_config_errors():
    with pytest.raises(H.ConfigError):
        H.make_scenario("vanilla", "pid", GOALS)
    with pytest.raises(H.ConfigError):
        H.make_scenario("windy", "aic", GOALS)
    with pytest.raises(H.ConfigError):
        H.make_scenario("vanilla", "aic", [[0.0, 0.0, 4.0]])
    with pytest.raises(H.ConfigError):
        H.make_scenario("vanilla", "aic", GOALS, duration_per_goal=5.0)
    with pytest.raises(H.ConfigError):
        H.make_scenario("vanilla", "aic", GOALS, duration_per_goal=-1.0, benchmark=False)
    assert H.make_scenario("vanilla", "aic", GOALS, duration_per_goal=5.0, benchmark=False).n_ticks_per_goal == 5000


def test_benchmark_mode_rejects_gain_overrides():
    with pytest.raises(H.ConfigError, match="overrides"):
        H.config_from_dict({"gains": {"k_a": 5.0}}, GOALS)
    cfg = H.config_from_dict({"gains": {"k_a": 5.0}, "duration_per_goal": 1.0}, GOALS, benchmark=False)
    assert cfg.gains.k_a == 5.0
    assert cfg.gains_hash() != H.make_scenario("vanilla", "aic", GOALS).gains_hash()
    hashes = {H.make_scenario(s, c, GOALS).gains_hash() for s in H.SCENARIOS for c in H.CONTROLLERS}
    assert len(hashes) == 1


def test_push_schedule_follows_the_goals():
    p = H.scenario_perturbation("human", 3, 4, 20.0)
    assert p.params["intervals"] == [[12.0, 12.3], [32.0, 32.3], [52.0, 52.3], [72.0, 72.3]]
    assert H.scenario_perturbation("human", 3, 4, 5.0).params["intervals"] == []


def test_missing_models_name_the_training_command(tmp_path):
    with pytest.raises(H.ModelMissing, match="train-gp"):
        H.run_scenario(H.make_scenario("vanilla", "maic-gp", GOALS, duration_per_goal=0.01, benchmark=False))
    with pytest.raises(H.ModelMissing, match="gen-dataset"):
        H.load_models(tmp_path)
    with pytest.raises(H.ModelMissing, match="gen-dataset"):
        H.ModelBundle().goals(A.ArmModel())


def test_zero_duration_run():
    res = H.run_scenario(H.make_scenario("vanilla", "aic", GOALS, duration_per_goal=0.0, benchmark=False))
    assert len(res.trace) == 0
    assert all(res.metrics["phases"]["goal"][ph]["rmse"] is None for ph in H.PHASES)


def _short(controller, scenario="vanilla", seed=0):
    return H.make_scenario(scenario, controller, GOALS, seed, duration_per_goal=0.3, benchmark=False)


def test_short_runs_are_deterministic(tmp_path):
    paths = []
    for i in range(2):
        res = H.run_scenario(_short("aic", "noisy", seed=5))
        p = tmp_path / f"t{i}.csv"
        H.write_trace_csv(p, res, every=7)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    lines = paths[0].read_text().splitlines()
    assert lines[0].startswith("# controller=aic scenario=noisy seed=5 gains=")
    assert len(lines) == 2 + math.ceil(4 * 300 / 7)
    other = H.run_scenario(_short("aic", "noisy", seed=6))
    assert not np.array_equal(other.trace.q, H.run_scenario(_short("aic", "noisy", seed=5)).trace.q)


def test_run_records_every_tick():
    res = H.run_scenario(_short("ic"))
    tr = res.trace
    assert len(tr) == 1200 and np.allclose(np.diff(tr.t), 0.001)
    assert np.array_equal(tr.goal_index, np.repeat(np.arange(4), 300))
    assert np.all(np.isnan(tr.mu)) and res.metrics["switch_peaks"]
    assert np.all(np.abs(tr.tau) <= np.asarray(A.ArmModel().torque_limits))


def test_ablated_gp_run_matches_aic():
    a = H.run_scenario(_short("aic"))
    b = H.run_scenario(_short("maic-gp-ablated"))
    for k in ("q", "mu", "tau", "vfe"):
        assert np.array_equal(getattr(a.trace, k), getattr(b.trace, k))


def fake_run(cfg, models=None):
    if cfg.controller == "mpc" and cfg.scenario == "human":
        raise A.SimulationFault("fake fault")
    level = {"aic": 3e-3, "maic-gp": 1e-3, "maic-vae": 5e-4, "mpc": 2e-2, "ic": 8e-3}[cfg.controller]
    T = cfg.n_ticks_per_goal
    n = T * len(cfg.goals)
    tr = synthetic_trace(np.full(n, level), cfg.gains.dt)
    return H.RunResult(cfg, tr, H.compute_metrics(tr, len(cfg.goals), T, cfg.gains.dt))


def test_bench_table_shape_and_ranks(monkeypatch, tmp_path):
    monkeypatch.setattr(H, "run_scenario", fake_run)
    table = H.bench_all(H.ModelBundle(), GOALS, seed=1, duration_per_goal=0.02, benchmark=False, out_dir=tmp_path)
    numbers = [v for cell in table["cells"].values() for v in (cell["rmse"], cell["std"])]
    assert len(table["cells"]) == 75 and len(numbers) == 150
    assert table["failed"] == ["mpc/human"] and table["cells"]["mpc|human|steady"]["status"] == "FAILED"
    assert table["cells"]["maic-vae|noisy|full"]["rank"] == 1 and table["cells"]["maic-gp|noisy|full"]["rank"] == 2
    assert "rank" not in table["cells"]["aic|noisy|full"]
    assert len(list(tmp_path.glob("trace_*.csv"))) == 24
    text = H.format_table(table)
    assert "FAILED" in text and text.count("*") == 15


def test_ordering_checks(monkeypatch):
    monkeypatch.setattr(H, "run_scenario", fake_run)
    table = H.bench_all(H.ModelBundle(), GOALS, duration_per_goal=0.02, benchmark=False,
                        scenarios=("vanilla", "constraint", "noisy"))
    checks = H.ordering_checks(table)
    assert checks["constraint_steady_gp_lt_aic_lt_ic"] and checks["noisy_full_vae_is_min"]
    assert checks["vanilla_steady_ic_lt_1e-2"]
    table["cells"]["ic|constraint|steady"]["rmse"] = 1e-4
    assert not H.ordering_checks(table)["constraint_steady_gp_lt_aic_lt_ic"]


def test_plots_are_deterministic_and_shaded(tmp_path):
    t = np.linspace(0, 80, 500)
    series = {"aic": (t, np.exp(-t / 10)), "mpc": (t, 0.1 + 0 * t)}
    shaded = H.scenario_perturbation("human", 0, 4, 20.0).params["intervals"]
    a = plots.line_plot(series, shaded=shaded, title="human")
    assert a == plots.line_plot(series, shaded=shaded, title="human")
    assert a.count('fill="#cccccc"') == 4
    empty = plots.line_plot({})
    assert empty.startswith("<svg") and "polyline" not in empty
    plots.write_plot(tmp_path / "p.svg", series)
    assert (tmp_path / "p.svg").read_text() == plots.line_plot(series)


def test_goal_selection_uses_dataset_poses():
    arm = A.ArmModel()
    rng = np.random.default_rng(0)
    X_q = rng.uniform(-1, 1, (200, 3))
    X_ee = np.array([A.forward_kinematics(arm, q) for q in X_q])
    goals = H.select_goals(arm, X_q, X_ee)
    assert goals.shape == (4, 3)
    assert all(any(np.array_equal(g, x) for x in X_q) for g in goals)


def test_vae_state_copy_is_independent():
    st = aif.ControllerState(GeneralizedBelief.at_rest(np.zeros(3)), np.zeros(3), vae.LatentBelief(np.zeros(2)))
    c = st.copy()
    c.latent.z[0] = 1.0
    c.belief.mu[0] = 1.0
    assert st.latent.z[0] == 0.0 and st.belief.mu[0] == 0.0
