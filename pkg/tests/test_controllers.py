import math
from dataclasses import replace

import numpy as np
import pytest

from maic import arm as A
from maic import gp as G
from maic import mvae as M
from maic.controllers import aif, classic, vae
from maic.free_energy import GeneralizedBelief, Goal, PrecisionSet

GAINS = aif.ControllerGains()
PREC = PrecisionSet()
Q0 = np.array([0.31, -0.47, 0.38])


@pytest.fixture(scope="module")
def gp_model():
    arm = A.ArmModel()
    rng = np.random.default_rng(11)
    X = Q0 + rng.uniform(-0.6, 0.6, (60, 3))
    Y = np.array([A.forward_kinematics(arm, q) for q in X])
    return G.fit(X, Y, *G.default_hyperparameters(X, Y))


@pytest.fixture(scope="module")
def small_mvae():
    return M.init_model(64, 3, latent_dim=4, hidden_enc=12, hidden_q=10, hidden_v=12, seed=4,
                        precision_mask=np.linspace(0, 2, 64))


def snapshot(q, qd=None, y_ee=None, y_v=None):
    q = np.asarray(q, dtype=float)
    return A.SensorSnapshot(q, np.zeros(3) if qd is None else np.asarray(qd, dtype=float),
                            np.zeros(2) if y_ee is None else y_ee, y_v)


def test_gains_validation():
    assert GAINS.as_dict() == {"k_mu": 18.67, "k_q": 1.5, "k_v": 0.2, "k_ee": 1.4, "k_a": 9.0, "dt": 0.001}
    with pytest.raises(ValueError):
        aif.ControllerGains(k_a=0.0)


def test_aic_fixed_point():
    st = aif.initial_state(Q0, np.array([0.5, -0.2, 0.1]))
    new, tau = aif.aic_tick(st, snapshot(Q0), Goal(Q0), GAINS, PREC)
    assert np.array_equal(tau, st.action)
    assert np.array_equal(new.belief.mu, Q0) and not new.belief.mu1.any() and not new.belief.mu2.any()


def test_single_action_step_arithmetic():
    st = aif.initial_state(np.zeros(3))
    _, tau = aif.aic_tick(st, snapshot(np.ones(3)), Goal(np.zeros(3)), GAINS, PREC)
    assert np.allclose(tau, -9 * (1 / 3) * 0.001, rtol=1e-12, atol=0)


def test_gp_controller_reduces_to_aic_when_ee_is_predicted(gp_model, rng):
    st = aif.initial_state(Q0 + 0.05 * rng.standard_normal(3), rng.normal(size=3))
    snap = snapshot(Q0, rng.normal(0, 0.1, 3), G.predict_and_jacobian(gp_model, st.belief.mu)[0])
    goal = Goal(Q0 + 0.2)
    a, tau_a = aif.aic_tick(st, snap, goal, GAINS, PREC)
    g, tau_g = aif.maic_gp_tick(st, snap, goal, GAINS, PREC, gp_model)
    assert np.array_equal(tau_a, tau_g)
    for k in ("mu", "mu1", "mu2"):
        assert np.array_equal(getattr(a.belief, k), getattr(g.belief, k))


def test_gp_controller_ee_term(gp_model):
    st = aif.initial_state(Q0)
    y_ee = G.predict(gp_model, Q0) + np.array([0.01, -0.02])
    new, tau = aif.maic_gp_tick(st, snapshot(Q0, y_ee=y_ee), Goal(Q0), GAINS, PREC, gp_model)
    J = G.jacobian(gp_model, Q0)
    grad = J.T @ (np.array([0.01, -0.02]) / PREC.var_ee)
    assert np.allclose(new.belief.mu, Q0 + GAINS.dt * GAINS.k_ee * grad, rtol=1e-12, atol=1e-15)
    assert np.allclose(tau, -GAINS.dt * GAINS.k_a * grad, rtol=1e-12, atol=1e-15)
    assert np.allclose(new.extra["ee_error"], [0.01, -0.02])


def test_ablated_gp_controller_is_aic(rng):
    st = aif.initial_state(Q0, rng.normal(size=3))
    snap = snapshot(Q0 + 0.1, rng.normal(size=3))
    a = aif.aic_tick(st, snap, Goal(Q0), GAINS, PREC)
    b = aif.maic_gp_tick(st, snap, Goal(Q0), GAINS, PREC, None)
    assert np.array_equal(a[1], b[1]) and a[0].vfe == b[0].vfe


def test_vae_fixed_point(small_mvae, rng):
    z = rng.normal(size=4)
    q = M.decode_q(small_mvae, z)
    st = aif.ControllerState(GeneralizedBelief.at_rest(q), np.array([0.3, 0.2, -0.1]), vae.LatentBelief(z))
    snap = snapshot(q, y_v=M.predict_image(small_mvae, z))
    new, tau = vae.maic_vae_tick(st, snap, Goal(q), GAINS, PREC, small_mvae)
    assert np.array_equal(new.latent.z, z) and np.array_equal(tau, st.action)
    assert np.array_equal(new.belief.mu, q)


def test_vae_needs_latent_and_image(small_mvae):
    st = aif.initial_state(Q0)
    with pytest.raises(ValueError):
        vae.maic_vae_tick(st, snapshot(Q0), Goal(Q0), GAINS, PREC, small_mvae)
    st = vae.initial_state(small_mvae, None, use_encoder=False)
    assert not st.latent.z.any()
    with pytest.raises(ValueError):
        vae.maic_vae_tick(st, snapshot(Q0), Goal(Q0), GAINS, PREC, small_mvae)
    new, _ = vae.maic_vae_tick(st, snapshot(Q0), Goal(Q0), GAINS, PREC, small_mvae, use_vision=False)
    assert new.extra["image_error"] is None


def test_encoder_initialisation(small_mvae, rng):
    y_v = rng.uniform(0, 1, 64)
    st = vae.initial_state(small_mvae, snapshot(Q0, y_v=y_v))
    assert np.array_equal(st.latent.z, M.encode(small_mvae, y_v, Q0))
    assert np.array_equal(st.belief.mu, M.decode_q(small_mvae, st.latent.z))


def test_non_finite_input_is_a_controller_fault():
    with pytest.raises(aif.ControllerFault):
        aif.aic_tick(aif.initial_state(Q0), snapshot([np.nan, 0, 0]), Goal(Q0), GAINS, PREC)


def test_torque_is_clamped():
    lim = (1.0, 0.5, 0.25)
    st = aif.initial_state(Q0, np.array([5.0, -5.0, 5.0]))
    _, tau = aif.aic_tick(st, snapshot(Q0 - 50.0), Goal(Q0), GAINS, PREC, lim)
    assert np.all(np.abs(tau) <= lim)


def test_zero_action_gain_keeps_the_action(rng):
    st = aif.initial_state(Q0)
    snap = snapshot(Q0 + rng.normal(size=3), rng.normal(size=3))
    spe = aif.spe_proprio(st.belief, snap.y_q, snap.y_qdot, Q0)
    assert not aif.proprio_action_rate(spe, 0.0, PREC).any()


def _snapshot_stream(n=300, seed=3):
    arm = A.ArmModel()
    pert = A.Perturbation("sensor_noise", {"variance": 0.01, "seed": seed})
    rng = np.random.default_rng(seed)
    state = A.ArmState(Q0.copy(), np.zeros(3))
    out = []
    for k in range(n):
        out.append(A.observe(arm, state, pert, A.CameraConfig(8, 8), rng))
        state = A.step(arm, state, np.full(3, 0.05 * math.sin(k / 30)), pert)
    return out


def test_replay_is_bit_identical(gp_model, small_mvae):
    stream = _snapshot_stream()
    goal = Goal(Q0 + 0.2)
    lim = A.ArmModel().torque_limits

    def replay(kind):
        st = vae.initial_state(small_mvae, stream[0]) if kind == "vae" else aif.initial_state(stream[0].y_q)
        taus = []
        for snap in stream:
            if kind == "aic":
                st, tau = aif.aic_tick(st, snap, goal, GAINS, PREC, lim)
            elif kind == "gp":
                st, tau = aif.maic_gp_tick(st, snap, goal, GAINS, PREC, gp_model, lim)
            else:
                st, tau = vae.maic_vae_tick(st, snap, goal, GAINS, PREC, small_mvae, lim)
            taus.append(tau)
        return np.array(taus)

    for kind in ("aic", "gp", "vae"):
        assert np.array_equal(replay(kind), replay(kind)), kind


def test_mental_simulation_is_flat_at_the_goal(small_mvae, rng):
    z = rng.normal(size=4)
    q = M.decode_q(small_mvae, z)
    im = vae.mental_simulate(small_mvae, z, [Goal(q, v_d=M.predict_image(small_mvae, z))], GAINS, PREC, 50,
                             keep_images_every=10)
    assert not im.joint_error.any() and not im.image_error.any()
    assert np.array_equal(im.q, np.tile(q, (50, 1))) and len(im.images) == 5


def test_mental_simulation_reduces_joint_error(small_mvae):
    z = np.zeros(4)
    q_goal = M.decode_q(small_mvae, np.full(4, 0.3))
    im = vae.mental_simulate(small_mvae, z, [Goal(q_goal)], GAINS, PREC, 3000)
    assert im.joint_error[-1] < 0.5 * im.joint_error[0]
    assert np.all(np.isnan(im.image_error))


def test_impedance_gravity_hold():
    arm = A.ArmModel()
    K = np.array([30.0, 20.0, 10.0])
    st = A.ArmState(Q0.copy(), np.zeros(3))
    D = classic.critical_damping(arm, Q0, K)
    assert np.array_equal(classic.impedance_torque(arm, st, Q0, K, D), A.gravity_torque(arm, Q0))
    # the compensated interface already carries gravity, so nothing more is commanded
    assert np.allclose(classic.impedance_tick(arm, st, Q0, K, D), 0.0, atol=1e-15)


def test_impedance_is_critically_damped():
    # a single effective link: the distal one is negligible and unforced
    arm = A.ArmModel(link_lengths=(0.5, 0.01), link_masses=(1.0, 1e-4), link_inertias=(0.02, 1e-6),
                     joint_damping=(0.0, 0.0), gravity=(0.0, 0.0), torque_limits=(50.0, 1.0),
                     joint_limits=((-4.0, 4.0), (-4.0, 4.0)), com_fractions=(0.5, 0.5))
    K = np.array([8.0, 1e-4])
    q0 = np.array([0.0, 0.0])
    D = classic.critical_damping(arm, q0, K)
    m11 = A.mass_matrix(arm, q0)[0, 0]
    assert D[0] == pytest.approx(2 * math.sqrt(K[0] * m11))
    w = math.sqrt(K[0] / m11)
    goal = np.array([0.1, 0.0])

    def worst_gap(dt):
        st = A.ArmState(q0, np.zeros(2))
        worst = 0.0
        for k in range(int(round(3.0 / dt))):
            st = A.step(arm, st, classic.impedance_tick(arm, st, goal, K, D), dt=dt)
            t = (k + 1) * dt
            worst = max(worst, abs((goal[0] - st.q[0]) - 0.1 * (1 + w * t) * math.exp(-w * t)))
        return worst

    # the torque is held over each tick, so the gap to the continuous response shrinks like dt
    coarse, fine = worst_gap(1e-3), worst_gap(5e-4)
    assert coarse < 2e-3 * 0.1 and 1.8 < coarse / fine < 2.2


def test_mpc_config():
    cfg = classic.MpcConfig()
    assert (cfg.horizon, cfg.dt_mpc, cfg.w_goal) == (20, 0.1, (400.0, 400.0, 400.0))
    with pytest.raises(ValueError):
        classic.MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        classic.MpcConfig(w_tau=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        classic.make_transition(A.ArmModel(), 0.1)


def test_mpc_at_rest_goal_holds_gravity():
    arm = A.ArmModel()
    ctl = classic.MpcController(arm, classic.MpcConfig(max_iters=200, tol=1e-12))
    res = ctl.solve(A.ArmState(Q0.copy(), np.zeros(3)), Q0)
    g = A.gravity_torque(classic.mpc_model(arm), Q0)
    assert res.converged and res.grad_norm < 1e-3
    assert np.linalg.norm(res.U[0] - g) < 0.05 * np.linalg.norm(g)
    # the torque penalty lets the arm sag only near the end of the horizon
    assert np.abs(res.X[:10, :3] - Q0).max() < 0.01


def test_mpc_holds_its_command_between_solves():
    arm = A.ArmModel()
    ctl = classic.MpcController(arm)
    st = A.ArmState(Q0.copy(), np.zeros(3))
    tau0 = ctl.tick(st, Q0 + 0.2)
    plan = ctl.plan
    assert np.array_equal(ctl.tick(replace(st, t=0.05), Q0 + 0.2), tau0) and ctl.plan is plan
    ctl.tick(replace(st, t=0.1), Q0 + 0.2)
    assert ctl.plan is not plan
    assert np.all(np.abs(tau0) <= np.asarray(arm.torque_limits))


def test_ilqr_respects_bounds_and_flags_degraded_solves():
    def f(x, u):
        return np.array([x[0] + 0.1 * x[1], x[1] + 0.1 * (u[0] - math.sin(x[0]))])

    res = classic.ilqr(f, np.array([1.0, 0.0]), np.zeros((15, 1)), np.diag([100.0, 1.0]), np.eye(1),
                       np.zeros(2), u_min=[-0.5], u_max=[0.5], max_iters=1, tol=1e-12)
    assert np.all(np.abs(res.U) <= 0.5) and res.degraded and res.iterations == 1
    full = classic.ilqr(f, np.array([1.0, 0.0]), np.zeros((15, 1)), np.diag([100.0, 1.0]), np.eye(1),
                        np.zeros(2), u_min=[-0.5], u_max=[0.5], max_iters=100)
    assert full.cost <= res.cost and not full.degraded
