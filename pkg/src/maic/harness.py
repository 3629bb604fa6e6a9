"""Experiment harness: scenarios, closed-loop runs, metrics, suite tables and the ablation study.

A run starts at the home pose, visits the goal sequence (each goal for
``duration_per_goal`` seconds) and records per-tick errors. Metrics split each
goal interval into a transient and a steady-state window.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import arm as arm_mod
from . import gp as gp_mod
from . import mvae as mvae_mod
from .arm import ArmModel, ArmState, CameraConfig, Perturbation
from .controllers import aif, classic, vae
from .free_energy import Goal, PrecisionSet

log = logging.getLogger(__name__)

CONTROLLERS = ("aic", "maic-gp", "maic-vae", "mpc", "ic")
ABLATED = ("maic-gp-ablated", "maic-vae-ablated")
SCENARIOS = ("vanilla", "inertial", "constraint", "human", "noisy")
AIF_CONTROLLERS = ("aic", "maic-gp", "maic-vae", "maic-gp-ablated", "maic-vae-ablated")
PHASES = ("full", "transient", "steady")
TRANSIENT_SECONDS = 10.0

# Goal postures of the 7-joint reference robot; the last one is also its home pose.
REFERENCE_GOALS_7DOF = np.array([
    [0.45, -0.38, 0.32, -2.45, 0.14, 2.06, 1.26],
    [0.70, -0.15, 0.10, -2.65, 0.31, 2.55, 1.23],
    [-0.03, -0.73, -0.25, -2.69, -0.18, 1.83, 0.79],
    [0.31, -0.47, 0.38, -2.16, 0.14, 1.71, 1.28],
])

DEFAULT_IC_STIFFNESS = (30.0, 20.0, 10.0)

# Perturbation settings of the desk scenarios. Push intervals are relative to
# the start of each goal.
SCENARIO_PARAMS = {
    "vanilla": ("none", {}),
    "inertial": ("inertial_payload", {"mass": 0.15, "link": 2, "offset": 0.2, "slosh_amplitude": 0.03,
                                      "slosh_frequency": 0.5}),
    "constraint": ("elastic_band", {"stiffness": 5.0, "rest_length": 0.1, "links": [-1, 2], "max_tension": 3.0}),
    "human": ("human_push", {"amplitude": 1.5, "offsets": [[12.0, 12.3]]}),
    "noisy": ("sensor_noise", {"variance": 0.1}),
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 1)."""


class ModelMissing(ConfigError):
    pass


class AcceptanceRegression(RuntimeError):
    pass


# -- models -------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Trained artefacts shared read-only by every run."""

    X_q: np.ndarray | None = None
    X_ee: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    gp: gp_mod.GpModel | None = None
    mvae: mvae_mod.MvaeModel | None = None
    seed: int = 0

    def goals(self, arm: ArmModel) -> np.ndarray:
        if self.X_q is None:
            raise ModelMissing("no dataset: run `maic gen-dataset --out DIR` first")
        return select_goals(arm, self.X_q[self.train_idx], self.X_ee[self.train_idx])


MODEL_FILES = {"dataset": ("dataset.bin", "gen-dataset"), "gp": ("gp.bin", "train-gp"),
               "mvae": ("mvae.bin", "train-mvae")}


def model_path(out_dir, kind: str) -> Path:
    return Path(out_dir) / "models" / MODEL_FILES[kind][0]


def require(out_dir, kind: str) -> Path:
    path = model_path(out_dir, kind)
    if not path.exists():
        raise ModelMissing(f"{path} not found: run `maic {MODEL_FILES[kind][1]} --out {out_dir}` first")
    return path


def load_models(out_dir, need=("dataset", "gp", "mvae")) -> ModelBundle:
    b = ModelBundle()
    if "dataset" in need:
        meta, a = _read_dataset(require(out_dir, "dataset"))
        b.X_q, b.X_ee = a["X_q"], a["X_ee"]
        b.train_idx, b.test_idx = a["train_idx"].astype(int), a["test_idx"].astype(int)
        b.seed = int(meta.get("seed", 0))
    if "gp" in need:
        b.gp = gp_mod.GpModel.load(require(out_dir, "gp"))
    if "mvae" in need:
        b.mvae = mvae_mod.MvaeModel.load(require(out_dir, "mvae"))
    return b


def _read_dataset(path):
    from .fileformat import read_blob
    meta, a = read_blob(path)
    if meta.get("kind") != "dataset":
        raise ConfigError(f"{path} does not hold a dataset")
    return meta, a


def select_goals(arm: ArmModel, X_q, X_ee, reference_goals=REFERENCE_GOALS_7DOF) -> np.ndarray:
    """Desk goals: the dataset configurations whose end effector is nearest to each projected goal.

    The 7-joint goals are projected onto the planar arm by keeping their first
    joints; the pick from the dataset keeps the goals on the posture manifold
    the learned models were trained on.
    """
    n = arm.n_joints
    out = []
    for g in np.asarray(reference_goals)[:, :n]:
        d = np.linalg.norm(np.asarray(X_ee) - arm_mod.forward_kinematics(arm, g), axis=1)
        out.append(np.asarray(X_q)[int(np.argmin(d))])
    return np.array(out)


def make_dataset(arm: ArmModel, seed: int = 0, n_per_axis: int = 21, train_fraction: float = 0.8):
    home = REFERENCE_GOALS_7DOF[-1, :arm.n_joints]
    X_q, X_ee, report = gp_mod.generate_grid_dataset(arm, n_per_axis, gp_mod.Workspace(), q_seed=home)
    tr, te = gp_mod.train_test_split(len(X_q), train_fraction, seed)
    return X_q, X_ee, tr, te, report


def save_dataset(path, X_q, X_ee, tr, te, meta):
    from .fileformat import write_blob
    write_blob(path, {"kind": "dataset", **meta}, {"X_q": X_q, "X_ee": X_ee, "train_idx": tr.astype(float),
                                                   "test_idx": te.astype(float)})


def train_gp(bundle: ModelBundle) -> gp_mod.GpModel:
    Xq, Xe = bundle.X_q[bundle.train_idx], bundle.X_ee[bundle.train_idx]
    theta, sf2, sn2 = gp_mod.default_hyperparameters(Xq, Xe)
    return gp_mod.fit(Xq, Xe, theta, sf2, sn2)


def train_mvae(arm: ArmModel, cam: CameraConfig, bundle: ModelBundle, cfg: mvae_mod.TrainConfig | None = None):
    """Render the training configurations, fit the autoencoder and its visual noise level."""
    cfg = cfg or mvae_mod.TrainConfig(seed=bundle.seed)
    X_v, X_q = mvae_mod.build_image_dataset(arm, cam, bundle.X_q[bundle.train_idx], seed=cfg.seed)
    mask = mvae_mod.precision_mask(X_v)
    model = mvae_mod.init_model(X_v.shape[1], arm.n_joints, seed=cfg.seed, precision_mask=mask)
    model, history = mvae_mod.train(model, X_v, X_q, cfg)
    model = mvae_mod.fit_visual_variance(model, X_v, X_q)
    return model, history


# -- scenario configuration ---------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "vanilla"
    controller: str = "aic"
    arm: ArmModel = field(default_factory=ArmModel)
    perturbation: Perturbation = field(default_factory=Perturbation)
    goals: tuple = ()
    duration_per_goal: float = 20.0
    seed: int = 0
    benchmark: bool = True
    gains: aif.ControllerGains = field(default_factory=aif.ControllerGains)
    precisions: PrecisionSet = field(default_factory=PrecisionSet)
    mpc: classic.MpcConfig = field(default_factory=classic.MpcConfig)
    ic_stiffness: tuple = DEFAULT_IC_STIFFNESS
    camera: CameraConfig = field(default_factory=CameraConfig)
    init_jitter: float = 0.01
    home: tuple = ()

    def __post_init__(self):
        if self.controller not in CONTROLLERS + ABLATED:
            raise ConfigError(f"unknown controller {self.controller!r}")
        if self.duration_per_goal < 0:
            raise ConfigError("duration must be nonnegative")
        if self.benchmark and self.goals and self.duration_per_goal < 2 * TRANSIENT_SECONDS:
            raise ConfigError("benchmark mode needs at least 20 s per goal")
        lo = np.array([a for a, _ in self.arm.joint_limits])
        hi = np.array([b for _, b in self.arm.joint_limits])
        for g in self.goals:
            g = np.asarray(g)
            if g.shape != (self.arm.n_joints,) or np.any(g < lo) or np.any(g > hi):
                raise ConfigError(f"goal {g} outside the joint limits or of the wrong size")
        try:
            self.perturbation.check_schedule(self.duration_per_goal * len(self.goals))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def n_ticks_per_goal(self) -> int:
        return int(round(self.duration_per_goal / self.gains.dt))

    def gains_hash(self) -> str:
        payload = {"gains": self.gains.as_dict(),
                   "precisions": {k: getattr(self.precisions, k) for k in
                                  ("var_q", "var_qdot", "var_mu", "var_mu1", "var_f", "var_ee")},
                   "mpc": {k: getattr(self.mpc, k) for k in ("horizon", "dt_mpc", "w_goal", "w_tau")},
                   "ic_stiffness": list(self.ic_stiffness)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def scenario_perturbation(name: str, seed: int, n_goals: int, duration_per_goal: float,
                          overrides: dict | None = None) -> Perturbation:
    if name not in SCENARIO_PARAMS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    kind, params = SCENARIO_PARAMS[name]
    params = {**params, **(overrides or {})}
    if kind == "human_push":
        offsets = params.pop("offsets")
        intervals = [[g * duration_per_goal + a, g * duration_per_goal + b]
                     for g in range(n_goals) for a, b in offsets if b <= duration_per_goal]
        params = {**params, "intervals": intervals, "seed": seed}
    elif kind == "sensor_noise":
        params = {**params, "seed": seed}
    return Perturbation(kind, params)


def make_scenario(scenario: str, controller: str, goals, seed: int = 0, duration_per_goal: float = 20.0,
                  arm: ArmModel | None = None, benchmark: bool = True, overrides: dict | None = None,
                  **kw) -> ScenarioConfig:
    arm = arm or ArmModel()
    goals = tuple(tuple(float(x) for x in g) for g in np.asarray(goals))
    pert = scenario_perturbation(scenario, seed, len(goals), duration_per_goal, overrides)
    home = kw.pop("home", goals[-1] if goals else ())
    return ScenarioConfig(scenario, controller, arm, pert, goals, duration_per_goal, seed, benchmark,
                          home=tuple(home), **kw)


def config_from_dict(d: dict, goals, benchmark: bool = True) -> ScenarioConfig:
    """Scenario from a JSON-style dict (``arm``, ``perturbation``, ``scenario``, ``controller``, ...).

    Gain overrides are rejected in benchmark mode so every scenario runs with
    the same tuning.
    """
    arm = ArmModel.from_dict(d["arm"]) if "arm" in d else ArmModel()
    if benchmark and any(k in d for k in ("gains", "precisions")):
        raise ConfigError("per-scenario gain overrides are not allowed in benchmark mode")
    kw = {}
    if "gains" in d:
        kw["gains"] = aif.ControllerGains(**d["gains"])
    if "precisions" in d:
        kw["precisions"] = PrecisionSet(**d["precisions"])
    cfg = make_scenario(d.get("scenario", "vanilla"), d.get("controller", "aic"), d.get("goals", goals),
                        int(d.get("seed", 0)), float(d.get("duration_per_goal", 20.0)), arm, benchmark, **kw)
    if "perturbation" in d:
        p = d["perturbation"]
        cfg = replace(cfg, perturbation=Perturbation(p.get("kind", "none"), dict(p.get("params", {}))))
    return cfg


# -- running ------------------------------------------------------------------

@dataclass
class Trace:
    t: np.ndarray
    goal_index: np.ndarray
    q: np.ndarray
    q_d: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    vfe: np.ndarray
    image_error: np.ndarray
    ee_error: np.ndarray
    limit_hit: np.ndarray

    @property
    def goal_error(self) -> np.ndarray:
        return self.q - self.q_d

    @property
    def perception_error(self) -> np.ndarray:
        return self.mu - self.q

    def __len__(self):
        return len(self.t)


@dataclass
class RunResult:
    config: ScenarioConfig
    trace: Trace
    metrics: dict
    degraded: int = 0


def _initial_pose(cfg: ScenarioConfig) -> np.ndarray:
    home = np.asarray(cfg.home if cfg.home else np.zeros(cfg.arm.n_joints), dtype=float)
    rng = np.random.default_rng([cfg.seed, 1])
    return home + cfg.init_jitter * rng.standard_normal(home.shape)


def run_scenario(cfg: ScenarioConfig, models: ModelBundle | None = None) -> RunResult:
    """Closed-loop run of one controller through the goal sequence."""
    models = models or ModelBundle()
    ctrl = cfg.controller
    if ctrl in ("maic-gp",) and models.gp is None:
        raise ModelMissing("MAIC-GP needs a GP model: run `maic train-gp` first")
    if ctrl in ("maic-vae", "maic-vae-ablated") and models.mvae is None:
        raise ModelMissing("MAIC-VAE needs an autoencoder: run `maic train-mvae` first")
    arm, pert = cfg.arm, cfg.perturbation
    n = arm.n_joints
    n_goals = len(cfg.goals)
    T = cfg.n_ticks_per_goal
    total = n_goals * T
    dt = cfg.gains.dt
    lim = arm.torque_limits
    prec = cfg.precisions
    uses_vision = ctrl in ("maic-vae", "maic-vae-ablated")
    if uses_vision and prec.var_v is None and models.mvae.visual_variance is not None:
        prec = replace(prec, var_v=models.mvae.visual_variance)
    cam = cfg.camera if uses_vision else None
    noise_rng = np.random.default_rng([cfg.seed, 2])

    q0 = _initial_pose(cfg)
    state = ArmState(q0, np.zeros(n))
    snap = arm_mod.observe(arm, state, pert, cam, noise_rng)
    if uses_vision:
        cstate = vae.initial_state(models.mvae, snap)
    else:
        cstate = aif.initial_state(snap.y_q)
    K = np.asarray(cfg.ic_stiffness[:n], dtype=float)
    D = classic.critical_damping(arm, q0, K)
    mpc = classic.MpcController(arm, cfg.mpc) if ctrl == "mpc" else None

    tr = Trace(np.zeros(total), np.zeros(total, dtype=int), np.zeros((total, n)), np.zeros((total, n)),
               np.full((total, n), np.nan), np.zeros((total, n)), np.full(total, np.nan),
               np.full(total, np.nan), np.full(total, np.nan), np.zeros(total, dtype=bool))
    k = 0
    for gi, q_d in enumerate(cfg.goals):
        q_d = np.asarray(q_d)
        goal = Goal(q_d, arm_mod.forward_kinematics(arm, q_d),
                    arm_mod.render(arm, q_d, cfg.camera).ravel() if uses_vision else None)
        for _ in range(T):
            if k > 0:
                snap = arm_mod.observe(arm, state, pert, cam, noise_rng)
            if ctrl == "aic":
                cstate, tau = aif.aic_tick(cstate, snap, goal, cfg.gains, prec, lim)
            elif ctrl == "maic-gp":
                cstate, tau = aif.maic_gp_tick(cstate, snap, goal, cfg.gains, prec, models.gp, lim)
            elif ctrl == "maic-gp-ablated":
                cstate, tau = aif.maic_gp_tick(cstate, snap, goal, cfg.gains, prec, None, lim)
            elif uses_vision:
                cstate, tau = vae.maic_vae_tick(cstate, snap, goal, cfg.gains, prec, models.mvae, lim,
                                                use_vision=ctrl == "maic-vae")
            else:
                sensed = ArmState(snap.y_q, snap.y_qdot, state.t)
                if ctrl == "ic":
                    tau = classic.impedance_tick(arm, sensed, q_d, K, D)
                else:
                    tau = mpc.tick(sensed, q_d)
            tr.t[k] = state.t
            tr.goal_index[k] = gi
            tr.q[k] = state.q
            tr.q_d[k] = q_d
            tr.tau[k] = tau
            if ctrl in AIF_CONTROLLERS:
                tr.mu[k] = cstate.belief.mu
                tr.vfe[k] = cstate.vfe
                img = cstate.extra.get("image_error")
                if img is not None:
                    tr.image_error[k] = img
                if models.gp is not None and ctrl != "maic-vae":
                    tr.ee_error[k] = np.linalg.norm(gp_mod.predict(models.gp, cstate.belief.mu) - snap.y_ee)
            state = arm_mod.step(arm, state, tau, pert, dt)
            tr.limit_hit[k] = state.limit_hit
            k += 1
    metrics = compute_metrics(tr, n_goals, T, dt)
    metrics["seed"] = cfg.seed
    metrics["gains_hash"] = cfg.gains_hash()
    if mpc is not None:
        metrics["mpc_degraded_solves"] = mpc.degraded_count
    return RunResult(cfg, tr, metrics, mpc.degraded_count if mpc else 0)


# -- metrics ------------------------------------------------------------------

def phase_windows(n_goals: int, ticks_per_goal: int, dt: float):
    """Tick index ranges ``{phase: [(start, stop), ...]}``; transient and steady tile each goal."""
    split = min(int(round(TRANSIENT_SECONDS / dt)), ticks_per_goal // 2)
    out = {"full": [], "transient": [], "steady": []}
    for g in range(n_goals):
        s = g * ticks_per_goal
        out["full"].append((s, s + ticks_per_goal))
        out["transient"].append((s, s + split))
        out["steady"].append((s + split, s + ticks_per_goal))
    return out


def _stats(x: np.ndarray) -> dict:
    x = x[np.isfinite(x)] if x.size else x
    if x.size == 0:
        return {"rmse": None, "std": None, "mae": None}
    return {"rmse": float(np.sqrt(np.mean(x * x))), "std": float(np.std(x)), "mae": float(np.mean(np.abs(x)))}


def compute_metrics(trace: Trace, n_goals: int, ticks_per_goal: int, dt: float) -> dict:
    """RMSE, standard deviation and mean absolute value of each error signal per phase.

    Aggregates pool the windows of all goals; ``per_goal`` keeps them apart.
    """
    wins = phase_windows(n_goals, ticks_per_goal, dt)
    signals = {"goal": trace.goal_error, "perception": trace.perception_error,
               "image": trace.image_error, "ee": trace.ee_error}
    out = {"n_goals": n_goals, "ticks_per_goal": ticks_per_goal, "dt": dt, "phases": {}, "per_goal": []}
    for name, sig in signals.items():
        out["phases"][name] = {}
        for ph, ranges in wins.items():
            parts = [sig[a:b] for a, b in ranges]
            pooled = np.concatenate(parts) if parts else np.zeros(0)
            out["phases"][name][ph] = _stats(np.ravel(pooled))
    for g in range(n_goals):
        rec = {"goal": g}
        for ph, ranges in wins.items():
            a, b = ranges[g]
            rec[ph] = _stats(np.ravel(trace.goal_error[a:b]))
        out["per_goal"].append(rec)
    out["switch_peaks"] = goal_switch_peaks(trace, n_goals, ticks_per_goal, dt)
    return out


def goal_switch_peaks(trace: Trace, n_goals: int, ticks_per_goal: int, dt: float, window: float = 2.0) -> bool:
    """True when the error right after every goal switch rises above its level just before."""
    if n_goals < 2 or ticks_per_goal < 2:
        return True
    e = np.mean(np.abs(trace.goal_error), axis=1)
    w = max(1, min(int(window / dt), ticks_per_goal))
    for g in range(1, n_goals):
        s = g * ticks_per_goal
        if not e[s:s + w].max() > e[s - 1]:
            return False
    return True


def overshoot_flags(trace: Trace, n_goals: int, ticks_per_goal: int, threshold: float = 0.05,
                    min_step: float = 1e-3) -> list[bool]:
    """Per goal: does any joint travel past its goal by more than ``threshold`` of its step?"""
    flags = []
    for g in range(n_goals):
        s = g * ticks_per_goal
        seg = trace.q[s:s + ticks_per_goal]
        q_d = trace.q_d[s]
        start = trace.q[s]
        step = q_d - start
        over = False
        for j in range(len(q_d)):
            if abs(step[j]) < min_step:
                continue
            past = np.max((seg[:, j] - q_d[j]) * np.sign(step[j]))
            over |= bool(past > threshold * abs(step[j]))
        flags.append(over)
    return flags


def recovery(trace: Trace, intervals, dt: float, horizon: float = 5.0, pre_window: float = 1.0):
    """Per push: pre-push error level, error level ``horizon`` s after release, and their ratio.

    Levels are RMS of the mean absolute joint error over ``pre_window`` seconds
    before the push and over the last ``pre_window`` seconds of the recovery
    horizon.
    """
    e = np.mean(np.abs(trace.goal_error), axis=1)
    w = int(round(pre_window / dt))
    out = []
    for t0, t1 in intervals:
        a = int(round(t0 / dt))
        b = int(round((t1 + horizon) / dt))
        pre = float(np.sqrt(np.mean(e[a - w:a] ** 2)))
        post = float(np.sqrt(np.mean(e[b - w:b] ** 2)))
        out.append({"push": [t0, t1], "pre": pre, "post": post, "ratio": post / pre if pre > 0 else math.inf})
    return out


# -- output -------------------------------------------------------------------

def write_trace_csv(path, result: RunResult, every: int = 1):
    """Per-tick diagnostics; ``every`` keeps one row in ``every`` ticks."""
    tr = result.trace
    n = tr.q.shape[1]
    cfg = result.config
    with open(path, "w", newline="") as fh:
        fh.write(f"# controller={cfg.controller} scenario={cfg.scenario} seed={cfg.seed} "
                 f"gains={cfg.gains_hash()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "goal"] + [f"goal_err{j}" for j in range(n)] + [f"belief_err{j}" for j in range(n)]
                   + [f"tau{j}" for j in range(n)] + ["vfe", "image_err", "ee_err", "limit"])
        ge, pe = tr.goal_error, tr.perception_error
        for k in range(0, len(tr), every):
            w.writerow([f"{tr.t[k]:.3f}", int(tr.goal_index[k])]
                       + [f"{x:.9e}" for x in ge[k]] + [f"{x:.9e}" for x in pe[k]]
                       + [f"{x:.9e}" for x in tr.tau[k]]
                       + [f"{tr.vfe[k]:.9e}", f"{tr.image_error[k]:.9e}", f"{tr.ee_error[k]:.9e}",
                          int(tr.limit_hit[k])])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# -- suites -------------------------------------------------------------------

def _run_job(args):
    cfg, models = args
    try:
        return run_scenario(cfg, models), None
    except (arm_mod.SimulationFault, aif.ControllerFault, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_many(configs, models: ModelBundle, jobs: int = 1):
    """Run configs (in parallel when ``jobs > 1``); results come back in input order."""
    work = [(c, models) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_job, work))
    return [_run_job(w) for w in work]


def bench_all(models: ModelBundle, goals, seed: int = 0, duration_per_goal: float = 20.0,
              controllers=CONTROLLERS, scenarios=SCENARIOS, benchmark: bool = True, jobs: int = 1,
              out_dir=None, csv_every: int = 10, arm: ArmModel | None = None):
    """Every controller in every scenario; returns the comparison table.

    The table has one entry per (controller, scenario, phase) with RMSE and
    standard deviation of the joint goal error plus the rank of the RMSE
    within its (scenario, phase) column (1 = best, 2 = runner-up).
    """
    configs = [make_scenario(s, c, goals, seed, duration_per_goal, arm, benchmark)
               for s in scenarios for c in controllers]
    hashes = {c.gains_hash() for c in configs}
    if len(hashes) != 1:
        raise ConfigError("controller settings differ across scenarios")
    results = run_many(configs, models, jobs)
    cells = {}
    failed = []
    for cfg, (res, err) in zip(configs, results):
        for ph in PHASES:
            key = f"{cfg.controller}|{cfg.scenario}|{ph}"
            if res is None:
                cells[key] = {"rmse": None, "std": None, "status": "FAILED", "error": err}
            else:
                st = res.metrics["phases"]["goal"][ph]
                cells[key] = {"rmse": st["rmse"], "std": st["std"], "status": "ok"}
        if res is None:
            failed.append(f"{cfg.controller}/{cfg.scenario}")
        elif out_dir is not None:
            write_trace_csv(Path(out_dir) / f"trace_{cfg.scenario}_{cfg.controller}.csv", res, csv_every)
    for s in scenarios:
        for ph in PHASES:
            col = [(cells[f"{c}|{s}|{ph}"]["rmse"], c) for c in controllers if cells[f"{c}|{s}|{ph}"]["rmse"] is not None]
            col.sort()
            for rank, (_, c) in enumerate(col[:2], start=1):
                cells[f"{c}|{s}|{ph}"]["rank"] = rank
    table = {"seed": seed, "gains_hash": hashes.pop(), "controllers": list(controllers),
             "scenarios": list(scenarios), "phases": list(PHASES), "duration_per_goal": duration_per_goal,
             "cells": cells, "failed": failed}
    table["checks"] = ordering_checks(table) if benchmark else {}
    return table


def ordering_checks(table: dict) -> dict:
    """Orderings expected from the reference comparison, evaluated on one table."""
    c = table["cells"]

    def val(ctrl, scen, ph):
        return c.get(f"{ctrl}|{scen}|{ph}", {}).get("rmse")

    checks = {}
    a, g, i = (val(x, "constraint", "steady") for x in ("maic-gp", "aic", "ic"))
    if None not in (a, g, i):
        checks["constraint_steady_gp_lt_aic_lt_ic"] = bool(a < g < i)
    col = [val(x, "noisy", "full") for x in table["controllers"]]
    v = val("maic-vae", "noisy", "full")
    if v is not None and None not in col:
        checks["noisy_full_vae_is_min"] = bool(v == min(col))
    for x in ("aic", "maic-gp", "maic-vae", "ic"):
        s = val(x, "vanilla", "steady")
        if s is not None:
            checks[f"vanilla_steady_{x}_lt_1e-2"] = bool(s < 1e-2)
    return checks


def format_table(table: dict) -> str:
    """Plain-text rendering; ``*`` marks the best RMSE of a column and ``+`` the runner-up."""
    lines = []
    mark = {1: "*", 2: "+"}
    for ph in table["phases"]:
        lines.append(f"[{ph}] joint goal error RMSE (std)")
        head = f"{'controller':<18}" + "".join(f"{s:>24}" for s in table["scenarios"])
        lines.append(head)
        for ctrl in table["controllers"]:
            row = f"{ctrl:<18}"
            for s in table["scenarios"]:
                cell = table["cells"][f"{ctrl}|{s}|{ph}"]
                if cell["status"] != "ok":
                    row += f"{'FAILED':>24}"
                else:
                    txt = f"{cell['rmse']:.2e} ({cell['std']:.1e}){mark.get(cell.get('rank'), ' ')}"
                    row += f"{txt:>24}"
            lines.append(row)
        lines.append("")
    if table.get("checks"):
        lines.append("checks: " + ", ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in table["checks"].items()))
    return "\n".join(lines) + "\n"


def ablate(models: ModelBundle, goals, seed: int = 0, duration_per_goal: float = 20.0, benchmark: bool = True,
           arm: ArmModel | None = None) -> dict:
    """Full versus ablated MAIC on the vanilla scenario: RMSE deltas and response shape."""
    pairs = [("maic-gp", "maic-gp-ablated"), ("maic-vae", "maic-vae-ablated")]
    out = {"seed": seed, "pairs": []}
    for full, abl in pairs:
        rf = run_scenario(make_scenario("vanilla", full, goals, seed, duration_per_goal, arm, benchmark), models)
        ra = run_scenario(make_scenario("vanilla", abl, goals, seed, duration_per_goal, arm, benchmark), models)
        rec = {"full": full, "ablated": abl}
        for ph in PHASES:
            f = rf.metrics["phases"]["goal"][ph]["rmse"]
            a = ra.metrics["phases"]["goal"][ph]["rmse"]
            rec[ph] = {"full": f, "ablated": a, "relative_change": (f - a) / a if a else None}
        n_goals, T = len(goals), rf.config.n_ticks_per_goal
        rec["overshoot_full"] = overshoot_flags(rf.trace, n_goals, T)
        rec["overshoot_ablated"] = overshoot_flags(ra.trace, n_goals, T)
        out["pairs"].append(rec)
    return out
