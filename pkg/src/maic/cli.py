"""Command-line entry point: model lifecycle, single runs, the benchmark suite, ablation, imagination, plots.

Exit codes: 0 success, 1 configuration error, 2 runtime fault, 3 acceptance regression.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import arm as arm_mod
from . import gp as gp_mod
from . import harness as H
from . import mvae as mvae_mod
from . import plots
from .controllers import aif, vae
from .free_energy import Goal, PrecisionSet

log = logging.getLogger("maic")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_REGRESSION = 0, 1, 2, 3


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise H.ConfigError(f"cannot read config {path}: {exc}") from None


def _arm(cfg: dict) -> arm_mod.ArmModel:
    return arm_mod.ArmModel.from_dict(cfg["arm"]) if "arm" in cfg else arm_mod.ArmModel()


def _camera(cfg: dict) -> arm_mod.CameraConfig:
    return arm_mod.CameraConfig(**cfg["camera"]) if "camera" in cfg else arm_mod.CameraConfig()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------

def cmd_gen_dataset(args, cfg):
    out = _out(args)
    arm = _arm(cfg)
    X_q, X_ee, tr, te, report = H.make_dataset(arm, args.seed, int(cfg.get("grid_points", 21)))
    (out / "models").mkdir(exist_ok=True)
    H.save_dataset(H.model_path(out, "dataset"), X_q, X_ee, tr, te, {"seed": args.seed, **report})
    print(json.dumps({**report, "train": len(tr), "test": len(te)}))
    return EXIT_OK


def cmd_train_gp(args, cfg):
    out = _out(args)
    b = H.load_models(out, need=("dataset",))
    model = H.train_gp(b)
    model.save(H.model_path(out, "gp"))
    err, _ = gp_mod.evaluate_holdout(model, b.X_q[b.test_idx], b.X_ee[b.test_idx])
    print(json.dumps({"n_train": model.n_train, "jitter": model.jitter, "holdout_mean_error_m": err}))
    return EXIT_OK


def gp_report(b: H.ModelBundle, n_points: int = 200, seed: int = 0, h: float = 1e-5) -> dict:
    """Hold-out error and the worst relative Jacobian mismatch against central differences."""
    err, errs = gp_mod.evaluate_holdout(b.gp, b.X_q[b.test_idx], b.X_ee[b.test_idx])
    diam = gp_mod.Workspace().diameter
    rng = np.random.default_rng(seed)
    Xtr = b.X_q[b.train_idx]
    worst = 0.0
    for _ in range(n_points):
        mu = Xtr[rng.integers(len(Xtr))] + 0.05 * rng.standard_normal(Xtr.shape[1])
        J = gp_mod.jacobian(b.gp, mu)
        Jn = np.empty_like(J)
        for j in range(len(mu)):
            d = np.zeros_like(mu)
            d[j] = h
            Jn[:, j] = (gp_mod.predict(b.gp, mu + d) - gp_mod.predict(b.gp, mu - d)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(J - Jn) / max(np.linalg.norm(Jn), 1e-12)))
    return {"holdout_mean_error_m": err, "holdout_max_error_m": float(errs.max()),
            "workspace_diameter_m": diam, "holdout_fraction_of_diameter": err / diam,
            "jacobian_max_relative_error": worst, "jacobian_points": n_points}


def cmd_eval_gp(args, cfg):
    out = _out(args)
    b = H.load_models(out, need=("dataset", "gp"))
    rep = gp_report(b, seed=args.seed)
    H.write_json(out / "eval_gp.json", rep)
    print(json.dumps(rep))
    return EXIT_OK


def cmd_train_mvae(args, cfg):
    out = _out(args)
    b = H.load_models(out, need=("dataset",))
    tc = dict(cfg.get("mvae_train", {}))
    if args.epochs is not None:
        tc["epochs"] = args.epochs
    tcfg = mvae_mod.TrainConfig(**{"seed": args.seed, **tc})
    model, hist = H.train_mvae(_arm(cfg), _camera(cfg), b, tcfg)
    model.meta["loss_history"] = [float(x) for x in hist]
    model.save(H.model_path(out, "mvae"))
    _write_loss_curve(out / "mvae_loss.csv", hist, args.seed)
    print(json.dumps({"epochs": len(hist), "final_loss": float(hist[-1]) if len(hist) else None}))
    return EXIT_OK


def _write_loss_curve(path, hist, seed):
    ma = mvae_mod.moving_average(hist)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "moving_average_20"])
        for i, v in enumerate(hist):
            m = ma[i - 19] if i >= 19 and len(ma) else float("nan")
            w.writerow([i, f"{v:.9e}", f"{m:.9e}"])


def mvae_report(b: H.ModelBundle, arm, cam) -> dict:
    V, Q = mvae_mod.build_image_dataset(arm, cam, b.X_q[b.test_idx], n_jitter=0)
    z = mvae_mod.encode(b.mvae, V, Q)
    rt = np.abs(mvae_mod.decode_q(b.mvae, z) - Q).max(axis=1)
    img = np.linalg.norm(mvae_mod.predict_image(b.mvae, z) - V, axis=1)
    return {"holdout_loss": mvae_mod.loss(b.mvae, V, Q), "roundtrip_max_abs_rad_median": float(np.median(rt)),
            "roundtrip_fraction_below_0.05": float(np.mean(rt < 0.05)),
            "image_frobenius_error_mean": float(img.mean()), "n_holdout": len(Q)}


def cmd_eval_mvae(args, cfg):
    out = _out(args)
    b = H.load_models(out, need=("dataset", "mvae"))
    rep = mvae_report(b, _arm(cfg), _camera(cfg))
    hist = np.array(b.mvae.meta.get("loss_history", []))
    _write_loss_curve(out / "mvae_loss.csv", hist, args.seed)
    ma = mvae_mod.moving_average(hist)
    rep["moving_average_nonincreasing"] = bool(np.all(np.diff(ma) <= 0)) if len(ma) > 1 else None
    H.write_json(out / "eval_mvae.json", rep)
    print(json.dumps(rep))
    return EXIT_OK


def _needed(controllers) -> tuple:
    need = ["dataset"]
    if any(c.startswith("maic-gp") for c in controllers):
        need.append("gp")
    if any(c.startswith("maic-vae") for c in controllers):
        need.append("mvae")
    return tuple(need)


def _duration(args) -> float:
    if args.duration is None:
        return 20.0
    if not args.demo and args.duration < 20.0:
        raise H.ConfigError("benchmark mode needs --duration >= 20 (pass --demo for shorter runs)")
    return args.duration


def cmd_run(args, cfg):
    out = _out(args)
    controller = args.controller or cfg.get("controller", "aic")
    scenario = args.scenario or cfg.get("scenario", "vanilla")
    arm = _arm(cfg)
    b = H.load_models(out, need=_needed([controller]))
    goals = b.goals(arm)
    d = {**cfg, "controller": controller, "scenario": scenario, "seed": args.seed,
         "duration_per_goal": _duration(args)}
    d.pop("goals", None)
    sc = H.config_from_dict(d, goals, benchmark=not args.demo)
    res = H.run_scenario(sc, b)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    H.write_trace_csv(runs / f"trace_{scenario}_{controller}.csv", res, args.csv_every)
    H.write_json(runs / f"metrics_{scenario}_{controller}.json", res.metrics)
    st = res.metrics["phases"]["goal"]
    print(json.dumps({ph: st[ph]["rmse"] for ph in H.PHASES}))
    return EXIT_OK


def cmd_bench(args, cfg):
    out = _out(args)
    arm = _arm(cfg)
    if any(k in cfg for k in ("gains", "precisions")):
        raise H.ConfigError("per-scenario gain overrides are not allowed in benchmark mode")
    controllers = [args.controller] if args.controller else list(cfg.get("controllers", H.CONTROLLERS))
    scenarios = [args.scenario] if args.scenario else list(cfg.get("scenarios", H.SCENARIOS))
    b = H.load_models(out, need=_needed(controllers))
    bench_dir = out / "bench"
    bench_dir.mkdir(exist_ok=True)
    table = H.bench_all(b, b.goals(arm), args.seed, _duration(args), controllers, scenarios,
                        benchmark=not args.demo, jobs=args.jobs, out_dir=bench_dir, csv_every=args.csv_every,
                        arm=arm)
    H.write_json(bench_dir / "table.json", table)
    text = H.format_table(table)
    (bench_dir / "table.txt").write_text(text)
    print(text, end="")
    if table["failed"]:
        return EXIT_RUNTIME
    if args.check and not all(table["checks"].values()):
        bad = [k for k, v in table["checks"].items() if not v]
        log.error("ordering checks failed: %s", ", ".join(bad))
        return EXIT_REGRESSION
    return EXIT_OK


def cmd_ablate(args, cfg):
    out = _out(args)
    arm = _arm(cfg)
    b = H.load_models(out)
    rep = H.ablate(b, b.goals(arm), args.seed, _duration(args), benchmark=not args.demo, arm=arm)
    H.write_json(out / "ablation.json", rep)
    print(json.dumps(rep, indent=2))
    return EXIT_OK


def ticks_to_fraction(err, fraction: float = 0.1) -> int | None:
    """First tick at which ``err`` falls to ``fraction`` of its initial value."""
    err = np.asarray(err)
    hit = np.nonzero(err <= fraction * err[0])[0]
    return int(hit[0]) if len(hit) else None


def imagine(b: H.ModelBundle, arm, cam, goals, seed: int = 0, duration_per_goal: float = 20.0,
            benchmark: bool = True, closed: H.RunResult | None = None) -> dict:
    """Sensor-free run from the encoded home snapshot, compared goal by goal with the closed loop.

    ``closed`` reuses an existing vanilla MAIC-VAE run with the same settings.
    """
    gains, prec = aif.ControllerGains(), PrecisionSet()
    sc = H.make_scenario("vanilla", "maic-vae", goals, seed, duration_per_goal, arm, benchmark)
    if closed is None:
        closed = H.run_scenario(sc, b)
    q0 = H._initial_pose(sc)
    snap = arm_mod.observe(arm, arm_mod.ArmState(q0, np.zeros_like(q0)), arm_mod.NO_PERTURBATION, cam)
    z0 = vae.initial_state(b.mvae, snap).latent
    gl = [Goal(np.asarray(g), v_d=arm_mod.render(arm, np.asarray(g), cam).ravel()) for g in goals]
    T = sc.n_ticks_per_goal
    im = vae.mental_simulate(b.mvae, z0, gl, gains, prec, T)
    cl_err = np.mean(np.abs(closed.trace.goal_error), axis=1)
    rows = []
    for g in range(len(goals)):
        s = slice(g * T, (g + 1) * T)
        last = slice(g * T + T - max(T // 10, 1), (g + 1) * T)
        rows.append({"goal": g, "imagined_ticks_to_10pct": ticks_to_fraction(im.joint_error[s]),
                     "closed_loop_ticks_to_10pct": ticks_to_fraction(cl_err[s]),
                     "imagined_image_error_final": float(np.mean(im.image_error[last])),
                     "closed_loop_image_error_final": float(np.nanmean(closed.trace.image_error[last]))})
    return {"seed": seed, "goals": rows, "imagined_joint_error": im.joint_error,
            "imagined_image_error": im.image_error, "closed_loop_error": cl_err}


def cmd_imagine(args, cfg):
    out = _out(args)
    arm, cam = _arm(cfg), _camera(cfg)
    b = H.load_models(out, need=("dataset", "mvae"))
    rep = imagine(b, arm, cam, b.goals(arm), args.seed, _duration(args), not args.demo)
    with open(out / "imagine.csv", "w", newline="") as fh:
        fh.write(f"# seed={args.seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", "imagined_joint_error", "imagined_image_error", "closed_loop_joint_error"])
        for k in range(0, len(rep["imagined_joint_error"]), args.csv_every):
            w.writerow([k, f"{rep['imagined_joint_error'][k]:.9e}", f"{rep['imagined_image_error'][k]:.9e}",
                        f"{rep['closed_loop_error'][k]:.9e}"])
    H.write_json(out / "imagine.json", {"seed": args.seed, "goals": rep["goals"]})
    print(json.dumps(rep["goals"], indent=2))
    return EXIT_OK


def read_trace_csv(path):
    with open(path) as fh:
        header = fh.readline()
        rows = list(csv.reader(fh))
    cols = rows[0]
    data = np.array(rows[1:], dtype=float) if len(rows) > 1 else np.zeros((0, len(cols)))
    return header, cols, data


def cmd_plot(args, cfg):
    out = _out(args)
    src = out / "bench" if (out / "bench").exists() else out / "runs"
    files = sorted(src.glob("trace_*.csv")) if src.exists() else []
    by_scenario: dict = {}
    for f in files:
        _, scen, ctrl = f.stem.split("_", 2)
        by_scenario.setdefault(scen, {})[ctrl] = f
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    arm = _arm(cfg)
    if not by_scenario:
        plots.write_plot(plot_dir / "empty.svg", {}, title="no traces")
    for scen, ctrls in sorted(by_scenario.items()):
        series = {}
        duration = 0.0
        for ctrl, f in sorted(ctrls.items()):
            _, cols, data = read_trace_csv(f)
            n = arm.n_joints
            idx = [cols.index(f"goal_err{j}") for j in range(n)]
            series[ctrl] = (data[:, 0], np.mean(np.abs(data[:, idx]), axis=1))
            if len(data):
                duration = max(duration, float(data[-1, 0]))
        shaded = []
        if scen == "human":
            n_goals = len(H.REFERENCE_GOALS_7DOF)
            per_goal = round(duration / n_goals) if duration else 20.0
            shaded = H.scenario_perturbation("human", args.seed, n_goals, per_goal).params["intervals"]
        plots.write_plot(plot_dir / f"{scen}.svg", series, shaded=shaded, title=f"scenario: {scen}")
    print(str(plot_dir))
    return EXIT_OK


COMMANDS = {
    "gen-dataset": (cmd_gen_dataset, "sample the end-effector grid and solve it to joint angles"),
    "train-gp": (cmd_train_gp, "fit the joint-to-end-effector GP"),
    "eval-gp": (cmd_eval_gp, "hold-out error and Jacobian check of the GP"),
    "train-mvae": (cmd_train_mvae, "render images and train the multimodal autoencoder"),
    "eval-mvae": (cmd_eval_mvae, "hold-out loss, latent round trip and loss curve CSV"),
    "run": (cmd_run, "one controller in one scenario"),
    "bench": (cmd_bench, "every controller in every scenario"),
    "ablate": (cmd_ablate, "full versus ablated multimodal controllers"),
    "imagine": (cmd_imagine, "sensor-free latent rollout compared with the closed loop"),
    "plot": (cmd_plot, "SVG error plots from recorded traces"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file with arm, camera and scenario settings")
        s.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
        s.add_argument("--out", default="maic_out", help="working directory for models and outputs")
        s.add_argument("--controller", choices=H.CONTROLLERS + H.ABLATED)
        s.add_argument("--scenario", choices=H.SCENARIOS)
        s.add_argument("--duration", type=float, help="seconds per goal (default 20)")
        s.add_argument("--demo", action="store_true", help="allow short runs; skips the ordering checks")
        s.add_argument("--csv-every", type=int, default=10, help="keep one trace row every N ticks")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "bench":
            s.add_argument("--check", action="store_true", help="exit 3 when an expected ordering fails")
            s.add_argument("--jobs", type=int, default=1, help="scenarios run in parallel")
        if name == "train-mvae":
            s.add_argument("--epochs", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command][0](args, cfg)
    except (H.ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (arm_mod.SimulationFault, aif.ControllerFault, mvae_mod.TrainingDiverged, gp_mod.GPFitError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
