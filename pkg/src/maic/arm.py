"""Planar N-link serial arm: rigid-body dynamics, kinematics, camera and perturbations.

Joint angles are relative; absolute link angles are measured from the +x axis,
so ``q = 0`` is a straight horizontal arm. The arm moves in the vertical
plane when ``gravity`` points along -y.

Dynamics follow ``M(q) q'' + h(q, q') + g(q) = tau + tau_ext - D q'`` with the
link centres of mass treated as points plus a rotational inertia about each
centre of mass. ``tau`` is the joint torque. When ``gravity_compensated`` is
set, the torque interface adds ``g(q)`` of the bare arm to every command (the
way an industrial torque interface behaves), so commands are relative to a
gravity-free arm while payloads and other loads stay uncompensated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

PERTURBATION_KINDS = ("none", "inertial_payload", "elastic_band", "human_push", "sensor_noise")


class SimulationFault(RuntimeError):
    """The integrated state stopped being finite."""


@dataclass(frozen=True)
class ArmModel:
    link_lengths: tuple[float, ...] = (0.4, 0.35, 0.25)
    link_masses: tuple[float, ...] = (0.3, 0.2, 0.1)
    link_inertias: tuple[float, ...] = (0.004, 0.002, 0.0005)
    joint_damping: tuple[float, ...] = (0.5, 0.5, 0.5)
    gravity: tuple[float, float] = (0.0, -9.81)
    torque_limits: tuple[float, ...] = (20.0, 15.0, 10.0)
    joint_limits: tuple[tuple[float, float], ...] = ((-math.pi, math.pi),) * 3
    # Centre of mass position along each link, as a fraction of its length.
    com_fractions: tuple[float, ...] = (0.5, 0.5, 0.5)
    gravity_compensated: bool = True

    def __post_init__(self):
        n = len(self.link_lengths)
        if n < 2:
            raise ValueError("an arm needs at least two links")
        for name in ("link_masses", "link_inertias", "joint_damping", "torque_limits",
                     "joint_limits", "com_fractions"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries")
        if min(self.link_lengths) <= 0 or min(self.link_masses) <= 0 or min(self.link_inertias) <= 0:
            raise ValueError("link lengths, masses and inertias must be strictly positive")
        if min(self.torque_limits) <= 0:
            raise ValueError("torque limits must be positive")
        if min(self.joint_damping) < 0:
            raise ValueError("joint damping must be nonnegative")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError(f"empty joint interval ({lo}, {hi})")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @classmethod
    def from_dict(cls, d: dict) -> "ArmModel":
        kw = {}
        for k, v in d.items():
            if k == "joint_limits":
                kw[k] = tuple(tuple(float(x) for x in pair) for pair in v)
            elif k == "gravity_compensated":
                kw[k] = bool(v)
            elif k == "n_joints":
                continue
            else:
                kw[k] = tuple(float(x) for x in v)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_joints"] = self.n_joints
        return d


@dataclass
class ArmState:
    q: np.ndarray
    q_dot: np.ndarray
    t: float = 0.0
    limit_hit: bool = False

    def copy(self) -> "ArmState":
        return ArmState(self.q.copy(), self.q_dot.copy(), self.t, self.limit_hit)


@dataclass(frozen=True)
class Perturbation:
    """External disturbance applied by the simulator.

    ``params`` depend on ``kind``:

    * ``inertial_payload``: mass, link, offset, slosh_amplitude, slosh_frequency
    * ``elastic_band``: stiffness, rest_length, links (pair), max_tension
    * ``human_push``: amplitude, intervals (list of [t0, t1]), seed
    * ``sensor_noise``: variance, seed
    """

    kind: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        p = self.params
        for key in ("mass", "slosh_amplitude", "slosh_frequency", "stiffness", "amplitude", "variance"):
            if key in p and p[key] < 0:
                raise ValueError(f"{key} must be nonnegative")
        if self.kind == "elastic_band" and not p.get("max_tension", 0) > 0:
            raise ValueError("elastic_band needs max_tension > 0")
        if self.kind == "human_push":
            for t0, t1 in p.get("intervals", ()):
                if not 0 <= t0 < t1:
                    raise ValueError(f"bad push interval ({t0}, {t1})")

    def push_torque(self, t: float, n: int) -> np.ndarray | None:
        if self.kind != "human_push":
            return None
        for i, (t0, t1) in enumerate(self.params["intervals"]):
            if t0 <= t < t1:
                rng = np.random.default_rng([int(self.params.get("seed", 0)), i])
                d = rng.standard_normal(n)
                return float(self.params["amplitude"]) * d / np.linalg.norm(d)
        return None

    def check_schedule(self, duration: float):
        if self.kind == "human_push":
            for t0, t1 in self.params["intervals"]:
                if t1 > duration:
                    raise ValueError(f"push interval ({t0}, {t1}) ends after the experiment ({duration} s)")


NO_PERTURBATION = Perturbation()


@dataclass(frozen=True)
class CameraConfig:
    width: int = 32
    height: int = 32
    link_thickness: float = 2.0
    background_intensity: float = 0.0
    arm_intensity: float = 1.0

    def __post_init__(self):
        if self.width != self.height:
            raise ValueError("camera images must be square")
        if not (0 <= self.background_intensity <= 1 and 0 <= self.arm_intensity <= 1):
            raise ValueError("intensities must lie in [0, 1]")
        if not self.background_intensity < self.arm_intensity:
            raise ValueError("the arm must be brighter than the background")


@dataclass
class SensorSnapshot:
    y_q: np.ndarray
    y_qdot: np.ndarray
    y_ee: np.ndarray
    y_v: np.ndarray | None = None


# -- kinematics ---------------------------------------------------------------

def _frames(model: ArmModel, q: np.ndarray):
    """Absolute link angles, unit vectors along/perpendicular to each link and joint origins."""
    theta = np.cumsum(q)
    c, s = np.cos(theta), np.sin(theta)
    u = np.stack([c, s], axis=1)
    u_perp = np.stack([-s, c], axis=1)
    lengths = np.asarray(model.link_lengths)
    origins = np.zeros((model.n_joints + 1, 2))
    origins[1:] = np.cumsum(lengths[:, None] * u, axis=0)
    return theta, u, u_perp, origins


def _check_q(model: ArmModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_joints,):
        raise ValueError(f"expected {model.n_joints} joint values, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("joint values must be finite")
    return q


def joint_positions(model: ArmModel, q) -> np.ndarray:
    """Base, every joint and the end effector as an (n+1, 2) array."""
    return _frames(model, _check_q(model, q))[3]


def forward_kinematics(model: ArmModel, q) -> np.ndarray:
    return joint_positions(model, q)[-1]


def point_jacobian(origins: np.ndarray, point: np.ndarray, link: int, n: int) -> np.ndarray:
    """Jacobian (2 x n) of a point rigidly attached to ``link``."""
    J = np.zeros((2, n))
    r = point - origins[: link + 1]
    J[0, : link + 1] = -r[:, 1]
    J[1, : link + 1] = r[:, 0]
    return J


def ee_jacobian(model: ArmModel, q) -> np.ndarray:
    _, _, _, origins = _frames(model, _check_q(model, q))
    n = model.n_joints
    return point_jacobian(origins, origins[-1], n - 1, n)


# -- dynamics -----------------------------------------------------------------

def _point_terms(model, origins, u, omega, link, s):
    """Jacobian and velocity-product acceleration of a point at distance ``s`` along ``link``."""
    p = origins[link] + s * u[link]
    J = point_jacobian(origins, p, link, model.n_joints)
    a = -s * omega[link] ** 2 * u[link]
    for k in range(link):
        a = a - model.link_lengths[k] * omega[k] ** 2 * u[k]
    return p, J, a


@numba.njit(cache=True)
def _arm_terms_kernel(lengths, masses, inertias, com, gvec, q, q_dot):
    n = q.shape[0]
    theta = np.cumsum(q)
    omega = np.cumsum(q_dot)
    ux, uy = np.cos(theta), np.sin(theta)
    ox = np.zeros(n + 1)
    oy = np.zeros(n + 1)
    for k in range(n):
        ox[k + 1] = ox[k] + lengths[k] * ux[k]
        oy[k + 1] = oy[k] + lengths[k] * uy[k]
    M = np.zeros((n, n))
    h = np.zeros(n)
    g = np.zeros(n)
    J = np.zeros((2, n))
    for i in range(n):
        s = com[i] * lengths[i]
        px = ox[i] + s * ux[i]
        py = oy[i] + s * uy[i]
        J[:, :] = 0.0
        for j in range(i + 1):
            J[0, j] = -(py - oy[j])
            J[1, j] = px - ox[j]
        ax = -s * omega[i] ** 2 * ux[i]
        ay = -s * omega[i] ** 2 * uy[i]
        for k in range(i):
            ax -= lengths[k] * omega[k] ** 2 * ux[k]
            ay -= lengths[k] * omega[k] ** 2 * uy[k]
        m = masses[i]
        for r in range(i + 1):
            h[r] += m * (J[0, r] * ax + J[1, r] * ay)
            g[r] -= m * (J[0, r] * gvec[0] + J[1, r] * gvec[1])
            for c in range(i + 1):
                M[r, c] += m * (J[0, r] * J[0, c] + J[1, r] * J[1, c]) + inertias[i]
    return M, h, g


def _params(model: ArmModel):
    # cached per model instance: frozen dataclasses are hashable
    try:
        return _PARAM_CACHE[model]
    except KeyError:
        p = tuple(np.asarray(x, dtype=float) for x in (
            model.link_lengths, model.link_masses, model.link_inertias, model.com_fractions, model.gravity,
            model.joint_damping))
        _PARAM_CACHE[model] = p
        return p


_PARAM_CACHE: dict = {}


def arm_terms(model: ArmModel, q, q_dot):
    """Mass matrix, velocity-product torques ``h = C(q, q') q'`` and gravity torques of the bare arm."""
    lengths, masses, inertias, com, gvec, _ = _params(model)
    return _arm_terms_kernel(lengths, masses, inertias, com, gvec,
                             np.asarray(q, dtype=float), np.asarray(q_dot, dtype=float))


def mass_matrix(model: ArmModel, q) -> np.ndarray:
    q = _check_q(model, q)
    return arm_terms(model, q, np.zeros_like(q))[0]


def gravity_torque(model: ArmModel, q) -> np.ndarray:
    q = _check_q(model, q)
    return arm_terms(model, q, np.zeros_like(q))[2]


def coriolis_torque(model: ArmModel, q, q_dot) -> np.ndarray:
    return arm_terms(model, _check_q(model, q), np.asarray(q_dot, float))[1]


def interface_torque(model: ArmModel, q, tau_joint) -> np.ndarray:
    """Command to send so the arm receives ``tau_joint`` (undoes the interface's gravity compensation)."""
    if model.gravity_compensated:
        return np.asarray(tau_joint) - gravity_torque(model, q)
    return np.asarray(tau_joint, dtype=float)


def elastic_force(model: ArmModel, q, pert: Perturbation):
    """Tension force acting on the second anchor (the first receives the opposite).

    Returns ``(force, anchor_a, anchor_b)``; the band only pulls and its tension
    saturates at ``max_tension``.
    """
    _, _, _, origins = _frames(model, q)
    a, b = pert.params.get("links", (0, model.n_joints - 1))
    pa, pb = origins[a + 1], origins[b + 1]
    d = pb - pa
    length = float(np.linalg.norm(d))
    stretch = max(length - float(pert.params.get("rest_length", 0.0)), 0.0)
    tension = min(float(pert.params["stiffness"]) * stretch, float(pert.params["max_tension"]))
    if length == 0.0:
        return np.zeros(2), pa, pb
    return -tension * d / length, pa, pb


def _payload_offset(pert: Perturbation, t: float):
    p = pert.params
    w = 2 * math.pi * float(p.get("slosh_frequency", 0.0))
    A = float(p.get("slosh_amplitude", 0.0))
    s0 = float(p.get("offset", 0.0))
    return s0 + A * math.sin(w * t), A * w * math.cos(w * t), -A * w * w * math.sin(w * t)


def forward_dynamics(model: ArmModel, state: ArmState, tau, pert: Perturbation = NO_PERTURBATION) -> np.ndarray:
    """Joint accelerations for commanded torque ``tau`` under perturbation ``pert``."""
    q = _check_q(model, state.q)
    q_dot = np.asarray(state.q_dot, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != q.shape or q_dot.shape != q.shape:
        raise ValueError("tau, q and q_dot must all have n_joints entries")
    if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(q_dot))):
        raise ValueError("non-finite torque or velocity")
    return _accel(model, q, q_dot, state.t, tau, pert)


def _accel(model, q, q_dot, t, tau, pert):
    n = model.n_joints
    M, h, g = arm_terms(model, q, q_dot)
    rhs = tau - h - _params(model)[5] * q_dot
    if not model.gravity_compensated:
        rhs = rhs - g
    kind = pert.kind
    if kind == "inertial_payload":
        _, u, u_perp, origins = _frames(model, q)
        omega = np.cumsum(q_dot)
        link = int(pert.params.get("link", n - 1))
        s, s_dot, s_ddot = _payload_offset(pert, t)
        m = float(pert.params["mass"])
        _, J, a = _point_terms(model, origins, u, omega, link, s)
        a = a + 2 * s_dot * omega[link] * u_perp[link] + s_ddot * u[link]
        M = M + m * J.T @ J
        rhs = rhs - m * J.T @ a + m * J.T @ np.asarray(model.gravity)
    elif kind == "elastic_band":
        f, pa, pb = elastic_force(model, q, pert)
        _, _, _, origins = _frames(model, q)
        a_link, b_link = pert.params.get("links", (0, n - 1))
        rhs = rhs + point_jacobian(origins, pb, b_link, n).T @ f - point_jacobian(origins, pa, a_link, n).T @ f
    elif kind == "human_push":
        push = pert.push_torque(t, n)
        if push is not None:
            rhs = rhs + push
    return np.linalg.solve(M, rhs)


def clamp_torque(model: ArmModel, tau) -> np.ndarray:
    lim = np.asarray(model.torque_limits)
    return np.clip(tau, -lim, lim)


def step(model: ArmModel, state: ArmState, tau, pert: Perturbation = NO_PERTURBATION, dt: float = 1e-3) -> ArmState:
    """Advance one explicit midpoint (RK2) step with the torque held constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = clamp_torque(model, np.asarray(tau, dtype=float))
    q, qd, t = state.q, state.q_dot, state.t
    a1 = _accel(model, q, qd, t, tau, pert)
    q_mid = q + 0.5 * dt * qd
    qd_mid = qd + 0.5 * dt * a1
    a2 = _accel(model, q_mid, qd_mid, t + 0.5 * dt, tau, pert)
    q_new = q + dt * qd_mid
    qd_new = qd + dt * a2
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
        raise SimulationFault(f"non-finite state at t={t + dt:.4f}: q={q_new}, q_dot={qd_new}")
    lo = np.array([lim[0] for lim in model.joint_limits])
    hi = np.array([lim[1] for lim in model.joint_limits])
    hit = (q_new < lo) | (q_new > hi)
    if hit.any():
        q_new = np.clip(q_new, lo, hi)
        qd_new = np.where(hit, 0.0, qd_new)
    return ArmState(q_new, qd_new, t + dt, bool(hit.any()))


def mechanical_energy(model: ArmModel, state: ArmState) -> float:
    """Kinetic plus gravitational potential energy of the bare arm."""
    M = mass_matrix(model, state.q)
    _, u, _, origins = _frames(model, state.q)
    pe = 0.0
    gvec = np.asarray(model.gravity)
    for i in range(model.n_joints):
        com = origins[i] + model.com_fractions[i] * model.link_lengths[i] * u[i]
        pe -= model.link_masses[i] * float(gvec @ com)
    return 0.5 * float(state.q_dot @ M @ state.q_dot) + pe


# -- camera -------------------------------------------------------------------

def _pixel_scale(model: ArmModel, cam: CameraConfig) -> float:
    return cam.width / (2.0 * 1.05 * model.reach)


def to_pixels(model: ArmModel, cam: CameraConfig, points) -> np.ndarray:
    """World (x, y) to continuous (col, row) image coordinates, base at the image centre."""
    points = np.atleast_2d(points)
    scale = _pixel_scale(model, cam)
    col = cam.width / 2 + points[:, 0] * scale
    row = cam.height / 2 - points[:, 1] * scale
    return np.stack([col, row], axis=1)


_GRID_CACHE: dict = {}


def _pixel_centres(cam: CameraConfig):
    key = (cam.width, cam.height)
    if key not in _GRID_CACHE:
        rows, cols = np.mgrid[0 : cam.height, 0 : cam.width]
        _GRID_CACHE[key] = (cols.ravel() + 0.5, rows.ravel() + 0.5)
    return _GRID_CACHE[key]


def render(model: ArmModel, q, cam: CameraConfig) -> np.ndarray:
    """Binary silhouette of the arm: every link drawn as a segment of width ``link_thickness`` px."""
    pts = to_pixels(model, cam, joint_positions(model, q))
    px, py = _pixel_centres(cam)
    a, b = pts[:-1], pts[1:]
    d = b - a
    len2 = np.maximum((d**2).sum(axis=1), 1e-12)
    # distance from every pixel centre to every segment
    t = ((px[:, None] - a[:, 0]) * d[:, 0] + (py[:, None] - a[:, 1]) * d[:, 1]) / len2
    t = np.clip(t, 0.0, 1.0)
    dx = px[:, None] - (a[:, 0] + t * d[:, 0])
    dy = py[:, None] - (a[:, 1] + t * d[:, 1])
    covered = ((dx * dx + dy * dy).min(axis=1) <= (cam.link_thickness / 2) ** 2)
    img = np.where(covered, cam.arm_intensity, cam.background_intensity)
    return img.reshape(cam.height, cam.width)


def observe(model: ArmModel, state: ArmState, pert: Perturbation, cam: CameraConfig | None,
            rng: np.random.Generator | None = None) -> SensorSnapshot:
    """Sensor readings for ``state``; joint readings get Gaussian noise under ``sensor_noise``."""
    y_q = state.q.copy()
    y_qdot = state.q_dot.copy()
    if pert.kind == "sensor_noise":
        if rng is None:
            raise ValueError("sensor noise needs a random generator")
        sd = math.sqrt(float(pert.params["variance"]))
        y_q = y_q + sd * rng.standard_normal(y_q.shape)
        y_qdot = y_qdot + sd * rng.standard_normal(y_qdot.shape)
    y_ee = forward_kinematics(model, state.q)
    y_v = render(model, state.q, cam) if cam is not None else None
    return SensorSnapshot(y_q, y_qdot, y_ee, y_v)


# -- config and export --------------------------------------------------------

def load_config(path: str | Path) -> tuple[ArmModel, Perturbation]:
    """Read ``{"arm": {...}, "perturbation": {"kind": ..., "params": {...}}}``; both keys optional."""
    data = json.loads(Path(path).read_text())
    arm = ArmModel.from_dict(data["arm"]) if "arm" in data else ArmModel()
    p = data.get("perturbation", {})
    return arm, Perturbation(p.get("kind", "none"), dict(p.get("params", {})))


def write_trajectory_csv(path: str | Path, times: Sequence[float], qs, q_dots, taus, flags: Sequence[int]):
    qs, q_dots, taus = np.asarray(qs), np.asarray(q_dots), np.asarray(taus)
    n = qs.shape[1] if qs.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"q{i}" for i in range(n)] + [f"q_dot{i}" for i in range(n)]
                   + [f"tau{i}" for i in range(n)] + ["flags"])
        for k, t in enumerate(times):
            w.writerow([f"{t:.6f}"] + [repr(float(x)) for x in qs[k]] + [repr(float(x)) for x in q_dots[k]]
                       + [repr(float(x)) for x in taus[k]] + [int(flags[k])])


def with_gravity_compensation(model: ArmModel, on: bool) -> ArmModel:
    return replace(model, gravity_compensated=on)
