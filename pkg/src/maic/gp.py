"""Squared-exponential GP regression from joint angles to end-effector position.

The model keeps ``K^-1`` and ``alpha = K^-1 X_ee`` so a prediction is one kernel
row times ``alpha`` and the Jacobian comes in closed form from the same row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import arm as arm_mod
from .fileformat import read_blob, write_blob

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class GPFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpModel:
    X_q: np.ndarray
    X_ee: np.ndarray
    theta: np.ndarray
    sigma_f2: float
    sigma_n2: float
    K_inv: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n_train(self) -> int:
        return self.X_q.shape[0]

    def save(self, path) -> None:
        meta = {"kind": "gp", "sigma_f2": self.sigma_f2, "sigma_n2": self.sigma_n2, "jitter": self.jitter,
                "n_train": self.n_train, "input_dim": self.X_q.shape[1], "output_dim": self.X_ee.shape[1]}
        write_blob(path, meta, {"X_q": self.X_q, "X_ee": self.X_ee, "theta": self.theta,
                                "K_inv": self.K_inv, "alpha": self.alpha})

    @classmethod
    def load(cls, path) -> "GpModel":
        meta, a = read_blob(path)
        if meta.get("kind") != "gp":
            raise ValueError(f"{path} does not hold a GP model")
        return cls(a["X_q"], a["X_ee"], a["theta"], meta["sigma_f2"], meta["sigma_n2"], a["K_inv"], a["alpha"],
                   meta.get("jitter", 0.0))


def kernel(xi, xj, theta, sigma_f2: float, sigma_n2: float, same_index: bool = False) -> float:
    d = np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float)
    k = sigma_f2 * np.exp(-0.5 * float(d @ (np.asarray(theta) * d)))
    return k + (sigma_n2 if same_index else 0.0)


def kernel_matrix(A, B, theta, sigma_f2: float) -> np.ndarray:
    """Noise-free SE kernel between the rows of ``A`` and ``B``."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    sA = A * np.sqrt(theta)
    sB = B * np.sqrt(theta)
    d2 = (sA**2).sum(1)[:, None] + (sB**2).sum(1)[None, :] - 2 * sA @ sB.T
    return sigma_f2 * np.exp(-0.5 * np.maximum(d2, 0.0))


def fit(X_q, X_ee, theta, sigma_f2: float, sigma_n2: float) -> GpModel:
    """Build ``K`` with noise on the diagonal and invert it through a Cholesky factor.

    On a failed factorization jitter is escalated from 1e-10 by factors of ten up
    to 1e-6 before giving up.
    """
    X_q = np.atleast_2d(np.asarray(X_q, dtype=float))
    X_ee = np.asarray(X_ee, dtype=float).reshape(X_q.shape[0], -1)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (X_q.shape[1],)).copy()
    if sigma_f2 <= 0 or sigma_n2 < 0 or np.any(theta <= 0):
        raise ValueError("need sigma_f2 > 0, sigma_n2 >= 0 and positive theta")
    K = kernel_matrix(X_q, X_q, theta, sigma_f2) + sigma_n2 * np.eye(len(X_q))
    jitter = 0.0
    while True:
        try:
            L = scipy.linalg.cholesky(K + jitter * np.eye(len(K)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX * (1 + 1e-9):
                pivot = float(np.linalg.eigvalsh(K).min())
                raise GPFitError(f"kernel matrix is not positive definite (smallest pivot {pivot:.3e})")
    if jitter:
        log.info("GP fit needed jitter %.1e", jitter)
    K_inv = scipy.linalg.cho_solve((L, True), np.eye(len(K)))
    K_inv = 0.5 * (K_inv + K_inv.T)
    alpha = scipy.linalg.cho_solve((L, True), X_ee)
    return GpModel(X_q, X_ee, theta, float(sigma_f2), float(sigma_n2), K_inv, alpha, jitter)


def predict(model: GpModel, mu) -> np.ndarray:
    k = kernel_matrix(np.asarray(mu, dtype=float)[None, :], model.X_q, model.theta, model.sigma_f2)[0]
    return k @ model.alpha


def predict_and_jacobian(model: GpModel, mu):
    mu = np.asarray(mu, dtype=float)
    diff = mu[None, :] - model.X_q
    k = model.sigma_f2 * np.exp(-0.5 * (diff * diff) @ model.theta)
    pred = k @ model.alpha
    # d k_n / d mu = -k_n * Theta (mu - x_n)
    jac = -(model.alpha.T * k) @ (diff * model.theta)
    return pred, jac


def jacobian(model: GpModel, mu) -> np.ndarray:
    """Exact derivative of :func:`predict`, shape (output dim, input dim)."""
    return predict_and_jacobian(model, mu)[1]


def default_hyperparameters(X_q, X_ee, spacing_factor: float = 8.0, sigma_n2: float = 1e-8):
    """Fixed hyperparameters: length scale = ``spacing_factor`` x median nearest-neighbour joint spacing.

    The targets come from exact forward kinematics, so the noise term only
    regularises the solve.
    """
    X_q = np.asarray(X_q)
    d2 = ((X_q[:, None, :] - X_q[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    spacing = float(np.median(np.sqrt(d2.min(1))))
    ell = spacing_factor * spacing
    theta = np.full(X_q.shape[1], 1.0 / ell**2)
    sigma_f2 = float(np.var(X_ee, axis=0).mean())
    return theta, sigma_f2, sigma_n2


# -- dataset ------------------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    x: tuple[float, float] = (0.45, 0.95)
    y: tuple[float, float] = (-0.5, 0.6)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.x[1] - self.x[0], self.y[1] - self.y[0]))


def ik_dls(model: arm_mod.ArmModel, target, q0, damping: float = 0.1, max_iter: int = 500, tol: float = 1e-8,
           q_rest=None, posture_gain: float = 0.1):
    """Damped least-squares inverse kinematics; returns ``(q, converged)``.

    With ``q_rest`` the redundant joint motion is pulled towards that posture
    through the null-space projector, which leaves the position error untouched.
    """
    q = np.array(q0, dtype=float)
    lam2 = damping**2
    n = model.n_joints
    for _ in range(max_iter):
        err = target - arm_mod.forward_kinematics(model, q)
        if np.linalg.norm(err) < tol:
            return q, True
        J = arm_mod.ee_jacobian(model, q)
        q = q + J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(2), err)
        if q_rest is not None:
            null = np.eye(n) - np.linalg.pinv(J) @ J
            q = q + posture_gain * null @ (q_rest - q)
    ok = np.linalg.norm(target - arm_mod.forward_kinematics(model, q)) < tol
    return q, ok


def generate_grid_dataset(model: arm_mod.ArmModel, n_per_axis: int = 21, workspace: Workspace = Workspace(),
                          q_seed=None, q_rest=None):
    """Uniform end-effector grid solved to joint angles.

    Rows are visited in serpentine order so every IK solve is seeded from the
    neighbouring grid point. Redundancy is resolved towards ``q_rest`` (defaults
    to ``q_seed``). Targets the solver cannot reach are dropped.

    Returns ``(X_q, X_ee, report)``.
    """
    if n_per_axis < 2:
        raise ValueError("need at least two points per axis")
    xs = np.linspace(*workspace.x, n_per_axis)
    ys = np.linspace(*workspace.y, n_per_axis)
    q = np.zeros(model.n_joints) if q_seed is None else np.asarray(q_seed, dtype=float)
    q_rest = q.copy() if q_rest is None else np.asarray(q_rest, dtype=float)
    lo = np.array([lim[0] for lim in model.joint_limits])
    hi = np.array([lim[1] for lim in model.joint_limits])
    X_q, X_ee = [], []
    skipped = 0
    for r, y in enumerate(ys):
        row = xs if r % 2 == 0 else xs[::-1]
        for x in row:
            target = np.array([x, y])
            if np.linalg.norm(target) >= model.reach:
                skipped += 1
                continue
            sol, ok = ik_dls(model, target, q, q_rest=q_rest)
            if not ok or np.any(sol < lo) or np.any(sol > hi):
                skipped += 1
                continue
            q = sol
            X_q.append(sol)
            X_ee.append(arm_mod.forward_kinematics(model, sol))
    report = {"candidates": n_per_axis**2, "kept": len(X_q), "skipped": skipped}
    log.info("grid dataset: %(kept)d of %(candidates)d points kept", report)
    return np.array(X_q), np.array(X_ee), report


def train_test_split(n: int, train_fraction: float = 0.8, seed: int = 0):
    """Seeded permutation split; the hold-out set gets ``floor((1 - train_fraction) * n)`` points."""
    n_train = n - int(np.floor(round((1.0 - train_fraction) * n, 9)))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def evaluate_holdout(model: GpModel | None, X_q_test, X_ee_test):
    """Mean and per-point Euclidean errors; ``model=None`` scores the zero prior mean."""
    X_q_test = np.atleast_2d(X_q_test)
    X_ee_test = np.atleast_2d(X_ee_test)
    if len(X_q_test) == 0:
        raise ValueError("empty test set")
    if model is None:
        pred = np.zeros_like(X_ee_test)
    else:
        pred = kernel_matrix(X_q_test, model.X_q, model.theta, model.sigma_f2) @ model.alpha
    errors = np.linalg.norm(pred - X_ee_test, axis=1)
    return float(errors.mean()), errors


def save_dataset(path, X_q, X_ee, meta: dict | None = None):
    write_blob(path, {"kind": "dataset", **(meta or {})}, {"X_q": X_q, "X_ee": X_ee})


def load_dataset(path):
    meta, a = read_blob(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} does not hold a dataset")
    return a["X_q"], a["X_ee"], meta
