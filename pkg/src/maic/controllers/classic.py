"""Model-based baselines: joint impedance control and iLQR model predictive control."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .. import arm as arm_mod
from ..arm import ArmModel, ArmState

log = logging.getLogger(__name__)


# -- impedance control ----------------------------------------------------------

def critical_damping(model: ArmModel, q_ref, K) -> np.ndarray:
    """Per-joint ``D = 2 sqrt(K M_jj)`` from the mass-matrix diagonal at ``q_ref``."""
    M = arm_mod.mass_matrix(model, q_ref)
    return 2.0 * np.sqrt(np.asarray(K, dtype=float) * np.diag(M))


def impedance_torque(model: ArmModel, state: ArmState, q_goal, K, D) -> np.ndarray:
    """Joint torque ``K (q_goal - q) - D q' + C(q, q') q' + g(q)`` from the nominal model."""
    M, h, g = arm_mod.arm_terms(model, state.q, state.q_dot)
    return np.asarray(K) * (np.asarray(q_goal) - state.q) - np.asarray(D) * state.q_dot + h + g


def impedance_tick(model: ArmModel, state: ArmState, q_goal, K, D) -> np.ndarray:
    """Command for the torque interface (removes the interface's own gravity compensation)."""
    tau = impedance_torque(model, state, q_goal, K, D)
    return arm_mod.clamp_torque(model, arm_mod.interface_torque(model, state.q, tau))


# -- iLQR -----------------------------------------------------------------------

@dataclass
class ILQRResult:
    U: np.ndarray
    X: np.ndarray
    cost: float
    iterations: int
    converged: bool
    degraded: bool
    grad_norm: float


def _linearize(f, x, u, eps=1e-6):
    n, m = x.size, u.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    for i in range(n):
        d = np.zeros(n)
        d[i] = eps
        A[:, i] = (f(x + d, u) - f(x - d, u)) / (2 * eps)
    for j in range(m):
        d = np.zeros(m)
        d[j] = eps
        B[:, j] = (f(x, u + d) - f(x, u - d)) / (2 * eps)
    return A, B


def _rollout(f, x0, U):
    X = np.empty((len(U) + 1, x0.size))
    X[0] = x0
    for k, u in enumerate(U):
        X[k + 1] = f(X[k], u)
    return X


def ilqr(f, x0, U0, Q, R, x_goal, u_min=None, u_max=None, max_iters: int = 20, tol: float = 1e-6,
         reg: float = 1e-6) -> ILQRResult:
    """Minimise ``sum_k (x_k - x_goal)' Q (x_k - x_goal) + u_k' R u_k`` over ``N`` steps plus terminal state cost.

    ``f(x, u)`` is the discrete transition. Control bounds are enforced by
    clamping in the forward pass. ``grad_norm`` is the norm of the cost
    gradient with respect to the controls at the returned plan.
    """
    x0 = np.asarray(x0, dtype=float)
    U = np.array(U0, dtype=float)
    N, m = U.shape
    n = x0.size
    lo = -np.inf * np.ones(m) if u_min is None else np.asarray(u_min, dtype=float)
    hi = np.inf * np.ones(m) if u_max is None else np.asarray(u_max, dtype=float)
    U = np.clip(U, lo, hi)

    def total_cost(X, U):
        dX = X - x_goal
        return float(np.einsum("ki,ij,kj->", dX, Q, dX) + np.einsum("ki,ij,kj->", U, R, U))

    X = _rollout(f, x0, U)
    cost = total_cost(X, U)
    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        As, Bs = zip(*(_linearize(f, X[k], U[k]) for k in range(N)))
        Vx = 2 * Q @ (X[N] - x_goal)
        Vxx = 2 * Q
        ks = np.zeros((N, m))
        Ks = np.zeros((N, m, n))
        grad = np.zeros((N, m))
        lam_x = Vx.copy()
        for k in range(N - 1, -1, -1):
            A, B = As[k], Bs[k]
            Qx = 2 * Q @ (X[k] - x_goal) + A.T @ Vx
            Qu = 2 * R @ U[k] + B.T @ Vx
            Qxx = 2 * Q + A.T @ Vxx @ A
            Quu = 2 * R + B.T @ Vxx @ B + reg * np.eye(m)
            Qux = B.T @ Vxx @ A
            # adjoint gradient of the true cost w.r.t. u_k
            grad[k] = 2 * R @ U[k] + B.T @ lam_x
            lam_x = 2 * Q @ (X[k] - x_goal) + A.T @ lam_x
            if not (np.all(np.isfinite(Quu)) and np.all(np.isfinite(Qux))):
                raise FloatingPointError("non-finite linearisation in the iLQR backward pass")
            Quu_inv = np.linalg.pinv(0.5 * (Quu + Quu.T))
            ks[k] = -Quu_inv @ Qu
            Ks[k] = -Quu_inv @ Qux
            Vx = Qx + Ks[k].T @ Quu @ ks[k] + Ks[k].T @ Qu + Qux.T @ ks[k]
            Vxx = Qxx + Ks[k].T @ Quu @ Ks[k] + Ks[k].T @ Qux + Qux.T @ Ks[k]
            Vxx = 0.5 * (Vxx + Vxx.T)
        # projected gradient: components pushing into an active bound do not count
        free = ~(((U <= lo) & (grad > 0)) | ((U >= hi) & (grad < 0)))
        grad_norm = float(np.linalg.norm(grad * free))
        if grad_norm < tol:
            converged = True
            break
        improved = False
        for alpha in (1.0, 0.5, 0.25, 0.1, 0.03, 0.01):
            Xn = np.empty_like(X)
            Un = np.empty_like(U)
            Xn[0] = x0
            for k in range(N):
                Un[k] = np.clip(U[k] + alpha * ks[k] + Ks[k] @ (Xn[k] - X[k]), lo, hi)
                Xn[k + 1] = f(Xn[k], Un[k])
            c = total_cost(Xn, Un)
            if np.isfinite(c) and c < cost:
                improved = True
                break
        if not improved:
            break
        rel = (cost - c) / max(abs(cost), 1e-12)
        X, U, cost = Xn, Un, c
        if rel < tol:
            converged = True
            break
    degraded = not converged and it >= max_iters
    return ILQRResult(U, X, cost, it, converged, degraded, grad_norm)


# -- MPC ------------------------------------------------------------------------

@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    dt_mpc: float = 0.1
    w_goal: tuple[float, ...] = (400.0, 400.0, 400.0)
    w_tau: tuple[float, ...] = (1.75, 2.0, 2.5)
    max_iters: int = 10
    tol: float = 1e-4
    substeps: int = 10

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        if min(self.w_goal) <= 0 or min(self.w_tau) <= 0:
            raise ValueError("weights must be positive")

    # Settings of the 7-joint robot; the planar arm uses the first entries.
    PANDA_W_TAU = (1.75, 2.0, 2.5, 5.0, 20.0, 18.75, 62.5)
    PANDA_W_GOAL = 400.0


def mpc_model(model: ArmModel) -> ArmModel:
    """Internal model of the MPC: the nominal arm with gravity expressed explicitly (no external forces)."""
    return replace(model, gravity_compensated=False)


@njit(cache=True)
def _mpc_accel(lengths, masses, inertias, com, gvec, damp, q, qd, u, h):
    M, c, g = arm_mod._arm_terms_kernel(lengths, masses, inertias, com, gvec, q, qd)
    # damping taken linearly-implicit over the substep: stable for any h
    for i in range(q.size):
        M[i, i] += h * damp[i]
    return np.linalg.solve(M, u - c - g - damp * qd)


@njit(cache=True)
def _mpc_step(lengths, masses, inertias, com, gvec, damp, x, u, dt, substeps):
    n = x.size // 2
    q = x[:n].copy()
    qd = x[n:].copy()
    h = dt / substeps
    for _ in range(substeps):
        a1 = _mpc_accel(lengths, masses, inertias, com, gvec, damp, q, qd, u, 0.5 * h)
        qm = q + 0.5 * h * qd
        qdm = qd + 0.5 * h * a1
        a2 = _mpc_accel(lengths, masses, inertias, com, gvec, damp, qm, qdm, u, h)
        q = q + h * qdm
        qd = qd + h * a2
    out = np.empty(2 * n)
    out[:n] = q
    out[n:] = qd
    return out


def make_transition(model: ArmModel, dt: float, substeps: int = 10):
    """Midpoint (RK2) discretisation of the rigid-body dynamics over one MPC step.

    The step is split into ``substeps`` midpoint steps under a constant input.
    Joint damping is handled linearly-implicitly inside each stage because the
    light distal links make it the stiffest term.
    """
    p = arm_mod._params(model)
    if model.gravity_compensated:
        raise ValueError("the MPC transition expects explicit gravity")

    def f(x, u):
        return _mpc_step(p[0], p[1], p[2], p[3], p[4], p[5], np.asarray(x, dtype=float),
                         np.asarray(u, dtype=float), dt, substeps)

    return f


@dataclass
class MpcController:
    """Receding-horizon torque controller re-planned every ``dt_mpc`` with zero-order hold in between."""

    arm: ArmModel
    cfg: MpcConfig = field(default_factory=MpcConfig)
    plan: np.ndarray | None = None
    command: np.ndarray | None = None
    next_solve: float = 0.0
    degraded_count: int = 0
    last: ILQRResult | None = None

    def __post_init__(self):
        self._model = mpc_model(self.arm)
        self._f = make_transition(self._model, self.cfg.dt_mpc, self.cfg.substeps)
        n = self.arm.n_joints
        self._Q = np.zeros((2 * n, 2 * n))
        self._Q[:n, :n] = np.diag(self.cfg.w_goal[:n])
        self._R = np.diag(self.cfg.w_tau[:n])
        self._lim = np.asarray(self.arm.torque_limits)

    def solve(self, state: ArmState, q_goal) -> ILQRResult:
        n = self.arm.n_joints
        x0 = np.concatenate([state.q, state.q_dot])
        x_goal = np.concatenate([np.asarray(q_goal, dtype=float), np.zeros(n)])
        if self.plan is None:
            U0 = np.tile(arm_mod.gravity_torque(self._model, state.q), (self.cfg.horizon, 1))
        else:
            U0 = np.vstack([self.plan[1:], self.plan[-1:]])
        res = ilqr(self._f, x0, U0, self._Q, self._R, x_goal, -self._lim, self._lim,
                   self.cfg.max_iters, self.cfg.tol)
        if res.degraded:
            self.degraded_count += 1
        self.plan = res.U
        self.last = res
        return res

    def tick(self, state: ArmState, q_goal) -> np.ndarray:
        if self.command is None or state.t >= self.next_solve - 1e-9:
            res = self.solve(state, q_goal)
            tau = res.U[0]
            self.command = arm_mod.clamp_torque(self.arm, arm_mod.interface_torque(self.arm, state.q, tau))
            self.next_solve = state.t + self.cfg.dt_mpc
        return self.command.copy()


def mpc_tick(arm: ArmModel, state: ArmState, q_goal, cfg: MpcConfig, controller: MpcController | None = None):
    """One control tick; pass the returned controller back in to keep the warm start and hold."""
    controller = controller or MpcController(arm, cfg)
    return controller.tick(state, q_goal), controller
