"""Shared active-inference math: beliefs, prediction errors, free energy, attractors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GeneralizedBelief:
    """Joint-space belief in generalized coordinates (position, velocity, acceleration)."""

    mu: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.mu1 = np.asarray(self.mu1, dtype=float)
        self.mu2 = np.asarray(self.mu2, dtype=float)
        if not (self.mu.shape == self.mu1.shape == self.mu2.shape):
            raise ValueError("belief orders must have equal lengths")

    @classmethod
    def at_rest(cls, q) -> "GeneralizedBelief":
        q = np.asarray(q, dtype=float)
        return cls(q.copy(), np.zeros_like(q), np.zeros_like(q))

    def copy(self) -> "GeneralizedBelief":
        return GeneralizedBelief(self.mu.copy(), self.mu1.copy(), self.mu2.copy())


@dataclass
class LatentBelief:
    z: np.ndarray

    def copy(self) -> "LatentBelief":
        return LatentBelief(self.z.copy())


@dataclass(frozen=True)
class PrecisionSet:
    """Diagonal variances, one scalar per modality plus a per-pixel visual variance.

    Defaults are the tuning values used on the real robot.
    """

    var_q: float = 3.0
    var_qdot: float = 3.0
    var_mu: float = 5.0
    var_mu1: float = 5.0
    var_f: float = 4.0
    var_ee: float = 6.0
    var_v: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("var_q", "var_qdot", "var_mu", "var_mu1", "var_f", "var_ee"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.var_v is not None and np.any(np.asarray(self.var_v) <= 0):
            raise ValueError("visual variances must be positive")

    def precision(self, name: str) -> float:
        return 1.0 / getattr(self, "var_" + name)


@dataclass
class Goal:
    q_d: np.ndarray
    ee_d: np.ndarray | None = None
    v_d: np.ndarray | None = None


@dataclass
class SPE:
    """Proprioceptive sensory and dynamics prediction errors."""

    yq: np.ndarray
    yqdot: np.ndarray
    mu: np.ndarray
    mu1: np.ndarray

    def is_zero(self) -> bool:
        return not any(np.any(v) for v in (self.yq, self.yqdot, self.mu, self.mu1))


def spe_proprio(belief: GeneralizedBelief, y_q, y_qdot, q_d) -> SPE:
    y_q, y_qdot, q_d = (np.asarray(v, dtype=float) for v in (y_q, y_qdot, q_d))
    if not (y_q.shape == y_qdot.shape == q_d.shape == belief.mu.shape):
        raise ValueError("observation, goal and belief dimensions differ")
    return SPE(
        yq=y_q - belief.mu,
        yqdot=y_qdot - belief.mu1,
        mu=belief.mu1 + belief.mu - q_d,
        mu1=belief.mu1 + belief.mu2,
    )


def vfe_laplace(terms) -> float:
    """Free energy under the Laplace approximation.

    ``terms`` is an iterable of ``(error, variance)`` pairs. ``variance`` is a
    positive scalar (shared by every entry of ``error``) or an array of the
    same shape. Each pair adds ``e^T S^-1 e + 1/2 ln|S|``.
    """
    total = 0.0
    for err, var in terms:
        err = np.asarray(err, dtype=float)
        var = np.broadcast_to(np.asarray(var, dtype=float), err.shape)
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        total += float(np.sum(err * err / var)) + 0.5 * float(np.sum(np.log(var)))
    return total


def proprio_vfe_terms(spe: SPE, prec: PrecisionSet):
    return [(spe.yq, prec.var_q), (spe.yqdot, prec.var_qdot), (spe.mu, prec.var_mu), (spe.mu1, prec.var_mu1)]


def attractor_f(g_value, jac_g, y_d) -> np.ndarray:
    """Drive ``J^T (y_d - g)`` that pulls the belief towards the desired observation.

    ``jac_g`` has shape (dim y, dim x).
    """
    g_value, y_d = np.asarray(g_value, dtype=float), np.asarray(y_d, dtype=float)
    jac_g = np.atleast_2d(np.asarray(jac_g, dtype=float))
    if jac_g.shape[0] != g_value.shape[0] or g_value.shape != y_d.shape:
        raise ValueError(f"shape mismatch: jac {jac_g.shape}, g {g_value.shape}, y_d {y_d.shape}")
    return jac_g.T @ (y_d - g_value)


def euler_update(x, x_dot, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.asarray(x, dtype=float) + dt * np.asarray(x_dot, dtype=float)
