"""Joint-space active-inference controllers: proprioceptive AIC and the GP-augmented MAIC.

Both update a generalized belief (mu, mu', mu'') by gradient descent on the
free energy and integrate the torque from precision-weighted sensory errors,
using only the sign (identity) of the observation/action relation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import gp as gp_mod
from ..arm import SensorSnapshot
from ..free_energy import (
    SPE,
    GeneralizedBelief,
    Goal,
    LatentBelief,
    PrecisionSet,
    euler_update,
    proprio_vfe_terms,
    spe_proprio,
    vfe_laplace,
)


class ControllerFault(RuntimeError):
    pass


@dataclass(frozen=True)
class ControllerGains:
    """Step sizes of the belief and action gradient flows, plus the integration step."""

    k_mu: float = 18.67
    k_q: float = 1.5
    k_v: float = 0.2
    k_ee: float = 1.4
    k_a: float = 9.0
    dt: float = 0.001

    def __post_init__(self):
        for name in ("k_mu", "k_q", "k_v", "k_ee", "k_a", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("k_mu", "k_q", "k_v", "k_ee", "k_a", "dt")}


@dataclass
class ControllerState:
    belief: GeneralizedBelief
    action: np.ndarray
    latent: LatentBelief | None = None
    spe: SPE | None = None
    vfe: float = float("nan")
    extra: dict = field(default_factory=dict)

    def copy(self) -> "ControllerState":
        return ControllerState(self.belief.copy(), self.action.copy(),
                               None if self.latent is None else self.latent.copy(),
                               self.spe, self.vfe, dict(self.extra))


def initial_state(q0, action0=None) -> ControllerState:
    q0 = np.asarray(q0, dtype=float)
    a0 = np.zeros_like(q0) if action0 is None else np.asarray(action0, dtype=float)
    return ControllerState(GeneralizedBelief.at_rest(q0), a0)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ControllerFault("non-finite value in the controller update")


def proprio_belief_rates(belief: GeneralizedBelief, spe: SPE, k: float, prec: PrecisionSet):
    """Generalized-coordinate belief derivatives from the proprioceptive errors alone."""
    p_q, p_qd, p_mu, p_mu1 = (prec.precision(n) for n in ("q", "qdot", "mu", "mu1"))
    d_mu = belief.mu1 + k * (p_q * spe.yq - p_mu * spe.mu)
    d_mu1 = belief.mu2 + k * (p_qd * spe.yqdot - p_mu * spe.mu - p_mu1 * spe.mu1)
    d_mu2 = -k * p_mu1 * spe.mu1
    return d_mu, d_mu1, d_mu2


def proprio_action_rate(spe: SPE, k_a: float, prec: PrecisionSet) -> np.ndarray:
    return -k_a * (prec.precision("q") * spe.yq + prec.precision("qdot") * spe.yqdot)


def _integrate(state: ControllerState, rates, a_dot, dt: float, torque_limits) -> ControllerState:
    d_mu, d_mu1, d_mu2 = rates
    b = state.belief
    new_belief = GeneralizedBelief(euler_update(b.mu, d_mu, dt), euler_update(b.mu1, d_mu1, dt),
                                   euler_update(b.mu2, d_mu2, dt))
    action = euler_update(state.action, a_dot, dt)
    if torque_limits is not None:
        lim = np.asarray(torque_limits)
        action = np.clip(action, -lim, lim)
    _check_finite(new_belief.mu, new_belief.mu1, new_belief.mu2, action)
    return ControllerState(new_belief, action, state.latent, state.spe, state.vfe, state.extra)


def aic_tick(state: ControllerState, snap: SensorSnapshot, goal: Goal, gains: ControllerGains,
             prec: PrecisionSet, torque_limits=None):
    """Proprioceptive controller: the multimodal law with the end-effector modality removed."""
    spe = spe_proprio(state.belief, snap.y_q, snap.y_qdot, goal.q_d)
    rates = proprio_belief_rates(state.belief, spe, gains.k_mu, prec)
    a_dot = proprio_action_rate(spe, gains.k_a, prec)
    state = ControllerState(state.belief, state.action, state.latent, spe,
                            vfe_laplace(proprio_vfe_terms(spe, prec)), state.extra)
    new = _integrate(state, rates, a_dot, gains.dt, torque_limits)
    return new, new.action.copy()


def maic_gp_tick(state: ControllerState, snap: SensorSnapshot, goal: Goal, gains: ControllerGains,
                 prec: PrecisionSet, gp: gp_mod.GpModel | None, torque_limits=None):
    """Proprioceptive plus end-effector controller with a GP generative model.

    ``gp=None`` ablates the end-effector modality, which is exactly :func:`aic_tick`.
    """
    if gp is None:
        return aic_tick(state, snap, goal, gains, prec, torque_limits)
    spe = spe_proprio(state.belief, snap.y_q, snap.y_qdot, goal.q_d)
    d_mu, d_mu1, d_mu2 = proprio_belief_rates(state.belief, spe, gains.k_mu, prec)
    a_dot = proprio_action_rate(spe, gains.k_a, prec)

    pred, J = gp_mod.predict_and_jacobian(gp, state.belief.mu)
    e_ee = np.asarray(snap.y_ee) - pred
    p_ee = prec.precision("ee")
    grad_ee = J.T @ (p_ee * e_ee)
    d_mu = d_mu + gains.k_ee * grad_ee
    a_dot = a_dot - gains.k_a * grad_ee

    vfe = vfe_laplace(proprio_vfe_terms(spe, prec) + [(e_ee, prec.var_ee)])
    state = ControllerState(state.belief, state.action, state.latent, spe, vfe,
                            {**state.extra, "ee_error": e_ee})
    new = _integrate(state, (d_mu, d_mu1, d_mu2), a_dot, gains.dt, torque_limits)
    return new, new.action.copy()


def perception_rates(belief: GeneralizedBelief, snap: SensorSnapshot, gains: ControllerGains, prec: PrecisionSet,
                     gp: gp_mod.GpModel | None = None, scale: float = 1.0):
    """Belief derivatives of the estimation law with the attractor switched off.

    Only the sensory terms and the generalized-motion coupling between orders
    remain; gains are multiplied by ``scale``. Used to study perception alone.
    """
    zero_goal = belief.mu + belief.mu1
    spe = spe_proprio(belief, snap.y_q, snap.y_qdot, zero_goal)  # makes the attractor error vanish
    k = scale * gains.k_mu
    d_mu, d_mu1, d_mu2 = proprio_belief_rates(belief, spe, k, prec)
    if gp is not None:
        pred, J = gp_mod.predict_and_jacobian(gp, belief.mu)
        d_mu = d_mu + scale * gains.k_ee * (J.T @ (prec.precision("ee") * (np.asarray(snap.y_ee) - pred)))
    return d_mu, d_mu1, d_mu2


def perception_vfe(belief: GeneralizedBelief, snap: SensorSnapshot, prec: PrecisionSet,
                   gp: gp_mod.GpModel | None = None) -> float:
    """Free energy of the sensory and higher-order terms (no attractor term)."""
    spe = spe_proprio(belief, snap.y_q, snap.y_qdot, belief.mu + belief.mu1)
    terms = [(spe.yq, prec.var_q), (spe.yqdot, prec.var_qdot), (spe.mu1, prec.var_mu1)]
    if gp is not None:
        terms.append((np.asarray(snap.y_ee) - gp_mod.predict(gp, belief.mu), prec.var_ee))
    return vfe_laplace(terms)
