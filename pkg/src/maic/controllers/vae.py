"""Latent-space active inference with the multimodal autoencoder, plus sensor-free imagination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import mvae as mvae_mod
from ..arm import SensorSnapshot
from ..free_energy import GeneralizedBelief, Goal, LatentBelief, PrecisionSet, euler_update, spe_proprio, vfe_laplace
from .aif import ControllerGains, ControllerState, _check_finite, proprio_action_rate, proprio_belief_rates


def visual_precision(prec: PrecisionSet, model: mvae_mod.MvaeModel) -> np.ndarray:
    """Per-pixel visual precision: from ``prec.var_v`` when set, else the model's mask."""
    if prec.var_v is not None:
        return 1.0 / np.broadcast_to(np.asarray(prec.var_v, dtype=float), (model.n_pixels,))
    return model.precision_mask


def initial_state(model: mvae_mod.MvaeModel, snap: SensorSnapshot | None, action0=None,
                  use_encoder: bool = True) -> ControllerState:
    """Latent from the encoder applied to the first snapshot, or the zero vector."""
    if use_encoder:
        if snap is None or snap.y_v is None:
            raise ValueError("encoder initialisation needs a snapshot with an image")
        z = mvae_mod.encode(model, snap.y_v, snap.y_q)
    else:
        z = np.zeros(model.latent_dim)
    mu = mvae_mod.decode_q(model, z)
    a0 = np.zeros_like(mu) if action0 is None else np.asarray(action0, dtype=float)
    return ControllerState(GeneralizedBelief.at_rest(mu), a0, LatentBelief(z))


def latent_rate(model: mvae_mod.MvaeModel, z, y_v, y_q, q_d, gains: ControllerGains, prec: PrecisionSet,
                v_d=None, k_z: float | None = None):
    """Latent drift and the pieces it is made of.

    Sensory terms pull the decoded observations towards the measured ones;
    the attractor pulls the decoded joints (and image, when ``v_d`` is given)
    towards the goal. Passing ``y_v=None``/``y_q=None`` drops that modality.
    """
    k_z = gains.k_mu if k_z is None else k_z
    scale = 1.0 + model.precision_mask
    p_f = prec.precision("f")
    g_q = mvae_mod.decode_q(model, z)
    g_v = scale * mvae_mod.decode_v(model, z)
    dz = np.zeros_like(z)
    e_v = e_q = None
    if y_v is not None:
        e_v = np.asarray(y_v, dtype=float).ravel() - g_v
        dz += gains.k_v * mvae_mod.jacobian_transpose_product(model, "v", z, scale * visual_precision(prec, model) * e_v)
    if y_q is not None:
        e_q = np.asarray(y_q) - g_q
        dz += gains.k_q * mvae_mod.jacobian_transpose_product(model, "q", z, prec.precision("q") * e_q)
    # goal residual taken as prediction minus goal so that the descent sign converges
    e_f = g_q - np.asarray(q_d)
    drive = mvae_mod.jacobian_transpose_product(model, "q", z, p_f * e_f)
    e_fv = None
    if v_d is not None:
        e_fv = g_v - np.asarray(v_d)
        drive = drive + mvae_mod.jacobian_transpose_product(model, "v", z, scale * p_f * e_fv)
    dz -= k_z * drive
    return dz, {"g_q": g_q, "g_v": g_v, "e_v": e_v, "e_q": e_q, "e_f": e_f, "e_fv": e_fv}


def maic_vae_tick(state: ControllerState, snap: SensorSnapshot, goal: Goal, gains: ControllerGains,
                  prec: PrecisionSet, model: mvae_mod.MvaeModel | None, torque_limits=None,
                  use_vision: bool = True):
    """One update of the latent controller.

    The belief position is the decoded latent; velocity and acceleration
    beliefs follow the proprioceptive laws and the torque is driven by the
    proprioceptive errors only. ``use_vision=False`` drops the image term
    (the ablated variant).
    """
    if state.latent is None:
        raise ValueError("latent controller state needs a latent belief")
    z = state.latent.z
    y_v = snap.y_v if use_vision else None
    if use_vision and y_v is None:
        raise ValueError("snapshot carries no image")
    # the attractor acts on the joints only: a binary 32x32 goal image cannot be
    # matched below a pixel, and pulling on it biased the steady state
    dz, parts = latent_rate(model, z, y_v, snap.y_q, goal.q_d, gains, prec)

    belief = GeneralizedBelief(parts["g_q"], state.belief.mu1, state.belief.mu2)
    spe = spe_proprio(belief, snap.y_q, snap.y_qdot, goal.q_d)
    _, d_mu1, d_mu2 = proprio_belief_rates(belief, spe, gains.k_mu, prec)
    a_dot = proprio_action_rate(spe, gains.k_a, prec)

    terms = [(spe.yq, prec.var_q), (spe.yqdot, prec.var_qdot), (parts["e_f"], prec.var_f), (spe.mu1, prec.var_mu1)]
    if parts["e_v"] is not None:
        pv = visual_precision(prec, model)
        keep = pv > 0
        terms.append((parts["e_v"][keep], 1.0 / pv[keep]))
    vfe = vfe_laplace(terms)

    z_new = euler_update(z, dz, gains.dt)
    mu1 = euler_update(belief.mu1, d_mu1, gains.dt)
    mu2 = euler_update(belief.mu2, d_mu2, gains.dt)
    action = euler_update(state.action, a_dot, gains.dt)
    if torque_limits is not None:
        lim = np.asarray(torque_limits)
        action = np.clip(action, -lim, lim)
    mu_new = mvae_mod.decode_q(model, z_new)
    _check_finite(z_new, mu_new, mu1, mu2, action)
    img_err = None
    if snap.y_v is not None:
        img_err = float(np.linalg.norm(parts["g_v"] - np.ravel(snap.y_v)))
    extra = {**state.extra, "image_error": img_err}
    new = ControllerState(GeneralizedBelief(mu_new, mu1, mu2), action, LatentBelief(z_new), spe, vfe, extra)
    return new, action.copy()


@dataclass
class Imagination:
    """Trajectories of a sensor-free run: decoded joints, decoded images and their goal errors per tick."""

    q: np.ndarray
    joint_error: np.ndarray
    image_error: np.ndarray
    goal_index: np.ndarray
    images: list


def mental_simulate(model: mvae_mod.MvaeModel, z0, goals, gains: ControllerGains, prec: PrecisionSet,
                    ticks: int, keep_images_every: int = 0, use_image_goal: bool = False) -> Imagination:
    """Run the attractor on the latent with no sensors in the loop.

    Each tick decodes the latent into imagined joints and an imagined image,
    takes the attractor step and records the mean absolute joint error and the
    Frobenius image error against the goal. ``ticks`` is per goal.
    """
    z = np.array(z0.z if isinstance(z0, LatentBelief) else z0, dtype=float)
    qs, je, ie, gi, images = [], [], [], [], []
    for i, goal in enumerate(goals):
        v_d = goal.v_d if use_image_goal else None
        for t in range(ticks):
            dz, parts = latent_rate(model, z, None, None, goal.q_d, gains, prec, v_d)
            qs.append(parts["g_q"])
            je.append(float(np.mean(np.abs(parts["e_f"]))))
            ie.append(float(np.linalg.norm(parts["g_v"] - goal.v_d)) if goal.v_d is not None else np.nan)
            gi.append(i)
            if keep_images_every and t % keep_images_every == 0:
                images.append(parts["g_v"])
            z = euler_update(z, dz, gains.dt)
            _check_finite(z)
    return Imagination(np.array(qs), np.array(je), np.array(ie), np.array(gi), images)


def latent_vfe(model: mvae_mod.MvaeModel, z, y_v, y_q, prec: PrecisionSet) -> float:
    """Free energy of the sensory terms seen by the latent (no attractor term)."""
    pv = visual_precision(prec, model)
    keep = pv > 0
    g_v = (1.0 + model.precision_mask) * mvae_mod.decode_v(model, z)
    e_v = np.asarray(y_v, dtype=float).ravel() - g_v
    e_q = np.asarray(y_q, dtype=float) - mvae_mod.decode_q(model, z)
    return vfe_laplace([(e_v[keep], 1.0 / pv[keep]), (e_q, prec.var_q)])
