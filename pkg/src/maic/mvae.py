"""Small multimodal autoencoder linking a shared latent to joint angles and camera images.

Three fully connected blocks share the latent ``z``::

    encoder    [y_v, y_q] -> tanh(H_e) -> z            (affine output)
    decoder_q  z -> tanh(H_q) -> joints               (affine output)
    decoder_v  z -> tanh(H_v) -> pixels               (logistic output)

Gradients are written out by hand for this fixed architecture. The training
loss weights the predicted image by ``1 + Pi`` where ``Pi`` is the per-pixel
precision mask, so the visual prediction used downstream is
``(1 + Pi) * decode_v(z)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import arm as arm_mod
from .fileformat import read_blob, write_blob

log = logging.getLogger(__name__)

PARAM_NAMES = ("We1", "be1", "We2", "be2", "Wq1", "bq1", "Wq2", "bq2", "Wv1", "bv1", "Wv2", "bv2")
VARIANCE_EPS = 1e-2
# lower bound on the per-pixel noise variance of the image prediction; on binary
# 32x32 images the training residuals stay below it, so the precision ends up flat
VISUAL_VARIANCE_FLOOR = 5.0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


@dataclass
class MvaeModel:
    params: dict
    precision_mask: np.ndarray
    meta: dict = field(default_factory=dict)
    # per-pixel noise level of the image decoder, set by fit_visual_variance
    visual_variance: np.ndarray | None = None

    def __post_init__(self):
        p = self.params
        missing = set(PARAM_NAMES) - set(p)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        n_in = p["We1"].shape[0]
        L = p["We2"].shape[1]
        ok = (p["We1"].shape[1] == p["We2"].shape[0] and p["Wq1"].shape[0] == L and p["Wv1"].shape[0] == L
              and p["Wq1"].shape[1] == p["Wq2"].shape[0] and p["Wv1"].shape[1] == p["Wv2"].shape[0]
              and n_in == p["Wv2"].shape[1] + p["Wq2"].shape[1]
              and self.precision_mask.shape == (p["Wv2"].shape[1],))
        if not ok:
            raise ValueError("inconsistent layer sizes")
        if np.any(self.precision_mask < 0):
            raise ValueError("precision mask must be nonnegative")
        if self.visual_variance is not None and (self.visual_variance.shape != self.precision_mask.shape
                                                 or np.any(self.visual_variance <= 0)):
            raise ValueError("visual variance must be positive with one entry per pixel")
        for k, v in p.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} is not finite")

    @property
    def latent_dim(self) -> int:
        return self.params["We2"].shape[1]

    @property
    def n_pixels(self) -> int:
        return self.params["Wv2"].shape[1]

    @property
    def n_joints(self) -> int:
        return self.params["Wq2"].shape[1]

    def copy(self) -> "MvaeModel":
        vv = None if self.visual_variance is None else self.visual_variance.copy()
        return MvaeModel({k: v.copy() for k, v in self.params.items()}, self.precision_mask.copy(), dict(self.meta), vv)

    def save(self, path) -> None:
        meta = {"kind": "mvae", "latent_dim": self.latent_dim, "n_pixels": self.n_pixels,
                "n_joints": self.n_joints, **self.meta}
        arrays = {**self.params, "precision_mask": self.precision_mask}
        if self.visual_variance is not None:
            arrays["visual_variance"] = self.visual_variance
        write_blob(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "MvaeModel":
        meta, arrays = read_blob(path)
        if meta.get("kind") != "mvae":
            raise ValueError(f"{path} does not hold an autoencoder")
        mask = arrays.pop("precision_mask")
        vv = arrays.pop("visual_variance", None)
        extra = {k: v for k, v in meta.items() if k not in ("kind", "latent_dim", "n_pixels", "n_joints")}
        return cls(arrays, mask, extra, vv)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 800
    batch_size: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    kl_weight: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def init_model(n_pixels: int, n_joints: int, latent_dim: int = 8, hidden_enc: int = 128, hidden_q: int = 64,
               hidden_v: int = 128, seed: int = 0, precision_mask=None) -> MvaeModel:
    """Random weights with variance ``1 / fan_in``; zero biases."""
    rng = np.random.default_rng(seed)
    shapes = {
        "We1": (n_pixels + n_joints, hidden_enc), "We2": (hidden_enc, latent_dim),
        "Wq1": (latent_dim, hidden_q), "Wq2": (hidden_q, n_joints),
        "Wv1": (latent_dim, hidden_v), "Wv2": (hidden_v, n_pixels),
    }
    params = {}
    for name, (fan_in, fan_out) in shapes.items():
        params[name] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params["b" + name[1:]] = np.zeros(fan_out)
    mask = np.zeros(n_pixels) if precision_mask is None else np.asarray(precision_mask, dtype=float)
    arch = {"hidden_enc": hidden_enc, "hidden_q": hidden_q, "hidden_v": hidden_v, "init_seed": seed}
    return MvaeModel(params, mask, {"architecture": arch})


# -- data -----------------------------------------------------------------------

def build_image_dataset(model: arm_mod.ArmModel, cam: arm_mod.CameraConfig, X_q, n_jitter: int = 4,
                        jitter_std: float = 0.05, seed: int = 0):
    """Render every configuration plus ``n_jitter`` perturbed copies of each.

    Returns ``(X_v, X_q)`` with flattened images; the originals come first.
    """
    X_q = np.atleast_2d(np.asarray(X_q, dtype=float))
    rng = np.random.default_rng(seed)
    blocks = [X_q] + [X_q + jitter_std * rng.standard_normal(X_q.shape) for _ in range(n_jitter)]
    Q = np.vstack(blocks)
    V = np.stack([arm_mod.render(model, q, cam).ravel() for q in Q])
    return V, Q


def precision_mask(X_v, eps: float = VARIANCE_EPS) -> np.ndarray:
    """Per-pixel ``1 / variance``; pixels whose variance is below ``eps`` get 0."""
    X_v = np.atleast_2d(np.asarray(X_v, dtype=float))
    if len(X_v) < 2:
        raise ValueError("need at least two images")
    var = X_v.var(axis=0)
    out = np.zeros_like(var)
    keep = var >= eps
    out[keep] = 1.0 / var[keep]
    return out


# -- forward passes -------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def encode(model: MvaeModel, y_v, y_q) -> np.ndarray:
    """Latent code of one pair (image may be 2-D) or of a batch of flattened pairs."""
    p = model.params
    Q = np.atleast_2d(y_q)
    x = np.concatenate([np.asarray(y_v, dtype=float).reshape(len(Q), -1), Q], axis=1)
    z = np.tanh(x @ p["We1"] + p["be1"]) @ p["We2"] + p["be2"]
    return z[0] if np.ndim(y_q) == 1 else z


def decode_q(model: MvaeModel, z) -> np.ndarray:
    p = model.params
    return np.tanh(np.asarray(z) @ p["Wq1"] + p["bq1"]) @ p["Wq2"] + p["bq2"]


def decode_v(model: MvaeModel, z) -> np.ndarray:
    p = model.params
    return _sigmoid(np.tanh(np.asarray(z) @ p["Wv1"] + p["bv1"]) @ p["Wv2"] + p["bv2"])


def predict_image(model: MvaeModel, z) -> np.ndarray:
    """Visual prediction in observation units: ``(1 + Pi) * decode_v(z)``."""
    return (1.0 + model.precision_mask) * decode_v(model, z)


def jacobian_transpose_product(model: MvaeModel, decoder: str, z, residual) -> np.ndarray:
    """``J^T r`` for one decoder at ``z`` by a reverse pass, without forming ``J``."""
    p = model.params
    z = np.asarray(z, dtype=float)
    r = np.asarray(residual, dtype=float)
    if decoder == "q":
        if r.shape != (model.n_joints,):
            raise ValueError("residual must have one entry per joint")
        h = np.tanh(z @ p["Wq1"] + p["bq1"])
        return p["Wq1"] @ ((1.0 - h * h) * (p["Wq2"] @ r))
    if decoder == "v":
        if r.shape != (model.n_pixels,):
            raise ValueError("residual must have one entry per pixel")
        h = np.tanh(z @ p["Wv1"] + p["bv1"])
        g = _sigmoid(h @ p["Wv2"] + p["bv2"])
        return p["Wv1"] @ ((1.0 - h * h) * (p["Wv2"] @ (r * g * (1.0 - g))))
    raise ValueError(f"unknown decoder {decoder!r}")


# -- loss and gradients ---------------------------------------------------------

def _forward(model: MvaeModel, y_v, y_q):
    p = model.params
    x = np.concatenate([y_v, y_q], axis=1)
    h1 = np.tanh(x @ p["We1"] + p["be1"])
    z = h1 @ p["We2"] + p["be2"]
    hq = np.tanh(z @ p["Wq1"] + p["bq1"])
    gq = hq @ p["Wq2"] + p["bq2"]
    hv = np.tanh(z @ p["Wv1"] + p["bv1"])
    gv = _sigmoid(hv @ p["Wv2"] + p["bv2"])
    return x, h1, z, hq, gq, hv, gv


def loss(model: MvaeModel, y_v, y_q, kl_weight: float = 0.0) -> float:
    """``MSE((1 + Pi) g_v, y_v) + MSE(g_q, y_q)`` on a batch (means over all entries)."""
    y_v, y_q = np.atleast_2d(y_v), np.atleast_2d(y_q)
    _, _, z, _, gq, _, gv = _forward(model, y_v, y_q)
    val = np.mean(((1.0 + model.precision_mask) * gv - y_v) ** 2) + np.mean((gq - y_q) ** 2)
    if kl_weight:
        val += kl_weight * 0.5 * np.mean(np.sum(z * z, axis=1))
    return float(val)


def loss_and_grad(model: MvaeModel, y_v, y_q, kl_weight: float = 0.0):
    """Loss and its gradient with respect to every parameter (same keys as ``params``).

    ``kl_weight`` adds the divergence of a unit-variance Gaussian posterior
    centred at ``z`` from the standard normal prior, i.e. ``0.5 |z|^2`` per sample.
    """
    y_v, y_q = np.atleast_2d(y_v), np.atleast_2d(y_q)
    p = model.params
    B = y_v.shape[0]
    scale = 1.0 + model.precision_mask
    x, h1, z, hq, gq, hv, gv = _forward(model, y_v, y_q)
    rv = scale * gv - y_v
    rq = gq - y_q
    val = float(np.mean(rv**2) + np.mean(rq**2))

    g = {}
    d_ov = (2.0 / rv.size) * rv * scale * gv * (1.0 - gv)
    g["Wv2"] = hv.T @ d_ov
    g["bv2"] = d_ov.sum(0)
    d_av = (d_ov @ p["Wv2"].T) * (1.0 - hv * hv)
    g["Wv1"] = z.T @ d_av
    g["bv1"] = d_av.sum(0)

    d_gq = (2.0 / rq.size) * rq
    g["Wq2"] = hq.T @ d_gq
    g["bq2"] = d_gq.sum(0)
    d_aq = (d_gq @ p["Wq2"].T) * (1.0 - hq * hq)
    g["Wq1"] = z.T @ d_aq
    g["bq1"] = d_aq.sum(0)

    d_z = d_av @ p["Wv1"].T + d_aq @ p["Wq1"].T
    if kl_weight:
        val += kl_weight * 0.5 * float(np.mean(np.sum(z * z, axis=1)))
        d_z = d_z + (kl_weight / B) * z
    g["We2"] = h1.T @ d_z
    g["be2"] = d_z.sum(0)
    d_a1 = (d_z @ p["We2"].T) * (1.0 - h1 * h1)
    g["We1"] = x.T @ d_a1
    g["be1"] = d_a1.sum(0)
    return val, g


def train(model: MvaeModel, X_v, X_q, cfg: TrainConfig = TrainConfig()):
    """Minibatch gradient descent with momentum; returns ``(trained copy, per-epoch mean loss)``.

    The precision mask of ``model`` is used as is. Shuffling is seeded from
    ``cfg.seed``, so equal inputs give bit-identical parameters.
    """
    X_v = np.atleast_2d(np.asarray(X_v, dtype=float))
    X_q = np.atleast_2d(np.asarray(X_q, dtype=float))
    n = len(X_v)
    if n == 0 or len(X_q) != n:
        raise ValueError("dataset must be nonempty and index-aligned")
    if cfg.batch_size > n:
        raise ValueError("batch_size exceeds the dataset size")
    model = model.copy()
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            val, grads = loss_and_grad(model, X_v[idx], X_q[idx], cfg.kl_weight)
            if not np.isfinite(val):
                raise TrainingDiverged(epoch)
            total += val * len(idx)
            for k, gk in grads.items():
                vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * gk
                model.params[k] += vel[k]
        history.append(total / n)
        if epoch % 20 == 0:
            log.debug("epoch %d loss %.6f", epoch, history[-1])
    model.meta = {**model.meta, "train": asdict(cfg)}
    return model, np.array(history)


def fit_visual_variance(model: MvaeModel, X_v, X_q, floor: float = VISUAL_VARIANCE_FLOOR) -> MvaeModel:
    """Copy of ``model`` carrying the per-pixel mean squared reconstruction residual.

    This is the maximum-likelihood noise variance of the image prediction
    ``(1 + Pi) * decode_v`` on the given pairs, floored at ``floor``.
    """
    X_v = np.atleast_2d(np.asarray(X_v, dtype=float))
    z = encode(model, X_v, np.atleast_2d(X_q))
    r = predict_image(model, z) - X_v
    out = model.copy()
    out.visual_variance = np.maximum(np.mean(r * r, axis=0), floor)
    return out


def moving_average(x, window: int = 20) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window
