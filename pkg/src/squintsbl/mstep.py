"""Learned convolutional variance update for unfolded estimators.

Each unfolded iteration owns a small residual refiner: the posterior
statistics are reshaped to a two-channel angular-delay image, passed
through conv(3x3, 2->8) + ReLU + conv(3x3, 8->1), and the result is
added to the previous variance image before a final ReLU:

    gamma_new = relu(gamma_prev + conv2(relu(conv1(features))))

Everything here is plain numpy with hand-derived backward passes, so
gradients are exact up to floating point and verifiable by finite
differences.  Convolutions use zero padding and keep the image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import SystemConfig
from .data_io import load_container, save_container

HIDDEN_CHANNELS = 8
KERNEL = 3
FEATURE_MODES = ("abs2", "abs")


# ---- image/vector layout ----------------------------------------------------

def vec_to_image(v: np.ndarray, ga: int, gd: int) -> np.ndarray:
    """Coefficient vectors (G,) or (G, B) to images (B, G_A, G_D).

    Vector entry m maps to pixel (m mod G_A, m div G_A), matching the
    column-stacked coefficient matrix.
    """
    if v.ndim == 1:
        v = v[:, None]
    return v.T.reshape(v.shape[1], gd, ga).swapaxes(1, 2)


def image_to_vec(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec_to_image`; returns (G, B)."""
    return img.swapaxes(1, 2).reshape(img.shape[0], -1).T


# ---- convolution with hand-written backward ---------------------------------

def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded same-size correlation; x (B,C,H,W), w (O,C,kh,kw)."""
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True) + b[None, :, None, None]


def conv2d_same_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Gradients of a same-size correlation: returns (g_x, g_w, g_b)."""
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    grad_w = np.einsum("bchwij,bohw->ocij", win, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gp = np.pad(grad_out, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
    grad_x = np.einsum("bohwij,ocij->bchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
    return grad_x, grad_w, grad_b


# ---- network container ------------------------------------------------------

_PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class ConvStage:
    """Weights of one iteration's refiner."""

    w1: np.ndarray  # (hidden, 2, 3, 3)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (1, hidden, 3, 3)
    b2: np.ndarray  # (1,)

    def copy(self) -> "ConvStage":
        return ConvStage(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class StageGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def init_stage(rng: np.random.Generator) -> ConvStage:
    """He-initialized filters, zero biases."""
    w1 = rng.standard_normal((HIDDEN_CHANNELS, 2, KERNEL, KERNEL)) * np.sqrt(2.0 / (2 * KERNEL * KERNEL))
    w2 = rng.standard_normal((1, HIDDEN_CHANNELS, KERNEL, KERNEL)) * np.sqrt(
        2.0 / (HIDDEN_CHANNELS * KERNEL * KERNEL)
    )
    return ConvStage(w1=w1, b1=np.zeros(HIDDEN_CHANNELS), w2=w2, b2=np.zeros(1))


class MStepNet:
    """Per-iteration refiner weights plus optimizer slots.

    A depth-L unfolded estimator holds L-1 stages: the variance update
    after the final iteration would never be consumed.
    """

    def __init__(self, stages: list[ConvStage], feature_mode: str = "abs2",
                 config_hash: str = "", meta: dict | None = None):
        if feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        self.stages = stages
        self.feature_mode = feature_mode
        self.config_hash = config_hash
        self.meta = meta if meta is not None else {}
        self.reset_optimizer()

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @classmethod
    def create(cls, n_stages: int, rng: np.random.Generator, feature_mode: str = "abs2",
               config_hash: str = "") -> "MStepNet":
        return cls([init_stage(rng) for _ in range(n_stages)], feature_mode, config_hash)

    def append_stage(self) -> None:
        """Grow by one iteration, seeding it with the last stage's weights."""
        if not self.stages:
            raise ValueError("cannot copy from an empty network")
        self.stages.append(self.stages[-1].copy())
        self.reset_optimizer()

    def reset_optimizer(self) -> None:
        self.adam_m = [{n: np.zeros_like(getattr(s, n)) for n in _PARAM_NAMES} for s in self.stages]
        self.adam_v = [{n: np.zeros_like(getattr(s, n)) for n in _PARAM_NAMES} for s in self.stages]

    def copy_weights(self) -> list[ConvStage]:
        return [s.copy() for s in self.stages]

    def set_weights(self, stages: list[ConvStage]) -> None:
        if len(stages) != len(self.stages):
            raise ValueError("stage count mismatch")
        self.stages = [s.copy() for s in stages]


def adam_update(net: MStepNet, grads: list[StageGrads], step: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam with bias correction; ``step`` starts at 1."""
    if len(grads) != net.n_stages:
        raise ValueError("need one gradient set per stage")
    for stage, g, m, v in zip(net.stages, grads, net.adam_m, net.adam_v):
        for name in _PARAM_NAMES:
            g_t = getattr(g, name)
            m[name] = beta1 * m[name] + (1.0 - beta1) * g_t
            v[name] = beta2 * v[name] + (1.0 - beta2) * g_t * g_t
            m_hat = m[name] / (1.0 - beta1**step)
            v_hat = v[name] / (1.0 - beta2**step)
            getattr(stage, name)[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---- features ---------------------------------------------------------------

def build_features(mu: np.ndarray, tau_x: np.ndarray, cfg: SystemConfig, mode: str = "abs2") -> np.ndarray:
    """Single-sample feature tensor (G_A, G_D, 2).

    Channel 0 is the posterior mean power (or magnitude under the
    "abs" variant); channel 1 is the posterior variance.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}")
    ga, gd = cfg.grid_angular, cfg.grid_delay
    m0 = np.abs(mu) ** 2 if mode == "abs2" else np.abs(mu)
    f0 = vec_to_image(m0, ga, gd)[0]
    f1 = vec_to_image(tau_x, ga, gd)[0]
    return np.stack([f0, f1], axis=-1)


def batch_features(mu: np.ndarray, tau_x: np.ndarray, ga: int, gd: int, mode: str = "abs2") -> np.ndarray:
    """Batched features (B, 2, G_A, G_D) from (G, B) statistics."""
    m0 = np.abs(mu) ** 2 if mode == "abs2" else np.abs(mu)
    return np.stack([vec_to_image(m0, ga, gd), vec_to_image(tau_x, ga, gd)], axis=1)


def batch_features_backward(g_feats: np.ndarray, mu: np.ndarray, mode: str = "abs2"):
    """Pull feature gradients back onto (mu, tau); returns (g_mu, g_tau).

    Complex gradients follow the d/dRe + j d/dIm convention.
    """
    g0 = image_to_vec(g_feats[:, 0])
    g_tau = image_to_vec(g_feats[:, 1])
    if mu.ndim == 1:
        g0 = g0[:, 0]
        g_tau = g_tau[:, 0]
    if mode == "abs2":
        g_mu = 2.0 * g0 * mu
    else:
        mag = np.abs(mu)
        g_mu = np.where(mag > 0, g0 * mu / np.where(mag > 0, mag, 1.0), 0.0 + 0.0j)
    return g_mu, g_tau


# ---- one refiner stage, forward and backward --------------------------------

def stage_forward(stage: ConvStage, feats: np.ndarray, gamma_img: np.ndarray):
    """Apply one stage to (B, 2, G_A, G_D) features and (B, G_A, G_D) gamma.

    Returns the new gamma image and the cache needed for backprop.
    """
    pre1 = conv2d_same(feats, stage.w1, stage.b1)
    h1 = np.maximum(pre1, 0.0)
    update = conv2d_same(h1, stage.w2, stage.b2)[:, 0]
    pre2 = gamma_img + update
    return np.maximum(pre2, 0.0), (feats, pre1, h1, pre2)


def stage_backward(stage: ConvStage, cache, g_gamma_new: np.ndarray):
    """Backprop one stage; returns (g_feats, g_gamma_prev, StageGrads)."""
    feats, pre1, h1, pre2 = cache
    g_pre2 = g_gamma_new * (pre2 > 0)
    g_h1, g_w2, g_b2 = conv2d_same_backward(h1, stage.w2, g_pre2[:, None])
    g_pre1 = g_h1 * (pre1 > 0)
    g_feats, g_w1, g_b1 = conv2d_same_backward(feats, stage.w1, g_pre1)
    return g_feats, g_pre2, StageGrads(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)


def mstep_forward(net: MStepNet, iteration: int, feats: np.ndarray, gamma_prev: np.ndarray) -> np.ndarray:
    """Single-sample variance update for 1-based ``iteration``.

    ``feats`` is (G_A, G_D, 2) from :func:`build_features`; returns the
    refined gamma as a flat (G,) vector.
    """
    if not 1 <= iteration <= net.n_stages:
        raise ValueError(f"iteration {iteration} outside 1..{net.n_stages}")
    ga, gd = feats.shape[0], feats.shape[1]
    x = feats.transpose(2, 0, 1)[None]
    gimg = vec_to_image(gamma_prev, ga, gd)
    gamma_new, _ = stage_forward(net.stages[iteration - 1], x, gimg)
    return image_to_vec(gamma_new)[:, 0]


def mstep_backward(net: MStepNet, iteration: int, feats: np.ndarray, gamma_prev: np.ndarray,
                   g_gamma_new: np.ndarray):
    """Single-sample backprop mirror of :func:`mstep_forward`.

    Returns (g_feats (G_A, G_D, 2), g_gamma_prev (G,), StageGrads).
    """
    ga, gd = feats.shape[0], feats.shape[1]
    x = feats.transpose(2, 0, 1)[None]
    gimg = vec_to_image(gamma_prev, ga, gd)
    stage = net.stages[iteration - 1]
    _, cache = stage_forward(stage, x, gimg)
    g_img = vec_to_image(g_gamma_new, ga, gd)
    g_feats, g_gprev, grads = stage_backward(stage, cache, g_img)
    return g_feats[0].transpose(1, 2, 0), image_to_vec(g_gprev)[:, 0], grads


# ---- persistence ------------------------------------------------------------

_NET_KIND = "mstep-net"


def save_checkpoint(net: MStepNet, path, cfg: SystemConfig | None = None) -> None:
    meta = {
        "n_stages": net.n_stages,
        "feature_mode": net.feature_mode,
        "config_hash": net.config_hash,
        "meta": net.meta,
    }
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    arrays = {}
    for i, stage in enumerate(net.stages):
        for name in _PARAM_NAMES:
            arrays[f"stage{i}/{name}"] = getattr(stage, name)
    save_container(path, _NET_KIND, meta, arrays)


def load_checkpoint(path, expect_config: SystemConfig | None = None) -> MStepNet:
    _, meta, arrays = load_container(path, expect_kind=_NET_KIND)
    if expect_config is not None and meta["config_hash"] and meta["config_hash"] != expect_config.config_hash():
        raise ValueError(
            f"checkpoint config hash {meta['config_hash']} does not match "
            f"{expect_config.config_hash()}"
        )
    stages = [
        ConvStage(*(arrays[f"stage{i}/{name}"] for name in _PARAM_NAMES))
        for i in range(meta["n_stages"])
    ]
    return MStepNet(stages, meta["feature_mode"], meta["config_hash"], meta.get("meta", {}))
