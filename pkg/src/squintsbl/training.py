"""Layer-wise training of the unfolded estimators.

The unfolded network alternates an E-step (posterior statistics given the
variance parameters) with a learned variance refiner.  Training grows the
depth one iteration at a time: the new stage starts as a copy of the last
one and the whole network is retrained after each append.  All gradients
are hand-derived; complex gradients follow the d/dRe + j d/dIm convention
used by the conv backward.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import Dataset, generate_dataset
from .config import SystemConfig, spawn_rng
from .dictionaries import DictionarySet, ridge_project
from .measurement import MeasurementOperator
from .mstep import (
    FEATURE_MODES,
    MStepNet,
    StageGrads,
    adam_update,
    batch_features,
    batch_features_backward,
    image_to_vec,
    stage_backward,
    stage_forward,
    vec_to_image,
)

logger = logging.getLogger(__name__)

E_STEPS = ("amp", "exact")
LOSS_DOMAINS = ("channel", "coeff")


class TrainingDivergence(RuntimeError):
    """Non-finite values during a training forward pass or loss."""


@dataclass
class TrainConfig:
    depth: int
    e_step: str = "amp"
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 10.0
    lr_patience: int = 4
    stop_patience: int = 10
    max_epochs: int = 200
    loss_domain: str = "channel"
    end_to_end: bool = True
    gamma_floor: float = 1e-12
    feature_mode: str = "abs2"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.e_step not in E_STEPS:
            raise ValueError(f"e_step must be one of {E_STEPS}")
        if self.loss_domain not in LOSS_DOMAINS:
            raise ValueError(f"loss_domain must be one of {LOSS_DOMAINS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("patiences must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")


@dataclass
class EpochRecord:
    depth: int
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    event: str = ""


@dataclass
class StageRecord:
    depth: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_val: float = np.inf
    best_epoch: int = 0


@dataclass
class TrainReport:
    stages: list[StageRecord] = field(default_factory=list)
    final_test_nmse_db: float = np.nan
    wall_time_s: float = 0.0


def write_report_csv(report: TrainReport, path, cfg: SystemConfig | None = None,
                     train_cfg: TrainConfig | None = None) -> None:
    with open(path, "w") as f:
        if cfg is not None:
            f.write(f"# config_hash={cfg.config_hash()} seed={cfg.rng_seed}\n")
        if train_cfg is not None:
            f.write(f"# e_step={train_cfg.e_step} depth={train_cfg.depth} "
                    f"loss={train_cfg.loss_domain}\n")
        f.write(f"# final_test_nmse_db={report.final_test_nmse_db:.6f}\n")
        f.write("depth,epoch,train_loss,val_loss,lr,event\n")
        for stage in report.stages:
            for r in stage.epochs:
                f.write(f"{r.depth},{r.epoch},{r.train_loss:.10e},"
                        f"{r.val_loss:.10e},{r.lr:.3e},{r.event}\n")


# ---- dataset plumbing -------------------------------------------------------

def generate_splits(cfg: SystemConfig, sizes: tuple[int, int, int] = (8000, 1000, 1000)):
    """Draw disjoint train/val/test channel sets (noise is drawn later)."""
    if any(s < 1 for s in sizes):
        raise ValueError("split sizes must be positive")
    return (
        generate_dataset(cfg, sizes[0], "train"),
        generate_dataset(cfg, sizes[1], "val"),
        generate_dataset(cfg, sizes[2], "test"),
    )


@dataclass
class _Split:
    """Precomputed per-split arrays: channels, clean measurements, labels."""

    h: np.ndarray            # (N, K, B) complex128
    hnorm2: np.ndarray       # (B,)
    y_clean: np.ndarray      # (M, B)
    noise: np.ndarray | None  # fixed noise for val/test, None for train
    x_label: np.ndarray | None = None  # (G, B), coeff-domain loss only


def _prepare_split(ds: Dataset, op: MeasurementOperator, fixed_noise: bool,
                   sigma2: float, want_labels: bool) -> _Split:
    cfg = ds.config
    h = np.stack([r.h.astype(np.complex128) for r in ds.realizations], axis=-1)
    hnorm2 = np.sum(np.abs(h) ** 2, axis=(0, 1))
    m = cfg.n_uses * cfg.n_rf
    yc = np.einsum("mn,nkb->mkb", op.combiner.w_bar, h, optimize=True)
    y_clean = yc.reshape(m * cfg.n_subcarriers, -1, order="F")
    noise = None
    if fixed_noise:
        # one draw per sample, reused every evaluation (paired comparisons)
        split_id = {"train": 0, "val": 1, "test": 2}[ds.split]
        cols = []
        for i in range(h.shape[-1]):
            rng = spawn_rng(cfg.rng_seed, "eval-noise", split_id, i)
            cols.append(_complex_noise(rng, y_clean.shape[0], sigma2))
        noise = np.stack(cols, axis=-1)
    x_label = None
    if want_labels:
        x_label = np.stack(
            [ridge_project(op.dicts, h[:, :, i]) for i in range(h.shape[-1])], axis=-1
        )
    return _Split(h=h, hnorm2=hnorm2, y_clean=y_clean, noise=noise, x_label=x_label)


def _complex_noise(rng: np.random.Generator, n: int, sigma2: float) -> np.ndarray:
    scale = np.sqrt(sigma2 / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


# ---- reconstruction, batched ------------------------------------------------

def reconstruct_batch(dicts: DictionarySet, x: np.ndarray) -> np.ndarray:
    """(G, B) coefficients -> (N, K, B) channels."""
    cfg = dicts.config
    ga, gd = cfg.grid_angular, cfg.grid_delay
    x_img = x.reshape(ga, gd, -1, order="F")
    t = np.einsum("adb,kd->kab", x_img, dicts.delay_dict, optimize=True)
    return np.einsum("kna,kab->nkb", dicts.angular_dicts, t, optimize=True)


def reconstruct_adjoint(dicts: DictionarySet, r: np.ndarray) -> np.ndarray:
    """Adjoint of reconstruct_batch: (N, K, B) -> (G, B)."""
    cfg = dicts.config
    ga, gd = cfg.grid_angular, cfg.grid_delay
    t = np.einsum("kna,nkb->kab", dicts.angular_dicts.conj(), r, optimize=True)
    g_img = np.einsum("kab,kd->adb", t, dicts.delay_dict.conj(), optimize=True)
    return g_img.reshape(ga * gd, -1, order="F")


def _loss_and_grad(x_hat: np.ndarray, split: _Split, idx: np.ndarray,
                   dicts: DictionarySet, domain: str):
    b = len(idx)
    if domain == "channel":
        h = split.h[:, :, idx]
        h_hat = reconstruct_batch(dicts, x_hat)
        resid = h_hat - h
        per = np.sum(np.abs(resid) ** 2, axis=(0, 1)) / split.hnorm2[idx]
        loss = float(np.mean(per))
        g_h = resid * (2.0 / (b * split.hnorm2[idx]))[None, None, :]
        return loss, reconstruct_adjoint(dicts, g_h)
    resid = x_hat - split.x_label[:, idx]
    loss = float(np.mean(np.sum(np.abs(resid) ** 2, axis=0)))
    return loss, resid * (2.0 / b)


# ---- unrolled forward/backward ----------------------------------------------

def _amp_lines(op: MeasurementOperator, r, sigma2, mu, tau_x, s, gamma):
    """The five AMP updates, returning every intermediate for backprop."""
    a = op.a
    tau_p = op.abs2_a @ tau_x
    p = a @ mu - tau_p * s
    tau_s = 1.0 / (tau_p + sigma2)
    s_new = tau_s * (r - p)
    tau_q = 1.0 / (op.abs2_a_t @ tau_s)
    v = a.conj().T @ s_new
    q = mu + tau_q * v
    c = 1.0 / (1.0 + tau_q * gamma)
    return {
        "mu0": mu, "tau0": tau_x, "s0": s, "gamma": gamma, "r": r, "p": p,
        "tau_p": tau_p, "tau_s": tau_s, "s1": s_new, "tau_q": tau_q,
        "v": v, "q": q, "c": c, "mu1": q * c, "tau1": tau_q * c,
    }


def _amp_backward(op: MeasurementOperator, cache, g_mu1, g_tau1, g_s1,
                  end_to_end: bool):
    """Gradients of one AMP E-step; returns (g_mu0, g_tau0, g_s0, g_gamma)."""
    tau_q, c, q, gamma = cache["tau_q"], cache["c"], cache["q"], cache["gamma"]
    c2 = c * c
    rmu = np.real(np.conj(g_mu1) * q)
    g_gamma = -tau_q * c2 * (rmu + tau_q * g_tau1)
    if not end_to_end:
        return None, None, None, g_gamma
    a = op.a
    g_q = g_mu1 * c
    g_tau_q = c2 * (g_tau1 - gamma * rmu) + np.real(np.conj(g_q) * cache["v"])
    g_mu0 = g_q.copy()
    g_s1_tot = g_s1 + a @ (g_q * tau_q)
    g_w = -g_tau_q * tau_q * tau_q
    g_tau_s = op.abs2_a @ g_w
    g_tau_s += np.real(np.conj(g_s1_tot) * (cache["r"] - cache["p"]))
    g_p = -cache["tau_s"] * g_s1_tot
    g_tau_p = -g_tau_s * cache["tau_s"] ** 2
    g_mu0 += a.conj().T @ g_p
    g_tau_p -= np.real(np.conj(g_p) * cache["s0"])
    g_s0 = -cache["tau_p"] * g_p
    g_tau0 = op.abs2_a_t @ g_tau_p
    return g_mu0, g_tau0, g_s0, g_gamma


def _whitened_solve(l_chol: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Stacked L^-1 Phi for (B, M, M) Cholesky factors."""
    b, m, _ = l_chol.shape
    return np.linalg.solve(l_chol, np.broadcast_to(phi, (b, m, phi.shape[1])))


def _exact_batch(op: MeasurementOperator, y, sigma2, gamma):
    """Batched posterior statistics; returns (mu, tau, cache)."""
    phi = op.phi
    m, g = phi.shape
    v = phi[None, :, :] * np.sqrt(gamma.T)[:, None, :]
    s_mat = v @ v.conj().transpose(0, 2, 1)
    s_mat[:, np.arange(m), np.arange(m)] += sigma2
    l_chol = np.linalg.cholesky(s_mat)
    t1 = np.linalg.solve(l_chol, y.T[:, :, None])
    z = np.linalg.solve(l_chol.conj().transpose(0, 2, 1), t1)[:, :, 0].T
    b_mat = _whitened_solve(l_chol, phi)
    d = np.sum(np.abs(b_mat) ** 2, axis=1).T
    u = phi.conj().T @ z
    mu = gamma * u
    tau = np.maximum(gamma * (1.0 - gamma * d), 0.0)
    return mu, tau, {"l_chol": l_chol, "u": u, "d": d, "gamma": gamma}


def _exact_backward(op: MeasurementOperator, cache, g_mu, g_tau,
                    end_to_end: bool) -> np.ndarray:
    """d loss / d gamma through one exact E-step."""
    u, d, gamma, l_chol = cache["u"], cache["d"], cache["gamma"], cache["l_chol"]
    g_gamma = np.real(np.conj(g_mu) * u) + g_tau * (1.0 - 2.0 * gamma * d)
    if not end_to_end:
        return g_gamma
    b_mat = _whitened_solve(l_chol, op.phi)
    a_vec = (gamma * g_mu).T[:, :, None]
    ta = (b_mat.conj().transpose(0, 2, 1) @ (b_mat @ a_vec))[:, :, 0].T
    g_gamma -= np.real(u * np.conj(ta))
    w = g_tau * gamma * gamma
    k_w = (b_mat * w.T[:, None, :]) @ b_mat.conj().transpose(0, 2, 1)
    g_gamma += np.real(np.sum(np.conj(b_mat) * (k_w @ b_mat), axis=1)).T
    return g_gamma


def unroll_forward(op: MeasurementOperator, obs: np.ndarray, sigma2: float,
                   net: MStepNet, depth: int, e_step: str,
                   gamma_floor: float = 0.0):
    """Run the depth-``depth`` unfolded estimator on a (·, B) batch.

    ``obs`` is the rotated observation r for the AMP E-step and the raw
    whitened observation y for the exact one.  Returns the final posterior
    mean (G, B) and the cache list consumed by :func:`unroll_backward`.
    """
    if net.n_stages < depth - 1:
        raise ValueError(f"net has {net.n_stages} stages; depth {depth} needs {depth - 1}")
    cfg = op.config
    ga, gd = cfg.grid_angular, cfg.grid_delay
    g, b = cfg.grid_total, obs.shape[1]
    mu = np.zeros((g, b), dtype=complex)
    tau_x = np.ones((g, b))
    s = np.zeros((obs.shape[0], b), dtype=complex)
    gamma = np.ones((g, b))
    caches = []
    for it in range(1, depth + 1):
        if e_step == "amp":
            ec = _amp_lines(op, obs, sigma2, mu, tau_x, s, gamma)
            mu, tau_x, s = ec["mu1"], ec["tau1"], ec["s1"]
        else:
            mu, tau_x, ec = _exact_batch(op, obs, sigma2, gamma)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(tau_x))):
            raise TrainingDivergence(f"non-finite posterior at iteration {it}")
        step_cache = {"e": ec, "it": it}
        if it < depth:
            feats = batch_features(mu, tau_x, ga, gd, net.feature_mode)
            gamma_img = vec_to_image(gamma, ga, gd)
            out_img, sc = stage_forward(net.stages[it - 1], feats, gamma_img)
            gamma_raw = image_to_vec(out_img)
            step_cache["mu"] = mu
            step_cache["stage"] = sc
            step_cache["gamma_raw"] = gamma_raw
            gamma = np.maximum(gamma_raw, gamma_floor)
        caches.append(step_cache)
    return mu, caches


def unroll_backward(op: MeasurementOperator, caches, g_x: np.ndarray,
                    net: MStepNet, gamma_floor: float = 0.0,
                    end_to_end: bool = True) -> list[StageGrads]:
    """Backprop the unrolled estimator; returns per-stage weight gradients."""
    cfg = op.config
    ga, gd = cfg.grid_angular, cfg.grid_delay
    depth = len(caches)
    g_mu = g_x
    g_tau = np.zeros_like(g_x, dtype=float)
    g_s = np.zeros(op.a.shape[:1] + g_x.shape[1:], dtype=complex)
    g_gamma = None
    grads: list[StageGrads | None] = [None] * (depth - 1)
    for it in range(depth, 0, -1):
        cache = caches[it - 1]
        if it < depth:
            mask = cache["gamma_raw"] > gamma_floor
            g_img = vec_to_image(g_gamma * mask, ga, gd)
            g_feats, g_prev_img, sg = stage_backward(net.stages[it - 1], cache["stage"], g_img)
            grads[it - 1] = sg
            gm, gt = batch_features_backward(g_feats, cache["mu"], net.feature_mode)
            g_mu = g_mu + gm
            g_tau = g_tau + gt
            g_gamma_res = image_to_vec(g_prev_img)
        else:
            g_gamma_res = 0.0
        ec = cache["e"]
        if "c" in ec:
            gm0, gt0, gs0, gg = _amp_backward(op, ec, g_mu, g_tau, g_s, end_to_end)
        else:
            gg = _exact_backward(op, ec, g_mu, g_tau, end_to_end)
            gm0 = gt0 = gs0 = None
        g_gamma = gg + g_gamma_res
        if end_to_end and gm0 is not None:
            g_mu, g_tau, g_s = gm0, gt0, gs0
        else:
            g_mu = np.zeros_like(g_mu)
            g_tau = np.zeros_like(g_tau)
            g_s = np.zeros_like(g_s)
    return grads


# ---- training loop ----------------------------------------------------------

def _batch_obs(op: MeasurementOperator, split: _Split, idx, sigma2, e_step,
               rng: np.random.Generator | None):
    y = split.y_clean[:, idx]
    if rng is not None:
        noise = _complex_noise(rng, y.size, sigma2).reshape(y.shape, order="F")
    else:
        noise = split.noise[:, idx]
    y = y + noise
    if e_step == "amp":
        return op.u.conj().T @ y
    return y


def validate(net: MStepNet, split: _Split, op: MeasurementOperator,
             sigma2: float, train_cfg: TrainConfig, depth: int) -> float:
    """Mean loss over a split with its fixed per-sample noise."""
    n = split.h.shape[-1]
    total = 0.0
    for lo in range(0, n, train_cfg.batch_size):
        idx = np.arange(lo, min(lo + train_cfg.batch_size, n))
        obs = _batch_obs(op, split, idx, sigma2, train_cfg.e_step, None)
        x_hat, _ = unroll_forward(op, obs, sigma2, net, depth,
                                  train_cfg.e_step, train_cfg.gamma_floor)
        loss, _ = _loss_and_grad(x_hat, split, idx, op.dicts, train_cfg.loss_domain)
        total += loss * len(idx)
    return total / n


def test_nmse_db(net: MStepNet, split: _Split, op: MeasurementOperator,
                 sigma2: float, train_cfg: TrainConfig, depth: int) -> float:
    """Channel-domain NMSE (dB, mean over ratios) with fixed test noise."""
    n = split.h.shape[-1]
    ratios = []
    for lo in range(0, n, train_cfg.batch_size):
        idx = np.arange(lo, min(lo + train_cfg.batch_size, n))
        obs = _batch_obs(op, split, idx, sigma2, train_cfg.e_step, None)
        x_hat, _ = unroll_forward(op, obs, sigma2, net, depth,
                                  train_cfg.e_step, train_cfg.gamma_floor)
        h_hat = reconstruct_batch(op.dicts, x_hat)
        err = np.sum(np.abs(h_hat - split.h[:, :, idx]) ** 2, axis=(0, 1))
        ratios.append(err / split.hnorm2[idx])
    return 10.0 * np.log10(np.mean(np.concatenate(ratios)))


def train_layerwise(train_cfg: TrainConfig, sys_cfg: SystemConfig,
                    op: MeasurementOperator, datasets,
                    initial_net: MStepNet | None = None) -> tuple[MStepNet, TrainReport]:
    """Grow the net from depth 2 to ``train_cfg.depth``, retraining each time.

    Passing ``initial_net`` resumes from a checkpoint: its stages are
    kept as-is and training continues from the next depth, so a resumed
    run only ever appends stages.
    """
    t0 = time.time()
    sigma2 = sys_cfg.noise_var
    want_labels = train_cfg.loss_domain == "coeff"
    train_ds, val_ds, test_ds = datasets
    train = _prepare_split(train_ds, op, False, sigma2, want_labels)
    val = _prepare_split(val_ds, op, True, sigma2, want_labels)
    test = _prepare_split(test_ds, op, True, sigma2, want_labels)

    if initial_net is None:
        net = MStepNet.create(1, spawn_rng(sys_cfg.rng_seed, "net-init", 0),
                              train_cfg.feature_mode, sys_cfg.config_hash())
        first_depth = 2
    else:
        net = initial_net
        if net.feature_mode != train_cfg.feature_mode:
            raise ValueError(
                f"checkpoint feature mode {net.feature_mode!r} does not match configured {train_cfg.feature_mode!r}"
            )
        first_depth = net.n_stages + 2
        if first_depth > train_cfg.depth:
            raise ValueError(
                f"checkpoint already serves depth {net.n_stages + 1}; target depth {train_cfg.depth} adds no stages"
            )
    report = TrainReport()
    n_train = train.h.shape[-1]
    for depth in range(first_depth, train_cfg.depth + 1):
        while net.n_stages < depth - 1:
            net.append_stage()
        net.reset_optimizer()
        record = StageRecord(depth=depth)
        lr = train_cfg.learning_rate
        best_weights = net.copy_weights()
        bad_lr = bad_stop = 0
        step = 0
        for epoch in range(1, train_cfg.max_epochs + 1):
            perm = spawn_rng(sys_cfg.rng_seed, "shuffle", depth, epoch).permutation(n_train)
            train_loss = 0.0
            for bi, lo in enumerate(range(0, n_train, train_cfg.batch_size)):
                idx = perm[lo:lo + train_cfg.batch_size]
                noise_rng = spawn_rng(sys_cfg.rng_seed, "noise", depth, epoch, bi)
                obs = _batch_obs(op, train, idx, sigma2, train_cfg.e_step, noise_rng)
                x_hat, caches = unroll_forward(op, obs, sigma2, net, depth,
                                               train_cfg.e_step, train_cfg.gamma_floor)
                loss, g_x = _loss_and_grad(x_hat, train, idx, op.dicts,
                                           train_cfg.loss_domain)
                if not np.isfinite(loss):
                    raise TrainingDivergence(
                        f"non-finite loss at depth {depth}, epoch {epoch}, batch {bi}")
                grads = unroll_backward(op, caches, g_x, net,
                                        train_cfg.gamma_floor, train_cfg.end_to_end)
                step += 1
                adam_update(net, grads, step, lr)
                train_loss += loss * len(idx)
            train_loss /= n_train
            val_loss = validate(net, val, op, sigma2, train_cfg, depth)
            event = ""
            if val_loss < record.best_val:
                record.best_val = val_loss
                record.best_epoch = epoch
                best_weights = net.copy_weights()
                bad_lr = bad_stop = 0
                event = "best"
            else:
                bad_lr += 1
                bad_stop += 1
                if bad_stop >= train_cfg.stop_patience:
                    event = "early-stop"
                elif bad_lr >= train_cfg.lr_patience:
                    lr /= train_cfg.lr_decay
                    bad_lr = 0
                    event = "lr-decay"
            record.epochs.append(EpochRecord(depth, epoch, train_loss, val_loss, lr, event))
            logger.info("depth %d epoch %d train %.4e val %.4e lr %.1e %s",
                        depth, epoch, train_loss, val_loss, lr, event)
            if event == "early-stop":
                break
        net.set_weights(best_weights)
        report.stages.append(record)
    report.final_test_nmse_db = test_nmse_db(net, test, op, sigma2, train_cfg,
                                             train_cfg.depth)
    report.wall_time_s = time.time() - t0
    return net, report
