"""Clustered wideband channel simulation for a half-wavelength ULA.

The frequency-selective channel is a sum of N_c * N_p subpaths grouped
in clusters.  Each subpath has a complex gain, a delay, and an angle;
the array response at tone frequency f uses the squinted argument
(f / f_c) * sin(theta), so the spatial signature drifts across the
band instead of staying fixed at the carrier value.

Two independent constructions of the same channel are provided:
``build_channel`` assembles each subcarrier column directly, and
``channel_matrix_form`` assembles the full N x K matrix from an outer
product per path with an explicit squint phase correction.  They agree
to floating-point accuracy and cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SPLIT_IDS, SystemConfig, spawn_rng, subcarrier_freqs
from .data_io import load_container, save_container


def steering_vector(n: int, z) -> np.ndarray:
    """Array response [e^{-j pi m z} / n for m = 0..n-1].

    ``z`` may be a scalar (returns shape ``(n,)``) or a 1-D grid of
    arguments (returns shape ``(n, len(z))``).  The 1/n scaling gives
    each vector Euclidean norm 1/sqrt(n).
    """
    z = np.asarray(z, dtype=float)
    m = np.arange(n)
    if z.ndim == 0:
        return np.exp(-1j * np.pi * m * z) / n
    if z.ndim == 1:
        return np.exp(-1j * np.pi * np.outer(m, z)) / n
    raise ValueError(f"steering argument must be scalar or 1-D, got shape {z.shape}")


@dataclass
class PathSet:
    """All random parameters of one channel draw.

    Per-subpath arrays have length N_c * N_p with subpath p belonging to
    cluster p // N_p.  ``delay`` is clamped at zero; the raw Laplacian
    offsets are kept so the configured spreads remain observable.
    """

    gain: np.ndarray          # complex, standard circular Gaussian
    eq_gain: np.ndarray       # gain rotated by the first tone's delay phase
    delay: np.ndarray         # seconds, >= 0
    angle: np.ndarray         # radians
    mean_angle: np.ndarray    # per cluster
    mean_delay: np.ndarray    # per cluster
    delta_angle: np.ndarray   # per subpath, before adding the cluster mean
    delta_delay: np.ndarray   # per subpath, before clamping


def _laplace(rng: np.random.Generator, scale: float, size) -> np.ndarray:
    # scale 0 must degenerate to exactly zero offsets
    if scale == 0.0:
        return np.zeros(size)
    return rng.laplace(0.0, scale, size)


def draw_paths(cfg: SystemConfig, rng: np.random.Generator) -> PathSet:
    """Draw one clustered path set.

    Cluster means: angle uniform on [0, 2 pi), delay uniform on
    [0, max_mean_delay].  Subpath offsets are Laplacian with standard
    deviation angle_spread / delay_spread, i.e. scale sigma / sqrt(2).
    Negative delays are clamped to zero.
    """
    nc, npth = cfg.n_clusters, cfg.n_subpaths
    mean_angle = rng.uniform(0.0, 2.0 * np.pi, nc)
    mean_delay = rng.uniform(0.0, cfg.max_mean_delay, nc)
    delta_angle = _laplace(rng, cfg.angle_spread / np.sqrt(2.0), (nc, npth))
    delta_delay = _laplace(rng, cfg.delay_spread / np.sqrt(2.0), (nc, npth))
    angle = (mean_angle[:, None] + delta_angle).ravel()
    delay = np.maximum(mean_delay[:, None] + delta_delay, 0.0).ravel()
    p = cfg.n_paths
    gain = (rng.standard_normal(p) + 1j * rng.standard_normal(p)) / np.sqrt(2.0)
    f1 = subcarrier_freqs(cfg)[0]
    eq_gain = gain * np.exp(-2j * np.pi * f1 * delay)
    return PathSet(
        gain=gain,
        eq_gain=eq_gain,
        delay=delay,
        angle=angle,
        mean_angle=mean_angle,
        mean_delay=mean_delay,
        delta_angle=delta_angle.ravel(),
        delta_delay=delta_delay.ravel(),
    )


def build_channel(cfg: SystemConfig, paths: PathSet) -> np.ndarray:
    """Channel matrix H (N x K), one squinted array response per tone.

    Column k is sqrt(N / (N_c N_p)) * sum_p gain_p e^{-j 2 pi f_k tau_p}
    a_N((f_k / f_c) sin(theta_p)).  The sqrt(N) factor cancels the
    1/sqrt(N) steering norm so E ||H||_F^2 = K.
    """
    n = cfg.n_antennas
    f = subcarrier_freqs(cfg)                                    # (K,)
    sin_t = np.sin(paths.angle)                                  # (P,)
    coeff = paths.gain[:, None] * np.exp(-2j * np.pi * np.outer(paths.delay, f))  # (P, K)
    psi = np.outer(sin_t, f / cfg.center_freq)                   # (P, K)
    responses = np.exp(-1j * np.pi * np.arange(n)[:, None, None] * psi[None, :, :]) / n
    scale = np.sqrt(n / cfg.n_paths)
    return scale * np.einsum("pk,npk->nk", coeff, responses, optimize=True)


def channel_matrix_form(cfg: SystemConfig, paths: PathSet) -> np.ndarray:
    """Same channel as one outer product per path plus a squint phase mask.

    H = sqrt(N / (N_c N_p)) * sum_p eq_gain_p
        (a_N(sin theta_p) c_K(2 eta tau_p)^T) * squint(theta_p)

    where c_K(z)_m = e^{-j pi m z} is the plain delay phase ramp (no
    1/K scaling; the per-tone construction fixes the normalization) and
    squint(theta)_{n,k} = e^{-j pi n sin(theta) (k - (K-1)/2) eta / f_c}.
    """
    n, k = cfg.n_antennas, cfg.n_subcarriers
    eta = cfg.subcarrier_spacing
    sin_t = np.sin(paths.angle)
    ant = np.arange(n)[:, None]                                  # (N, 1)
    tone = np.arange(k)[None, :] - (k - 1) / 2                   # (1, K)
    h = np.zeros((n, k), dtype=complex)
    for p in range(cfg.n_paths):
        spatial = steering_vector(n, sin_t[p])                   # (N,)
        delay_ramp = np.exp(-1j * np.pi * np.arange(k) * 2.0 * eta * paths.delay[p])
        squint = np.exp(-1j * np.pi * ant * sin_t[p] * tone * eta / cfg.center_freq)
        h += paths.eq_gain[p] * np.outer(spatial, delay_ramp) * squint
    return np.sqrt(n / cfg.n_paths) * h


@dataclass
class ChannelRealization:
    paths: PathSet
    h: np.ndarray  # (N, K)


@dataclass
class Dataset:
    """A split of channel realizations plus the config that produced them."""

    split: str
    realizations: list[ChannelRealization]
    config: SystemConfig

    def __len__(self) -> int:
        return len(self.realizations)

    def channels(self) -> np.ndarray:
        """All H matrices stacked as (n_samples, N, K)."""
        return np.stack([r.h for r in self.realizations])


def generate_dataset(cfg: SystemConfig, n_samples: int, split: str = "train") -> Dataset:
    """Draw ``n_samples`` channels on the split's own seed substream.

    Each sample gets an independent child stream keyed by (split, index),
    so datasets are reproducible regardless of generation order and the
    three canonical splits never overlap.  Stored matrices are complex64,
    matching the on-disk payload exactly.
    """
    split_id = SPLIT_IDS.get(split)
    if split_id is None:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_IDS)}")
    realizations = []
    for i in range(n_samples):
        rng = spawn_rng(cfg.rng_seed, "channel", split_id, i)
        paths = draw_paths(cfg, rng)
        h = build_channel(cfg, paths).astype(np.complex64)
        realizations.append(ChannelRealization(paths=paths, h=h))
    return Dataset(split=split, realizations=realizations, config=cfg)


# ---- persistence ------------------------------------------------------------

_DATASET_KIND = "channel-dataset"


def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset container; H as complex64, path scalars full width."""
    meta = {
        "config": ds.config.to_dict(),
        "config_hash": ds.config.config_hash(),
        "split": ds.split,
        "n_samples": len(ds),
    }
    arrays = {
        "h": np.stack([r.h for r in ds.realizations]).astype(np.complex64),
        "gain": np.stack([r.paths.gain for r in ds.realizations]),
        "eq_gain": np.stack([r.paths.eq_gain for r in ds.realizations]),
        "delay": np.stack([r.paths.delay for r in ds.realizations]),
        "angle": np.stack([r.paths.angle for r in ds.realizations]),
        "mean_angle": np.stack([r.paths.mean_angle for r in ds.realizations]),
        "mean_delay": np.stack([r.paths.mean_delay for r in ds.realizations]),
        "delta_angle": np.stack([r.paths.delta_angle for r in ds.realizations]),
        "delta_delay": np.stack([r.paths.delta_delay for r in ds.realizations]),
    }
    save_container(path, _DATASET_KIND, meta, arrays)


def load_dataset(path, expect_config: SystemConfig | None = None) -> Dataset:
    """Read a dataset container; optionally insist on a matching config."""
    _, meta, arrays = load_container(path, expect_kind=_DATASET_KIND)
    cfg = SystemConfig.from_dict(meta["config"])
    if expect_config is not None and cfg != expect_config:
        raise ValueError(
            f"dataset config hash {cfg.config_hash()} does not match expected "
            f"{expect_config.config_hash()}"
        )
    realizations = []
    for i in range(meta["n_samples"]):
        paths = PathSet(
            gain=arrays["gain"][i],
            eq_gain=arrays["eq_gain"][i],
            delay=arrays["delay"][i],
            angle=arrays["angle"][i],
            mean_angle=arrays["mean_angle"][i],
            mean_delay=arrays["mean_delay"][i],
            delta_angle=arrays["delta_angle"][i],
            delta_delay=arrays["delta_delay"][i],
        )
        realizations.append(ChannelRealization(paths=paths, h=arrays["h"][i]))
    return Dataset(split=meta["split"], realizations=realizations, config=cfg)


def export_dataset_csv(ds: Dataset, path, max_samples: int | None = None) -> None:
    """Flat CSV of H entries (sample, row, tone, re, im) for eyeballing."""
    import csv

    n = len(ds) if max_samples is None else min(len(ds), max_samples)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={ds.config.config_hash()} seed={ds.config.rng_seed} split={ds.split}\n")
        writer = csv.writer(fh)
        writer.writerow(["sample", "antenna", "tone", "re", "im"])
        for i in range(n):
            h = ds.realizations[i].h
            for a in range(h.shape[0]):
                for k in range(h.shape[1]):
                    writer.writerow([i, a, k, repr(float(h[a, k].real)), repr(float(h[a, k].imag))])
