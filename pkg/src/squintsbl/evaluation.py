"""Estimator scoring, complexity accounting, and sweep drivers.

NMSE always means the per-sample ratio ||H - H_hat||_F^2 / ||H||_F^2.
Harnesses average the linear ratios over samples first and convert to
dB last, so the reported number is the mean error energy fraction, and
a single lucky reconstruction cannot drag the average toward -inf.

Complexity numbers are symbolic real-FLOP expressions evaluated over
the configured dimensions.  Two reference-only rows are kept in the
table so tradeoff plots can place known baselines on the complexity
axis without those algorithms being implemented here.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .channel import ChannelRealization, build_channel, draw_paths
from .config import SystemConfig, noise_var_from_snr_db, spawn_rng
from .dictionaries import FREQUENCY_DEPENDENT, build_dictionaries, reconstruct_channel
from .measurement import (
    MeasurementOperator,
    Observation,
    assemble_operator,
    draw_combiner,
    observe_and_transform,
)
from .sbl import DivergenceError, EstimatorSpec, run_estimator

NMSE_FLOOR_DB = -120.0

SWEEP_AXES = ("snr", "q")

# Estimator variants the sweep harness can actually run, as
# (e_step, m_step) pairs understood by the solver module.
SWEEP_ALGOS: Mapping[str, tuple[str, str]] = {
    "sbl": ("exact", "classic"),
    "sbl-unfolding": ("exact", "learned"),
    "amp-sbl": ("amp", "classic"),
    "amp-sbl-unfolding": ("amp", "learned"),
}


# ---- scoring ----------------------------------------------------------------


def ratio_to_db(ratio: float) -> float:
    """dB value of a linear error ratio, floored to keep files finite."""
    if ratio <= 10.0 ** (NMSE_FLOOR_DB / 10.0):
        return NMSE_FLOOR_DB
    return 10.0 * math.log10(ratio)


def nmse(h_true: np.ndarray, h_hat: np.ndarray) -> tuple[float, float]:
    """Squared-error ratio of one estimate, as (linear, dB)."""
    h_true = np.asarray(h_true)
    h_hat = np.asarray(h_hat)
    if h_true.shape != h_hat.shape:
        raise ValueError(f"shape mismatch: truth {h_true.shape} vs estimate {h_hat.shape}")
    ref = float(np.linalg.norm(h_true) ** 2)
    if ref <= 0.0:
        raise ValueError("reference channel has zero norm; the ratio is undefined")
    ratio = float(np.linalg.norm(h_hat - h_true) ** 2) / ref
    return ratio, ratio_to_db(ratio)


def average_nmse_db(ratios) -> float:
    """Mean of linear per-sample ratios, then dB.

    The expectation sits outside the ratio, so averaging happens in the
    linear domain.  An empty collection (every sample failed) gives NaN.
    """
    arr = np.asarray(list(ratios), dtype=float)
    if arr.size == 0:
        return math.nan
    return ratio_to_db(float(arr.mean()))


# ---- complexity model -------------------------------------------------------


@dataclass(frozen=True)
class FlopsDims:
    """The five integers every complexity expression is written over."""

    k: int       # subcarriers
    m: int       # stacked measurements per tone, n_uses * n_rf
    g: int       # angular-delay grid size, grid_angular * grid_delay
    g_a: int     # angular grid size alone
    n: int       # antennas

    @classmethod
    def from_config(cls, cfg: SystemConfig) -> "FlopsDims":
        return cls(
            k=cfg.n_subcarriers,
            m=cfg.n_uses * cfg.n_rf,
            g=cfg.grid_total,
            g_a=cfg.grid_angular,
            n=cfg.n_antennas,
        )


# Real FLOPs for one estimator iteration.  The first three rows are the
# implemented angular-delay estimators; the last two are reference
# positions for the tradeoff plane (not implemented in this package).
PER_ITERATION_FLOPS: Mapping[str, Callable[[FlopsDims], int]] = {
    "sbl": lambda d: 16 * (d.k * d.m) ** 2 * d.g,
    "sbl-unfolding": lambda d: (16 * (d.k * d.m) ** 2 + 432) * d.g,
    "amp-sbl-unfolding": lambda d: (20 * d.k * d.m + 432) * d.g,
    "sbl-af": lambda d: 16 * d.k * d.m ** 2 * d.g_a,
    "lista-reference": lambda d: 4 * d.k * ((4 * d.m + 256) * d.n + 32768),
}

# Mapping the estimated sparse vector back to an antenna-frequency
# channel: per-tone angular synthesis for both families, plus the
# delay-grid mixing that only the angular-delay family performs.
RECONSTRUCTION_FLOPS: Mapping[str, Callable[[FlopsDims], int]] = {
    "AF": lambda d: 8 * d.k * d.g_a * d.n,
    "AD": lambda d: 8 * d.k * d.g_a * d.n + 8 * d.k * d.g,
}


@dataclass(frozen=True)
class FlopsModel:
    """Symbolic per-iteration and reconstruction costs, keyed by name."""

    per_iteration: Mapping[str, Callable[[FlopsDims], int]]
    reconstruction: Mapping[str, Callable[[FlopsDims], int]]

    def iteration_flops(self, algo: str, dims: FlopsDims) -> int:
        if algo not in self.per_iteration:
            raise ValueError(f"unknown algorithm {algo!r}; known: {sorted(self.per_iteration)}")
        return int(self.per_iteration[algo](dims))

    def reconstruction_flops(self, family: str, dims: FlopsDims) -> int:
        if family not in self.reconstruction:
            raise ValueError(f"unknown estimator family {family!r}; known: {sorted(self.reconstruction)}")
        return int(self.reconstruction[family](dims))


DEFAULT_FLOPS_MODEL = FlopsModel(PER_ITERATION_FLOPS, RECONSTRUCTION_FLOPS)


def flops_per_iteration(algo: str, cfg: SystemConfig) -> int:
    """Per-iteration real-FLOP count of ``algo`` at the configured sizes."""
    return DEFAULT_FLOPS_MODEL.iteration_flops(algo, FlopsDims.from_config(cfg))


def reconstruction_flops(family: str, cfg: SystemConfig) -> int:
    """Cost of mapping the sparse estimate back to the channel ("AF" or "AD")."""
    return DEFAULT_FLOPS_MODEL.reconstruction_flops(family.upper(), FlopsDims.from_config(cfg))


def classic_amp_iteration_flops(cfg: SystemConfig) -> int:
    """One message-passing iteration with the closed-form variance update.

    The five update lines cost 20 real FLOPs per measurement-grid
    product, and |mu|^2 + tau adds four per grid point.  This variant
    has no row in the reference table (it fails on the structured
    operator), but sweep outputs still need its cost.
    """
    d = FlopsDims.from_config(cfg)
    return 20 * d.k * d.m * d.g + 4 * d.g


def _total_flops(algo: str, cfg: SystemConfig, n_iterations: int) -> int:
    if algo == "amp-sbl":
        per = classic_amp_iteration_flops(cfg)
    else:
        per = flops_per_iteration(algo, cfg)
    return per * n_iterations + reconstruction_flops("AD", cfg)


# ---- sweep harness ----------------------------------------------------------


def standard_operator(cfg: SystemConfig, mode: str = FREQUENCY_DEPENDENT) -> MeasurementOperator:
    """Assemble the measurement operator the harnesses evaluate against.

    The combiner stream is keyed by the use count, so every Q gets its
    own combiner draw while a fixed Q stays reproducible across runs.
    """
    comb = draw_combiner(cfg, spawn_rng(cfg.rng_seed, "pilot", cfg.n_uses))
    dicts = build_dictionaries(cfg, mode=mode)
    return assemble_operator(cfg, comb, dicts)


def draw_eval_observations(
    op: MeasurementOperator, point_index: int, n_samples: int
) -> list[Observation]:
    """Fresh channels and noise for one sweep point.

    Streams are keyed by (point, sample), so every point sees new data
    but all algorithms at the point consume byte-identical observations.
    """
    cfg = op.config
    out = []
    for i in range(n_samples):
        paths = draw_paths(cfg, spawn_rng(cfg.rng_seed, "eval-channel", point_index, i))
        chan = ChannelRealization(paths=paths, h=build_channel(cfg, paths))
        out.append(observe_and_transform(op, chan, spawn_rng(cfg.rng_seed, "sweep-noise", point_index, i)))
    return out


def _point_config(cfg: SystemConfig, axis: str, value) -> SystemConfig:
    if axis == "snr":
        return cfg.replace(noise_var=noise_var_from_snr_db(float(value)))
    if axis == "q":
        return cfg.replace(n_uses=int(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _net_for(nets: Mapping, algo: str, value):
    if SWEEP_ALGOS[algo][1] != "learned":
        return None
    for key in ((algo, value), algo):
        try:
            if key in nets:
                return nets[key]
        except TypeError:  # unhashable composite key
            pass
    raise ValueError(f"no trained network supplied for {algo!r} at point {value!r}")


def _iteration_count(algo: str, cfg: SystemConfig, net, overrides) -> int:
    if net is not None:
        return net.n_stages + 1
    if isinstance(overrides, int):
        return overrides
    if overrides and algo in overrides:
        return int(overrides[algo])
    return cfg.n_iterations


def score_algorithm(
    algo: str,
    op: MeasurementOperator,
    observations: Sequence[Observation],
    n_iterations: int,
    net=None,
    n_workers: int = 1,
) -> tuple[float, float]:
    """(average NMSE in dB, failure rate) of one algorithm over shared data.

    A raised divergence or a non-finite result counts as a failure and
    is excluded from the average; with zero survivors the NMSE is NaN.
    Samples are independent, so ``n_workers`` threads may score them in
    parallel; the reduction is ordered, so results do not depend on the
    worker count.
    """
    e_step, m_step = SWEEP_ALGOS[algo]
    spec = EstimatorSpec(e_step=e_step, m_step=m_step, n_iterations=n_iterations, net=net)

    def one(obs: Observation):
        try:
            x_hat, _ = run_estimator(spec, op, obs.y, op.config.noise_var)
        except DivergenceError:
            return None
        ratio = nmse(obs.h, reconstruct_channel(op.dicts, x_hat))[0]
        return ratio if math.isfinite(ratio) else None

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=min(n_workers, len(observations))) as pool:
            results = list(pool.map(one, observations))
    else:
        results = [one(obs) for obs in observations]
    ratios = [r for r in results if r is not None]
    failures = sum(1 for r in results if r is None)
    return average_nmse_db(ratios), failures / len(observations)


@dataclass
class SweepRow:
    axis: str
    value: float
    algo: str
    nmse_db: float
    n_samples: int
    flops_total: int
    fail_rate: float


@dataclass
class SweepResult:
    """Per-point, per-algorithm scores along one axis."""

    axis: str
    rows: list[SweepRow]
    config: SystemConfig

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.config.config_hash()} seed={self.config.rng_seed}\n")
            writer = csv.writer(fh)
            writer.writerow(["axis", "value", "algo", "nmse_db", "n_samples", "flops_total", "fail_rate"])
            for row in self.rows:
                writer.writerow([
                    row.axis,
                    f"{row.value:g}",
                    row.algo,
                    "" if math.isnan(row.nmse_db) else f"{row.nmse_db:.4f}",
                    row.n_samples,
                    row.flops_total,
                    f"{row.fail_rate:.4f}",
                ])


def run_sweep(
    axis: str,
    points: Sequence,
    algos: Sequence[str],
    cfg: SystemConfig,
    n_samples: int,
    nets: Mapping | None = None,
    n_iterations=None,
    n_workers: int = 1,
    progress: Callable[[SweepRow], None] | None = None,
) -> SweepResult:
    """Score estimators along an SNR (dB) or pilot-use axis.

    Each point draws fresh channels and noise; all algorithms at the
    point are scored on the identical observation list, so differences
    between rows at one point are paired.  The operator is reassembled
    per point since the measurement matrix depends on the use count;
    moving only the noise level replays the same combiner draw.

    ``nets`` maps a learned algorithm name, or an ``(algo, value)``
    pair for per-point networks, to trained weights.  ``n_iterations``
    is an int for all classic algorithms or a per-algorithm mapping;
    learned depths always come from the network's stage count.
    """
    axis = axis.lower()
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    for algo in algos:
        if algo not in SWEEP_ALGOS:
            raise ValueError(f"cannot sweep {algo!r}; runnable: {sorted(SWEEP_ALGOS)}")
    nets = dict(nets or {})
    rows: list[SweepRow] = []
    for pi, value in enumerate(points):
        cfg_point = _point_config(cfg, axis, value)
        op = standard_operator(cfg_point)
        observations = draw_eval_observations(op, pi, n_samples)
        for algo in algos:
            net = _net_for(nets, algo, value)
            n_iter = _iteration_count(algo, cfg_point, net, n_iterations)
            nmse_db, fail_rate = score_algorithm(algo, op, observations, n_iter, net, n_workers)
            row = SweepRow(
                axis=axis,
                value=float(value),
                algo=algo,
                nmse_db=nmse_db,
                n_samples=n_samples,
                flops_total=_total_flops(algo, cfg_point, n_iter),
                fail_rate=fail_rate,
            )
            rows.append(row)
            if progress is not None:
                progress(row)
    return SweepResult(axis=axis, rows=rows, config=cfg)


# ---- complexity/performance tradeoff ----------------------------------------


@dataclass
class TradeoffRow:
    algo: str
    flops: int
    nmse_db: float
    iterations: int
    fail_rate: float = math.nan


def run_tradeoff(
    algos: Sequence[str],
    cfg: SystemConfig,
    n_samples: int,
    nets: Mapping | None = None,
    n_iterations=None,
    n_workers: int = 1,
) -> list[TradeoffRow]:
    """Total-cost versus accuracy points at the configured operating point.

    Runnable algorithms are scored over fresh shared samples.  A
    reference-only name from the complexity table yields its
    per-iteration cost with an empty NMSE, which is enough to place it
    on the complexity axis of a tradeoff plot.
    """
    nets = dict(nets or {})
    runnable = [a for a in algos if a in SWEEP_ALGOS]
    rows: list[TradeoffRow] = []
    observations: Sequence[Observation] = []
    if runnable:
        op = standard_operator(cfg)
        observations = draw_eval_observations(op, 0, n_samples)
    for algo in algos:
        if algo in SWEEP_ALGOS:
            net = _net_for(nets, algo, None)
            n_iter = _iteration_count(algo, cfg, net, n_iterations)
            nmse_db, fail_rate = score_algorithm(algo, op, observations, n_iter, net, n_workers)
            rows.append(TradeoffRow(algo, _total_flops(algo, cfg, n_iter), nmse_db, n_iter, fail_rate))
        elif algo in PER_ITERATION_FLOPS:
            rows.append(TradeoffRow(algo, flops_per_iteration(algo, cfg), math.nan, 1))
        else:
            raise ValueError(f"unknown algorithm {algo!r}")
    return rows


def write_tradeoff_csv(rows: Sequence[TradeoffRow], path, cfg: SystemConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()} seed={cfg.rng_seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["algo", "flops", "nmse_db", "iterations"])
        for row in rows:
            writer.writerow([
                row.algo,
                row.flops,
                "" if math.isnan(row.nmse_db) else f"{row.nmse_db:.4f}",
                row.iterations,
            ])
