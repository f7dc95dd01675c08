"""Built-in numerical checks, runnable from the command line.

Reduced-size versions of the package's key invariants.  Each check
re-derives its expected answer independently (dense posterior algebra,
per-tone pipelines, hand-worked numbers, finite differences) instead of
comparing the code to itself, so an installed copy can vouch for its
own numerics without a test harness.  The pytest suite is larger and
stricter; this is the five-minute version.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .channel import ChannelRealization, build_channel, draw_paths, steering_vector
from .config import default_config, desk_config, spawn_rng
from .dictionaries import (
    FREQUENCY_DEPENDENT,
    FREQUENCY_INDEPENDENT,
    build_dictionaries,
    reconstruct_channel,
    sparsity_score,
)
from .evaluation import flops_per_iteration, reconstruction_flops, standard_operator
from .measurement import draw_combiner, operator_from_matrix, simulate_observation
from .mstep import _PARAM_NAMES, init_stage, stage_backward, stage_forward
from .sbl import SblState, amp_e_step, exact_e_step


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def _fresh_state(gamma: np.ndarray, m: int) -> SblState:
    g = gamma.shape[0]
    return SblState(iteration=0, mu=np.zeros(g, dtype=complex), tau_x=gamma.copy(),
                    gamma=gamma.copy(), s=np.zeros(m, dtype=complex))


# ---- checks -----------------------------------------------------------------


def check_exact_posterior() -> str:
    """Direct solve against the dense information-form posterior."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(4, 17))
        g = int(rng.integers(6, 25))
        phi = _crandn(rng, (m, g)) / math.sqrt(m)
        gamma = rng.uniform(0.05, 2.0, g)
        sigma2 = float(rng.uniform(0.05, 1.0))
        y = _crandn(rng, (m,))
        op = operator_from_matrix(phi)
        mu, tau = exact_e_step(op, y, sigma2, _fresh_state(gamma, m))
        cov = np.linalg.inv(phi.conj().T @ phi / sigma2 + np.diag(1.0 / gamma))
        mu_ref = cov @ (phi.conj().T @ y) / sigma2
        tau_ref = np.diag(cov).real
        worst = max(
            worst,
            float(np.linalg.norm(mu - mu_ref) / np.linalg.norm(mu_ref)),
            float(np.max(np.abs(tau - tau_ref)) / np.max(tau_ref)),
        )
    assert worst < 1e-10, f"worst relative error {worst:.2e}"
    return f"20 instances, worst relative error {worst:.1e}"


def check_amp_fixed_point() -> str:
    """Message passing on an unstructured operator reaches the posterior."""
    rng = np.random.default_rng(11)
    m, g, sigma2 = 64, 128, 0.1
    passed, errs = 0, []
    for _ in range(5):
        phi = _crandn(rng, (m, g))
        phi /= np.linalg.norm(phi, axis=0, keepdims=True)
        gamma = np.ones(g)
        x = _crandn(rng, (g,))
        y = phi @ x + math.sqrt(sigma2) * _crandn(rng, (m,))
        op = operator_from_matrix(phi)
        state = _fresh_state(gamma, m)
        for _ in range(60):
            state.mu, state.tau_x, state.s = amp_e_step(op, y, sigma2, state)
        mu_ref, _ = exact_e_step(op, y, sigma2, _fresh_state(gamma, m))
        err = float(np.linalg.norm(state.mu - mu_ref) / np.linalg.norm(mu_ref))
        errs.append(err)
        passed += err < 1e-2
    assert passed >= 4, f"{passed}/5 within 1e-2; errors {['%.1e' % e for e in errs]}"
    return f"{passed}/5 trials within 1e-2 of the direct posterior"


def check_hand_instance() -> str:
    """One message-passing update on a 2x3 instance worked by hand."""
    a = np.array([[1.0, 1.0, 0.0], [0.0, 1.0j, 2.0]], dtype=complex)
    r = np.array([1.0 + 1.0j, 2.0], dtype=complex)
    op = operator_from_matrix(a)
    state = SblState(iteration=0, mu=np.zeros(3, dtype=complex), tau_x=np.ones(3),
                     gamma=np.array([1.0, 2.0, 4.0]), s=np.zeros(2, dtype=complex))
    mu, tau, s = amp_e_step(op, r, 1.0, state)
    np.testing.assert_allclose(mu, [(1 + 1j) / 4, 2 / 15, 1 / 7], rtol=1e-14, atol=0)
    np.testing.assert_allclose(tau, [3 / 4, 2 / 5, 3 / 14], rtol=1e-14, atol=0)
    np.testing.assert_allclose(s, [(1 + 1j) / 3, 1 / 3], rtol=1e-14, atol=0)
    return "posterior mean, variances, and residual all match the worked values"


def check_operator_assembly() -> str:
    """Stacked sensing matrix against the per-tone combine pipeline."""
    cfg = desk_config()
    op = standard_operator(cfg)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(5):
        x = _crandn(rng, (cfg.grid_total,))
        h = reconstruct_channel(op.dicts, x)
        y_direct = (op.combiner.w_bar @ h).ravel(order="F")
        y_op = op.phi @ x
        worst = max(worst, float(np.linalg.norm(y_op - y_direct) / np.linalg.norm(y_direct)))
    assert worst < 1e-10, f"worst relative gap {worst:.2e}"
    return f"5 coefficient draws, worst relative gap {worst:.1e}"


def check_whitening() -> str:
    """Empirical covariance of whitened combined noise is sigma^2 I."""
    cfg = desk_config()
    comb = draw_combiner(cfg, spawn_rng(cfg.rng_seed, "pilot", cfg.n_uses))
    rng = np.random.default_rng(17)
    n_draws = 20000
    sigma = math.sqrt(cfg.noise_var / 2.0)
    noise = sigma * (rng.standard_normal((cfg.n_uses, cfg.n_antennas, n_draws))
                     + 1j * rng.standard_normal((cfg.n_uses, cfg.n_antennas, n_draws)))
    stacked = np.vstack([comb.block(q) @ noise[q] for q in range(cfg.n_uses)])
    from scipy.linalg import solve_triangular

    white = solve_triangular(comb.d, stacked, lower=True)
    cov = white @ white.conj().T / n_draws
    target = cfg.noise_var * np.eye(cov.shape[0])
    gap = float(np.max(np.abs(cov - target)) / cfg.noise_var)
    assert gap < 0.05, f"worst entrywise gap {gap:.3f} of sigma^2"
    return f"{n_draws} draws, worst entrywise gap {100 * gap:.1f}% of sigma^2"


def check_channel_normalization() -> str:
    """Mean squared channel norm per tone is one."""
    cfg = default_config()
    vals = []
    for i in range(1500):
        paths = draw_paths(cfg, spawn_rng(cfg.rng_seed, "eval-channel", 7777, i))
        h = build_channel(cfg, paths)
        vals.append(float(np.linalg.norm(h) ** 2) / cfg.n_subcarriers)
    mean = float(np.mean(vals))
    assert abs(mean - 1.0) < 0.05, f"mean |H|^2/K = {mean:.4f}"
    return f"1500 draws, mean |H|^2/K = {mean:.4f}"


def check_stage_gradients() -> str:
    """Convolutional refiner backward against central differences."""
    rng = np.random.default_rng(23)
    stage = init_stage(rng)
    feats = rng.standard_normal((2, 2, 8, 8))
    gimg = rng.uniform(0.1, 1.0, (2, 8, 8))
    target = rng.standard_normal((2, 8, 8))

    def loss() -> float:
        out, _ = stage_forward(stage, feats, gimg)
        return 0.5 * float(np.sum((out - target) ** 2))

    out, cache = stage_forward(stage, feats, gimg)
    _, _, grads = stage_backward(stage, cache, out - target)
    h = 1e-6
    worst = 0.0
    for _ in range(30):
        name = str(rng.choice(_PARAM_NAMES))
        arr = getattr(stage, name)
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        arr[idx] += h
        up = loss()
        arr[idx] -= 2 * h
        down = loss()
        arr[idx] += h
        fd = (up - down) / (2 * h)
        an = float(getattr(grads, name)[idx])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert worst < 1e-5, f"worst relative error {worst:.2e}"
    return f"30 parameter coordinates, worst relative error {worst:.1e}"


def check_recursion_gradients() -> str:
    """Hand-derived backward of the five-line update against differences."""
    from .training import _amp_backward, _amp_lines

    rng = np.random.default_rng(29)
    m, g, b, sigma2 = 6, 10, 2, 0.3
    phi = _crandn(rng, (m, g)) / math.sqrt(m)
    op = operator_from_matrix(phi)
    r = _crandn(rng, (m, b))
    mu = _crandn(rng, (g, b))
    tau = rng.uniform(0.2, 1.0, (g, b))
    s = _crandn(rng, (m, b))
    gamma = rng.uniform(0.2, 2.0, (g, b))
    gm = _crandn(rng, (g, b))
    gt = rng.standard_normal((g, b))
    gs = _crandn(rng, (m, b))

    def scalar(mu_, tau_, s_, gamma_) -> float:
        lines = _amp_lines(op, r, sigma2, mu_, tau_, s_, gamma_)
        return float(np.sum(np.real(np.conj(gm) * lines["mu1"]))
                     + np.sum(gt * lines["tau1"])
                     + np.sum(np.real(np.conj(gs) * lines["s1"])))

    cache = _amp_lines(op, r, sigma2, mu, tau, s, gamma)
    g_mu0, g_tau0, g_s0, g_gamma = _amp_backward(op, cache, gm, gt, gs, True)
    h = 1e-6
    worst = 0.0
    probes = (
        ("mu", mu, g_mu0, True), ("tau", tau, g_tau0, False),
        ("s", s, g_s0, True), ("gamma", gamma, g_gamma, False),
    )
    for _, arr, grad, is_complex in probes:
        for _ in range(4):
            if is_complex:
                d = _crandn(rng, arr.shape)
                an = float(np.sum(np.real(np.conj(grad) * d)))
            else:
                d = rng.standard_normal(arr.shape)
                an = float(np.sum(grad * d))
            args = {"mu": mu, "tau": tau, "s": s, "gamma": gamma}
            name = [n for n, a, _, _ in probes if a is arr][0]
            args[name] = arr + h * d
            up = scalar(args["mu"], args["tau"], args["s"], args["gamma"])
            args[name] = arr - h * d
            down = scalar(args["mu"], args["tau"], args["s"], args["gamma"])
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-9))
    assert worst < 1e-5, f"worst relative error {worst:.2e}"
    return f"16 directional probes, worst relative error {worst:.1e}"


def check_complexity_table() -> str:
    """Worked values of the symbolic complexity expressions."""
    cfg = default_config()
    assert flops_per_iteration("amp-sbl-unfolding", cfg) == 43_712_512
    assert flops_per_iteration("sbl", cfg) == 17_179_869_184
    assert flops_per_iteration("sbl-unfolding", cfg) - flops_per_iteration("sbl", cfg) == 1_769_472
    assert reconstruction_flops("AF", cfg) == 8 * 32 * 64 * 32
    assert reconstruction_flops("AD", cfg) - reconstruction_flops("AF", cfg) == 8 * 32 * 4096
    return "five worked values match"


def check_squint_dictionary() -> str:
    """Squint-matched angular grids concentrate clustered channels better."""
    cfg = default_config(n_subcarriers=16, grid_delay=32)
    d_fd = build_dictionaries(cfg, FREQUENCY_DEPENDENT)
    d_fi = build_dictionaries(cfg, FREQUENCY_INDEPENDENT)
    wins = 0
    for i in range(12):
        paths = draw_paths(cfg, spawn_rng(5, "channel", 8, i))
        h = build_channel(cfg, paths)
        wins += sparsity_score(d_fd, h) > sparsity_score(d_fi, h)
    assert wins >= 10, f"squint-matched grids won only {wins}/12 pairs"
    return f"squint-matched grids sparser in {wins}/12 paired channels"


CHECKS = (
    ("exact posterior solve", check_exact_posterior),
    ("message-passing fixed point", check_amp_fixed_point),
    ("five-line update, hand instance", check_hand_instance),
    ("operator assembly vs per-tone pipeline", check_operator_assembly),
    ("noise whitening", check_whitening),
    ("channel normalization", check_channel_normalization),
    ("refiner gradients", check_stage_gradients),
    ("recursion gradients", check_recursion_gradients),
    ("complexity table", check_complexity_table),
    ("squint dictionary advantage", check_squint_dictionary),
)


def run(verbose: bool = True) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            detail = fn()
        except Exception as exc:  # a failed check must not stop the rest
            failures += 1
            print(f"FAIL {name}: {exc}")
            continue
        if verbose:
            print(f"ok   {name}: {detail} ({time.time() - t0:.1f} s)")
    if failures:
        print(f"{failures} of {len(CHECKS)} checks failed")
    else:
        print(f"all {len(CHECKS)} checks passed")
    return failures
