import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from squintsbl.config import desk_config
from squintsbl.dictionaries import reconstruct_channel
from squintsbl.mstep import MStepNet
from squintsbl.sbl import (
    DivergenceError,
    EstimatorSpec,
    SblState,
    amp_e_step,
    classic_m_step,
    init_state,
    run_estimator,
    write_trace_csv,
)
from squintsbl.channel import ChannelRealization, build_channel, draw_paths
from squintsbl.config import spawn_rng
from squintsbl.measurement import observe_and_transform, operator_from_matrix

from conftest import crandn


def exact_posterior_oracle(phi, y, sigma2, gamma):
    """Information-form posterior, explicit inverse: the textbook formula."""
    g = phi.shape[1]
    sigma = np.linalg.inv(np.diag(1.0 / gamma) + phi.conj().T @ phi / sigma2)
    mu = sigma @ phi.conj().T @ y / sigma2
    return mu, np.real(np.diag(sigma))


def test_init_state(desk_cfg):
    st0 = init_state(desk_cfg)
    g = desk_cfg.grid_total
    assert st0.iteration == 0
    assert st0.mu.shape == (g,) and np.all(st0.mu == 0)
    assert np.all(st0.gamma == 1.0)
    assert np.array_equal(st0.tau_x, st0.gamma)
    assert np.all(st0.s == 0)


def test_exact_e_step_matches_dense_oracle(rng):
    from squintsbl.sbl import exact_e_step

    for _ in range(10):
        m = int(rng.integers(3, 20))
        g = int(rng.integers(m, 40))
        phi = crandn(rng, m, g) / np.sqrt(m)
        y = crandn(rng, m)
        gamma = np.exp(rng.uniform(-3, 2, g))
        sigma2 = float(np.exp(rng.uniform(-4, 0)))
        op = operator_from_matrix(phi)
        mu, tau = exact_e_step(op, y, sigma2, _state_with(gamma))
        mu0, tau0 = exact_posterior_oracle(phi, y, sigma2, gamma)
        denom = np.linalg.norm(np.concatenate([mu0, tau0]))
        err = np.linalg.norm(np.concatenate([mu - mu0, tau - tau0])) / denom
        assert err < 1e-10


def _state_with(gamma, m=None):
    g = gamma.shape[0]
    return SblState(
        iteration=0,
        mu=np.zeros(g, dtype=complex),
        tau_x=gamma.astype(float).copy(),
        gamma=gamma.astype(float).copy(),
        s=np.zeros(g if m is None else m, dtype=complex),
    )


def test_exact_e_step_prior_collapse(rng):
    """gamma -> 0 pins the posterior for that coefficient at zero."""
    from squintsbl.sbl import exact_e_step

    phi = crandn(rng, 8, 16) / np.sqrt(8)
    y = crandn(rng, 8)
    gamma = np.ones(16)
    gamma[3] = 1e-14
    op = operator_from_matrix(phi)
    mu, tau = exact_e_step(op, y, 0.1, _state_with(gamma))
    assert abs(mu[3]) < 1e-12
    assert tau[3] < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_exact_posterior_variance_bounded_by_prior(seed):
    """Conditioning never inflates the variance: 0 <= tau <= gamma."""
    from squintsbl.sbl import exact_e_step

    r = np.random.default_rng(seed)
    m, g = 6, 14
    phi = (r.standard_normal((m, g)) + 1j * r.standard_normal((m, g))) / np.sqrt(m)
    y = r.standard_normal(m) + 1j * r.standard_normal(m)
    gamma = np.exp(r.uniform(-2, 2, g))
    op = operator_from_matrix(phi)
    _, tau = exact_e_step(op, y, 0.3, _state_with(gamma))
    assert np.all(tau >= 0)
    assert np.all(tau <= gamma + 1e-12)


def test_amp_e_step_hand_instance():
    """Frozen 2x3 instance: all five update lines checked near machine epsilon."""
    a = np.array([[1.0, 1.0, 0.0], [0.0, 1.0j, 2.0]])
    r = np.array([1.0 + 1.0j, 2.0])
    gamma = np.array([1.0, 2.0, 4.0])
    op = operator_from_matrix(a)
    state = SblState(
        iteration=0,
        mu=np.zeros(3, dtype=complex),
        tau_x=np.ones(3),
        gamma=gamma.copy(),
        s=np.zeros(2, dtype=complex),
    )
    mu, tau, s = amp_e_step(op, r, 1.0, state)
    assert np.allclose(mu, [(1 + 1j) / 4, 2 / 15, 1 / 7], rtol=1e-14, atol=0)
    assert np.allclose(tau, [3 / 4, 2 / 5, 3 / 14], rtol=1e-14, atol=0)
    assert np.allclose(s, [(1 + 1j) / 3, 1 / 3], rtol=1e-14, atol=0)


def test_amp_e_step_nonfinite_guard(rng):
    """A zero dictionary column makes the variance line blow up: flagged."""
    phi = crandn(rng, 4, 6)
    phi[:, 2] = 0.0
    op = operator_from_matrix(phi)
    state = _state_with(np.ones(6), m=4)
    with pytest.raises(DivergenceError) as exc:
        amp_e_step(op, crandn(rng, 4), 0.1, state)
    assert exc.value.iteration == 1


def test_amp_e_step_magnitude_guard(rng):
    phi = crandn(rng, 4, 6) / 2
    op = operator_from_matrix(phi)
    state = _state_with(np.ones(6), m=4)
    state.mu[:] = 1e12  # absurd running estimate, tiny data
    r = crandn(rng, 4) * 1e-6
    with pytest.raises(DivergenceError):
        amp_e_step(op, r, 0.1, state)


def test_classic_m_step(rng):
    mu = crandn(rng, 9)
    tau = rng.uniform(0, 1, 9)
    g = classic_m_step(mu, tau)
    assert np.allclose(g, np.abs(mu) ** 2 + tau)
    assert np.all(g >= 0)


def test_estimator_spec_validation():
    EstimatorSpec()  # defaults fine
    with pytest.raises(ValueError):
        EstimatorSpec(e_step="magic")
    with pytest.raises(ValueError):
        EstimatorSpec(m_step="magic")
    with pytest.raises(ValueError):
        EstimatorSpec(n_iterations=-1)
    EstimatorSpec(n_iterations=0)  # zero is a legal no-op
    with pytest.raises(ValueError):
        EstimatorSpec(m_step="learned")  # needs a net
    net = MStepNet.create(2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        EstimatorSpec(m_step="learned", net=net, n_iterations=7)  # stage count mismatch
    EstimatorSpec(m_step="learned", net=net, n_iterations=3)


def _desk_obs(desk_cfg, desk_op, i=0):
    paths = draw_paths(desk_cfg, spawn_rng(desk_cfg.rng_seed, "channel", 0, i))
    chan = ChannelRealization(paths=paths, h=build_channel(desk_cfg, paths))
    return observe_and_transform(desk_op, chan, spawn_rng(desk_cfg.rng_seed, "noise", 0, i))


def test_run_estimator_exact_classic(desk_cfg, desk_op):
    obs = _desk_obs(desk_cfg, desk_op)
    spec = EstimatorSpec(e_step="exact", m_step="classic", n_iterations=5)
    x_hat, trace = run_estimator(spec, desk_op, obs.y, desk_cfg.noise_var, h_true=obs.h)
    assert x_hat.shape == (desk_cfg.grid_total,)
    assert len(trace) == 5
    assert [t["iteration"] for t in trace] == list(range(1, 6))
    for t in trace:
        assert np.isfinite(t["nmse_db"])
        assert t["gamma_l1"] > 0
    # estimate explains some of the measurement
    h_hat = reconstruct_channel(desk_op.dicts, x_hat)
    assert np.linalg.norm(h_hat - obs.h) < np.linalg.norm(obs.h)


def test_run_estimator_amp_runs(desk_cfg, desk_op):
    obs = _desk_obs(desk_cfg, desk_op, 1)
    spec = EstimatorSpec(e_step="amp", m_step="classic", n_iterations=3)
    x_hat, trace = run_estimator(spec, desk_op, obs.y, desk_cfg.noise_var)
    assert np.all(np.isfinite(x_hat))
    assert len(trace) == 3
    assert np.isnan(trace[0]["nmse_db"])  # no truth supplied


def test_run_estimator_deterministic(desk_cfg, desk_op):
    obs = _desk_obs(desk_cfg, desk_op, 2)
    spec = EstimatorSpec(e_step="exact", m_step="classic", n_iterations=4)
    a, _ = run_estimator(spec, desk_op, obs.y, desk_cfg.noise_var)
    b, _ = run_estimator(spec, desk_op, obs.y, desk_cfg.noise_var)
    assert np.array_equal(a, b)


def test_divergence_carries_partial_trace(desk_cfg, desk_op):
    """A known diverging draw: the exception reports where and keeps the trace."""
    obs = _desk_obs(desk_cfg, desk_op, 5)
    spec = EstimatorSpec(e_step="amp", m_step="classic", n_iterations=100)
    with pytest.raises(DivergenceError) as exc:
        run_estimator(spec, desk_op, obs.y, desk_cfg.noise_var)
    assert exc.value.iteration == 50
    assert len(exc.value.trace) == 49


def test_write_trace_csv(tmp_path, desk_cfg, desk_op):
    obs = _desk_obs(desk_cfg, desk_op, 3)
    spec = EstimatorSpec(e_step="exact", m_step="classic", n_iterations=3)
    _, trace = run_estimator(spec, desk_op, obs.y, desk_cfg.noise_var, h_true=obs.h)
    out = tmp_path / "trace.csv"
    write_trace_csv(trace, out, desk_cfg)
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("#") and "config_hash=" in lines[0]
    header = lines[1].split(",")
    assert "iteration" in header and "nmse_db" in header
    assert len(lines) == 2 + 3
