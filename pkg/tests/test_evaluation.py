import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from squintsbl.config import default_config, desk_config, noise_var_from_snr_db
from squintsbl.evaluation import (
    NMSE_FLOOR_DB,
    FlopsDims,
    FlopsModel,
    SweepRow,
    SweepResult,
    TradeoffRow,
    average_nmse_db,
    classic_amp_iteration_flops,
    draw_eval_observations,
    flops_per_iteration,
    nmse,
    ratio_to_db,
    reconstruction_flops,
    run_sweep,
    run_tradeoff,
    score_algorithm,
    standard_operator,
    write_tradeoff_csv,
)
from squintsbl.measurement import Observation
from squintsbl.mstep import MStepNet

from conftest import crandn


# ---- error metric -----------------------------------------------------------

def test_nmse_basic(rng):
    h = crandn(rng, 4, 6)
    lin, db = nmse(h, h)
    assert lin == 0.0
    assert db == NMSE_FLOOR_DB  # floored instead of -inf
    lin2, db2 = nmse(h, np.zeros_like(h))
    assert lin2 == pytest.approx(1.0)
    assert db2 == pytest.approx(0.0)


def test_nmse_scaling(rng):
    h = crandn(rng, 3, 5)
    lin, db = nmse(h, 0.9 * h)
    assert lin == pytest.approx(0.01)
    assert db == pytest.approx(-20.0)


def test_nmse_rejects_bad_inputs(rng):
    h = crandn(rng, 3, 5)
    with pytest.raises(ValueError):
        nmse(h, crandn(rng, 5, 3))
    with pytest.raises(ValueError):
        nmse(np.zeros((3, 5), dtype=complex), h)


def test_average_is_mean_of_ratios_then_db():
    # averaging in dB would give -15; the contract averages linear ratios
    ratios = [1e-1, 1e-2]
    expect = 10 * math.log10(np.mean(ratios))
    assert average_nmse_db(ratios) == pytest.approx(expect)
    assert average_nmse_db(ratios) != pytest.approx(-15.0)
    assert math.isnan(average_nmse_db([]))
    assert average_nmse_db([0.0]) == NMSE_FLOOR_DB


def test_ratio_to_db_floor():
    assert ratio_to_db(1e-30) == NMSE_FLOOR_DB
    assert ratio_to_db(1.0) == pytest.approx(0.0)


# ---- per-iteration cost model -----------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(2, 64), st.integers(4, 4096),
       st.integers(2, 64), st.integers(2, 128))
def test_flops_expressions_symbolic(k, m, g, g_a, n):
    """The table rows, written out independently from the dims."""
    model = FlopsModel.default()
    dims = FlopsDims(k=k, m=m, g=g, g_a=g_a, n=n)
    km = k * m
    assert model.iteration_flops("sbl", dims) == 16 * km**2 * g
    assert model.iteration_flops("sbl-unfolding", dims) == (16 * km**2 + 432) * g
    assert model.iteration_flops("amp-sbl-unfolding", dims) == (20 * km + 432) * g
    assert model.iteration_flops("sbl-af", dims) == 16 * k * m**2 * g_a
    assert model.iteration_flops("lista-reference", dims) == 4 * k * ((4 * m + 256) * n + 32768)
    assert model.reconstruction_flops("AF", dims) == 8 * k * g_a * n
    assert model.reconstruction_flops("AD", dims) == 8 * k * g_a * n + 8 * k * g


def test_flops_unknown_names():
    model = FlopsModel.default()
    dims = FlopsDims(k=2, m=2, g=4, g_a=2, n=2)
    with pytest.raises(ValueError):
        model.iteration_flops("who", dims)
    with pytest.raises(ValueError):
        model.reconstruction_flops("XY", dims)


def test_flops_dims_from_config():
    cfg = default_config()
    d = FlopsDims.from_config(cfg)
    assert d.k == 32 and d.m == 16 and d.g == 4096 and d.g_a == 64 and d.n == 32


def test_flops_worked_values_default_config():
    cfg = default_config()
    assert flops_per_iteration("amp-sbl-unfolding", cfg) == 43_712_512
    assert flops_per_iteration("sbl", cfg) == 17_179_869_184
    assert flops_per_iteration("sbl-unfolding", cfg) - flops_per_iteration("sbl", cfg) == 1_769_472
    assert flops_per_iteration("sbl-af", cfg) == 8_388_608
    assert flops_per_iteration("lista-reference", cfg) == 5_505_024
    assert reconstruction_flops("af", cfg) == 524_288
    assert reconstruction_flops("ad", cfg) == 1_572_864


def test_classic_amp_iteration_flops():
    cfg = default_config()
    k, m, g = 32, 16, 4096
    assert classic_amp_iteration_flops(cfg) == 20 * k * m * g + 4 * g


# ---- paired evaluation ------------------------------------------------------

def test_standard_operator_deterministic(desk_cfg):
    a = standard_operator(desk_cfg)
    b = standard_operator(desk_cfg)
    assert np.array_equal(a.phi, b.phi)
    assert a.config == desk_cfg


def test_standard_operator_distinct_per_use_count(desk_cfg):
    a = standard_operator(desk_cfg)
    b = standard_operator(desk_cfg.replace(n_uses=1))
    assert a.phi.shape[0] == 2 * b.phi.shape[0]
    # combiner draw is keyed by the use count, not shared
    assert not np.array_equal(a.combiner.w[: b.combiner.w.shape[0]], b.combiner.w)


def test_draw_eval_observations_paired(desk_cfg, desk_op):
    a = draw_eval_observations(desk_op, 0, 3)
    b = draw_eval_observations(desk_op, 0, 3)
    c = draw_eval_observations(desk_op, 1, 3)
    assert len(a) == 3
    for x, y in zip(a, b):
        assert np.array_equal(x.y, y.y)
        assert np.array_equal(x.h, y.h)
    assert not np.array_equal(a[0].y, c[0].y)
    assert not np.array_equal(a[0].y, a[1].y)


def test_score_algorithm_finite(desk_cfg, desk_op):
    obs = draw_eval_observations(desk_op, 0, 4)
    db, fail = score_algorithm("sbl", desk_op, obs, 5)
    assert np.isfinite(db)
    assert fail == 0.0


def test_score_algorithm_worker_invariance(desk_cfg, desk_op):
    obs = draw_eval_observations(desk_op, 0, 6)
    a = score_algorithm("sbl", desk_op, obs, 4, n_workers=1)
    b = score_algorithm("sbl", desk_op, obs, 4, n_workers=3)
    assert a == b


def test_score_algorithm_counts_divergence(desk_cfg, desk_op):
    """Sample index 5 at this geometry diverges under the classic recursion."""
    obs = draw_eval_observations(desk_op, 0, 6)
    db, fail = score_algorithm("amp-sbl", desk_op, obs, 100)
    assert fail > 0.0
    # surviving samples still produce a finite average
    assert np.isfinite(db) or fail == 1.0


def test_phase_rotation_invariance(desk_cfg, desk_op):
    """Rotating truth and measurement together leaves the error ratio alone."""
    obs = draw_eval_observations(desk_op, 0, 1)[0]
    phase = np.exp(1j * 1.1)
    rotated = Observation(
        y=obs.y * phase,
        y_per_tone=obs.y_per_tone * phase,
        h=obs.h * phase,
        r=None if obs.r is None else obs.r * phase,
    )
    for algo in ("sbl", "amp-sbl"):
        a, _ = score_algorithm(algo, desk_op, [obs], 5)
        b, _ = score_algorithm(algo, desk_op, [rotated], 5)
        assert b == pytest.approx(a, abs=1e-9), algo


# ---- sweeps -----------------------------------------------------------------

def test_run_sweep_snr_axis(desk_cfg):
    res = run_sweep("snr", [0.0, 10.0], ["sbl"], desk_cfg, 3, n_iterations=4)
    assert res.axis == "snr"
    assert len(res.rows) == 2
    for row in res.rows:
        assert row.algo == "sbl"
        assert row.n_samples == 3
        assert 0.0 <= row.fail_rate <= 1.0
        assert row.flops_total > 0
    # worse SNR, worse NMSE
    by_val = {r.value: r.nmse_db for r in res.rows}
    assert by_val[0.0] > by_val[10.0]


def test_run_sweep_deterministic(desk_cfg):
    a = run_sweep("snr", [10.0], ["sbl", "amp-sbl"], desk_cfg, 2, n_iterations=3)
    b = run_sweep("snr", [10.0], ["sbl", "amp-sbl"], desk_cfg, 2, n_iterations=3)
    for ra, rb in zip(a.rows, b.rows):
        assert ra == rb


def test_run_sweep_q_axis_rebuilds_operator(desk_cfg):
    res = run_sweep("q", [1, 2], ["sbl"], desk_cfg, 2, n_iterations=3)
    flops = {r.value: r.flops_total for r in res.rows}
    # measurement count doubles with the use count, so cost rises
    assert flops[2] > flops[1]


def test_run_sweep_validation(desk_cfg):
    with pytest.raises(ValueError):
        run_sweep("bandwidth", [1.0], ["sbl"], desk_cfg, 2)
    with pytest.raises(ValueError):
        run_sweep("snr", [], ["sbl"], desk_cfg, 2)
    with pytest.raises(ValueError):
        run_sweep("snr", [10.0], ["nope"], desk_cfg, 2)
    with pytest.raises(ValueError):
        run_sweep("snr", [10.0], ["sbl"], desk_cfg, 0)
    with pytest.raises(ValueError):
        run_sweep("snr", [10.0], ["sbl-unfolding"], desk_cfg, 2)  # needs a net


def test_sweep_csv_schema(desk_cfg, tmp_path):
    res = run_sweep("snr", [5.0], ["sbl"], desk_cfg, 2, n_iterations=3)
    out = tmp_path / "sweep.csv"
    res.write_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert f"seed={desk_cfg.rng_seed}" in lines[0]
    assert lines[1] == "axis,value,algo,nmse_db,n_samples,flops_total,fail_rate"
    row = next(csv.DictReader(lines[1:]))
    assert row["axis"] == "snr"
    assert float(row["value"]) == 5.0
    assert int(row["n_samples"]) == 2
    float(row["nmse_db"])  # parses


def test_sweep_csv_nan_becomes_empty(desk_cfg, tmp_path):
    rows = [SweepRow(axis="snr", value=1.0, algo="amp-sbl", nmse_db=float("nan"),
                     n_samples=4, flops_total=10, fail_rate=1.0)]
    res = SweepResult(axis="snr", rows=rows, config=desk_cfg)
    out = tmp_path / "allfail.csv"
    res.write_csv(out)
    data = out.read_text().strip().splitlines()[2]
    assert ",," in data  # empty nmse field
    parsed = next(csv.DictReader(out.read_text().splitlines()[1:]))
    assert parsed["nmse_db"] == ""
    assert float(parsed["fail_rate"]) == 1.0


def test_snr_points_map_to_noise_var(desk_cfg):
    """Sweeping SNR moves only the noise level; combiner stays fixed."""
    res = run_sweep("snr", [0.0, 10.0], ["sbl"], desk_cfg, 2, n_iterations=2)
    assert noise_var_from_snr_db(0.0) == pytest.approx(1.0)
    # same channel truth at both points (paired across the axis by stream design)
    # verified indirectly: rows exist and differ only through noise
    assert len({r.value for r in res.rows}) == 2


# ---- iteration/flops tradeoff -----------------------------------------------

def test_run_tradeoff_rows(desk_cfg):
    rows = run_tradeoff(["sbl", "amp-sbl", "lista-reference"], desk_cfg, 2,
                        n_iterations=3)
    by_algo = {r.algo: r for r in rows}
    assert math.isnan(by_algo["lista-reference"].nmse_db)  # reference-only row
    assert by_algo["lista-reference"].iterations == 1
    assert np.isfinite(by_algo["sbl"].nmse_db)
    assert by_algo["sbl"].iterations == 3
    assert by_algo["sbl"].flops > by_algo["amp-sbl"].flops


def test_run_tradeoff_net_required(desk_cfg):
    with pytest.raises(ValueError):
        run_tradeoff(["sbl-unfolding"], desk_cfg, 2)


def test_tradeoff_learned_uses_net_stages(desk_cfg, desk_op):
    net = MStepNet.create(2, np.random.default_rng(0), "abs2",
                          desk_cfg.config_hash())
    rows = run_tradeoff(["amp-sbl-unfolding"], desk_cfg, 2, nets={"amp-sbl-unfolding": net})
    assert rows[0].iterations == 3  # stages + 1


def test_tradeoff_csv(desk_cfg, tmp_path):
    rows = [TradeoffRow(algo="sbl", flops=100, nmse_db=-3.0, iterations=5)]
    out = tmp_path / "t.csv"
    write_tradeoff_csv(rows, out, desk_cfg)
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "algo,flops,nmse_db,iterations"
    assert lines[2].startswith("sbl,100,")
