import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from squintsbl.config import desk_config
from squintsbl.mstep import (
    MStepNet,
    adam_update,
    batch_features,
    batch_features_backward,
    build_features,
    conv2d_same,
    conv2d_same_backward,
    image_to_vec,
    init_stage,
    load_checkpoint,
    mstep_backward,
    mstep_forward,
    save_checkpoint,
    stage_backward,
    stage_forward,
    vec_to_image,
)

from conftest import crandn


# ---- layout -----------------------------------------------------------------

@given(st.integers(min_value=1, max_value=12), st.integers(min_value=1, max_value=12),
       st.integers(min_value=1, max_value=4))
def test_vec_image_roundtrip(ga, gd, b):
    v = np.arange(ga * gd * b, dtype=float).reshape(ga * gd, b)
    img = vec_to_image(v, ga, gd)
    assert img.shape == (b, ga, gd)
    assert np.array_equal(image_to_vec(img), v)


def test_vec_image_layout():
    """Vector index i maps to angular i % GA, delay i // GA."""
    ga, gd = 3, 4
    v = np.arange(ga * gd, dtype=float).reshape(-1, 1)
    img = vec_to_image(v, ga, gd)
    for i in range(ga * gd):
        assert img[0, i % ga, i // ga] == i


# ---- convolution ------------------------------------------------------------

def naive_conv2d_same(x, w, b):
    """Direct quadruple loop with zero padding; the reference for the fast path."""
    n, cin, hh, ww = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, cout, hh, ww))
    for s in range(n):
        for co in range(cout):
            for i in range(hh):
                for j in range(ww):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                ii, jj = i + di - ph, j + dj - pw
                                if 0 <= ii < hh and 0 <= jj < ww:
                                    acc += x[s, ci, ii, jj] * w[co, ci, di, dj]
                    out[s, co, i, j] = acc + b[co]
    return out


def test_conv2d_same_matches_naive(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    assert np.allclose(conv2d_same(x, w, b), naive_conv2d_same(x, w, b), atol=1e-12)


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0  # center tap passes the input through
    out = conv2d_same(x, w, np.zeros(1))
    assert np.allclose(out, x)


def test_conv2d_shift_kernel_interior(rng):
    """An off-center tap shifts the image; check away from the zero-padded rim."""
    x = rng.standard_normal((1, 1, 8, 8))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 1] = 1.0  # reads the row above
    out = conv2d_same(x, w, np.zeros(1))
    assert np.allclose(out[0, 0, 1:, :], x[0, 0, :-1, :])
    assert np.allclose(out[0, 0, 0, :], 0.0)


def test_conv2d_backward_finite_difference(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    g_out = rng.standard_normal((2, 3, 6, 6))
    g_x, g_w, g_b = conv2d_same_backward(x, w, g_out)
    h = 1e-6

    def loss(xx, ww, bb):
        return float(np.sum(conv2d_same(xx, ww, bb) * g_out))

    for arr, grad in ((x, g_x), (w, g_w), (b, g_b)):
        flat, gflat = arr.ravel(), np.asarray(grad).ravel()
        for t in range(0, flat.size, max(1, flat.size // 10)):
            orig = flat[t]
            flat[t] = orig + h
            up = loss(x, w, b)
            flat[t] = orig - h
            dn = loss(x, w, b)
            flat[t] = orig
            fd = (up - dn) / (2 * h)
            assert abs(fd - gflat[t]) < 1e-5 * max(1.0, abs(fd))


# ---- stages and network -----------------------------------------------------

def test_init_stage_shapes(rng):
    st0 = init_stage(rng)
    assert st0.w1.shape[1:] == (2, 3, 3)
    assert st0.w2.shape[:2] == (1, st0.w1.shape[0])
    assert np.all(st0.b1 == 0) and np.all(st0.b2 == 0)


def test_zero_weight_stage_is_identity(rng):
    """All-zero convs pass gamma through the residual connection untouched."""
    st0 = init_stage(rng)
    st0.w1[:] = 0; st0.b1[:] = 0; st0.w2[:] = 0; st0.b2[:] = 0
    feats = rng.standard_normal((2, 2, 5, 5))
    gamma = rng.uniform(0.1, 2.0, (2, 5, 5))
    out, _ = stage_forward(st0, feats, gamma)
    assert np.allclose(out, gamma)


def test_stage_forward_relu_clamps(rng):
    st0 = init_stage(rng)
    st0.w1[:] = 0; st0.w2[:] = 0
    st0.b2[:] = -5.0
    gamma = rng.uniform(0.1, 0.5, (1, 4, 4))
    out, _ = stage_forward(st0, np.zeros((1, 2, 4, 4)), gamma)
    assert np.all(out == 0.0)  # residual pushed negative, relu clamps


def test_stage_backward_finite_difference(rng):
    st0 = init_stage(rng)
    feats = rng.standard_normal((2, 2, 6, 6))
    gamma = rng.uniform(0.5, 1.5, (2, 6, 6))
    g_out = rng.standard_normal((2, 6, 6))
    out, cache = stage_forward(st0, feats, gamma)
    g_feats, g_gamma, grads = stage_backward(st0, cache, g_out)
    h = 1e-6

    def loss():
        return float(np.sum(stage_forward(st0, feats, gamma)[0] * g_out))

    for arr, grad in ((st0.w1, grads.w1), (st0.b1, grads.b1),
                      (st0.w2, grads.w2), (st0.b2, grads.b2),
                      (feats, g_feats), (gamma, g_gamma)):
        flat, gflat = arr.ravel(), np.asarray(grad).ravel()
        for t in range(0, flat.size, max(1, flat.size // 8)):
            orig = flat[t]
            flat[t] = orig + h
            up = loss()
            flat[t] = orig - h
            dn = loss()
            flat[t] = orig
            fd = (up - dn) / (2 * h)
            assert abs(fd - gflat[t]) < 1e-5 * max(1.0, abs(fd))


def test_network_create_and_append(rng):
    net = MStepNet.create(2, rng)
    assert net.n_stages == 2
    net.append_stage()
    assert net.n_stages == 3
    # new stage starts as a copy of the previous one, independently owned
    assert np.array_equal(net.stages[2].w1, net.stages[1].w1)
    net.stages[2].w1[0, 0, 0, 0] += 1.0
    assert not np.array_equal(net.stages[2].w1, net.stages[1].w1)


def test_network_copy_and_set_weights(rng):
    net = MStepNet.create(2, rng)
    w = net.copy_weights()
    net.stages[0].w1 += 1.0
    net.set_weights(w)
    other = MStepNet.create(3, rng)
    with pytest.raises(ValueError):
        net.set_weights(other.copy_weights())


def test_adam_first_step_closed_form(rng):
    """At t=1 with zero slots the update is -lr * g / (|g| + eps)."""
    net = MStepNet.create(1, rng)
    before = net.copy_weights()
    g = init_stage(rng)
    from squintsbl.mstep import StageGrads

    grads = [StageGrads(w1=g.w1.copy(), b1=np.ones_like(g.b1),
                        w2=g.w2.copy(), b2=np.ones_like(g.b2))]
    lr, eps = 1e-3, 1e-8
    adam_update(net, grads, 1, lr, eps=eps)
    for name, gval in (("w1", grads[0].w1), ("b1", grads[0].b1),
                       ("w2", grads[0].w2), ("b2", grads[0].b2)):
        old = getattr(before[0], name)
        new = getattr(net.stages[0], name)
        expect = old - lr * gval / (np.abs(gval) + eps)
        assert np.allclose(new, expect, atol=1e-12)


def test_adam_state_advances(rng):
    net = MStepNet.create(1, rng)
    g = init_stage(rng)
    from squintsbl.mstep import StageGrads

    grads = [StageGrads(w1=g.w1, b1=g.b1 + 1, w2=g.w2, b2=g.b2 + 1)]
    adam_update(net, grads, 1, 1e-3)
    w_after_1 = net.stages[0].w1.copy()
    adam_update(net, grads, 2, 1e-3)
    assert not np.array_equal(net.stages[0].w1, w_after_1)
    net.reset_optimizer()
    # slots cleared: the next step behaves like t=1 again
    net2 = MStepNet.create(1, np.random.default_rng(99))
    net2.set_weights(net.copy_weights())
    adam_update(net, grads, 1, 1e-3)
    adam_update(net2, grads, 1, 1e-3)
    assert np.allclose(net.stages[0].w1, net2.stages[0].w1)


# ---- features ---------------------------------------------------------------

def test_build_features_modes(rng):
    cfg = desk_config()
    mu = crandn(rng, cfg.grid_total)
    tau = rng.uniform(0, 1, cfg.grid_total)
    f2 = build_features(mu, tau, cfg, mode="abs2")
    f1 = build_features(mu, tau, cfg, mode="abs")
    ga, gd = cfg.grid_angular, cfg.grid_delay
    assert f2.shape == (ga, gd, 2)  # single-sample layout is channels-last
    assert np.allclose(f2[..., 0], vec_to_image(np.abs(mu) ** 2, ga, gd)[0])
    assert np.allclose(f1[..., 0], vec_to_image(np.abs(mu), ga, gd)[0])
    assert np.allclose(f2[..., 1], vec_to_image(tau, ga, gd)[0])
    with pytest.raises(ValueError):
        build_features(mu, tau, cfg, mode="cubed")


def test_batch_features_matches_single(rng):
    cfg = desk_config()
    ga, gd = cfg.grid_angular, cfg.grid_delay
    mu = crandn(rng, cfg.grid_total, 3)
    tau = rng.uniform(0, 1, (cfg.grid_total, 3))
    batch = batch_features(mu, tau, ga, gd)
    assert batch.shape == (3, 2, ga, gd)
    for i in range(3):
        single = build_features(mu[:, i], tau[:, i], cfg)
        assert np.allclose(batch[i], single.transpose(2, 0, 1))


def test_batch_features_backward_finite_difference(rng):
    ga = gd = 4
    g = ga * gd
    mu = crandn(rng, g, 2)
    tau = rng.uniform(0.1, 1.0, (g, 2))
    g_feats = np.random.default_rng(3).standard_normal((2, 2, ga, gd))
    g_mu, g_tau = batch_features_backward(g_feats, mu, mode="abs2")
    h = 1e-7

    def loss(m, t):
        return float(np.sum(batch_features(m, t, ga, gd) * g_feats))

    # Wirtinger convention: directional derivative along d is Re<g, d>
    r2 = np.random.default_rng(4)
    for _ in range(6):
        d_mu = r2.standard_normal(mu.shape) + 1j * r2.standard_normal(mu.shape)
        fd = (loss(mu + h * d_mu, tau) - loss(mu - h * d_mu, tau)) / (2 * h)
        an = float(np.sum(np.real(np.conj(g_mu) * d_mu)))
        assert abs(fd - an) < 1e-5 * max(1.0, abs(fd))
        d_tau = r2.standard_normal(tau.shape)
        fd_t = (loss(mu, tau + h * d_tau) - loss(mu, tau - h * d_tau)) / (2 * h)
        an_t = float(np.sum(g_tau * d_tau))
        assert abs(fd_t - an_t) < 1e-5 * max(1.0, abs(fd_t))


def test_mstep_forward_matches_stage(rng):
    cfg = desk_config()
    net = MStepNet.create(2, rng)
    mu = crandn(rng, cfg.grid_total)
    tau = rng.uniform(0, 1, cfg.grid_total)
    gamma = rng.uniform(0.1, 1.0, cfg.grid_total)
    feats = build_features(mu, tau, cfg)
    ga, gd = cfg.grid_angular, cfg.grid_delay
    for it in (1, 2):
        out = mstep_forward(net, it, feats, gamma)
        gimg = vec_to_image(gamma, ga, gd)
        ref, _ = stage_forward(net.stages[it - 1], feats.transpose(2, 0, 1)[None], gimg)
        assert np.allclose(out, image_to_vec(ref)[:, 0])
    with pytest.raises(ValueError):
        mstep_forward(net, 3, feats, gamma)


# ---- persistence ------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = desk_config()
    net = MStepNet.create(3, rng, feature_mode="abs", config_hash=cfg.config_hash())
    path = tmp_path / "net.npz"
    save_checkpoint(net, path, cfg)
    back = load_checkpoint(path, expect_config=cfg)
    assert back.n_stages == 3
    assert back.feature_mode == "abs"
    assert back.config_hash == cfg.config_hash()
    for a, b in zip(net.stages, back.stages):
        assert np.array_equal(a.w1, b.w1)
        assert np.array_equal(a.b1, b.b1)
        assert np.array_equal(a.w2, b.w2)
        assert np.array_equal(a.b2, b.b2)
    with pytest.raises(ValueError):
        load_checkpoint(path, expect_config=cfg.replace(rng_seed=1))
