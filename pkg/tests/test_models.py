"""Mixture targets, score identities, and the dense-net forward paths."""

import math

import numpy as np
import pytest

from specdiff.models import (
    GmmTarget,
    MlpNet,
    default_gmm,
    drafter_forward,
    eps_from_score,
    evaluate_target,
    evaluate_target_batch,
    frozen_drafter,
    gmm_log_density,
    gmm_sample,
    gmm_score,
    mlp_apply,
    mlp_forward,
    mlp_forward_batch,
    mlp_init,
    net_from_json,
    net_to_json,
    score_from_eps,
    time_embedding,
)
from specdiff.schedule import build_linear_schedule, reverse_mean
from specdiff.stats import RngKey, keyed_gaussian


def test_mixture_validation():
    with pytest.raises(ValueError):
        GmmTarget(np.array([0.6, 0.6]), np.array([[0.0], [1.0]]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        GmmTarget(np.array([1.0]), np.array([[0.0]]), np.array([0.0]))
    with pytest.raises(ValueError):
        GmmTarget(np.array([0.5, 0.5]), np.array([[0.0]]), np.array([1.0, 1.0]))


def test_default_mixture_shape():
    gm = default_gmm()
    assert gm.dim == 2 and gm.weights.shape == (2,)
    assert np.array_equal(gm.means[0], [2.0, 0.0])


def test_score_pointmass_pin():
    gm = GmmTarget(np.array([1.0]), np.array([[2.0]]), np.array([1e-12]))
    sched = build_linear_schedule(100)
    t = 40
    ab = sched.alpha_bar[t]
    x = np.array([0.7])
    want = -(x - math.sqrt(ab) * 2.0) / (ab * 1e-12 + 1.0 - ab)
    got = gmm_score(gm, x, t, sched)
    assert abs(got[0] - want[0]) < 1e-6 * abs(want[0])


def test_score_symmetry_at_origin():
    sched = build_linear_schedule(100)
    s = gmm_score(default_gmm(), np.zeros(2), 35, sched)
    assert np.allclose(s, 0.0, atol=1e-12)


def test_score_matches_log_density_gradient():
    sched = build_linear_schedule(50)
    h = 1e-6
    gm1 = GmmTarget(np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]), np.array([0.4, 0.1]))
    for t, x0 in ((1, 0.2), (25, -0.9), (50, 1.1)):
        x = np.array([x0])
        fd = (
            gmm_log_density(gm1, x + h, t, sched) - gmm_log_density(gm1, x - h, t, sched)
        ) / (2 * h)
        got = gmm_score(gm1, x, t, sched)[0]
        assert abs(got - fd) < 1e-6 * max(abs(fd), 1.0)
    gm2 = default_gmm()
    for seed in range(6):
        x = 2.5 * keyed_gaussian(RngKey(seed, 0, "data"), 2)
        t = 10 + 7 * seed
        got = gmm_score(gm2, x, t, sched)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (
                gmm_log_density(gm2, x + e, t, sched)
                - gmm_log_density(gm2, x - e, t, sched)
            ) / (2 * h)
            assert abs(got[j] - fd) < 1e-6 * max(abs(fd), 1.0)


def test_eps_score_round_trip():
    sched = build_linear_schedule(80)
    for t in (1, 33, 80):
        s = np.array([0.4, -1.2])
        back = score_from_eps(eps_from_score(s, t, sched), t, sched)
        assert np.allclose(back, s, atol=1e-12)
        assert np.array_equal(eps_from_score(np.zeros(2), t, sched), np.zeros(2))
    gm = GmmTarget(np.array([1.0]), np.array([[1.0, -1.0]]), np.array([1e-12]))
    t, x = 20, np.array([0.3, 0.6])
    ab = sched.alpha_bar[t]
    eps = eps_from_score(gmm_score(gm, x, t, sched), t, sched)
    want = (x - math.sqrt(ab) * gm.means[0]) / math.sqrt(1.0 - ab)
    assert np.allclose(eps, want, rtol=1e-6)


def test_gmm_sample_determinism_and_moments():
    gm = default_gmm()
    a = gmm_sample(gm, 4000, seed=5)
    b = gmm_sample(gm, 4000, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, gmm_sample(gm, 4000, seed=6))
    assert not np.array_equal(a, gmm_sample(gm, 4000, seed=5, step=4001))
    # symmetric modes at x0 = ±2: mean ~0, second moment ~4
    n = a.shape[0]
    assert abs(a[:, 0].mean()) < 4 * 2.0 / math.sqrt(n)
    assert abs((a[:, 0] ** 2).mean() - 4.002) < 0.3
    frac = np.mean(a[:, 0] > 0)
    assert abs(frac - 0.5) < 4 * 0.5 / math.sqrt(n)


def test_time_embedding_pin():
    emb = time_embedding(100, 100)
    assert emb.shape == (3,)
    assert emb[0] == 1.0
    assert abs(emb[1]) < 1e-12 and abs(emb[2] - 1.0) < 1e-12
    batch = time_embedding(np.array([25, 50]), 100)
    assert batch.shape == (2, 3)
    assert abs(batch[0, 1] - 1.0) < 1e-12  # sin(pi/2)


def test_zero_weight_net_outputs_biases():
    net = mlp_init([5, 4, 2], seed=0, t_scale=10)
    for w in net.weights:
        w[:] = 0.0
    net.biases[0][:] = np.array([0.3, -0.3, 0.1, 0.0])
    net.biases[1][:] = np.array([1.5, -2.5])
    out = mlp_forward(net, np.array([0.4, 0.5]), 3)
    assert np.array_equal(out.eps, [1.5, -2.5])
    assert np.allclose(out.feature, np.tanh(net.biases[0]), atol=1e-15)


def test_hand_computed_two_layer_net():
    net = MlpNet(
        weights=[np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([[1.0, 1.0]])],
        biases=[np.array([0.1, -0.2]), np.array([0.5])],
        feature_layer=0,
        t_scale=10,
    )
    out, hiddens = mlp_apply(net, np.array([[0.3, -0.7]]))
    h = np.tanh([1.1, -1.45])
    assert np.allclose(hiddens[0][0], h, atol=1e-15)
    assert abs(out[0, 0] - (h.sum() + 0.5)) < 1e-15


def test_forward_purity_and_dim_checks():
    net = mlp_init([5, 6, 6, 2], seed=2, t_scale=20)
    x = np.array([0.1, -0.4])
    a = mlp_forward(net, x, 7)
    b = mlp_forward(net, x, 7)
    assert np.array_equal(a.eps, b.eps) and np.array_equal(a.feature, b.feature)
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros(3), 7)
    dnet = mlp_init([5 + 4, 6, 6, 2], seed=3, t_scale=20)
    with pytest.raises(ValueError):
        drafter_forward(dnet, x, 7, np.zeros(3))


def test_drafter_with_zero_feature_equals_reduced_net():
    d, feat = 2, 4
    dnet = mlp_init([d + 3 + feat, 8, 8, d], seed=9, t_scale=25)
    reduced = MlpNet(
        weights=[dnet.weights[0][:, : d + 3]] + [w.copy() for w in dnet.weights[1:]],
        biases=[b.copy() for b in dnet.biases],
        feature_layer=dnet.feature_layer,
        t_scale=dnet.t_scale,
    )
    x = np.array([0.8, -0.2])
    a = drafter_forward(dnet, x, 11, np.zeros(feat))
    b = mlp_forward(reduced, x, 11)
    # zero feature contributes zero to every dot product; only the summation
    # order differs between the full and the sliced first layer
    assert np.allclose(a.eps, b.eps, atol=1e-14)
    assert np.allclose(a.feature, b.feature, atol=1e-14)


def test_frozen_drafter_exact_at_anchor():
    gm = default_gmm()
    sched = build_linear_schedule(30)
    x = keyed_gaussian(RngKey(4, 0, "data"), 2)
    t = 18
    anchor = evaluate_target(gm, x, t, sched)
    ker = frozen_drafter(anchor, x, t, sched)
    assert np.array_equal(ker.mean, reverse_mean(x, anchor.eps, t, sched))
    assert ker.var == float(sched.sigma2[t - 1])


def test_frozen_drafter_staleness_grows_with_depth():
    gm = GmmTarget(np.array([1.0]), np.array([[0.0, 0.0]]), np.array([1.0]))
    sched = build_linear_schedule(10)
    devs = np.zeros(3)
    seeds = range(30)
    for seed in seeds:
        x = keyed_gaussian(RngKey(seed, 0, "data"), 2)
        anchor = evaluate_target(gm, x, 10, sched)
        ker = frozen_drafter(anchor, x, 10, sched)
        x = ker.mean + math.sqrt(ker.var) * keyed_gaussian(RngKey(seed, 1, "noise"), 2)
        for i, k in enumerate((2, 3, 4)):
            t = 10 - k + 1
            ref = evaluate_target(gm, x, t, sched)
            devs[i] += np.linalg.norm(anchor.eps - ref.eps)
            ker = frozen_drafter(anchor, x, t, sched)
            x = ker.mean + math.sqrt(ker.var) * keyed_gaussian(RngKey(seed, k, "noise"), 2)
    devs /= len(list(seeds))
    # stale eps drifts monotonically as the chain moves away from the anchor
    assert devs[0] < devs[1] < devs[2]
    assert devs[0] > 0.01


def test_evaluate_target_gmm_feature_is_eps_copy():
    gm = default_gmm()
    sched = build_linear_schedule(30)
    out = evaluate_target(gm, np.array([0.5, 0.1]), 9, sched)
    assert np.array_equal(out.feature, out.eps)
    out.feature[0] = 99.0
    assert out.eps[0] != 99.0
    with pytest.raises(TypeError):
        evaluate_target(object(), np.zeros(2), 9, sched)


def test_net_json_round_trip_bitwise():
    net = mlp_init([7, 9, 5, 2], seed=21, t_scale=40)
    back = net_from_json(net_to_json(net))
    assert back.feature_layer == net.feature_layer
    assert back.t_scale == net.t_scale
    for w1, w2 in zip(net.weights, back.weights):
        assert np.array_equal(w1, w2)
    for b1, b2 in zip(net.biases, back.biases):
        assert np.array_equal(b1, b2)


def test_batch_forward_matches_single():
    net = mlp_init([5, 8, 8, 2], seed=6, t_scale=30)
    sched = build_linear_schedule(30)
    xs = keyed_gaussian(RngKey(8, 0, "data"), 10).reshape(5, 2)
    ts = np.array([1, 7, 15, 22, 30])
    eps_b, feat_b = mlp_forward_batch(net, xs, ts)
    for i in range(5):
        single = mlp_forward(net, xs[i], int(ts[i]))
        assert np.allclose(eps_b[i], single.eps, atol=1e-14)
        assert np.allclose(feat_b[i], single.feature, atol=1e-14)
    gm = default_gmm()
    eps_g, feat_g = evaluate_target_batch(gm, xs, ts, sched)
    for i in range(5):
        single = evaluate_target(gm, xs[i], int(ts[i]), sched)
        assert np.allclose(eps_g[i], single.eps, atol=1e-12)
    assert np.array_equal(eps_g, feat_g)
    with pytest.raises(ValueError):
        evaluate_target_batch(gm, xs, 0, sched)
