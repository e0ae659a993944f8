import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_gt_score, finite_diff, rel_err
from pcdenoise.errors import InvalidInput
from pcdenoise.nn import Tensor, grad, reduce_sum, mul
from pcdenoise.score_model import (
    DisplacementOracle,
    NetworkConfig,
    NetworkScore,
    OracleScore,
    ScoreNetwork,
    fuse_gradients,
    positional_encoding,
    timestep_embedding,
)
from pcdenoise.trainer import loss

SMALL = NetworkConfig(width=8, graph_layers=2, graph_k=4, fusion_k=4, residual_blocks=2, seed=3)


def sampled_fd_check(build, params, rng, per_param=3, eps=1e-5):
    """Check a few random entries of every parameter against central differences."""
    analytic = grad(build(), params)
    worst = 0.0
    for t, a in zip(params, analytic):
        flat = t.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + eps
            fp = float(build().data)
            flat[j] = old - eps
            fm = float(build().data)
            flat[j] = old
            worst = max(worst, rel_err(a.reshape(-1)[j], (fp - fm) / (2 * eps)))
    return worst


def randomise(net, rng):
    # nonzero biases keep relu inputs off the kink
    for t in net.params:
        t.data = 0.5 * rng.standard_normal(t.data.shape)


@pytest.fixture
def patch():
    rng = np.random.default_rng(7)
    return rng.standard_normal((20, 3)) * 0.3


def test_oracle_matches_brute_force():
    rng = np.random.default_rng(0)
    clean = rng.random((200, 3))
    noisy = rng.random((150, 3))
    np.testing.assert_array_equal(OracleScore(clean).scores(noisy), brute_gt_score(noisy, clean))


def test_oracle_in_frame():
    rng = np.random.default_rng(1)
    clean = rng.random((100, 3)) * 5 + 2
    noisy = clean + 0.01 * rng.standard_normal(clean.shape)
    c, s = np.array([1.0, 2.0, 3.0]), 4.0
    framed = OracleScore(clean).in_frame(c, s).scores((noisy - c) / s)
    np.testing.assert_allclose(framed * s, OracleScore(clean).scores(noisy), atol=1e-12)


def test_displacement_oracle():
    clean = np.eye(3)
    x = clean + 0.1
    np.testing.assert_allclose(DisplacementOracle(clean).scores(x), -0.1 * np.ones((3, 3)))


def test_encodings_dims():
    assert positional_encoding(np.zeros((5, 3))).shape == (5, 27)
    e = timestep_embedding(0, 1000)
    assert e.shape == (8,)
    np.testing.assert_allclose(e[1::2], 1.0)


def test_fuse_gradients_modes():
    rng = np.random.default_rng(2)
    gs = rng.standard_normal((6, 5, 3))
    ws = rng.standard_normal((6, 5))
    w = fuse_gradients(gs, ws, "weighted").data
    c = fuse_gradients(gs, ws, "const").data
    k1 = fuse_gradients(gs, ws, "k1").data
    np.testing.assert_allclose(c, gs.mean(axis=1))
    np.testing.assert_array_equal(k1, gs[:, 0])
    assert not np.allclose(w, c) and not np.allclose(w, k1)
    p = np.exp(ws - ws.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w, np.einsum("nk,nkj->nj", p, gs), atol=1e-14)
    with pytest.raises(InvalidInput):
        fuse_gradients(gs, ws, "median")


def test_forward_shape_and_errors(patch):
    net = ScoreNetwork(SMALL)
    out = net.forward(patch, patch, 10, 1000)
    assert out.shape == (20, 3)
    with pytest.raises(InvalidInput):
        net.forward(patch[:3], patch[:3], 10, 1000)
    with pytest.raises(InvalidInput):
        net.forward(patch, patch[:10], 10, 1000)


def test_permutation_equivariance(patch):
    net = ScoreNetwork(SMALL)
    perm = np.random.default_rng(0).permutation(20)
    a = net.forward(patch, patch, 500, 1000).data
    b = net.forward(patch[perm], patch[perm], 500, 1000).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 20.0))
def test_scale_equivariance(c):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((20, 3))
    net = ScoreNetwork(SMALL)
    a = net.forward(x, x, 300, 1000).data
    b = net.forward(c * x, c * x, 300, 1000).data
    np.testing.assert_allclose(b, c * a, rtol=1e-9, atol=1e-12)


def test_fusion_modes_differ(patch):
    rng = np.random.default_rng(5)
    x_t = patch + 0.05 * rng.standard_normal(patch.shape)
    outs = {}
    for mode in ("fused", "F_T", "F_t", "F_mean"):
        cfg = NetworkConfig(**{**SMALL.to_dict(), "fusion_mode": mode})
        outs[mode] = ScoreNetwork(cfg).forward(x_t, patch, 100, 1000).data
    modes = list(outs)
    for i in range(len(modes)):
        for j in range(i + 1, len(modes)):
            assert not np.allclose(outs[modes[i]], outs[modes[j]])


def test_grad_fusion_modes_run(patch):
    for mode in ("weighted", "const", "k1"):
        cfg = NetworkConfig(**{**SMALL.to_dict(), "grad_fusion_mode": mode})
        assert ScoreNetwork(cfg).forward(patch, patch, 5, 1000).shape == (20, 3)


def test_save_load_roundtrip(tmp_path, patch):
    net = ScoreNetwork(SMALL)
    net.params.step = 17
    path = tmp_path / "n.bin"
    net.save(path)
    back = ScoreNetwork.load(path)
    assert back.config == net.config and back.params.step == 17
    np.testing.assert_array_equal(back.forward(patch, patch, 9, 1000).data, net.forward(patch, patch, 9, 1000).data)
    prov = NetworkScore.from_checkpoint(path)
    assert prov.needs_centering
    np.testing.assert_array_equal(prov.scores(patch, patch, 9, 1000), net.forward(patch, patch, 9, 1000).data)


# finite-difference checks of each differentiable block


def test_gradcheck_edge_conv(patch):
    rng = np.random.default_rng(10)
    net = ScoreNetwork(SMALL)
    randomise(net, rng)
    params = [net.params["fe.conv0.W"], net.params["fe.conv0.b"]]
    w = rng.standard_normal((20, SMALL.width))
    build = lambda: reduce_sum(mul(net.edge_conv(0, patch), Tensor(w)))
    assert sampled_fd_check(build, params, rng, per_param=20) < 1e-4
    x = Tensor(patch.copy(), requires_grad=True)
    (g,) = grad(reduce_sum(mul(net.edge_conv(0, x), Tensor(w))), [x])
    numeric = finite_diff(lambda: float(reduce_sum(mul(net.edge_conv(0, x.data), Tensor(w))).data), x.data, eps=1e-6)
    assert rel_err(g, numeric) < 1e-4


def test_gradcheck_feature_fusion(patch):
    rng = np.random.default_rng(11)
    net = ScoreNetwork(SMALL)
    randomise(net, rng)
    ft = Tensor(rng.standard_normal((20, 8)), requires_grad=True)
    fT = Tensor(rng.standard_normal((20, 8)), requires_grad=True)
    w = rng.standard_normal((20, 8))
    build = lambda: reduce_sum(mul(net.fuse_features(patch, 40, 1000, ft, fT, "fused"), Tensor(w)))
    params = [t for name, t in net.params.items() if name.startswith("ff.")] + [ft, fT]
    assert sampled_fd_check(build, params, rng, per_param=6) < 1e-4


def test_gradcheck_gradient_predictor():
    rng = np.random.default_rng(12)
    net = ScoreNetwork(SMALL)
    randomise(net, rng)
    rel = Tensor(rng.standard_normal((15, 3)), requires_grad=True)
    feats = Tensor(rng.standard_normal((15, 8)), requires_grad=True)
    wg = rng.standard_normal((15, 3))
    ww = rng.standard_normal((15, 1))

    def build():
        g, w = net.predict_gradient(rel, feats)
        return reduce_sum(mul(g, Tensor(wg))) + reduce_sum(mul(w, Tensor(ww)))

    params = [t for name, t in net.params.items() if name.startswith("gp.")] + [rel, feats]
    assert sampled_fd_check(build, params, rng, per_param=6) < 1e-4


def test_gradcheck_full_loss(patch):
    rng = np.random.default_rng(13)
    net = ScoreNetwork(SMALL)
    randomise(net, rng)
    x_t = patch + 0.02 * rng.standard_normal(patch.shape)
    truth = rng.standard_normal(patch.shape) * 0.05
    mask = np.arange(20) < 8
    build = lambda: loss(net.forward(x_t, patch, 200, 1000), truth, 0.02, 0.99, mask)
    assert sampled_fd_check(build, list(net.params), rng, per_param=3) < 1e-4


def test_displacement_oracle_on_subsets():
    rng = np.random.default_rng(3)
    clean = rng.random((200, 3))
    noisy = clean + 0.01 * rng.standard_normal(clean.shape)
    oracle = DisplacementOracle(clean, noisy)
    idx = rng.permutation(200)[:50]
    np.testing.assert_array_equal(oracle.scores(noisy[idx], noisy[idx]), clean[idx] - noisy[idx])
    moved = noisy[idx] + 0.001
    np.testing.assert_array_equal(oracle.scores(moved, noisy[idx]), clean[idx] - moved)
    framed = oracle.in_frame(np.ones(3), 2.0)
    np.testing.assert_allclose(framed.scores((noisy[idx] - 1) / 2), (clean[idx] - noisy[idx]) / 2, atol=1e-15)
