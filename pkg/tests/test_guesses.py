import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_batch, tiny_net
from fgrad.autodiff import BatchContext, reverse_gradient
from fgrad.estimators import estimate_core
from fgrad.guesses import (
    GuessSpec,
    TargetSpec,
    ZeroGuessError,
    check_space,
    draw_random_guess,
    guess_loss,
    local_guess,
    make_fixed_heads,
    normalize_params,
    normalize_rows,
    target_gradient,
)
from fgrad.models import Sequential, build_backbone


def exact_second_moment(dim, family):
    """E||<t,G>G - t||^2 / ||t||^2 by exact enumeration (Rademacher) or Gauss-Hermite quadrature (Gaussian)."""
    t = np.arange(1.0, dim + 1)
    if family == "rademacher":
        pts = np.array(list(itertools.product([-1.0, 1.0], repeat=dim)))
        w = np.full(len(pts), 1.0 / len(pts))
    else:
        x, wx = np.polynomial.hermite_e.hermegauss(6)
        wx = wx / wx.sum()
        pts = np.array(list(itertools.product(x, repeat=dim)))
        w = np.prod(np.array(list(itertools.product(wx, repeat=dim))), axis=1)
    g = (pts @ t)[:, None] * pts
    return float(w @ ((g - t) ** 2).sum(axis=1) / (t @ t))


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_variance_law_oracle(dim):
    # quadrature is exact for these degree-4 moments, so the laws d-1 / d+1 follow
    assert exact_second_moment(dim, "rademacher") == pytest.approx(dim - 1, abs=1e-12)
    assert exact_second_moment(dim, "gaussian") == pytest.approx(dim + 1, abs=1e-9)


def test_rademacher_support():
    g = draw_random_guess((1000, 7), "rademacher", np.random.default_rng(0))
    assert set(np.unique(g)) == {-1.0, 1.0}


def test_gaussian_mean_within_clt_bound():
    g = draw_random_guess(100_000, "gaussian", np.random.default_rng(1), np.float64)
    assert abs(g.mean()) <= 0.02


@pytest.mark.parametrize("family", ["gaussian", "rademacher"])
def test_unit_covariance(family):
    G = draw_random_guess((10_000, 8), family, np.random.default_rng(2), np.float64)
    assert np.abs(G.T @ G / len(G) - np.eye(8)).max() <= 0.1


def test_unknown_families_rejected():
    with pytest.raises(ValueError):
        draw_random_guess(3, "uniform", np.random.default_rng(0))
    with pytest.raises(ValueError):
        GuessSpec("dfa")
    with pytest.raises(ValueError):
        GuessSpec("gaussian", normalization="unit_norm")
    with pytest.raises(ValueError):
        TargetSpec("next")
    with pytest.raises(ValueError):
        check_space("output")


def test_normalization_defaults():
    assert GuessSpec("gaussian").normalization == "raw"
    assert GuessSpec("rademacher").normalization == "raw"
    for fam in ("local", "ntk", "fixed_ntk"):
        assert GuessSpec(fam).normalization == "unit_norm"


@pytest.mark.parametrize("family", ["gaussian", "rademacher"])
def test_unbiased_within_clt_bound(family):
    d, N = 16, 20_000
    rng = np.random.default_rng(5)
    t = rng.standard_normal(d)
    G = draw_random_guess((N, d), family, rng, np.float64)
    est = (G @ t)[:, None] * G
    assert np.abs(est.mean(axis=0) - t).max() <= 4 * np.linalg.norm(t) * np.sqrt(d / N)
    ratio = ((est - t) ** 2).sum(axis=1).mean() / (t @ t)
    assert ratio == pytest.approx({"gaussian": 17.0, "rademacher": 15.0}[family], rel=0.10)


def test_activity_local_guess_has_unit_rows(net64, batch64):
    x, y = batch64
    for j in range(net64.n_blocks):
        g = local_guess(net64, j, x, y, "activity")
        assert np.allclose(np.linalg.norm(g.reshape(len(y), -1), axis=1), 1.0, atol=1e-6)


def test_weight_local_guess_has_unit_joint_norm(net64, batch64):
    x, y = batch64
    g = local_guess(net64, 1, x, y, "weight")
    assert np.sqrt(sum(np.sum(v ** 2) for v in g.values())) == pytest.approx(1.0, abs=1e-6)
    per = local_guess(net64, 1, x, y, "weight", per_tensor=True)
    assert all(np.linalg.norm(v) == pytest.approx(1.0, abs=1e-6) for v in per.values())


def test_aux_equal_to_downstream_classifier_gives_cosine_one():
    net = build_backbone("micro4", input_shape=(1, 8, 8), class_count=4, split="layerwise", skip=False, dtype="float64")
    x, y = tiny_batch(1)
    j = net.n_blocks - 2
    net.aux = [None] * net.n_blocks
    net.aux[j] = Sequential(net.blocks[-1].layers + net.head.layers)
    for space in ("activity", "weight"):
        guess = local_guess(net, j, x, y, space)
        target = target_gradient(net, j, x, y, TargetSpec("global"), space)
        if space == "activity":
            t = target.reshape(len(y), -1)
            g = guess.reshape(len(y), -1)
            cos = (t * g).sum(1) / np.linalg.norm(t, axis=1)
            np.testing.assert_allclose(cos, 1.0, atol=1e-5)
        else:
            dot = sum(np.vdot(target[k], guess[k]) for k in target)
            tn = np.sqrt(sum(np.sum(v ** 2) for v in target.values()))
            assert dot / tn == pytest.approx(1.0, abs=1e-5)


def test_ntk_guess_determinism(net64, batch64):
    x, y = batch64
    a = local_guess(net64, 0, x, y, "activity", "reinit_ntk", np.random.default_rng(9))
    b = local_guess(net64, 0, x, y, "activity", "reinit_ntk", np.random.default_rng(9))
    c = local_guess(net64, 0, x, y, "activity", "reinit_ntk", np.random.default_rng(10))
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    with pytest.raises(ValueError):
        guess_loss(net64, 0, "reinit_ntk")


def test_fixed_ntk_needs_heads_and_is_stable(net64, batch64):
    x, y = batch64
    with pytest.raises(ValueError):
        guess_loss(net64, 0, "fixed_ntk")
    make_fixed_heads(net64, np.random.default_rng(0))
    a = local_guess(net64, 1, x, y, "weight", "fixed_ntk")
    b = local_guess(net64, 1, x, y, "weight", "fixed_ntk")
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_global_target_at_last_block_is_backprop(net64, batch64):
    x, y = batch64
    last = net64.n_blocks - 1
    ref = reverse_gradient(net64, x, y)
    for space, key in (("weight", "blocks"), ("activity", "activity")):
        t = target_gradient(net64, last, x, y, TargetSpec("global"), space)
        r = ref[key][last]
        if space == "weight":
            for k in r:
                np.testing.assert_allclose(t[k], r[k], rtol=1e-6)
        else:
            np.testing.assert_allclose(t, r, rtol=1e-6)


def test_intermediate_target_falls_back_to_global_at_last_block(net64, batch64):
    x, y = batch64
    last = net64.n_blocks - 1
    ctx = BatchContext(net64, x, y)
    a = target_gradient(net64, last, x, y, TargetSpec("intermediate"), "activity", ctx)
    b = target_gradient(net64, last, x, y, TargetSpec("global"), "activity", ctx)
    np.testing.assert_array_equal(a, b)
    # below the last block it reads the next block's auxiliary loss
    a = target_gradient(net64, 0, x, y, TargetSpec("intermediate"), "activity", ctx)
    b = target_gradient(net64, 0, x, y, TargetSpec("global"), "activity", ctx)
    assert not np.allclose(a, b)


def test_local_target_with_matching_guess_recovers_target(net64, batch64):
    x, y = batch64
    t = target_gradient(net64, 1, x, y, TargetSpec("local"), "weight")
    g = local_guess(net64, 1, x, y, "weight")
    keys = sorted(t)
    tv = np.concatenate([t[k].ravel() for k in keys])
    gv = np.concatenate([g[k].ravel() for k in keys])
    np.testing.assert_allclose(estimate_core(tv, gv), tv, rtol=1e-6, atol=1e-12)


@given(st.floats(1e-3, 1e3), st.integers(0, 2**16))
def test_guess_direction_invariant_to_loss_rescaling(c, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((3, 2, 2, 2))
    np.testing.assert_allclose(normalize_rows(c * g)[0], normalize_rows(g)[0], rtol=1e-9, atol=1e-12)
    d = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    scaled = normalize_params({k: c * v for k, v in d.items()})
    base = normalize_params(d)
    for k in d:
        np.testing.assert_allclose(scaled[k], base[k], rtol=1e-9, atol=1e-12)


def test_zero_guess_handling():
    with pytest.raises(ZeroGuessError):
        normalize_params({"w": np.zeros(3)})
    out, zeros = normalize_rows(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert zeros == 1
    np.testing.assert_allclose(out, [[0, 0], [0.6, 0.8]])


def test_missing_auxiliary():
    net = build_backbone("micro4", input_shape=(1, 8, 8), class_count=4)
    x, y = tiny_batch()
    with pytest.raises(ValueError):
        local_guess(net, 0, x.astype(np.float32), y, "activity")
    with pytest.raises(ValueError):
        target_gradient(net, 0, x.astype(np.float32), y, TargetSpec("local"), "weight")
