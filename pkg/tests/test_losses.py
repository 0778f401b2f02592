import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from unisa import losses as L
from unisa.errors import DegenerateClusterCount, EmptyBatch, NoNegatives, ShapeMismatch, SingleCluster, ValidationError
from unisa.losses import LossWeights
from unisa.model import NetworkShape, init_state
from unisa.oracles import (ball_triplet_loop, central_difference, drift_loop, info_nce_loop, kl_uniform_sum,
                           mas_penalty_loop, psl_loop, relative_error)
from unisa.tensor import Graph

from conftest import fd_check
from gradcases import CASES

E1, E2, E3 = np.eye(3)


def test_weights_validation():
    with pytest.raises(ValidationError) as err:
        LossWeights(tau=0.0)
    assert err.value.field == "tau"
    with pytest.raises(ValidationError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(ValidationError):
        LossWeights(lambda4=math.inf)


def test_info_nce_examples():
    assert L.info_nce(E1, E1, [E2], 1.0) == pytest.approx(-1.0, abs=1e-15)
    assert L.info_nce(E1, E2, [E3], 1.0) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(NoNegatives):
        L.info_nce(E1, E1, np.zeros((0, 3)), 1.0)


def test_info_nce_matches_loop(rng):
    for _ in range(20):
        z, zp, neg = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal((5, 4))
        unit = lambda v: v / np.linalg.norm(v, axis=-1, keepdims=True)
        assert L.info_nce(z, zp, neg, 0.3) == pytest.approx(info_nce_loop(unit(z), unit(zp), unit(neg), 0.3), rel=1e-12)


def test_psl_examples():
    c = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert L.psl(c, c, 1.0) == pytest.approx(0.0, abs=1e-15)
    c = np.eye(2)
    assert L.psl(c, c, 1.0) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateClusterCount):
        L.psl(c[:1], c[:1], 1.0)


def test_psl_matches_loop_and_is_permutation_equivariant(rng):
    for _ in range(20):
        c = rng.standard_normal((5, 4))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        cp = rng.standard_normal((5, 4))
        cp /= np.linalg.norm(cp, axis=1, keepdims=True)
        v = L.psl(c, cp, 0.1)
        assert v == pytest.approx(psl_loop(c, cp, 0.1), rel=1e-12)
        perm = rng.permutation(5)
        assert L.psl(c[perm], cp[perm], 0.1) == pytest.approx(v, rel=1e-12)


def test_psa_examples(rng):
    a = rng.standard_normal(6)
    assert L.psa(a, a) == 0.0
    assert L.psa(a + 1.0, a) == pytest.approx(6.0, rel=1e-14)
    b = rng.standard_normal(6)
    assert L.psa(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)), abs=1e-12)
    with pytest.raises(ShapeMismatch):
        L.psa(a, b[:5])


def test_kl_examples():
    assert L.kl_uniform(np.zeros(4)) == pytest.approx(0.0, abs=1e-12)
    assert L.kl_uniform(np.array([50.0, 0, 0, 0])) == pytest.approx(math.log(4), abs=1e-6)
    half = L.kl_uniform(np.array([0.0, 0.0, -60.0, -60.0]))
    assert half == pytest.approx(kl_uniform_sum([0.5, 0.5, 0, 0]), abs=1e-9)
    assert half == pytest.approx(math.log(2), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4, 8]).flatmap(
    lambda m: arrays(np.float64, m, elements=st.floats(-20, 20, allow_nan=False))))
def test_kl_bounds(x):
    m = len(x)
    v = L.kl_uniform(x)
    assert -1e-12 <= v <= math.log(m) + 1e-12
    p = np.exp(x - x.max())
    p /= p.sum()
    assert v == pytest.approx(kl_uniform_sum(p), abs=1e-9)


def test_drift_examples(rng):
    a = rng.standard_normal((3, 2))
    assert L.drift(a, a) == 0.0
    assert L.drift(np.array([[3.0, 4.0]]), np.zeros((1, 2))) == pytest.approx(5.0)
    b = rng.standard_normal((3, 2))
    assert L.drift(a, b) == pytest.approx(drift_loop(a, b), rel=1e-12)
    with pytest.raises(ShapeMismatch):
        L.drift(a, b[:2])


def test_ball_examples(rng):
    r = 0.5
    cents = np.array([[0.0, 0.0], [2 * r, 0.0]])
    assert L.ball_triplet(np.array([[0.0, 0.0]]), [0], cents, r) == 0.0
    cents = np.array([[0.0, 0.0], [r / 2, 0.0]])
    assert L.ball_triplet(np.array([[0.0, 0.0]]), [0], cents, r) == pytest.approx(r / 2)
    z, c = rng.standard_normal((8, 3)), rng.standard_normal((4, 3))
    owners = rng.integers(0, 4, 8)
    assert L.ball_triplet(z, owners, c, r) == pytest.approx(ball_triplet_loop(z, owners, c, r), rel=1e-12)
    with pytest.raises(SingleCluster):
        L.ball_triplet(z, np.zeros(8, dtype=int), c[:1], r)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0, 2))
def test_ball_nonnegative_and_zero_when_separated(seed, r):
    rng = np.random.default_rng(seed)
    z, c = rng.standard_normal((5, 2)), rng.standard_normal((3, 2))
    owners = rng.integers(0, 3, 5)
    assert L.ball_triplet(z, owners, c, r) >= 0.0
    # samples sitting on their centroid with the others far away incur nothing
    far = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    own = rng.integers(0, 3, 5)
    assert L.ball_triplet(far[own], own, far, r) == 0.0


def test_mas_penalty_examples(rng):
    theta = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    gamma = {k: np.ones_like(v) for k, v in theta.items()}
    assert L.mas_penalty(theta, theta, gamma, 1.0) == 0.0
    shifted = {k: v + 0.3 for k, v in theta.items()}
    assert L.mas_penalty(shifted, theta, gamma, 1.0) == pytest.approx(10 * 0.09, rel=1e-12)
    gamma = {k: np.abs(rng.standard_normal(v.shape)) for k, v in theta.items()}
    other = {k: rng.standard_normal(v.shape) for k, v in theta.items()}
    assert L.mas_penalty(other, theta, gamma, 0.5) == pytest.approx(mas_penalty_loop(other, theta, gamma, 0.5))
    # projection-module entries are never regularised
    with_proj = dict(other, **{"w_proj.fc0.W": np.ones(2)})
    assert L.mas_penalty(with_proj, theta, gamma, 0.5) == L.mas_penalty(other, theta, gamma, 0.5)
    with pytest.raises(ShapeMismatch):
        L.mas_penalty({"a": np.ones(3)}, {"a": np.ones(2)}, {"a": np.ones(2)}, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5), st.floats(0, 3), st.floats(0, 3))
def test_mas_penalty_monotone(gamma, d1, d2):
    lo, hi = sorted([d1, d2])
    prev = {"w": np.zeros(1)}
    g = {"w": np.array([gamma])}
    p_lo = L.mas_penalty({"w": np.array([lo])}, prev, g, 1.0)
    p_hi = L.mas_penalty({"w": np.array([-hi])}, prev, g, 1.0)
    assert 0.0 <= p_lo <= p_hi
    if hi - lo > 1e-6:  # strictness is only observable above float resolution
        assert p_hi > p_lo


def test_mas_importance_examples(rng):
    shape = NetworkShape(input_dim=3, hidden_dims=(4,), feature_dim=3, projected_dim=2)
    s = init_state(shape)
    s.phi = {k: np.zeros_like(v) for k, v in s.phi.items()}
    s.psi = {k: np.zeros_like(v) for k, v in s.psi.items()}
    gamma = L.mas_importance(s, rng.standard_normal((4, 3)))
    assert set(gamma) == set(s.theta()) and all(np.all(v == 0) for v in gamma.values())
    with pytest.raises(EmptyBatch):
        L.mas_importance(s, np.zeros((0, 3)))

    scalar = L.mas_importance_fn(lambda g, p, x: p["w"] * x, {"w": np.array(1.0)}, np.array([1.0]))
    assert scalar["w"] == pytest.approx(2.0)


def test_mas_importance_matches_finite_differences(rng):
    """Two-parameter model out = w * feat; per-sample |d||out||^2 / dw| by central differences."""
    w = rng.standard_normal(2)
    feats = rng.standard_normal((5, 2))
    gamma = L.mas_importance_fn(lambda g, p, x: p["w"] * x, {"w": w}, feats)
    oracle = sum(np.abs(central_difference(lambda v: float(np.sum((v * f) ** 2)), w)) for f in feats)
    np.testing.assert_allclose(gamma["w"], oracle / len(feats), rtol=1e-6)


def test_merge_importance_weights_by_counts():
    a, b = {"w": np.array([1.0])}, {"w": np.array([4.0])}
    merged, n = L.merge_importance(a, 3, b, 1)
    assert n == 4 and merged["w"][0] == pytest.approx(1.75)
    first, n = L.merge_importance(None, 0, b, 2)
    assert n == 2 and first["w"][0] == 4.0


def test_base_composite_examples(rng):
    w0 = LossWeights(lambda1=0, lambda2=0, lambda3=0)
    total, rep = L.base_loss(1.5, 2.0, 3.0, 4.0, w0)
    assert total == 1.5 and rep.psl == 1.5
    assert L.base_loss(0.0, 0.0, 0.0, 0.0)[0] == 0.0
    for _ in range(10):
        t = rng.uniform(0, 3, 4)
        total, rep = L.base_loss(*t)
        assert total == pytest.approx(t.sum(), abs=1e-9)
        assert rep.total == pytest.approx(rep.psl + rep.psa + rep.kl + rep.drift, abs=1e-9)


def test_fewshot_composite_examples(rng):
    w = LossWeights(lambda4=0)
    psl_, psa_, kl_, drift_ = rng.uniform(0, 2, 4)
    assert L.fewshot_loss(psl_, psa_, kl_, 5.0, 0.0, w)[0] == pytest.approx(L.base_loss(psl_, psa_, kl_, drift_)[0] - drift_)
    assert L.fewshot_loss(0.0, 0.0, 0.0, 0.0, 0.0)[0] == 0.0
    for _ in range(10):
        t = rng.uniform(0, 3, 5)
        total, rep = L.fewshot_loss(*t)
        assert total == pytest.approx(t[0] + t[1] + t[2] + 0.1 * t[3] + t[4], abs=1e-9)
        assert rep.total == pytest.approx(total, abs=1e-9)


def test_report_from_graph(rng):
    g = Graph()
    a = g.param("a", rng.standard_normal((3, 4)))
    total, terms = L.base_loss(psa=L.psa(a, g.constant(np.zeros((3, 4)))), kl=L.kl_uniform(a))
    rep = L.evaluate_report(g, total, terms)
    assert rep.total == pytest.approx(rep.psa + rep.kl, abs=1e-12) and rep.drift == 0.0


@pytest.mark.parametrize("name", list(CASES))
def test_loss_gradients(name):
    for seed in range(20):
        arrays, build = CASES[name](np.random.default_rng(seed))
        assert fd_check(build, arrays) < 1e-4, (name, seed)
