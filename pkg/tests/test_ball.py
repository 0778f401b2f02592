import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unisa.ball import ball_point, round_robin_owners, sample_ball, sample_ball_many, synth_batch
from unisa.clustering import ClusterSet
from unisa.errors import EmptyClusterSet, ZeroDirection
from unisa.model import NetworkShape, init_state
from unisa.oracles import ks_statistic, radial_cdf
from unisa.tensor import Graph

SHAPE = NetworkShape(input_dim=4, hidden_dims=(6,), feature_dim=5, projected_dim=3)


def clusters(k, d=3, seed=0):
    r = np.random.default_rng(seed)
    return ClusterSet(r.standard_normal((k, d)), r.uniform(0.1, 1.0, k), np.full(k, 5))


def test_zero_radius_gives_centroid():
    c = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(ball_point(c, 0.7, 0.0, [0.3, 0.1, 2.0]), c)


def test_radius_follows_formula(rng):
    c = rng.standard_normal(4)
    for _ in range(50):
        u, omega = rng.uniform(), rng.standard_normal(4)
        z = ball_point(c, 0.8, u, omega)
        assert abs(np.linalg.norm(z - c) - u ** 0.25 * 0.8) < 1e-12


def test_zero_direction():
    with pytest.raises(ZeroDirection):
        ball_point(np.zeros(2), 1.0, 0.5, [0.0, 0.0])


def test_d2_half_radius_fraction():
    z = sample_ball_many(np.zeros(2), 1.0, 100_000, np.random.default_rng(0))
    frac = np.mean(np.linalg.norm(z, axis=1) <= 0.5)
    assert abs(frac - float(radial_cdf(0.5, 1.0, 2))) < 0.01
    assert abs(frac - 0.25) < 0.01


@pytest.mark.parametrize("d", [2, 3, 8, 16])
def test_containment_and_radial_law(d):
    c = np.random.default_rng(d).standard_normal(d)
    z = sample_ball_many(c, 0.6, 100_000, np.random.default_rng(d + 1))
    r = np.linalg.norm(z - c, axis=1)
    assert r.max() <= 0.6 + 1e-12
    assert ks_statistic(r / 0.6, lambda x: radial_cdf(x, 1.0, d)) < 0.02


def test_sample_ball_single(rng):
    z = sample_ball([0.0, 0.0, 0.0], 2.0, rng)
    assert z.shape == (3,) and np.linalg.norm(z) <= 2.0


def test_round_robin():
    assert round_robin_owners(clusters(3), 6).tolist() == [0, 1, 2, 0, 1, 2]
    cs = ClusterSet(np.zeros((3, 2)), np.ones(3), np.array([4, 0, 2]))
    assert round_robin_owners(cs, 4).tolist() == [0, 2, 0, 2]


def test_synth_batch_examples(rng):
    state = init_state(SHAPE)
    batch = synth_batch(clusters(1), 1, state, rng)
    assert batch.owners.tolist() == [0] and batch.samples.shape == (1, 3)
    assert synth_batch(clusters(3), 6, state, rng).owners.tolist() == [0, 1, 2, 0, 1, 2]
    d = SHAPE.projected_dim
    state.w_proj = {"fc0.W": np.eye(d), "fc0.b": np.full(d, 50.0), "fc1.W": np.eye(d), "fc1.b": np.full(d, -50.0)}
    batch = synth_batch(clusters(2), 10, state, rng)
    np.testing.assert_allclose(batch.samples, batch.source_raw, atol=1e-12)
    with pytest.raises(EmptyClusterSet):
        synth_batch(ClusterSet(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)), 3, state, rng)


def test_synth_batch_is_differentiable(rng):
    state = init_state(SHAPE)
    g = Graph()
    batch = synth_batch(clusters(2), 4, state, rng, graph=g)
    from unisa import tensor as tc
    grads = g.gradient(tc.sum(batch.samples * batch.samples))
    assert set(grads) == {f"w_proj.{k}" for k in state.w_proj}
    assert any(np.any(v != 0) for v in grads.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 40), st.integers(1, 5))
def test_synth_batch_containment_and_determinism(seed, s, k):
    cs = clusters(k, seed=seed)
    state = init_state(SHAPE, seed=1)
    a = synth_batch(cs, s, state, np.random.default_rng(seed))
    b = synth_batch(cs, s, state, np.random.default_rng(seed))
    assert a.source_raw.tobytes() == b.source_raw.tobytes() and a.samples.tobytes() == b.samples.tobytes()
    dist = np.linalg.norm(a.source_raw - cs.centroids[a.owners], axis=1)
    assert np.all(dist <= cs.stds[a.owners] + 1e-12)
