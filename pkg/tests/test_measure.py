import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mvparticles import measure
from mvparticles.measure import MeasureView, ParticleCloud

from oracles import w2_permutations

finite = st.floats(-1e3, 1e3, allow_nan=False)


def cloud_pair(max_n=6, d=1):
    return st.integers(1, max_n).flatmap(
        lambda n: st.tuples(arrays(float, (n, d), elements=finite), arrays(float, (n, d), elements=finite))
    )


def test_tree_sum_small_cases():
    assert measure.tree_sum(np.array([1.0, 2.0, 3.0])) == 6.0
    assert measure.tree_sum(np.zeros(0)) == 0.0
    a = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(measure.tree_sum(a, axis=0), a.sum(axis=0))


@given(arrays(float, st.integers(1, 300), elements=finite))
def test_tree_sum_matches_exact_sum(a):
    exact = float(np.sum(a.astype(np.longdouble)))
    assert abs(measure.tree_sum(a) - exact) <= 1e-12 * max(1.0, float(np.abs(a).sum()))


def test_tree_sum_is_batch_independent():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 1000))
    full = measure.tree_sum(a, axis=1)
    rows = np.array([measure.tree_sum(a[i]) for i in range(7)])
    assert np.array_equal(full, rows)


def test_cloud_functionals():
    c = ParticleCloud(np.array([1.0, 3.0]), step=4, dt=0.5)
    assert c.n == 2 and c.d == 1 and c.time == 2.0
    assert measure.mean(c)[0] == 2.0
    assert measure.raw_moment(c, 2) == 5.0
    assert measure.w2_to_delta0(c) == pytest.approx(np.sqrt(5.0))
    assert not c.atoms.flags.writeable


def test_cloud_csv_round_trip():
    c = ParticleCloud(np.array([[0.1, -2.0], [1 / 3, 1e-300]]))
    back = ParticleCloud.from_csv(c.to_csv())
    assert np.array_equal(back.atoms, c.atoms)


def test_diverged_cloud_is_refused():
    c = ParticleCloud(np.array([1.0]), diverged=True)
    with pytest.raises(measure.DivergedCloudError):
        measure.mean(c)
    with pytest.raises(ValueError):
        measure.raw_moment(ParticleCloud(np.array([1.0])), 0)


def test_w2_examples():
    a = ParticleCloud(np.array([0.0, 1.0]))
    b = ParticleCloud(np.array([1.0, 0.0]))
    assert measure.w2_1d(a, b) == 0.0
    c = ParticleCloud(np.array([2.0, 3.0]))
    assert measure.w2_1d(a, c) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        measure.w2_1d(a, ParticleCloud(np.array([1.0, 2.0, 3.0])))
    with pytest.raises(ValueError):
        measure.w2_1d(ParticleCloud(np.zeros((2, 2))), ParticleCloud(np.zeros((2, 2))))


def test_w2_to_delta0_is_w2_against_origin_cloud():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 3))
    zero = ParticleCloud(np.zeros((20, 3)))
    assert measure.w2_assignment(ParticleCloud(x), zero) == pytest.approx(measure.w2_to_delta0(ParticleCloud(x)), rel=1e-12)


@given(cloud_pair(6, 1))
def test_w2_1d_matches_permutation_oracle(pair):
    x, y = pair
    want = w2_permutations(x, y)
    assert measure.w2_1d(ParticleCloud(x), ParticleCloud(y)) == pytest.approx(want, rel=1e-9, abs=1e-9)


@given(cloud_pair(6, 2))
def test_w2_assignment_matches_permutation_oracle(pair):
    x, y = pair
    want = w2_permutations(x, y)
    assert measure.w2_assignment(ParticleCloud(x), ParticleCloud(y)) == pytest.approx(want, rel=1e-9, abs=1e-9)
    assert measure.w2_bruteforce(ParticleCloud(x), ParticleCloud(y)) == pytest.approx(want, rel=1e-12, abs=1e-12)


@given(cloud_pair(8, 2), arrays(float, 2, elements=st.floats(-50, 50)))
def test_w2_properties(pair, shift):
    x, y = pair
    a, b = ParticleCloud(x), ParticleCloud(y)
    d = measure.w2_assignment(a, b)
    assert d >= 0
    assert d == pytest.approx(measure.w2_assignment(b, a), rel=1e-12, abs=1e-12)
    assert measure.w2_assignment(a, a) == 0
    assert measure.w2_assignment(a, ParticleCloud(x + shift)) == pytest.approx(np.linalg.norm(shift), rel=1e-9, abs=1e-9)


def test_w2_batch_agrees_with_single_pairs():
    rng = np.random.default_rng(2)
    for d in (1, 2):
        mu, nu = rng.normal(size=(5, 7, d)), rng.normal(size=(5, 7, d))
        want = [measure.w2_samples(a, b) for a, b in zip(mu, nu)]
        assert np.allclose(measure.w2_batch(mu, nu), want, rtol=1e-12)


def test_measure_view_broadcasts_over_paths():
    atoms = np.arange(12.0).reshape(2, 3, 2)
    mv = MeasureView(atoms)
    assert mv.n == 3
    assert mv.mean().shape == (2, 1, 2)
    assert np.allclose(mv.mean()[:, 0], atoms.mean(axis=1))
    assert np.allclose(mv.w2_to_delta0()[:, 0], np.sqrt((atoms**2).sum(-1).mean(-1)))
    assert np.allclose(mv.raw_moment(2)[:, 0], (atoms**2).sum(-1).mean(-1))


@given(arrays(float, (9, 2), elements=finite))
def test_second_moment_dominates_squared_mean(x):
    c = ParticleCloud(x)
    m = measure.mean(c)
    assert measure.raw_moment(c, 2) >= float(m @ m) * (1 - 1e-12) - 1e-9
