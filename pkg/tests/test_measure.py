import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyadtb.lattice import CubeId, Lattice
from dyadtb.measure import (
    Measure,
    ShapeError,
    StepFunction,
    average,
    dyadic_maximal,
    indicator,
    inner,
    mass,
    norm,
)


def lexm(lat, w):
    return Measure(lat, lat.from_lex(np.asarray(w, float)))


def test_mass_examples():
    lat = Lattice(1, 2)
    assert mass(Measure.uniform(lat), lat.root) == pytest.approx(1.0)
    zero = Measure(lat, np.zeros(4))
    assert all(mass(zero, c) == 0 for c in lat.cubes())
    assert mass(lexm(lat, [1, 2, 3, 4]), CubeId(1, (0,))) == 3


def test_average_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    for c in lat.cubes():
        assert average(np.ones(2), c, m) == pytest.approx(1.0)
    assert average([1, 3], lat.root, m) == pytest.approx(2.0)
    z = Measure(lat, np.array([1.0, 0.0]))
    assert average([5, 7], CubeId(1, (1,)), z) == 0.0


def test_inner_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    assert inner([1, -1], [1, 1], m) == 0
    w = Measure(lat, np.array([0.3, 0.5]))
    assert inner(np.ones(2), np.ones(2), w) == pytest.approx(w.mass(lat.root))


def test_maximal_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    assert np.allclose(dyadic_maximal(np.full(2, -3.0), m), 3.0)
    mf = dyadic_maximal(lat.from_lex([1.0, 0.0]), m)
    assert lat.to_lex(mf)[1] == pytest.approx(0.5)


@given(st.integers(0, 2**31), st.integers(0, 4))
def test_maximal_dominates(seed, depth):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, depth)
    m = Measure(lat, rng.uniform(0, 1, lat.num_leaves))
    f = rng.normal(size=lat.num_leaves)
    mf = dyadic_maximal(f, m)
    pos = m.weights > 0
    assert np.all(mf[pos] >= np.abs(f[pos]) - 1e-12)


@given(st.integers(0, 2**31))
def test_masses_are_additive(seed):
    rng = np.random.default_rng(seed)
    lat = Lattice(2, 3)
    m = Measure(lat, rng.uniform(0, 1, lat.num_leaves))
    for c in lat.cubes():
        if c.g < lat.depth:
            assert m.mass(c) == pytest.approx(sum(m.mass(k) for k in lat.children(c)))
        assert inner(indicator(lat, c), np.ones(lat.num_leaves), m) == pytest.approx(m.mass(c))


def test_level_averages_batch():
    lat = Lattice(1, 3)
    rng = np.random.default_rng(1)
    m = Measure(lat, rng.uniform(0.1, 1, 8))
    F = rng.normal(size=(3, 8))
    batch = m.level_averages(F, 2)
    for k in range(3):
        assert np.allclose(batch[k], [average(F[k], c, m) for c in lat.cubes(2)])


def test_validation():
    lat = Lattice(1, 2)
    with pytest.raises(ShapeError):
        Measure(lat, np.ones(3))
    with pytest.raises(ValueError):
        Measure(lat, np.array([1, -1, 1, 1.0]))
    with pytest.raises(ValueError):
        StepFunction(lat, np.array([1, np.nan, 0, 0]))
    f = StepFunction(lat, np.arange(4.0))
    assert np.array_equal(StepFunction.from_json(f.to_json()).values, f.values)
    m = Measure(lat, np.arange(4.0))
    assert np.array_equal(Measure.from_json(m.to_json()).weights, m.weights)
    assert norm(np.zeros(4), m) == 0
