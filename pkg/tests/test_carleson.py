import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyadtb.carleson import (
    CubeSequence,
    ZeroNormError,
    carleson_constant,
    embedding_ratio,
    embedding_sup,
    sparsity_check,
    usf_ratio,
    usf_sup,
)
from dyadtb.lattice import CubeId, Lattice
from dyadtb.measure import Measure

from conftest import random_measure


def mass_on(m, gens):
    lat = m.lattice
    return CubeSequence(lat, [m.masses[g] if g in gens else np.zeros(lat.size(g)) for g in range(lat.depth + 1)])


def test_carleson_examples():
    lat = Lattice(1, 3)
    m = random_measure(lat, np.random.default_rng(0))
    assert carleson_constant(mass_on(m, {3}), m) == pytest.approx(1.0)
    assert carleson_constant(CubeSequence.zeros(lat), m) == 0
    assert carleson_constant(mass_on(m, {0, 1, 2, 3}), m) == pytest.approx(4.0)


def test_carleson_reports_infinity_on_null_cube():
    lat = Lattice(1, 1)
    m = Measure(lat, np.array([1.0, 0.0]))
    a = CubeSequence.from_mapping(lat, {CubeId(1, (1,)): 1.0})
    assert carleson_constant(a, m) == np.inf


def test_negative_sequence_rejected():
    lat = Lattice(1, 1)
    with pytest.raises(ValueError):
        CubeSequence.from_mapping(lat, {lat.root: -1.0})


def test_embedding_examples():
    lat = Lattice(1, 3)
    m = random_measure(lat, np.random.default_rng(1))
    assert embedding_ratio(mass_on(m, {3}), m, np.ones(8)) == pytest.approx(1.0)
    R = CubeId(1, (1,))
    a = CubeSequence.from_mapping(lat, {R: 0.3})
    f = np.random.default_rng(2).normal(size=8)
    assert embedding_ratio(a, m, f) <= 0.3 / m.mass(R) + 1e-12
    with pytest.raises(ZeroNormError):
        embedding_ratio(a, m, np.zeros(8))


def test_sparsity_examples():
    lat = Lattice(2, 2)
    m = random_measure(lat, np.random.default_rng(3))
    assert sparsity_check(lat.cubes(1), m) == pytest.approx(1.0)
    assert sparsity_check(lat.cubes(), m) == pytest.approx(3.0)
    assert sparsity_check([], m) == 0


def test_usf_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    assert usf_ratio(np.full(2, 5.0), m) == 0
    assert usf_ratio(lat.from_lex([1.0, 3.0]), m) == pytest.approx(0.2)


def random_sequence(lat, rng):
    return CubeSequence(lat, [rng.exponential(size=lat.size(g)) * (rng.random(lat.size(g)) < 0.5)
                              for g in range(lat.depth + 1)])


@given(st.integers(0, 2**31), st.sampled_from([(1, 2), (1, 5), (2, 2)]))
def test_embedding_and_usf_inequalities(seed, shape):
    rng = np.random.default_rng(seed)
    lat = Lattice(*shape)
    m = random_measure(lat, rng, lo=0.0)
    a = random_sequence(lat, rng)
    f = rng.normal(size=lat.num_leaves)
    assert embedding_ratio(a, m, f) <= 4 * carleson_constant(a, m) + 1e-12
    assert usf_ratio(f, m) <= 1 + 1e-12


@given(st.integers(0, 2**31))
def test_carleson_monotone(seed):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, 4)
    m = random_measure(lat, rng)
    a = random_sequence(lat, rng)
    bigger = CubeSequence(lat, [v + rng.exponential(size=v.size) for v in a.levels])
    assert carleson_constant(a, m) <= carleson_constant(bigger, m)


@pytest.mark.parametrize("seed", range(5))
def test_sups_are_attained(seed):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, 3)
    m = random_measure(lat, rng)
    a = random_sequence(lat, rng)
    esup = embedding_sup(a, m)
    assert esup <= 4 * carleson_constant(a, m)
    fs = rng.normal(size=(200, 8))
    assert max(embedding_ratio(a, m, f) for f in fs) <= esup + 1e-12
    assert max(usf_ratio(f, m) for f in fs) <= usf_sup(m) + 1e-12 <= 1 + 2e-12


def test_json_roundtrip():
    lat = Lattice(1, 2)
    a = random_sequence(lat, np.random.default_rng(4))
    back = CubeSequence.from_json(lat, a.to_json())
    assert all(np.array_equal(x, y) for x, y in zip(back.levels, a.levels))
