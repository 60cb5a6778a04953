import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyadtb.carleson import ZeroNormError
from dyadtb.lattice import CubeId, DepthError, Lattice
from dyadtb.martingale import (
    AccretiveFailure,
    AccretiveFunction,
    adjoint_difference,
    check_accretive,
    decompose,
    difference,
    difference_matrix,
    dual_square_fn_bound,
    dual_square_fn_ratio,
    expectation,
    expectation_bound,
    square_fn_bound,
    square_fn_ratio,
    truncated_sum_norm,
    truncation_bound,
)
from dyadtb.measure import Measure, norm

from conftest import random_measure


def lex(lat, v):
    return lat.from_lex(np.asarray(v, float))


def random_b(lat, rng, delta=0.5, c=2.0):
    return rng.uniform(delta, c, lat.num_leaves)


def test_check_accretive_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    ok = check_accretive(np.ones(2), m)
    assert isinstance(ok, AccretiveFunction)
    assert (ok.delta, ok.c_inf) == (1.0, 1.0)
    bad = check_accretive(lex(lat, [1, -1]), m)
    assert isinstance(bad, AccretiveFailure) and not bad
    assert bad.offending == [lat.root]
    two = check_accretive(lex(lat, [2, 1]), m)
    assert two.delta == pytest.approx(1.0) and two.c_inf == 2.0


def test_expectation_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    b = lex(lat, [2, 1])
    assert np.allclose(expectation(b, m, lat.root, lex(lat, [1, 3])), 4 / 3 * b)
    assert np.allclose(expectation(b, m, lat.root, b), b)
    assert np.allclose(expectation(b, m, lat.root, np.zeros(2)), 0)


def test_difference_examples():
    lat = Lattice(1, 1)
    m = Measure.uniform(lat)
    d = difference(np.ones(2), m, lat.root, lex(lat, [1, 3]))
    assert np.allclose(lat.to_lex(d), [-1, 1])
    b = lex(lat, [2, 1])
    assert np.allclose(difference(b, m, lat.root, b), 0)
    with pytest.raises(DepthError):
        difference(b, m, CubeId(1, (0,)), b)


def test_decompose_examples():
    lat = Lattice(1, 2)
    m = Measure.uniform(lat)
    b = lex(lat, [2, 1, 1, 2])
    f = lex(lat, [1, 0, 0, 1])
    assert np.allclose(decompose(b, m, f).reconstruct(), f, atol=1e-14)
    d = decompose(b, m, b)
    assert np.allclose(d.top, b) and np.allclose(d.rows, 0)


def test_truncation_examples():
    lat = Lattice(1, 3)
    rng = np.random.default_rng(0)
    m = random_measure(lat, rng)
    b = random_b(lat, rng)
    f = rng.normal(size=8)
    full = truncated_sum_norm(b, m, f, 0)
    assert full == pytest.approx(norm(f - expectation(b, m, lat.root, f), m))
    info = check_accretive(b, m)
    assert full <= truncation_bound(info.delta, info.c_inf) * norm(f, m)
    assert truncated_sum_norm(b, m, b, 0) == pytest.approx(0, abs=1e-12)
    assert truncated_sum_norm(b, m, f, lat.depth) == 0


def test_zero_norm():
    lat = Lattice(1, 2)
    m = Measure.uniform(lat)
    with pytest.raises(ZeroNormError):
        square_fn_ratio(np.ones(4), m, np.zeros(4))
    with pytest.raises(ZeroNormError):
        dual_square_fn_ratio(np.ones(4), m, np.zeros(4))


@given(st.integers(0, 2**31), st.integers(1, 2), st.integers(1, 3))
def test_projection_and_mean_zero(seed, n, depth):
    rng = np.random.default_rng(seed)
    lat = Lattice(n, depth)
    m = random_measure(lat, rng)
    b = random_b(lat, rng)
    f = rng.normal(size=lat.num_leaves)
    for Q in lat.cubes():
        e = expectation(b, m, Q, f)
        assert np.allclose(expectation(b, m, Q, e), e, atol=1e-10)
        assert norm(e, m) <= expectation_bound(0.5, 2.0) * norm(f * _mask(lat, Q), m) + 1e-12
        if Q.g < depth:
            d = difference(b, m, Q, f)
            assert np.allclose(difference(b, m, Q, d), d, atol=1e-10)
            assert abs(d @ m.weights) <= 1e-12 * norm(f, m) * np.sqrt(m.mass(Q)) + 1e-15


def _mask(lat, Q):
    out = np.zeros(lat.num_leaves)
    out[lat.leaf_slice(Q)] = 1.0
    return out


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_reconstruction_with_zero_mass(seed, depth):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, depth)
    w = rng.uniform(0, 1, lat.num_leaves) * (rng.random(lat.num_leaves) > 0.3)
    if w.sum() == 0:
        w[0] = 1.0
    m = Measure(lat, w)
    b = random_b(lat, rng)
    f = rng.normal(size=lat.num_leaves)
    rec = decompose(b, m, f).reconstruct()
    pos = w > 0
    assert np.allclose(rec[pos], f[pos], atol=1e-10 * np.abs(f).max())


@given(st.integers(0, 2**31))
def test_standard_differences_are_orthogonal(seed):
    rng = np.random.default_rng(seed)
    lat = Lattice(2, 2)
    m = random_measure(lat, rng)
    f = rng.normal(size=lat.num_leaves)
    assert square_fn_ratio(np.ones(lat.num_leaves), m, f) == pytest.approx(1.0, abs=1e-10)


@given(st.integers(0, 2**31))
def test_adjoint_difference_is_pairing_transpose(seed):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, 3)
    m = random_measure(lat, rng)
    b = random_b(lat, rng)
    f, g = rng.normal(size=(2, 8))
    for Q in lat.cubes():
        if Q.g < lat.depth:
            lhs = difference(b, m, Q, f) @ (g * m.weights)
            rhs = f @ (adjoint_difference(b, m, Q, g) * m.weights)
            assert lhs == pytest.approx(rhs, abs=1e-12)


def _sup_quadratic(pieces_of, lat, m):
    """Brute-force sup over f of sum ||pieces||^2 / ||f||^2 via the assembled Gram matrix."""
    N = lat.num_leaves
    cols = [pieces_of(np.eye(N)[i]) for i in range(N)]
    G = np.array([[sum(p @ (q * m.weights) for p, q in zip(ci, cj)) for cj in cols] for ci in cols])
    s = 1 / np.sqrt(m.weights)
    return np.linalg.eigvalsh(G * s[:, None] * s[None, :])[-1]


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("delta,c", [(1.0, 1.0), (0.5, 2.0), (0.25, 1.0)])
def test_square_function_constants_dominate_the_sup(seed, delta, c):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, 3)
    m = random_measure(lat, rng)
    b = random_b(lat, rng, delta, c)
    info = check_accretive(b, m)

    def pieces(f):
        d = decompose(b, m, f)
        return list(d.rows) + [d.top]

    def dual_pieces(f):
        return [adjoint_difference(b, m, Q, f) for Q in lat.cubes() if Q.g < lat.depth]

    sup = _sup_quadratic(pieces, lat, m)
    dual_sup = _sup_quadratic(dual_pieces, lat, m)
    assert sup <= square_fn_bound(info.delta, info.c_inf)
    assert dual_sup <= dual_square_fn_bound(info.delta, info.c_inf)
    f = rng.normal(size=8)
    assert square_fn_ratio(b, m, f) <= sup + 1e-10
    assert dual_square_fn_ratio(b, m, f) <= dual_sup + 1e-10


def test_difference_matrix_matches_difference():
    lat = Lattice(2, 2)
    rng = np.random.default_rng(3)
    m = random_measure(lat, rng)
    b = random_b(lat, rng)
    f = rng.normal(size=16)
    for Q in lat.cubes(1):
        sl = lat.leaf_slice(Q)
        assert np.allclose(difference_matrix(b, m, Q) @ f[sl], difference(b, m, Q, f)[sl])
