import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyadtb.accretive_system import AccretiveSystem, PairedSystem, random_stopping_system
from dyadtb.lattice import CubeId, Lattice
from dyadtb.measure import Measure, inner
from dyadtb.operators import (
    OperatorRep,
    adjoint,
    apply,
    bilinear,
    check_wl_global,
    check_wl_local,
    doubling_constant,
    make_haar_multiplier,
    make_shift_candidate,
    operator_norm,
    random_dense_operator,
    sample_well_localized,
)

from dyadtb import operators as ops

from conftest import random_measure


def lex(lat, v):
    return lat.from_lex(np.asarray(v, float))


def indicator(lat, Q):
    out = np.zeros(lat.num_leaves)
    out[lat.leaf_slice(Q)] = 1.0
    return out


def test_apply_examples():
    lat = Lattice(1, 2)
    m = Measure.uniform(lat)
    f = np.arange(4.0)
    assert np.array_equal(apply(OperatorRep(lat, np.eye(4), m, m), f), f)
    assert np.array_equal(apply(OperatorRep(lat, np.zeros((4, 4)), m, m), f), 0 * f)
    rng = np.random.default_rng(0)
    nu = random_measure(lat, rng)
    u, v, g = rng.normal(size=(3, 4))
    T = OperatorRep(lat, np.outer(u, v), m, nu)
    assert bilinear(T, f, g) == pytest.approx((f @ v) * inner(u, g, nu))


@given(st.integers(0, 2**31))
def test_adjoint_identities(seed):
    rng = np.random.default_rng(seed)
    lat = Lattice(1, 3)
    mu, nu = random_measure(lat, rng), random_measure(lat, rng)
    T = random_dense_operator(lat, mu, nu, rng)
    f, g = rng.normal(size=(2, 8))
    Ts = adjoint(T)
    assert bilinear(T, f, g) == pytest.approx(bilinear(Ts, g, f), abs=1e-12)
    assert np.allclose(adjoint(Ts).kernel, T.kernel, atol=1e-12)
    assert operator_norm(T) == pytest.approx(operator_norm(Ts), abs=1e-9)


def test_adjoint_of_symmetric_kernel():
    lat = Lattice(1, 2)
    m = Measure.uniform(lat)
    A = np.random.default_rng(1).normal(size=(4, 4))
    T = OperatorRep(lat, A + A.T, m, m)
    assert np.allclose(adjoint(T).kernel, T.kernel)


def test_zero_weight_leaves_are_nulled():
    lat = Lattice(1, 1)
    mu = Measure(lat, np.array([1.0, 0.0]))
    T = OperatorRep(lat, np.ones((2, 2)), mu, Measure.uniform(lat))
    assert np.array_equal(T.kernel[:, 1], [0, 0])
    assert np.array_equal(adjoint(T).kernel[1], [0, 0])


def test_norm_examples():
    lat = Lattice(1, 2)
    m = Measure.uniform(lat)
    assert operator_norm(OperatorRep(lat, np.eye(4), m, m)) == pytest.approx(1.0)
    assert operator_norm(OperatorRep(lat, np.zeros((4, 4)), m, m)) == 0
    lat1 = Lattice(1, 1)
    T = OperatorRep(lat1, lex_kernel(lat1, [[0, 1], [0, 0]]), Measure(lat1, np.array([1.0, 1.0])),
                    Measure(lat1, np.array([4.0, 1.0])))
    assert operator_norm(T) == pytest.approx(2.0, abs=1e-10)


def lex_kernel(lat, rows):
    rows = np.asarray(rows, float)
    K = np.empty_like(rows)
    p = lat.lex_to_morton
    K[np.ix_(p, p)] = rows
    return K


def test_multiplier_examples():
    lat = Lattice(1, 3)
    rng = np.random.default_rng(2)
    m = random_measure(lat, rng)
    zero = make_haar_multiplier(lat, m, [np.zeros(lat.size(g)) for g in range(3)])
    assert not zero.kernel.any()
    one = make_haar_multiplier(lat, m, [np.ones(lat.size(g)) for g in range(3)])
    f = rng.normal(size=8)
    assert np.allclose(apply(one, f), f - (f @ m.weights) / m.weights.sum())
    assert operator_norm(one) <= 1 + 1e-12


@given(st.integers(0, 2**31), st.sampled_from([(1, 3), (2, 2), (1, 4)]))
def test_multipliers_are_well_localized(seed, shape):
    rng = np.random.default_rng(seed)
    lat = Lattice(*shape)
    m = random_measure(lat, rng)
    T = make_haar_multiplier(lat, m, [rng.uniform(-1, 1, lat.size(g)) for g in range(lat.depth)])
    rep = check_wl_global(T, np.ones(lat.num_leaves), np.ones(lat.num_leaves), 0)
    assert rep.passed and rep.max_violation <= 1e-10


def test_identity_is_well_localized_for_any_pair():
    lat = Lattice(1, 3)
    rng = np.random.default_rng(3)
    m = random_measure(lat, rng)
    T = OperatorRep(lat, np.eye(8), m, m)
    assert check_wl_global(T, rng.uniform(0.5, 2, 8), rng.uniform(0.5, 2, 8), 0).passed
    s1, _ = random_stopping_system(m, 0.5, 2.0, 1)
    s2, _ = random_stopping_system(m, 0.5, 2.0, 2)
    assert check_wl_local(T, PairedSystem(s1, s2, m, m), 0).passed


def test_far_coupling_fails():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    K = np.zeros((8, 8))
    K[0, 7] = 1.0
    T = OperatorRep(lat, K, m, m)
    rep = check_wl_global(T, np.ones(8), np.ones(8), 0)
    assert not rep.passed
    assert rep.max_violation >= 1e-3
    Q, R = rep.forward.worst_pair
    assert lat.contains(Q, lat.cube(3, 7)) and lat.contains(R, lat.cube(3, 0))


def test_csc_trivial_for_constant_systems():
    lat = Lattice(1, 4)
    rng = np.random.default_rng(4)
    m = random_measure(lat, rng)
    pair = PairedSystem(AccretiveSystem.constant(rng.uniform(1, 2, 16), m),
                        AccretiveSystem.constant(rng.uniform(1, 2, 16), m), m, m)
    for r in (0, 1, 2):
        T, rep, _ = sample_well_localized(pair, r, rng)
        assert rep.csc_kappa <= 1 + 1e-9


def test_csc_kappa_detects_boundary_coupling():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    P, Q, R = CubeId(1, (0,)), CubeId(1, (1,)), CubeId(2, (2,))
    table = {lat.root: np.ones(8), P: 2.0 * indicator(lat, P)}
    pair = PairedSystem(AccretiveSystem.from_table(lat, table, 1, 2),
                        AccretiveSystem.constant(np.ones(8), m), m, m)
    assert pair.b1.change_set() == [P]
    # Haar function on R, fed by the mass on Q minus half the mass on P
    h = indicator(lat, lat.cube(3, 4)) - indicator(lat, lat.cube(3, 5))
    K = np.outer(h, (indicator(lat, Q) - 0.5 * indicator(lat, P)) * m.weights)
    rep = check_wl_local(OperatorRep(lat, K, m, m), pair, 1)
    assert rep.forward.csc_kappa == pytest.approx(4.0)
    assert rep.forward.csc_pair == (lat.root, Q, R)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_shift_candidates_from_sampler_pass(r):
    lat = Lattice(1, 4)
    rng = np.random.default_rng(10 + r)
    mu, nu = random_measure(lat, rng), random_measure(lat, rng)
    s1, _ = random_stopping_system(mu, 0.5, 2.0, 5)
    s2, _ = random_stopping_system(nu, 0.5, 2.0, 6)
    pair = PairedSystem(s1, s2, mu, nu)
    T, rep, _ = sample_well_localized(pair, r, rng)
    assert rep.passed and check_wl_local(T, pair, r).max_violation <= 1e-10
    const = PairedSystem(AccretiveSystem.constant(np.ones(16), mu),
                         AccretiveSystem.constant(np.ones(16), nu), mu, nu)
    cand = make_shift_candidate(const, r, rng, para=0.3)
    assert check_wl_global(cand, np.ones(16), np.ones(16), r).passed


def test_testing_examples():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    ones = np.ones(8)
    zero = ops.testing_global(OperatorRep(lat, np.zeros((8, 8)), m, m), ones, ones, 1)
    assert (zero.t_a_fwd, zero.t_a_adj, zero.t_b, zero.t_b_delta) == (0, 0, 0, 0)
    ident = OperatorRep(lat, np.eye(8), m, m)
    rep = ops.testing_global(ident, ones, ones, 1)
    assert rep.t_a_fwd <= 1 + 1e-12 and rep.t_b <= 1 + 1e-12
    const = PairedSystem(AccretiveSystem.constant(ones, m), AccretiveSystem.constant(ones, m), m, m)
    loc = ops.testing_local(ident, const, 1)
    assert loc.t_c_fwd == 0 and loc.t_c_adj == 0
    # the identity never leaves a cube, so cut and uncut forms agree
    assert loc.t_a_fwd == pytest.approx(rep.t_a_fwd)
    assert loc.t_b == pytest.approx(rep.t_b_delta)


def test_multiplier_testing_constants_bounded():
    lat = Lattice(1, 3)
    rng = np.random.default_rng(6)
    m = random_measure(lat, rng)
    T = make_haar_multiplier(lat, m, [rng.uniform(-1, 1, lat.size(g)) for g in range(3)])
    rep = ops.testing_global(T, np.ones(8), np.ones(8), 0)
    # coefficients in [-1, 1] make T a contraction
    assert rep.t_a_fwd <= 1 + 1e-12 and rep.t_b <= 1 + 1e-12 and rep.t_b_delta <= 1 + 1e-12


def test_doubling_examples():
    assert doubling_constant(Measure.uniform(Lattice(2, 3))).value == pytest.approx(4.0)
    lat = Lattice(1, 1)
    assert doubling_constant(Measure(lat, lex(lat, [1, 3]))).value == pytest.approx(4.0)
    atom = doubling_constant(Measure(lat, np.array([1.0, 0.0])))
    assert atom.flagged and atom.value == np.inf


@pytest.mark.parametrize("seed", range(4))
def test_t_c_bounded_by_doubling(seed):
    lat = Lattice(1, 4)
    rng = np.random.default_rng(seed)
    m = random_measure(lat, rng, lo=0.5)
    s1, _ = random_stopping_system(m, 0.5, 2.0, seed)
    s2, _ = random_stopping_system(m, 0.5, 2.0, seed + 50)
    pair = PairedSystem(s1, s2, m, m)
    dbl = doubling_constant(m).value
    for r in (0, 1):
        T = random_dense_operator(lat, m, m, rng)
        rep = ops.testing_local(T, pair, r)
        k = dbl ** ((r + 1) * lat.n)
        assert rep.t_c_fwd <= k * rep.t_a_fwd * (1 + 1e-12)
        assert rep.t_c_adj <= k * rep.t_a_adj * (1 + 1e-12)


def test_json_roundtrip():
    lat = Lattice(2, 2)
    rng = np.random.default_rng(7)
    mu, nu = random_measure(lat, rng), random_measure(lat, rng)
    T = random_dense_operator(lat, mu, nu, rng)
    back = OperatorRep.from_json(T.to_json(), mu, nu)
    assert np.array_equal(back.kernel, T.kernel)
    M = make_haar_multiplier(lat, mu, {lat.root: 0.5, CubeId(1, (1, 0)): -1.0})
    assert np.allclose(OperatorRep.from_json(M.to_json(), mu, mu).kernel, M.kernel)
