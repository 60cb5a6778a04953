import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadtb.accretive_system import AccretiveSystem, PairedSystem, random_stopping_system, random_table_system
from dyadtb.instances import GenParams, generate, random_pair_functions
from dyadtb.lattice import CubeId, Lattice
from dyadtb.measure import Measure, norm
from dyadtb.operators import OperatorRep, make_haar_multiplier, operator_norm, random_dense_operator
from dyadtb.tracer import (
    TracePreconditionError,
    carleson_aQ_global,
    trace_appendix,
    trace_global,
    trace_local,
)

from conftest import random_measure


def indicator(lat, Q):
    out = np.zeros(lat.num_leaves)
    out[lat.leaf_slice(Q)] = 1.0
    return out


def test_zero_operator_global():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=(2, 8))
    res = trace_global(OperatorRep(lat, np.zeros((8, 8)), m, m), np.ones(8), np.ones(8), 1, f, g)
    assert res.passed
    assert all(v == 0 for v in res.terms.values())


def test_multiplier_on_root_haar_function():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    lam = [np.array([0.7]), np.array([0.2, -0.4]), np.array([1.0, 0.5, -0.5, 0.1])]
    T = make_haar_multiplier(lat, m, lam)
    h = indicator(lat, CubeId(1, (0,))) - indicator(lat, CubeId(1, (1,)))
    res = trace_global(T, np.ones(8), np.ones(8), 0, h, h)
    assert res.passed
    for name in ("S2", "S3", "S4", "S11", "S12", "S14"):
        assert res.terms[name] == pytest.approx(0, abs=1e-14)
    assert res.terms["S1"] == pytest.approx(0.7 * norm(h, m) ** 2)
    assert res.terms["S13"] == pytest.approx(res.terms["S1"])


def test_precondition_error_on_dense_operator():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    T = random_dense_operator(lat, m, m, np.random.default_rng(1))
    with pytest.raises(TracePreconditionError):
        trace_global(T, np.ones(8), np.ones(8), 0, np.ones(8), np.ones(8))
    pair = PairedSystem(AccretiveSystem.constant(np.ones(8), m), AccretiveSystem.constant(np.ones(8), m), m, m)
    with pytest.raises(TracePreconditionError):
        trace_local(T, pair, 0, np.ones(8), np.ones(8))


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.integers(0, 2), st.sampled_from(["multiplier", "shift-candidate"]))
def test_global_traces_pass(seed, r, family):
    inst = generate(GenParams(n=1, depth=4, seed=seed, radius=r, measure="iid-positive", operator=family))
    f, g = random_pair_functions(inst, seed)
    res = trace_global(inst.operator, inst.pair.b1, inst.pair.b2, r, f, g)
    assert res.passed, [s.name for s in res.steps if not s.passed]
    scale = norm(f, inst.mu) * norm(g, inst.nu)
    assert abs(res.terms["total"]) <= res.total_constant * scale * (1 + 1e-9)
    assert operator_norm(inst.operator) <= res.total_constant * (1 + 1e-9)


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.integers(0, 2), st.sampled_from(["stopping", "table"]))
def test_local_traces_pass(seed, r, mode):
    inst = generate(GenParams(n=1, depth=4, seed=seed, radius=r, measure="iid-positive",
                              system=mode, operator="shift-candidate"))
    f, g = random_pair_functions(inst, seed)
    res = trace_local(inst.operator, inst.pair, r, f, g)
    assert res.passed, [s.name for s in res.steps if not s.passed]
    assert set(res.flags) == {"cut_uncut_fwd", "cut_uncut_adj", "csc_kappa"}


def test_local_reduces_to_global_on_constant_systems():
    for seed in range(5):
        inst = generate(GenParams(n=1, depth=4, seed=seed, radius=1, measure="iid-positive",
                                  operator="shift-candidate"))
        f, g = random_pair_functions(inst, seed)
        glob = trace_global(inst.operator, inst.pair.b1, inst.pair.b2, 1, f, g)
        loc = trace_local(inst.operator, inst.pair, 1, f, g)
        assert loc.passed and glob.passed
        for k, v in glob.terms.items():
            assert loc.terms[k] == pytest.approx(v, abs=1e-10)
        assert loc.step("S111.T2").lhs == pytest.approx(0, abs=1e-12)


def test_zero_operator_with_one_changed_cube():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    P = CubeId(2, (1,))
    b2 = AccretiveSystem.from_table(lat, {lat.root: np.ones(8), P: 2 * indicator(lat, P)}, 1, 2)
    pair = PairedSystem(AccretiveSystem.constant(np.ones(8), m), b2, m, m)
    f, g = np.random.default_rng(2).normal(size=(2, 8))
    res = trace_local(OperatorRep(lat, np.zeros((8, 8)), m, m), pair, 1, f, g)
    assert res.passed and res.step("S111.T2").lhs == 0


def test_carleson_sequence_examples():
    lat = Lattice(1, 3)
    m = Measure.uniform(lat)
    a, rep = carleson_aQ_global(OperatorRep(lat, np.zeros((8, 8)), m, m), np.ones(8), np.ones(8), 1)
    assert all(not v.any() for v in a.levels) and rep["pass"]
    lat2 = Lattice(1, 2)
    m2 = Measure.uniform(lat2)
    a, rep = carleson_aQ_global(OperatorRep(lat2, np.eye(4), m2, m2), np.ones(4), np.ones(4), 1)
    assert rep["pass"] and rep["carleson_constant"] <= 1
    for seed in range(5):
        inst = generate(GenParams(n=1, depth=5, seed=seed, radius=1, measure="iid-positive",
                                  operator="shift-candidate"))
        _, rep = carleson_aQ_global(inst.operator, inst.pair.b1, inst.pair.b2, 1)
        assert rep["pass"], [s["name"] for s in rep["steps"] if not s["pass"]]


def test_appendix_constant_system():
    lat = Lattice(2, 2)
    m = random_measure(lat, np.random.default_rng(3))
    f = np.random.default_rng(4).normal(size=16)
    res = trace_appendix(AccretiveSystem.constant(np.ones(16), m), m, f)
    assert res.passed
    assert res.terms["S3"] == 0 and res.terms["S4"] == 0 and res.terms["S5_2"] == 0
    assert res.terms["S5_1"] == pytest.approx(res.terms["dual"])


def test_appendix_constant_function_has_no_dual_differences():
    lat = Lattice(1, 2)
    m = Measure.uniform(lat)
    sys = AccretiveSystem.from_table(
        lat, {lat.root: np.ones(4), CubeId(1, (1,)): 3 * indicator(lat, CubeId(1, (1,)))}, 1, 3)
    res = trace_appendix(sys, m, np.full(4, 2.0))
    assert res.passed and res.terms["dual"] == pytest.approx(0, abs=1e-24)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.sampled_from([(1, 5), (2, 3)]), st.booleans())
def test_appendix_random_systems(seed, shape, stopping):
    rng = np.random.default_rng(seed)
    lat = Lattice(*shape)
    m = random_measure(lat, rng, lo=0.0)
    if stopping:
        sys, _ = random_stopping_system(m, 0.5, 2.0, seed)
    else:
        sys = random_table_system(lat, rng)
    f = rng.normal(size=lat.num_leaves)
    res = trace_appendix(sys, m, f)
    assert res.passed, [s.name for s in res.steps if not s.passed]
