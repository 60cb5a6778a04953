"""Step-by-step numerical audit of the Tb bound for one (T, b1, b2, f, g) instance.

Every step records a measured left side, a measured right side and the constant
that is claimed to relate them.  A step passes when lhs <= constant * rhs up to a
small absolute slack.  Identity steps store |a - b| against a natural scale.

The top cube of the decomposition is the root, so f = f1 + f2 with f2 = E_root f.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .accretive_system import (
    AccretiveSystem,
    PairedSystem,
    beta_bound,
    beta_sequence,
    defect_bound,
    defect_row,
    global_b,
    partition,
    sys_adjoint_norms_sq,
    sys_adjoint_ratios,
    sys_adjoint_row,
    sys_adjoint_rows,
    sys_dual_square_fn_bound,
    sys_level_expectations,
    sys_square_fn_bound,
)
from .carleson import CubeSequence, carleson_constant, usf_terms
from .lattice import Lattice
from .martingale import (
    dual_square_fn_bound,
    square_fn_bound,
    truncation_bound,
)
from .measure import Measure, _check
from .operators import (
    OperatorRep,
    TestingReport,
    WLReport,
    _images,
    adjoint,
    check_wl_global,
    check_wl_local,
    constant_pair,
    operator_norm,
    testing_global,
    testing_local,
)

SLACK = 1e-9
IDENTITY_RTOL = 1e-10
CUT_UNCUT_FLAG = 10.0


class TracePreconditionError(ValueError):
    """The operator is not well localized for the requested radius."""


@dataclass
class TraceStep:
    name: str
    lhs: float
    rhs: float
    constant: float
    formula: str
    passed: bool

    def to_json(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "constant": self.constant,
                "formula": self.formula, "pass": self.passed}


def _bound_holds(lhs: float, constant: float, rhs: float) -> bool:
    cap = constant * rhs if rhs != 0 else 0.0
    if np.isnan(lhs):
        return False
    return bool(lhs <= cap + SLACK * (1 + abs(cap)))


class Transcript:
    def __init__(self):
        self.steps: list[TraceStep] = []

    def bound(self, name: str, lhs: float, rhs: float, constant: float, formula: str) -> float:
        lhs, rhs, constant = float(lhs), float(rhs), float(constant)
        self.steps.append(TraceStep(name, lhs, rhs, constant, formula, _bound_holds(lhs, constant, rhs)))
        return lhs

    def identity(self, name: str, a: float, b: float, scale: float, formula: str) -> None:
        gap = float(abs(a - b))
        scale = float(scale)
        self.steps.append(TraceStep(name, gap, scale, IDENTITY_RTOL, formula, bool(gap <= IDENTITY_RTOL * scale)))

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.steps)

    def failed(self) -> list[str]:
        return [s.name for s in self.steps if not s.passed]

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.steps]


@dataclass
class TraceResult:
    mode: str
    radius: int
    steps: list[TraceStep]
    total_constant: float
    terms: dict[str, float]
    testing: TestingReport | None = None
    wl: WLReport | None = None
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.steps)

    def step(self, name: str) -> TraceStep:
        for s in self.steps:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_json(self) -> dict:
        out = {"mode": self.mode, "radius": self.radius, "pass": self.passed,
               "total_constant": self.total_constant, "terms": self.terms,
               "flags": self.flags, "steps": [s.to_json() for s in self.steps]}
        if self.testing is not None:
            out["testing"] = self.testing.to_json()
        if self.wl is not None:
            out["wl"] = self.wl.to_json()
        return out


# helpers ------------------------------------------------------------------

def _own(M: np.ndarray, lat: Lattice, gq: int, gx: int) -> np.ndarray:
    """From a (size_q, size_x) table keep the entries whose x-cube lies inside the row cube."""
    k = lat.arity ** (gx - gq)
    sq = lat.size(gq)
    return M.reshape(sq, sq, k)[np.arange(sq), np.arange(sq)]


def _ratios(sys: AccretiveSystem, m: Measure, f: np.ndarray, g: int) -> np.ndarray:
    """<f>_Q / <b_Q>_Q over generation g (zero on null cubes)."""
    ib = m.level_averages(sys.levels[g], g)
    af = m.level_averages(f, g)
    return np.divide(af, ib, out=np.zeros_like(af), where=m.masses[g] > 0)


def _nrm(v: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(max(np.dot(v * v, w), 0.0)))


def _sup_ratio(num: np.ndarray, den: np.ndarray) -> float:
    pos = den > 0
    out = float((num[pos] / den[pos]).max(initial=0.0))
    if np.any(~pos & (num > 0)):
        return np.inf
    return out


def _safe_sqrt(x: float) -> float:
    return float(np.sqrt(max(x, 0.0)))


@dataclass
class _Side:
    """One orientation of the bilinear form: K maps functions over mA into functions over mB."""

    K: np.ndarray
    A: AccretiveSystem
    mA: Measure
    B: AccretiveSystem
    mB: Measure
    f: np.ndarray
    g: np.ndarray
    test_a: float
    sq_b: float
    dual_b: float
    kappa: float = 1.0
    test_c: float = 0.0
    lam_a: float = 0.0      # sparsity of the A change set in mA
    lam_b_src: float = 0.0  # sparsity of the B change set in mA
    lam_b: float = 0.0      # sparsity of the B change set in mB


def _cut_rows(U: np.ndarray, lat: Lattice, h: int) -> np.ndarray:
    """Zero row i outside the i-th cube of generation h."""
    s = lat.size(h)
    keep = np.eye(s, dtype=bool)[:, :, None]
    return np.where(keep, U.reshape(s, s, lat.block(h)), 0.0).reshape(s, -1)


def _far_chain(tr: Transcript, sd: _Side, r: int, p: str, local: bool, scale: float,
               s11: float) -> tuple[float, float, float]:
    """Audit the pairs where the second cube is more than r generations below the first."""
    lat = sd.A.lattice
    D = lat.depth
    v = sd.mB.weights
    nf, ng = _nrm(sd.f, sd.mA.weights), _nrm(sd.g, v)
    Ef = sys_level_expectations(sd.A, sd.mA, sd.f)
    rows_f = np.diff(Ef, axis=0)
    rows_g = np.diff(sys_level_expectations(sd.B, sd.mB, sd.g), axis=0)

    off = 0.0
    for gq in range(max(D - r - 1, 0)):
        TX = _images(sd.K, rows_f[gq], lat, gq)
        for gr in range(gq + r + 1, D):
            P = np.abs(lat.agg(TX * (rows_g[gr] * v)[None, :], gr))
            off += P.sum() - _own(P, lat, gq, gr).sum()
    tr.identity(f"{p}.wl", off, 0.0, scale, "far_pairs_outside_vanish")

    s111 = 0.0
    for gq in range(1, D - r):
        gr = gq + r
        U = _images(sd.K, Ef[gq], lat, gq)
        s111 += _own(lat.agg(U * (rows_g[gr] * v)[None, :], gr), lat, gq, gr).sum()
    tail = rows_g[r + 1:].sum(axis=0)
    top = sd.K @ Ef[0]
    s112 = -float(np.dot(top * tail, v))
    tr.identity(f"{p}.collapse", s11, s111 + s112, scale, "telescoping_far_sum")

    # the root term
    d_a = sd.A.delta
    k112 = _safe_sqrt(sd.test_a) / d_a * truncation_bound(sd.B.delta, sd.B.c)
    n_top, n_tail = _nrm(top, v), _nrm(tail, v)
    tr.bound(f"{p}2.cs", abs(s112), n_top * n_tail, 1.0, "cauchy_schwarz")
    tr.bound(f"{p}2.tail", n_tail, ng, truncation_bound(sd.B.delta, sd.B.c), "truncation_bound")
    tr.bound(f"{p}2.top", n_top, nf, _safe_sqrt(sd.test_a) / d_a, "testing_a_on_root")
    tr.bound(f"{p}2", abs(s112), nf * ng, k112, "far_root_term")

    # the collapsed sum
    a = CubeSequence.zeros(lat)
    bseq = CubeSequence.zeros(lat)
    comp = {}
    t1s = t2s = t1 = t2 = 0.0
    phi_sq = 0.0
    sum_dg = 0.0
    masks_b = sd.B.change_masks()
    avg_f = [sd.mA.level_averages(sd.f, h) for h in range(D + 1)]
    for gq in range(1, D - r):
        gr, gp = gq + r, gq + r + 1
        x = _ratios(sd.A, sd.mA, sd.f, gq)
        U = _images(sd.K, sd.A.levels[gq], lat, gq)
        adj = sys_adjoint_row(sd.B, sd.mB, U, gr)
        nsq = _own(lat.agg(adj * adj * v, gr), lat, gq, gr)
        pr = _own(lat.agg(adj * rows_g[gr] * v, gr), lat, gq, gr)
        a.levels[gq] = nsq.sum(axis=1)
        comp[gr] = nsq.reshape(-1)
        t1s += float((x[:, None] * pr).sum())
        t1 += float((np.abs(avg_f[gq])[:, None] * np.abs(pr)).sum())
        sum_dg += float(np.dot(rows_g[gr] ** 2, v))
        phi = defect_row(sd.B, sd.mB, sd.g, gp)
        phi_sq += float(np.dot(phi * phi, v))
        pp = _own(lat.agg(U * phi * v, gp), lat, gq, gp)
        t2s += float((x[:, None] * pp).sum())
        t2 += float((np.abs(avg_f[gq])[:, None] * np.abs(pp)).sum())
        chosen = masks_b[gp].reshape(lat.size(gq), -1)
        bseq.levels[gq] = np.where(chosen, _own(lat.agg(U * U * v, gp), lat, gq, gp), 0.0).sum(axis=1)
    tr.identity(f"{p}1.split", s111, t1s + t2s, scale, "defect_split")
    tr.bound(f"{p}1.abs", abs(s111), t1 + t2, 1.0 / d_a, "accretive_average")

    sum_a = sum(float(np.dot(a.levels[h], avg_f[h] ** 2)) for h in range(D + 1))
    lam_a = carleson_constant(a, sd.mA)
    tr.bound(f"{p}1.T1.cs", t1, _safe_sqrt(sum_a) * _safe_sqrt(sum_dg), 1.0, "cauchy_schwarz")
    tr.bound(f"{p}1.a.embedding", sum_a, nf**2, 4 * lam_a, "carleson_embedding")
    tr.bound(f"{p}1.sq", sum_dg, ng**2, sd.sq_b, "square_function")

    if local:
        a_bound = _local_a_steps(tr, sd, r, f"{p}1", a)
    else:
        a_bound = _global_a_steps(tr, sd, r, f"{p}1", comp)
    tr.bound(f"{p}1.a.carleson", lam_a, 1.0, a_bound, "carleson_of_a")
    k_t1 = _safe_sqrt(4 * a_bound * sd.sq_b)
    tr.bound(f"{p}1.T1", t1, nf * ng, k_t1, "first_half")

    k_t2 = 0.0
    if local:
        k_t2 = _defect_steps(tr, sd, r, f"{p}1", bseq, t2, phi_sq, avg_f)
    k111 = (k_t1 + k_t2) / d_a
    tr.bound(f"{p}1", abs(s111), nf * ng, k111, "far_collapsed_sum")
    return s111, s112, k111 + k112


def _global_a_steps(tr: Transcript, sd: _Side, r: int, p: str, comp: dict) -> float:
    """Localization of every a_Q to a larger cube H, then the dual square function there."""
    lat = sd.A.lattice
    D = lat.depth
    v = sd.mB.weights
    gap = 0.0
    dual_num, dual_den = [], []
    for h in range(D):
        U = _cut_rows(_images(sd.K, sd.A.levels[h], lat, h), lat, h)
        norms = sys_adjoint_norms_sq(sd.B, sd.mB, U)
        dual_num.append(sum(n.sum(axis=1) for n in norms))
        dual_den.append((U * U) @ v)
        for gr in range(max(h, 1) + r, D):
            loc = _own(norms[gr], lat, h, gr).reshape(-1)
            gap = max(gap, float(np.abs(np.sqrt(loc) - np.sqrt(comp[gr])).max(initial=0.0)))
    ref = operator_norm_of(sd.K, sd.mA, sd.mB) * sd.A.c * _safe_sqrt(sd.mA.masses[0][0])
    tr.identity(f"{p}.a.localize", gap, 0.0, max(ref, np.finfo(float).tiny), "localization")
    ratio = _sup_ratio(np.concatenate(dual_num), np.concatenate(dual_den))
    tr.bound(f"{p}.a.dual", ratio, 1.0, sd.dual_b, "dual_square_function")
    return sd.dual_b * sd.test_a


def _local_a_steps(tr: Transcript, sd: _Side, r: int, p: str, a: CubeSequence) -> float:
    """Split the Carleson sums of a over the stopping cubes of the source system."""
    lat = sd.A.lattice
    D = lat.depth
    v = sd.mB.weights
    cont = partition(lat, sd.A.change_set()).container
    kappa = max(sd.kappa, 1.0)
    same, other, mass, dual_num, dual_den = [], [], [], [], []
    for h in range(D + 1):
        s_same = np.zeros(lat.size(h))
        s_other = np.zeros(lat.size(h))
        for gq in range(h, D + 1):
            match = cont[gq] == np.repeat(cont[h], lat.arity ** (gq - h))
            s_same += np.where(match, a.levels[gq], 0.0).reshape(lat.size(h), -1).sum(axis=1)
            s_other += np.where(match, 0.0, a.levels[gq]).reshape(lat.size(h), -1).sum(axis=1)
        same.append(s_same)
        other.append(s_other)
        mass.append(sd.mA.masses[h])
        if h < D:
            U = _images(sd.K, sd.A.levels[h], lat, h)
            dual_num.append(sum(n.sum(axis=1) for n in sys_adjoint_norms_sq(sd.B, sd.mB, U)))
            dual_den.append((U * U) @ v)
    mass = np.concatenate(mass)
    base = kappa * sd.dual_b * sd.test_a
    tr.bound(f"{p}.dual", _sup_ratio(np.concatenate(dual_num), np.concatenate(dual_den)), 1.0,
             sd.dual_b, "dual_square_function")
    tr.bound(f"{p}.T11", _sup_ratio(np.concatenate(same), mass), 1.0, base, "same_stopping_cube")
    tr.bound(f"{p}.T12", _sup_ratio(np.concatenate(other), mass), 1.0, base * sd.lam_a,
             "inner_stopping_cubes")
    return base * (1.0 + sd.lam_a)


def _defect_steps(tr: Transcript, sd: _Side, r: int, p: str, bseq: CubeSequence, t2: float,
                  phi_sq: float, avg_f: list[np.ndarray]) -> float:
    """The part of the collapsed sum carried by the changed children of the target system."""
    lat = sd.A.lattice
    D = lat.depth
    nf, ng = _nrm(sd.f, sd.mA.weights), _nrm(sd.g, sd.mB.weights)
    masks_b = sd.B.change_masks()
    cseq = CubeSequence.zeros(lat)
    for gr in range(r + 1, D):
        cseq.levels[gr] = np.where(masks_b[gr + 1], sd.mB.masses[gr + 1], 0.0).reshape(lat.size(gr), -1).sum(axis=1)
    sum_b = sum(float(np.dot(bseq.levels[h], avg_f[h] ** 2)) for h in range(D + 1))
    g_emb = sum(float(np.dot(cseq.levels[h], sd.mB.level_averages(sd.g, h) ** 2)) for h in range(D + 1))
    q = defect_bound(sd.B)
    lam_c = carleson_constant(cseq, sd.mB)
    lam_bq = carleson_constant(bseq, sd.mA)
    tr.bound(f"{p}.T2.cs", t2, _safe_sqrt(sum_b) * _safe_sqrt(phi_sq), 1.0, "cauchy_schwarz")
    tr.bound(f"{p}.phi", phi_sq, g_emb, q**2, "defect_bound")
    tr.bound(f"{p}.c.carleson", lam_c, 1.0, sd.lam_b, "sparsity")
    tr.bound(f"{p}.c.embedding", g_emb, ng**2, 4 * lam_c, "carleson_embedding")
    tr.bound(f"{p}.b.carleson", lam_bq, 1.0, sd.test_c * sd.lam_b_src, "testing_c")
    tr.bound(f"{p}.b.embedding", sum_b, nf**2, 4 * lam_bq, "carleson_embedding")
    k_t2 = 4 * q * _safe_sqrt(sd.test_c * sd.lam_b_src * sd.lam_b)
    tr.bound(f"{p}.T2", t2, nf * ng, k_t2, "second_half")
    return k_t2


def operator_norm_of(K: np.ndarray, mA: Measure, mB: Measure) -> float:
    return operator_norm(OperatorRep(mA.lattice, K, mA, mB))


def _near_chain(tr: Transcript, name: str, K: np.ndarray, rows_f: np.ndarray, rows_g: np.ndarray,
                mu: Measure, nu: Measure, r: int, window: tuple[int, int], tb: float,
                counts: tuple[float, float], scale: float) -> tuple[float, float]:
    """Pairs whose generations differ by an amount in ``window``; only cubes within r generations
    of a common ancestor survive, and each surviving pair is bounded by the compression constant."""
    lat = mu.lattice
    D = lat.depth
    w, v = mu.weights, nu.weights
    norms_f = [np.sqrt(lat.agg(rows_f[h] ** 2 * w, h)) for h in range(D)]
    norms_g = [np.sqrt(lat.agg(rows_g[h] ** 2 * v, h)) for h in range(D)]
    per_q = [np.zeros(lat.size(h), dtype=np.int64) for h in range(D)]
    per_r = [np.zeros(lat.size(h), dtype=np.int64) for h in range(D)]
    used_q = [np.zeros(lat.size(h), dtype=bool) for h in range(D)]
    used_r = [np.zeros(lat.size(h), dtype=bool) for h in range(D)]
    outside = inside = bound = 0.0
    lo, hi = window
    for gq in range(D):
        TX = None
        for gr in range(max(gq + lo, 0), min(gq + hi, D - 1) + 1):
            if TX is None:
                TX = _images(K, rows_f[gq], lat, gq)
            P = np.abs(lat.agg(TX * (rows_g[gr] * v)[None, :], gr))
            top = max(min(gq, gr) - r, 0)
            aq = np.arange(lat.size(gq)) // lat.arity ** (gq - top)
            ar = np.arange(lat.size(gr)) // lat.arity ** (gr - top)
            ok = aq[:, None] == ar[None, :]
            outside += P[~ok].sum()
            inside += P[ok].sum()
            bound += (norms_f[gq][:, None] * norms_g[gr][None, :])[ok].sum()
            per_q[gq] += ok.sum(axis=1)
            per_r[gr] += ok.sum(axis=0)
            used_q[gq][:] = True
            used_r[gr][:] = True
    sum_f = sum(float(norms_f[h] @ norms_f[h]) for h in range(D) if used_q[h].any())
    sum_g = sum(float(norms_g[h] @ norms_g[h]) for h in range(D) if used_r[h].any())
    m_enum = max((int(a.max()) for a in per_q if a.size), default=0)
    n_enum = max((int(a.max()) for a in per_r if a.size), default=0)
    m_formula, n_formula = counts
    tr.identity(f"{name}.wl", outside, 0.0, scale, "near_pairs_outside_vanish")
    tr.bound(f"{name}.pair", inside, bound, tb, "compression_testing")
    tr.bound(f"{name}.cs", bound, _safe_sqrt(sum_f) * _safe_sqrt(sum_g), np.sqrt(m_enum * n_enum),
             "cauchy_schwarz_counted")
    tr.bound(f"{name}.count_first", m_enum, 1.0, m_formula, "pair_count")
    tr.bound(f"{name}.count_second", n_enum, 1.0, n_formula, "pair_count")
    return sum_f, sum_g


def _run(T: OperatorRep, pair: PairedSystem, r: int, f, g, local: bool,
         tst: TestingReport, wl: WLReport) -> TraceResult:
    lat = T.lattice
    D, n = lat.depth, lat.n
    mu, nu = pair.mu, pair.nu
    w, v = mu.weights, nu.weights
    f = _check(lat, f)
    g = _check(lat, g)
    b1, b2 = pair.b1, pair.b2
    d1, c1, d2, c2 = b1.delta, b1.c, b2.delta, b2.c
    K = T.kernel
    Ks = adjoint(T).kernel
    tr = Transcript()
    nf, ng = _nrm(f, w), _nrm(g, v)
    t_norm = operator_norm(T)
    scale = max(t_norm * nf * ng, np.finfo(float).tiny)

    if local:
        sp = pair.sparsity()
        kq1 = sys_square_fn_bound(d1, c1, sp["lam1_mu"])
        kd1 = sys_dual_square_fn_bound(d1, c1, sp["lam1_mu"])
        kq2 = sys_square_fn_bound(d2, c2, sp["lam2_nu"])
        kd2 = sys_dual_square_fn_bound(d2, c2, sp["lam2_nu"])
        tb = tst.t_b
    else:
        sp = {"lam1_mu": 0.0, "lam1_nu": 0.0, "lam2_mu": 0.0, "lam2_nu": 0.0}
        kq1, kd1 = square_fn_bound(d1, c1), dual_square_fn_bound(d1, c1)
        kq2, kd2 = square_fn_bound(d2, c2), dual_square_fn_bound(d2, c2)
        tb = tst.t_b_delta
    af, aa = tst.t_a_fwd, tst.t_a_adj

    Ef = sys_level_expectations(b1, mu, f)
    Eg = sys_level_expectations(b2, nu, g)
    rows_f, rows_g = np.diff(Ef, axis=0), np.diff(Eg, axis=0)
    f1, f2 = rows_f.sum(axis=0), Ef[0]
    g1, g2 = rows_g.sum(axis=0), Eg[0]
    Tf1, Tf2 = K @ f1, K @ f2
    total = float(np.dot(K @ f, g * v))
    s1 = float(np.dot(Tf1 * g1, v))
    s2 = float(np.dot(Tf2 * g1, v))
    s3 = float(np.dot(Tf1 * g2, v))
    s4 = float(np.dot(Tf2 * g2, v))
    tr.identity("split", total, s1 + s2 + s3 + s4, scale, "top_split")

    # the terms touching the root expectation
    rest_f, rest_g = truncation_bound(d1, c1), truncation_bound(d2, c2)
    k2 = _safe_sqrt(af) / d1 * rest_g
    tr.bound("S2.cs", abs(s2), _nrm(Tf2, v) * _nrm(g1, v), 1.0, "cauchy_schwarz")
    tr.bound("S2.top", _nrm(Tf2, v), nf, _safe_sqrt(af) / d1, "testing_a_on_root")
    tr.bound("S2.rest", _nrm(g1, v), ng, rest_g, "truncation_bound")
    tr.bound("S2", abs(s2), nf * ng, k2, "root_times_differences")
    Tsg2 = Ks @ g2
    k3 = _safe_sqrt(aa) / d2 * rest_f
    tr.bound("S3.cs", abs(s3), _nrm(Tsg2, w) * _nrm(f1, w), 1.0, "cauchy_schwarz")
    tr.bound("S3.top", _nrm(Tsg2, w), ng, _safe_sqrt(aa) / d2, "testing_a_on_root")
    tr.bound("S3.rest", _nrm(f1, w), nf, rest_f, "truncation_bound")
    tr.bound("S3", abs(s3), nf * ng, k3, "root_times_differences")
    if local:
        k4 = _safe_sqrt(af) * c2 / (d1 * d2)
        tr.bound("S4.cs", abs(s4), _nrm(Tf2, v) * _nrm(g2, v), 1.0, "cauchy_schwarz")
    else:
        k4 = tst.t_b * c1 * c2 / (d1 * d2)
        bb1, bb2 = b1.levels[0], b2.levels[0]
        pr = abs(float(np.dot(K @ bb1, bb2 * v)))
        tr.bound("S4.pair", pr, _nrm(bb1, w) * _nrm(bb2, v), tst.t_b, "testing_b")
    tr.bound("S4", abs(s4), nf * ng, k4, "root_times_root")

    # generation windows of the difference part
    TF = rows_f @ K.T
    PG = TF @ (rows_g * v).T if D else np.zeros((0, 0))
    gap = np.subtract.outer(np.arange(D), np.arange(D)).T  # gap[gq, gr] = gr - gq
    s11 = float(PG[gap > r].sum())
    s12 = float(PG[gap < -r].sum())
    s13 = float(PG[(gap >= 0) & (gap <= r)].sum())
    s14 = float(PG[(gap < 0) & (gap >= -r)].sum())
    tr.identity("S1.split", s1, s11 + s12 + s13 + s14, scale, "generation_windows")

    counts13 = (float(sum(2 ** (n * (r + k)) for k in range(r + 1))), float((r + 1) * 2 ** (n * r)))
    counts14 = (float(r * 2 ** (n * r)), float(sum(2 ** (n * (r + k)) for k in range(1, r + 1))))
    ks = {}
    for name, window, counts, value in (("S13", (0, r), counts13, s13), ("S14", (-r, -1), counts14, s14)):
        sum_f, sum_g = _near_chain(tr, name, K, rows_f, rows_g, mu, nu, r, window, tb, counts, scale)
        tr.bound(f"{name}.sq_first", sum_f, nf**2, kq1, "square_function")
        tr.bound(f"{name}.sq_second", sum_g, ng**2, kq2, "square_function")
        ks[name] = tb * _safe_sqrt(counts[0] * counts[1] * kq1 * kq2)
        tr.bound(name, abs(value), nf * ng, ks[name], "near_pairs")

    kap_f = wl.forward.csc_kappa if local else 1.0
    kap_a = wl.adjoint.csc_kappa if local else 1.0
    fwd = _Side(K, b1, mu, b2, nu, f, g, af, kq2, kd2, kap_f, tst.t_c_fwd,
                sp["lam1_mu"], sp["lam2_mu"], sp["lam2_nu"])
    adj = _Side(Ks, b2, nu, b1, mu, g, f, aa, kq1, kd1, kap_a, tst.t_c_adj,
                sp["lam2_nu"], sp["lam1_nu"], sp["lam1_mu"])
    s111, s112, ks["S11"] = _far_chain(tr, fwd, r, "S11", local, scale, s11)
    s121, s122, ks["S12"] = _far_chain(tr, adj, r, "S12", local, scale, s12)
    tr.bound("S11", abs(s11), nf * ng, ks["S11"], "far_below")
    tr.bound("S12", abs(s12), nf * ng, ks["S12"], "far_above")

    k_total = k2 + k3 + k4 + sum(ks.values())
    tr.bound("total.bilinear", abs(total), nf * ng, k_total, "assembled_constant")
    tr.bound("total.norm", t_norm, 1.0, k_total, "assembled_constant")

    terms = {"total": total, "S1": s1, "S2": s2, "S3": s3, "S4": s4, "S11": s11, "S12": s12,
             "S13": s13, "S14": s14, "S111": s111, "S112": s112, "S121": s121, "S122": s122}
    flags = {}
    if local:
        for side, cut, uncut in (("fwd", tst.t_a_cut_fwd, tst.t_a_fwd), ("adj", tst.t_a_cut_adj, tst.t_a_adj)):
            ratio = uncut / cut if cut > 0 else (np.inf if uncut > 0 else 1.0)
            flags[f"cut_uncut_{side}"] = {"ratio": ratio, "flagged": bool(ratio > CUT_UNCUT_FLAG)}
        flags["csc_kappa"] = {"fwd": kap_f, "adj": kap_a}
    return TraceResult("local" if local else "global", r, tr.steps, k_total, terms, tst, wl, flags)


def trace_global(T: OperatorRep, b1, b2, r: int, f, g) -> TraceResult:
    """Audit of the global bound for accretive functions b1 (over mu) and b2 (over nu)."""
    pair = constant_pair(T, b1, b2)
    wl = check_wl_global(T, pair.b1, pair.b2, r)
    if not wl.passed:
        raise TracePreconditionError(f"operator is not well localized with radius {r} "
                                     f"(violation {wl.max_violation:.3g})")
    tst = testing_global(T, pair.b1, pair.b2, r, wl=wl)
    return _run(T, pair, r, f, g, False, tst, wl)


def trace_local(T: OperatorRep, pair: PairedSystem, r: int, f, g) -> TraceResult:
    """Audit of the local bound for a pair of accretive systems."""
    wl = check_wl_local(T, pair, r)
    if not wl.passed:
        raise TracePreconditionError(f"operator is not well localized with radius {r} "
                                     f"(violation {wl.max_violation:.3g})")
    tst = testing_local(T, pair, r, wl=wl)
    return _run(T, pair, r, f, g, True, tst, wl)


def carleson_aQ_global(T: OperatorRep, b1, b2, r: int) -> tuple[CubeSequence, dict]:
    """The sequence sum over R in ch^r(Q) of ||(D_R)^* T(1_Q b1)||^2 and its Carleson audit."""
    pair = constant_pair(T, b1, b2)
    lat = T.lattice
    D = lat.depth
    v = T.nu.weights
    a = CubeSequence.zeros(lat)
    comp = {}
    for gq in range(1, D - r):
        gr = gq + r
        U = _images(T.kernel, pair.b1.levels[gq], lat, gq)
        adj = sys_adjoint_row(pair.b2, T.nu, U, gr)
        nsq = _own(lat.agg(adj * adj * v, gr), lat, gq, gr)
        a.levels[gq] = nsq.sum(axis=1)
        comp[gr] = nsq.reshape(-1)
    tst = testing_global(T, pair.b1, pair.b2, r)
    kd2 = dual_square_fn_bound(pair.b2.delta, pair.b2.c)
    sd = _Side(T.kernel, pair.b1, T.mu, pair.b2, T.nu, np.zeros(lat.num_leaves), np.zeros(lat.num_leaves),
               tst.t_a_fwd, 0.0, kd2)
    tr = Transcript()
    bound = _global_a_steps(tr, sd, r, "carleson", comp)
    lam = carleson_constant(a, T.mu)
    tr.bound("a.carleson", lam, 1.0, bound, "carleson_of_a")
    return a, {"carleson_constant": lam, "bound": bound, "pass": tr.passed, "steps": tr.to_json()}


def trace_appendix(sys: AccretiveSystem, m: Measure, f) -> TraceResult:
    """Audit of the dual square function bound for one accretive system and one f."""
    from .carleson import sparsity_check

    lat = sys.lattice
    D = lat.depth
    ar = lat.arity
    w = m.weights
    f = _check(lat, f)
    tr = Transcript()
    nf = _nrm(f, w)
    delta, c = sys.delta, sys.c
    S = sys.change_set()
    lam = sparsity_check(S, m)
    masks = sys.change_masks()
    cont = partition(lat, S).container
    tiny = np.finfo(float).tiny

    own = [m.level_averages(sys.levels[h] * f, h) for h in range(D + 1)]
    ib = [m.level_averages(sys.levels[h], h) for h in range(D + 1)]
    absf = [m.level_averages(np.abs(f), h) for h in range(D + 1)]
    y = sys_adjoint_ratios(sys, m, f)
    dual = sum(float(((y[h] - np.repeat(y[h - 1], ar)) ** 2) @ m.masses[h]) for h in range(1, D + 1))
    dual_rows = float((sys_adjoint_rows(sys, m, f) ** 2 @ w).sum()) if D else 0.0
    tr.identity("dual.identity", dual, dual_rows, max(c**2 / delta**2 * nf**2, tiny), "adjoint_difference_norms")

    s3 = s4 = s5_1 = s5_2 = e3 = e4 = 0.0
    beta = beta_sequence(sys, m)
    gb = global_b(sys)
    gbf = gb * f
    s5_1_global = 0.0
    for h in range(1, D + 1):
        par = m.level_averages(sys.levels[h - 1] * f, h)
        mass = m.masses[h]
        s3 += float(np.where(masks[h], own[h] ** 2 + par**2, 0.0) @ mass)
        e3 += float(np.where(masks[h], absf[h] ** 2, 0.0) @ mass)
        osc = (ib[h] - np.repeat(ib[h - 1], ar)) ** 2
        s4 += float(np.where(masks[h], 0.0, own[h] ** 2 * osc) @ mass)
        e4 += float(absf[h] ** 2 @ beta.levels[h])
        t5 = (np.repeat(own[h - 1], ar) - par) ** 2 * mass
        in_c = np.repeat(cont[h - 1], ar) < 0
        s5_1 += float(t5[in_c].sum())
        s5_2 += float(t5[~in_c].sum())
        tg = (np.repeat(m.level_averages(gbf, h - 1), ar) - m.level_averages(gbf, h)) ** 2 * mass
        s5_1_global += float(tg[in_c].sum())
    split = 4 / delta**2 * s3 + 2 / delta**4 * s4 + 2 / delta**2 * (s5_1 + s5_2)
    tr.bound("dual.split", dual, split, 1.0, "insert_parent_average")

    tr.bound("S3.avg", s3, e3, 2 * c**2, "bounded_b")
    tr.bound("S3.embedding", e3, nf**2, 4 * lam, "sparse_embedding")
    tr.bound("S3", s3, nf**2, 8 * c**2 * lam, "changed_cubes")

    lam_beta = carleson_constant(beta, m)
    tr.bound("beta.carleson", lam_beta, 1.0, beta_bound(c, lam), "oscillation_carleson")
    tr.bound("S4.avg", s4, e4, c**2, "bounded_b")
    tr.bound("S4.embedding", e4, nf**2, 4 * lam_beta, "carleson_embedding")
    tr.bound("S4", s4, nf**2, 4 * c**2 * beta_bound(c, lam), "oscillation_of_b")

    usf_gbf = float(sum(t.sum() for t in usf_terms(gbf, m)))
    tr.identity("S5.1.global", s5_1, s5_1_global, max(c**2 * nf**2, tiny), "global_b_on_free_cubes")
    tr.bound("S5.1.usf", s5_1, usf_gbf, 1.0, "partial_sum")
    tr.bound("S5.1.usf_bound", usf_gbf, float((gbf**2) @ w), 1.0, "unweighted_square_function")
    tr.bound("S5.1", s5_1, nf**2, c**2, "free_cubes")

    # every stopping cube P: b_P f agrees in average with u_P + v_P on the cubes it governs
    cover = np.zeros(lat.num_leaves)
    gap = s5_2_parts = usf_parts = u_sq = v_sq = 0.0
    for P in S:
        sl = lat.leaf_slice(P)
        bpf = np.zeros(lat.num_leaves)
        bpf[sl] = sys.levels[P.g][sl] * f[sl]
        free = np.zeros(lat.num_leaves, dtype=bool)
        free[sl] = True
        vp = np.zeros(lat.num_leaves)
        for Q in lat.cubes():
            if Q.g <= P.g or not lat.contains(P, Q) or not masks[Q.g][lat.index(Q)]:
                continue
            if cont[Q.g - 1][lat.index(Q) // ar] != P.g:
                continue
            qs = lat.leaf_slice(Q)
            free[qs] = False
            mq = m.mass(Q)
            vp[qs] = float(bpf[qs] @ w[qs]) / mq if mq > 0 else 0.0
        up = np.where(free, bpf, 0.0)
        wp = up + vp
        cover += free
        u_sq += float(up**2 @ w)
        v_sq += float(vp**2 @ w)
        usf_parts += float(sum(t.sum() for t in usf_terms(wp, m)))
        for h in range(P.g + 1, D + 1):
            governed = np.repeat(cont[h - 1], ar) == P.g
            start, stop = lat.index(P) * ar ** (h - P.g), (lat.index(P) + 1) * ar ** (h - P.g)
            inside = np.zeros(lat.size(h), dtype=bool)
            inside[start:stop] = True
            sel = governed & inside
            if not sel.any():
                continue
            aw = [m.level_averages(wp, h - 1), m.level_averages(wp, h)]
            ab = [m.level_averages(bpf, h - 1), m.level_averages(bpf, h)]
            gap = max(gap, float(np.abs(np.repeat(aw[0] - ab[0], ar)[sel]).max()),
                      float(np.abs((aw[1] - ab[1])[sel]).max()))
            s5_2_parts += float(((np.repeat(aw[0], ar) - aw[1]) ** 2 * m.masses[h])[sel].sum())
    fmax = float(np.abs(f[w > 0]).max(initial=0.0))
    tr.identity("S5.2.averages", gap, 0.0, max(c * fmax, tiny), "stopping_decomposition")
    tr.identity("S5.2.decomp", s5_2, s5_2_parts, max(c**2 * nf**2, tiny), "stopping_decomposition")
    tr.bound("S5.2.disjoint", float(cover.max(initial=0.0)), 1.0, 1.0, "disjoint_supports")
    tr.bound("S5.2.usf", s5_2_parts, usf_parts, 1.0, "partial_sum")
    tr.bound("S5.2.usf_bound", usf_parts, u_sq + v_sq, 1.0, "unweighted_square_function")
    tr.bound("S5.2.u", u_sq, nf**2, c**2, "disjoint_supports")
    tr.bound("S5.2.v", v_sq, e3, c**2, "bounded_b")
    tr.bound("S5.2", s5_2, nf**2, c**2 * (1 + 4 * lam), "stopping_cubes")

    k = sys_dual_square_fn_bound(delta, c, lam)
    tr.bound("dual.total", dual, nf**2, k, "assembled_constant")
    terms = {"dual": dual, "S3": s3, "S4": s4, "S5_1": s5_1, "S5_2": s5_2, "sparsity": lam}
    return TraceResult("appendix", 0, tr.steps, k, terms)
