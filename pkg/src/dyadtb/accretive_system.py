"""Sparse accretive systems: one test function per cube, changing only on a sparse set.

A system is stored as a ``(depth + 1, num_leaves)`` array ``levels`` with
``b_Q = levels[g] * 1_Q`` for every cube Q of generation g.  Support inside Q is
therefore automatic, and two cubes of the same generation never interact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .carleson import CubeSequence, rayleigh_sup, sparsity_check
from .lattice import CubeId, DepthError, Lattice
from .martingale import Decomposition, NotAccretiveError, pairing_transpose
from .measure import Measure, _check, norm

CHANGE_TOL = 1e-12


class StoppingInputError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass(eq=False)
class AccretiveSystem:
    lattice: Lattice
    levels: np.ndarray
    delta: float
    c: float
    # generation of the stopping cube each cube inherited its function from
    provenance: list[np.ndarray] | None = None
    support_violations: list[CubeId] = field(default_factory=list)

    def __post_init__(self):
        lat = self.lattice
        self.levels = np.asarray(self.levels, dtype=float)
        if self.levels.shape != (lat.depth + 1, lat.num_leaves):
            raise ValueError(f"levels must have shape {(lat.depth + 1, lat.num_leaves)}")
        if not np.all(np.isfinite(self.levels)):
            raise ValueError("system values must be finite")

    # construction ----------------------------------------------------------
    @classmethod
    def constant(cls, b, m: Measure, delta: float | None = None, c: float | None = None) -> "AccretiveSystem":
        """b_Q = b 1_Q; missing constants are measured from b."""
        from .martingale import check_accretive

        b = _check(m.lattice, b)
        if delta is None or c is None:
            acc = check_accretive(b, m)
            if not acc:
                raise NotAccretiveError(f"b cancels on {acc.offending[:5]}")
            delta = acc.delta if delta is None else delta
            c = acc.c_inf if c is None else c
        return cls(m.lattice, np.tile(b, (m.lattice.depth + 1, 1)), float(delta), float(c))

    @classmethod
    def from_table(cls, lattice: Lattice, table: dict[CubeId, np.ndarray], delta: float, c: float) -> "AccretiveSystem":
        """Cubes absent from ``table`` inherit b_Q = b_parent 1_Q; the root must be given."""
        if lattice.root not in table:
            raise ValueError("a table system needs an entry for the root")
        levels = np.zeros((lattice.depth + 1, lattice.num_leaves))
        violations = []
        for g in range(lattice.depth + 1):
            if g > 0:
                levels[g] = levels[g - 1]
            for Q, vals in table.items():
                if Q.g != g:
                    continue
                vals = _check(lattice, vals)
                sl = lattice.leaf_slice(Q)
                outside = vals.copy()
                outside[sl] = 0.0
                if np.any(outside != 0):
                    violations.append(Q)
                levels[g, sl] = vals[sl]
        return cls(lattice, levels, float(delta), float(c), support_violations=sorted(violations))

    @classmethod
    def from_callable(cls, lattice: Lattice, fn: Callable[[CubeId], np.ndarray], delta: float, c: float) -> "AccretiveSystem":
        return cls.from_table(lattice, {Q: fn(Q) for Q in lattice.cubes()}, delta, c)

    # access ------------------------------------------------------------------
    def b(self, Q: CubeId) -> np.ndarray:
        out = np.zeros(self.lattice.num_leaves)
        sl = self.lattice.leaf_slice(Q)
        out[sl] = self.levels[Q.g, sl]
        return out

    def change_masks(self) -> list[np.ndarray]:
        """Per generation, which cubes satisfy b_Q != b_parent 1_Q (never the root)."""
        lat = self.lattice
        masks = [np.zeros(1, dtype=bool)]
        for g in range(1, lat.depth + 1):
            d = np.abs(self.levels[g] - self.levels[g - 1]).reshape(lat.size(g), lat.block(g))
            masks.append(d.max(axis=1) > CHANGE_TOL)
        return masks

    def change_set(self) -> list[CubeId]:
        lat = self.lattice
        return sorted(
            lat.cube(g, int(i)) for g, mk in enumerate(self.change_masks()) for i in np.flatnonzero(mk)
        )

    # serialization -----------------------------------------------------------
    def to_json(self) -> dict:
        lat = self.lattice
        S = self.change_set()
        if not S:
            b = {"mode": "constant", "values": lat.to_lex(self.levels[0]).tolist()}
        else:
            b = {
                "mode": "table",
                "entries": [
                    {"cube": Q.to_json(), "values": lat.to_lex(self.b(Q)).tolist()}
                    for Q in [lat.root] + S
                ],
            }
        out = {"lattice": lat.to_json(), "delta": self.delta, "c": self.c, "b": b}
        if self.provenance is not None:
            out["provenance"] = [
                {"cube": Q.to_json(), "assigned": lat.ancestor(Q, Q.g - int(self.provenance[Q.g][lat.index(Q)])).to_json()}
                for Q in lat.cubes()
            ]
        return out

    @classmethod
    def from_json(cls, obj: dict, lattice: Lattice | None = None) -> "AccretiveSystem":
        lat = lattice or Lattice.from_json(obj["lattice"])
        b = obj["b"]
        if b["mode"] == "constant":
            vals = lat.from_lex(b["values"])
            sys = cls(lat, np.tile(vals, (lat.depth + 1, 1)), float(obj["delta"]), float(obj["c"]))
        elif b["mode"] == "table":
            table = {CubeId.from_json(e["cube"]): lat.from_lex(e["values"]) for e in b["entries"]}
            sys = cls.from_table(lat, table, obj["delta"], obj["c"])
        else:
            raise ValueError(f"unknown system mode {b['mode']!r}")
        if "provenance" in obj:
            prov = [np.full(lat.size(g), -1, dtype=np.int64) for g in range(lat.depth + 1)]
            for e in obj["provenance"]:
                Q = CubeId.from_json(e["cube"])
                prov[Q.g][lat.index(Q)] = int(e["assigned"]["g"])
            sys.provenance = prov
        return sys


# verification ------------------------------------------------------------------

@dataclass
class SystemReport:
    ok: bool
    delta: float
    c: float
    delta_observed: float
    c_observed: float
    change_set: list[CubeId]
    sparsity: float
    failures: list[dict]

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "delta": self.delta,
            "c": self.c,
            "delta_observed": self.delta_observed,
            "c_observed": self.c_observed,
            "change_set": [Q.to_json() for Q in self.change_set],
            "sparsity": self.sparsity,
            "failures": self.failures,
        }


def level_integrals(sys: AccretiveSystem, m: Measure) -> list[np.ndarray]:
    """Per generation, the integrals of b_Q over Q."""
    return [sys.lattice.agg(sys.levels[g] * m.weights, g) for g in range(sys.lattice.depth + 1)]


def verify_system(sys: AccretiveSystem, m: Measure, rtol: float = 1e-12) -> SystemReport:
    lat = sys.lattice
    failures = [{"cube": Q.to_json(), "condition": "support"} for Q in sys.support_violations]
    pos_leaf = m.weights > 0
    c_obs = 0.0
    delta_obs = np.inf
    for g, integ in enumerate(level_integrals(sys, m)):
        absb = np.where(pos_leaf, np.abs(sys.levels[g]), 0.0).reshape(lat.size(g), lat.block(g)).max(axis=1)
        c_obs = max(c_obs, float(absb.max()))
        for i in np.flatnonzero(absb > sys.c * (1 + rtol)):
            failures.append({"cube": lat.cube(g, int(i)).to_json(), "condition": "bound", "value": float(absb[i])})
        mass = m.masses[g]
        pos = mass > 0
        if pos.any():
            ratio = np.abs(integ[pos]) / mass[pos]
            delta_obs = min(delta_obs, float(ratio.min()))
            bad = np.flatnonzero(pos)[ratio < sys.delta * (1 - rtol)]
            for i in bad:
                failures.append({
                    "cube": lat.cube(g, int(i)).to_json(),
                    "condition": "accretivity",
                    "value": float(abs(integ[i]) / mass[i]),
                })
    S = sys.change_set()
    lam = sparsity_check(S, m)
    if not np.isfinite(lam):
        failures.append({"cube": None, "condition": "sparsity", "value": lam})
    return SystemReport(
        ok=not failures,
        delta=sys.delta,
        c=sys.c,
        delta_observed=0.0 if delta_obs == np.inf else delta_obs,
        c_observed=c_obs,
        change_set=S,
        sparsity=lam,
        failures=failures,
    )


# partition into D_b / C_b --------------------------------------------------------

@dataclass
class Partition:
    """``container[g][i]`` is the generation of the minimal S-cube containing (g, i), or -1."""

    lattice: Lattice
    container: list[np.ndarray]

    def minimal_container(self, Q: CubeId) -> CubeId | None:
        h = int(self.container[Q.g][self.lattice.index(Q)])
        return None if h < 0 else self.lattice.ancestor(Q, Q.g - h)

    def container_id(self, Q: CubeId) -> int:
        """Global id of P_Q, or -1 for cubes in C_b."""
        P = self.minimal_container(Q)
        return -1 if P is None else self.lattice.global_id(P)

    def in_d(self, Q: CubeId) -> bool:
        return self.container[Q.g][self.lattice.index(Q)] >= 0

    @property
    def d_cubes(self) -> list[CubeId]:
        return [Q for Q in self.lattice.cubes() if self.in_d(Q)]

    @property
    def c_cubes(self) -> list[CubeId]:
        return [Q for Q in self.lattice.cubes() if not self.in_d(Q)]


def partition(lattice: Lattice, S) -> Partition:
    masks = [np.zeros(lattice.size(g), dtype=bool) for g in range(lattice.depth + 1)]
    for Q in S:
        masks[Q.g][lattice.index(Q)] = True
    container = []
    for g in range(lattice.depth + 1):
        inherited = np.full(1, -1) if g == 0 else np.repeat(container[-1], lattice.arity)
        container.append(np.where(masks[g], g, inherited).astype(np.int64))
    return Partition(lattice, container)


def global_b(sys: AccretiveSystem, part: Partition | None = None) -> np.ndarray:
    """b(x) = b_Q(x) for any C_b cube Q containing x, zero where no such cube exists."""
    lat = sys.lattice
    part = part or partition(lat, sys.change_set())
    out = np.zeros(lat.num_leaves)
    seen = np.zeros(lat.num_leaves, dtype=bool)
    for g in range(lat.depth + 1):
        in_c = lat.spread(part.container[g] < 0, g)
        clash = in_c & seen & (np.abs(out - sys.levels[g]) > CHANGE_TOL)
        if clash.any():
            raise ConsistencyError(f"C_b cubes disagree at generation {g}")
        out = np.where(in_c & ~seen, sys.levels[g], out)
        seen |= in_c
    return out


# expectations and differences ----------------------------------------------------

def _cube_ratio(sys: AccretiveSystem, m: Measure, Q: CubeId, f: np.ndarray) -> float:
    sl = sys.lattice.leaf_slice(Q)
    if m.mass(Q) == 0:
        return 0.0
    w = m.weights[sl]
    ib = float(np.dot(sys.levels[Q.g, sl], w))
    if ib == 0:
        raise NotAccretiveError(f"<b_Q> vanishes on {Q!r}")
    return float(np.dot(f[sl], w)) / ib


def sys_expectation(sys: AccretiveSystem, m: Measure, Q: CubeId, f) -> np.ndarray:
    f = _check(sys.lattice, f)
    return _cube_ratio(sys, m, Q, f) * sys.b(Q)


def sys_difference(sys: AccretiveSystem, m: Measure, Q: CubeId, f) -> np.ndarray:
    if Q.g >= sys.lattice.depth:
        raise DepthError(f"{Q!r} is a leaf; it has no martingale difference")
    out = -sys_expectation(sys, m, Q, f)
    for ch in sys.lattice.children(Q):
        out += sys_expectation(sys, m, ch, f)
    return out


def sys_difference_matrix(sys: AccretiveSystem, m: Measure, Q: CubeId) -> np.ndarray:
    """Local block of the system difference on the leaves of Q, assembled column by column."""
    lat = sys.lattice
    sl = lat.leaf_slice(Q)
    cols = []
    for i in range(sl.start, sl.stop):
        e = np.zeros(lat.num_leaves)
        e[i] = 1.0
        cols.append(sys_difference(sys, m, Q, e)[sl])
    return np.stack(cols, axis=1)


def sys_adjoint_difference(sys: AccretiveSystem, m: Measure, Q: CubeId, f) -> np.ndarray:
    """Closed form: on each child Q', <b_Q' f>_Q'/<b_Q'>_Q' - <b_Q f>_Q/<b_Q>_Q."""
    lat = sys.lattice
    if Q.g >= lat.depth:
        raise DepthError(f"{Q!r} is a leaf; it has no martingale difference")
    f = _check(lat, f)
    base = _cube_ratio(sys, m, Q, sys.b(Q) * f)
    out = np.zeros(lat.num_leaves)
    for ch in lat.children(Q):
        out[lat.leaf_slice(ch)] = _cube_ratio(sys, m, ch, sys.b(ch) * f) - base
    return np.where(m.weights > 0, out, 0.0)


def sys_adjoint_difference_transpose(sys: AccretiveSystem, m: Measure, Q: CubeId, f) -> np.ndarray:
    """The same operator as the pairing-transpose of the assembled difference block."""
    f = _check(sys.lattice, f)
    sl = sys.lattice.leaf_slice(Q)
    out = np.zeros(sys.lattice.num_leaves)
    out[sl] = pairing_transpose(sys_difference_matrix(sys, m, Q), m.weights[sl]) @ f[sl]
    return out


def defect(sys: AccretiveSystem, m: Measure, Q: CubeId, f) -> dict[CubeId, np.ndarray]:
    """The terms phi_P, P a changed child of Q, with D_Q f - D_Q^2 f = sum_P phi_P."""
    lat = sys.lattice
    if Q.g >= lat.depth:
        raise DepthError(f"{Q!r} is a leaf; it has no martingale difference")
    f = _check(lat, f)
    x = _cube_ratio(sys, m, Q, f)
    changed = sys.change_masks()[Q.g + 1]
    bq = sys.b(Q)
    out = {}
    for P in lat.children(Q):
        if not changed[lat.index(P)]:
            continue
        bp = sys.b(P)
        mp = m.mass(P)
        sl = lat.leaf_slice(P)
        if mp > 0:
            ratio = float(np.dot(bq[sl], m.weights[sl])) / float(np.dot(bp[sl], m.weights[sl]))
        else:
            ratio = 0.0
        phi = np.zeros(lat.num_leaves)
        phi[sl] = x * (ratio * bp[sl] - bq[sl])
        out[P] = phi
    return out


def defect_bound(sys: AccretiveSystem) -> float:
    """||phi_P|| <= K |<f>_Q| mu(P)^(1/2) with this K."""
    q = sys.c / sys.delta
    return q * (q + 1)


# vectorized calculus ---------------------------------------------------------------

def sys_level_expectations(sys: AccretiveSystem, m: Measure, f) -> np.ndarray:
    """Row g is sum over generation-g cubes of the system expectations (leading axes of f kept)."""
    lat = sys.lattice
    f = _check(lat, f)
    rows = []
    for g in range(lat.depth + 1):
        ib = m.level_averages(sys.levels[g], g)
        pos = m.masses[g] > 0
        if np.any(pos & (ib == 0)):
            raise NotAccretiveError(f"<b_Q> vanishes on a generation-{g} cube")
        inv = np.divide(1.0, ib, out=np.zeros_like(ib), where=pos)
        rows.append(lat.spread(m.level_averages(f, g) * inv, g) * sys.levels[g])
    return np.stack(rows)


def sys_decompose(sys: AccretiveSystem, m: Measure, f) -> Decomposition:
    levels = sys_level_expectations(sys, m, f)
    return Decomposition(sys.lattice, np.diff(levels, axis=0), levels[0])


def sys_adjoint_ratios(sys: AccretiveSystem, m: Measure, f) -> list[np.ndarray]:
    """Per generation, <b_Q f>_Q / <b_Q>_Q for every cube (zero on zero-mass cubes)."""
    lat = sys.lattice
    f = _check(lat, f)
    out = []
    for g in range(lat.depth + 1):
        ib = m.level_averages(sys.levels[g], g)
        num = m.level_averages(sys.levels[g] * f, g)
        out.append(np.divide(num, ib, out=np.zeros_like(num), where=m.masses[g] > 0))
    return out


def sys_adjoint_rows(sys: AccretiveSystem, m: Measure, f) -> np.ndarray:
    """Row h carries every adjoint difference of generation h (disjoint supports)."""
    lat = sys.lattice
    y = sys_adjoint_ratios(sys, m, f)
    rows = [lat.spread(y[h + 1], h + 1) - lat.spread(y[h], h) for h in range(lat.depth)]
    pos = m.weights > 0
    return np.where(pos, np.stack(rows), 0.0) if rows else np.zeros((0,) + np.shape(f))


def sys_square_fn_ratio(sys: AccretiveSystem, m: Measure, f) -> float:
    from .carleson import ZeroNormError

    nf = norm(f, m)
    if nf == 0:
        raise ZeroNormError("square function ratio needs a nonzero function")
    d = sys_decompose(sys, m, f)
    return float(np.sum(d.rows**2 @ m.weights) + d.top**2 @ m.weights) / nf**2


def sys_dual_square_fn_ratio(sys: AccretiveSystem, m: Measure, f) -> float:
    from .carleson import ZeroNormError

    nf = norm(f, m)
    if nf == 0:
        raise ZeroNormError("dual square function ratio needs a nonzero function")
    return float(np.sum(sys_adjoint_rows(sys, m, f) ** 2 @ m.weights)) / nf**2


def _rows_sup(rows: np.ndarray, m: Measure) -> float:
    # rows: (pieces, basis, leaves) images of the standard basis
    gram = np.einsum("kix,kjx,x->ij", rows, rows, m.weights)
    return rayleigh_sup(gram, m.weights)


def sys_square_fn_sup(sys: AccretiveSystem, m: Measure) -> float:
    """Exact sup over f of sys_square_fn_ratio."""
    d = sys_decompose(sys, m, np.eye(sys.lattice.num_leaves))
    return _rows_sup(np.concatenate([d.rows, d.top[None]]), m)


def sys_dual_square_fn_sup(sys: AccretiveSystem, m: Measure) -> float:
    """Exact sup over f of sys_dual_square_fn_ratio."""
    return _rows_sup(sys_adjoint_rows(sys, m, np.eye(sys.lattice.num_leaves)), m)


# the beta sequence and derived constants ----------------------------------------------

def beta_sequence(sys: AccretiveSystem, m: Measure) -> CubeSequence:
    """|<b_parent>_Q - <b_parent>_parent|^2 mu(Q) on unchanged cubes, zero elsewhere."""
    lat = sys.lattice
    masks = sys.change_masks()
    levels = [np.zeros(1)]
    for g in range(1, lat.depth + 1):
        here = m.level_averages(sys.levels[g - 1], g)
        up = np.repeat(m.level_averages(sys.levels[g - 1], g - 1), lat.arity)
        levels.append(np.where(masks[g], 0.0, (here - up) ** 2 * m.masses[g]))
    return CubeSequence(lat, levels)


def beta_bound(c: float, sparsity: float) -> float:
    # the cube itself (4c^2), one oscillation budget c^2 for the root region and one per changed cube
    return c**2 * (5 + sparsity)


def sys_square_fn_bound(delta: float, c: float, sparsity: float) -> float:
    lam_beta = beta_bound(c, sparsity)
    return 2 * c**2 / delta**2 + 8 * c**2 * lam_beta / delta**4 + 16 * c**2 * sparsity / delta**2


def sys_dual_square_fn_bound(delta: float, c: float, sparsity: float) -> float:
    lam_beta = beta_bound(c, sparsity)
    return (
        32 * c**2 * sparsity / delta**2
        + 8 * c**2 * lam_beta / delta**4
        + (2 * c**2 / delta**2) * (2 + 4 * sparsity)
    )


# paired systems -----------------------------------------------------------------------

@dataclass(eq=False)
class PairedSystem:
    b1: AccretiveSystem
    b2: AccretiveSystem
    mu: Measure
    nu: Measure

    def sparsity(self) -> dict[str, float]:
        s1, s2 = self.b1.change_set(), self.b2.change_set()
        return {
            "lam1_mu": sparsity_check(s1, self.mu),
            "lam1_nu": sparsity_check(s1, self.nu),
            "lam2_mu": sparsity_check(s2, self.mu),
            "lam2_nu": sparsity_check(s2, self.nu),
        }

    def swapped(self) -> "PairedSystem":
        return PairedSystem(self.b2, self.b1, self.nu, self.mu)

    def to_json(self) -> dict:
        return {"b1": self.b1.to_json(), "b2": self.b2.to_json()}


# stopping-time construction -------------------------------------------------------------

@dataclass
class StoppingReport:
    tau: float
    threshold: float
    families: list[list[CubeId]]
    ratios: list[dict]
    max_ratio: float
    change_set_sparsity: float
    stops_not_changed: list[CubeId]
    changed_not_stops: list[CubeId]

    @property
    def ok(self) -> bool:
        return self.max_ratio <= self.tau + 1e-12 and not self.changed_not_stops

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "threshold": self.threshold,
            "families": [[Q.to_json() for Q in fam] for fam in self.families],
            "ratios": self.ratios,
            "max_ratio": self.max_ratio,
            "change_set_sparsity": self.change_set_sparsity,
            "carleson_bound": 1.0 / (1.0 - self.tau),
            "stops_not_changed": [Q.to_json() for Q in self.stops_not_changed],
            "changed_not_stops": [Q.to_json() for Q in self.changed_not_stops],
            "ok": self.ok,
        }


def stopping_tau(delta: float, c: float, threshold: float | None = None) -> float:
    thr = delta**2 if threshold is None else threshold
    return (c - delta) / (c - thr)


def stopping_construction(
    btilde: Callable[[CubeId], np.ndarray],
    m: Measure,
    delta: float,
    c: float,
    threshold: float | None = None,
) -> tuple[AccretiveSystem, StoppingReport]:
    """Build a sparse system from one accretive function per stopping cube.

    ``btilde(R)`` must satisfy |b| <= c on R and |integral over R| >= delta mu(R).
    Below each stopping cube R the next stops are the maximal Q with
    |integral of btilde(R) over Q| < threshold mu(Q); every cube takes the function
    of its smallest stopping ancestor.
    """
    lat = m.lattice
    thr = delta**2 if threshold is None else float(threshold)
    if not 0 < thr < delta < c:
        raise ValueError(f"need 0 < threshold < delta < c, got {thr}, {delta}, {c}")
    levels = np.zeros((lat.depth + 1, lat.num_leaves))
    prov = [np.full(lat.size(g), -1, dtype=np.int64) for g in range(lat.depth + 1)]
    families = [[lat.root]]
    ratios = []
    stops = {lat.root}
    while families[-1]:
        nxt = []
        for R in families[-1]:
            found = _stop_below(R, btilde, m, delta, c, thr, levels, prov)
            mr = m.mass(R)
            ratios.append({
                "cube": R.to_json(),
                "family": len(families) - 1,
                "ratio": sum(m.mass(Q) for Q in found) / mr if mr > 0 else 0.0,
            })
            nxt.extend(found)
        stops.update(nxt)
        families.append(sorted(nxt))
    families.pop()
    sys = AccretiveSystem(lat, levels, thr, c, provenance=prov)
    S = sys.change_set()
    report = StoppingReport(
        tau=stopping_tau(delta, c, thr),
        threshold=thr,
        families=families,
        ratios=ratios,
        max_ratio=max(r["ratio"] for r in ratios),
        change_set_sparsity=sparsity_check(S, m),
        stops_not_changed=sorted(stops - set(S) - {lat.root}),
        changed_not_stops=sorted(set(S) - stops),
    )
    return sys, report


def _stop_below(R, btilde, m, delta, c, thr, levels, prov) -> list[CubeId]:
    lat = m.lattice
    sl = lat.leaf_slice(R)
    v = _check(lat, btilde(R))[sl]
    w = m.weights[sl]
    mr = float(w.sum())
    if np.abs(v[w > 0]).max(initial=0.0) > c * (1 + 1e-12):
        raise StoppingInputError(f"test function for {R!r} exceeds the bound {c}")
    if mr > 0 and abs(float(np.dot(v, w))) < delta * mr * (1 - 1e-12):
        raise StoppingInputError(f"test function for {R!r} has average below {delta}")
    ridx = lat.index(R)
    covered = np.zeros(v.size, dtype=bool)
    found = []
    for g in range(R.g, lat.depth + 1):
        k = lat.block(g)
        cnt = v.size // k
        if g > R.g:
            integ = (v * w).reshape(cnt, k).sum(axis=1)
            mass = w.reshape(cnt, k).sum(axis=1)
            cov = covered.reshape(cnt, k).any(axis=1)
            new = ~cov & (np.abs(integ) < thr * mass)
            for i in np.flatnonzero(new):
                found.append(lat.cube(g, ridx * cnt + int(i)))
                covered[i * k:(i + 1) * k] = True
        free = ~covered
        levels[g, sl][free] = v[free]
        cube_free = free.reshape(cnt, k).all(axis=1)
        prov[g][ridx * cnt:(ridx + 1) * cnt][cube_free] = R.g
    return found


# generators ------------------------------------------------------------------------------

def random_test_functions(m: Measure, delta: float, c: float, seed: int) -> Callable[[CubeId], np.ndarray]:
    """Seeded test functions: clipped blocky noise on Q, shifted until the average reaches delta."""
    lat = m.lattice

    def make(Q: CubeId) -> np.ndarray:
        rng = np.random.default_rng([seed, Q.g, lat.index(Q)])
        sl = lat.leaf_slice(Q)
        coarse = int(rng.integers(Q.g, lat.depth + 1))
        u = np.repeat(rng.uniform(-c, c, lat.arity ** (coarse - Q.g)), lat.block(coarse))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        w = m.weights[sl]
        mq = float(w.sum())

        def mean(s):
            return float(np.dot(np.clip(u + s, -c, c), w)) / mq

        s = 0.0
        if mq > 0 and mean(0.0) < delta:
            lo, hi = 0.0, 2.0 * c
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if mean(mid) < delta else (lo, mid)
            s = hi
        out = np.zeros(lat.num_leaves)
        out[sl] = sign * np.clip(u + s, -c, c)
        return out

    return make


def random_stopping_system(m: Measure, delta: float, c: float, seed: int, threshold=None):
    return stopping_construction(random_test_functions(m, delta, c, seed), m, delta, c, threshold)


def random_table_system(lattice: Lattice, rng: np.random.Generator, p_change: float = 0.25,
                        lo: float = 0.5, hi: float = 1.5) -> AccretiveSystem:
    """Positive values in [lo, hi], redrawn on a random set of cubes (accretive with delta = lo)."""
    levels = np.empty((lattice.depth + 1, lattice.num_leaves))
    levels[0] = rng.uniform(lo, hi, lattice.num_leaves)
    for g in range(1, lattice.depth + 1):
        change = lattice.spread(rng.random(lattice.size(g)) < p_change, g)
        levels[g] = np.where(change, rng.uniform(lo, hi, lattice.num_leaves), levels[g - 1])
    return AccretiveSystem(lattice, levels, lo, hi)


def sys_adjoint_norms_sq(sys: AccretiveSystem, m: Measure, U) -> list[np.ndarray]:
    """For rows u of U: squared norms of every adjoint difference, ``out[h][k, i]`` for cube (h, i)."""
    lat = sys.lattice
    U = np.atleast_2d(_check(lat, U))
    y = sys_adjoint_ratios(sys, m, U)
    out = []
    for h in range(lat.depth):
        diff = y[h + 1].reshape(U.shape[0], lat.size(h), lat.arity) - y[h][:, :, None]
        out.append((diff**2 * m.masses[h + 1].reshape(lat.size(h), lat.arity)).sum(axis=-1))
    return out


def sys_adjoint_row(sys: AccretiveSystem, m: Measure, U, h: int) -> np.ndarray:
    """Every adjoint difference of generation h applied to the rows of U, summed per row."""
    lat = sys.lattice
    U = _check(lat, U)
    y = []
    for g in (h, h + 1):
        ib = m.level_averages(sys.levels[g], g)
        num = m.level_averages(sys.levels[g] * U, g)
        y.append(lat.spread(np.divide(num, ib, out=np.zeros_like(num), where=m.masses[g] > 0), g))
    return np.where(m.weights > 0, y[1] - y[0], 0.0)


def defect_row(sys: AccretiveSystem, m: Measure, g, gp: int) -> np.ndarray:
    """Sum of the defect terms phi_P of g over all changed P of generation gp."""
    lat = sys.lattice
    g = _check(lat, g)
    mask = lat.spread(sys.change_masks()[gp], gp)
    ib_par = m.level_averages(sys.levels[gp - 1], gp - 1)
    x = np.divide(m.level_averages(g, gp - 1), ib_par, out=np.zeros_like(ib_par), where=m.masses[gp - 1] > 0)
    ib = m.level_averages(sys.levels[gp], gp)
    ratio = np.divide(m.level_averages(sys.levels[gp - 1], gp), ib, out=np.zeros_like(ib), where=m.masses[gp] > 0)
    phi = lat.spread(x, gp - 1) * (lat.spread(ratio, gp) * sys.levels[gp] - sys.levels[gp - 1])
    return np.where(mask, phi, 0.0)
