"""Expectations and martingale differences adapted to one accretive function ``b``.

    E^b_Q f = (<f>_Q / <b>_Q) 1_Q b,    D^b_Q f = sum_{Q' in ch Q} E^b_{Q'} f - E^b_Q f.

Everything is exact finite arithmetic on a finite tree, so the decomposition of
``f`` telescopes to ``f`` itself on positive-mass leaves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .carleson import ZeroNormError
from .lattice import CubeId, DepthError, Lattice
from .measure import Measure, _check, norm

ZERO_AVERAGE_RTOL = 1e-12


class NotAccretiveError(ValueError):
    pass


@dataclass(frozen=True)
class AccretiveFunction:
    b: np.ndarray
    delta: float
    c_inf: float


@dataclass(frozen=True)
class AccretiveFailure:
    offending: list[CubeId]
    delta: float
    c_inf: float

    def __bool__(self) -> bool:
        return False


def _level_b_averages(b: np.ndarray, m: Measure) -> list[np.ndarray]:
    return [m.level_averages(b, g) for g in range(m.lattice.depth + 1)]


def check_accretive(b, m: Measure) -> AccretiveFunction | AccretiveFailure:
    """Measure the accretivity constants of ``b``; returns a failure report on cancellation."""
    b = _check(m.lattice, b)
    lat = m.lattice
    pos_leaf = m.weights > 0
    c_inf = float(np.abs(b[pos_leaf]).max(initial=0.0))
    floor = ZERO_AVERAGE_RTOL * max(c_inf, np.finfo(float).tiny)
    delta = np.inf
    offending = []
    for g, avg in enumerate(_level_b_averages(b, m)):
        pos = m.masses[g] > 0
        if not pos.any():
            continue
        delta = min(delta, float(np.abs(avg[pos]).min()))
        for i in np.flatnonzero(pos & (np.abs(avg) <= floor)):
            offending.append(lat.cube(g, int(i)))
    if delta == np.inf:
        delta = 0.0
    if offending:
        return AccretiveFailure(sorted(offending), 0.0, c_inf)
    return AccretiveFunction(b, delta, c_inf)


def _ratio(b: np.ndarray, m: Measure, Q: CubeId, f: np.ndarray) -> float:
    sl = m.lattice.leaf_slice(Q)
    w = m.weights[sl]
    if m.mass(Q) == 0:
        return 0.0
    ib = float(np.dot(b[sl], w))
    if ib == 0:
        raise NotAccretiveError(f"<b> vanishes on {Q!r}")
    return float(np.dot(f[sl], w)) / ib


def expectation(b, m: Measure, Q: CubeId, f) -> np.ndarray:
    b = _check(m.lattice, b)
    f = _check(m.lattice, f)
    out = np.zeros(m.lattice.num_leaves)
    sl = m.lattice.leaf_slice(Q)
    out[sl] = _ratio(b, m, Q, f) * b[sl]
    return out


def difference(b, m: Measure, Q: CubeId, f) -> np.ndarray:
    if Q.g >= m.lattice.depth:
        raise DepthError(f"{Q!r} is a leaf; it has no martingale difference")
    out = -expectation(b, m, Q, f)
    for c in m.lattice.children(Q):
        out += expectation(b, m, c, f)
    return out


def expectation_matrix(b, m: Measure, Q: CubeId) -> np.ndarray:
    """Local block of E^b_Q acting on the leaves of Q."""
    b = _check(m.lattice, b)
    sl = m.lattice.leaf_slice(Q)
    w = m.weights[sl]
    if m.mass(Q) == 0:
        return np.zeros((w.size, w.size))
    ib = float(np.dot(b[sl], w))
    if ib == 0:
        raise NotAccretiveError(f"<b> vanishes on {Q!r}")
    return np.outer(b[sl], w) / ib


def difference_matrix(b, m: Measure, Q: CubeId) -> np.ndarray:
    """Local block of D^b_Q acting on the leaves of Q."""
    lat = m.lattice
    if Q.g >= lat.depth:
        raise DepthError(f"{Q!r} is a leaf; it has no martingale difference")
    M = -expectation_matrix(b, m, Q)
    k = lat.block(Q.g + 1)
    for j in range(lat.arity):
        child = lat.cube(Q.g + 1, lat.index(Q) * lat.arity + j)
        M[j * k:(j + 1) * k, j * k:(j + 1) * k] += expectation_matrix(b, m, child)
    return M


def pairing_transpose(M: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of ``M`` for the pairing sum_i f_i g_i w_i; zero rows on zero-weight leaves."""
    inv = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0)
    return inv[:, None] * M.T * w[None, :]


def adjoint_difference(b, m: Measure, Q: CubeId, f) -> np.ndarray:
    f = _check(m.lattice, f)
    sl = m.lattice.leaf_slice(Q)
    out = np.zeros(m.lattice.num_leaves)
    out[sl] = pairing_transpose(difference_matrix(b, m, Q), m.weights[sl]) @ f[sl]
    return out


def level_expectations(b, m: Measure, f) -> np.ndarray:
    """Row g is sum over generation-g cubes of E^b_Q f (disjoint supports)."""
    b = _check(m.lattice, b)
    f = _check(m.lattice, f)
    lat = m.lattice
    rows = np.empty((lat.depth + 1, lat.num_leaves))
    for g in range(lat.depth + 1):
        ib = m.level_averages(b, g)
        af = m.level_averages(f, g)
        pos = m.masses[g] > 0
        if np.any(pos & (ib == 0)):
            raise NotAccretiveError(f"<b> vanishes on a generation-{g} cube")
        ratio = np.divide(af, ib, out=np.zeros_like(af), where=pos)
        rows[g] = lat.spread(ratio, g) * b
    return rows


@dataclass
class Decomposition:
    """Martingale pieces of f: ``rows[g]`` holds every D_Q f with Q in generation g."""

    lattice: Lattice
    rows: np.ndarray
    top: np.ndarray

    def piece(self, Q: CubeId) -> np.ndarray:
        out = np.zeros(self.lattice.num_leaves)
        sl = self.lattice.leaf_slice(Q)
        out[sl] = self.rows[Q.g, sl]
        return out

    def cubes(self) -> list[CubeId]:
        return [c for c in self.lattice.cubes() if c.g < self.lattice.depth]

    def reconstruct(self) -> np.ndarray:
        return self.top + self.rows.sum(axis=0)

    def to_json(self, m: Measure, include_pieces: bool = False) -> list[dict]:
        out = []
        for c in self.cubes():
            p = self.piece(c)
            item = {"cube": c.to_json(), "piece_norm": norm(p, m)}
            if include_pieces:
                item["values"] = self.lattice.to_lex(p).tolist()
            out.append(item)
        return out


def decompose(b, m: Measure, f) -> Decomposition:
    levels = level_expectations(b, m, f)
    return Decomposition(m.lattice, np.diff(levels, axis=0), levels[0])


def square_fn_ratio(b, m: Measure, f) -> float:
    nf = norm(f, m)
    if nf == 0:
        raise ZeroNormError("square function ratio needs a nonzero function")
    d = decompose(b, m, f)
    total = float(np.sum(d.rows**2 @ m.weights) + d.top**2 @ m.weights)
    return total / nf**2


def dual_square_fn_ratio(b, m: Measure, f) -> float:
    nf = norm(f, m)
    if nf == 0:
        raise ZeroNormError("dual square function ratio needs a nonzero function")
    f = _check(m.lattice, f)
    total = 0.0
    for c in m.lattice.cubes():
        if c.g < m.lattice.depth:
            total += norm(adjoint_difference(b, m, c, f), m) ** 2
    return total / nf**2


def truncated_sum_norm(b, m: Measure, f, d: int) -> float:
    """Norm of the sum of D_Q f over non-leaf cubes of generation >= d."""
    rows = decompose(b, m, f).rows
    return norm(rows[d:].sum(axis=0), m) if d < rows.shape[0] else 0.0


# explicit constants --------------------------------------------------------

def expectation_bound(delta: float, c: float) -> float:
    """||E_Q f|| <= (c/delta) ||f 1_Q||."""
    return c / delta


def truncation_bound(delta: float, c: float) -> float:
    """Every truncated difference sum is f minus a generation of expectations."""
    return 1.0 + c / delta


def square_fn_bound(delta: float, c: float) -> float:
    # 2c^2/delta^2 from the unweighted square function plus the root term,
    # 8c^4/delta^4 from embedding the oscillation of <b> (Carleson constant <= c^2) with constant 4
    return 2 * c**2 / delta**2 + 8 * c**4 / delta**4


def dual_square_fn_bound(delta: float, c: float) -> float:
    # beta sequence has Carleson constant <= 5c^2; the b f oscillation costs c^2/delta^2
    return 2 * c**2 / delta**2 + 40 * c**4 / delta**4
