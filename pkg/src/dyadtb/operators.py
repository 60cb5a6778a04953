"""Two-weight operators on a finite tree: adjoints, norms, localization checks, testing constants.

An operator is a dense leaf-to-leaf kernel acting from L^2(mu) to L^2(nu).  Kernel
columns on mu-null leaves and rows on nu-null leaves are zeroed on construction:
those coordinates are invisible in the respective L^2 spaces, and zeroing them keeps
``adjoint(adjoint(T))`` exactly equal to ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .accretive_system import (
    AccretiveSystem,
    PairedSystem,
    partition,
    sys_adjoint_difference,
    sys_adjoint_norms_sq,
)
from .lattice import CubeId, Lattice
from .martingale import AccretiveFunction
from .measure import Measure, _check, inner

WL_TOL = 1e-10


class GeneratorExhausted(RuntimeError):
    pass


@dataclass(eq=False)
class OperatorRep:
    lattice: Lattice
    kernel: np.ndarray
    mu: Measure
    nu: Measure
    # per-generation coefficients when the operator was assembled as a Haar multiplier
    multiplier: list[np.ndarray] | None = None

    def __post_init__(self):
        N = self.lattice.num_leaves
        K = np.array(self.kernel, dtype=float)
        if K.shape != (N, N):
            raise ValueError(f"kernel must be {N}x{N}, got {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("kernel entries must be finite")
        K[:, self.mu.weights == 0] = 0.0
        K[self.nu.weights == 0, :] = 0.0
        self.kernel = K

    def scaled(self) -> np.ndarray:
        """sqrt(nu) K / sqrt(mu): the matrix whose spectral norm is the operator norm."""
        sv = np.sqrt(self.nu.weights)
        w = self.mu.weights
        isw = np.divide(1.0, np.sqrt(w), out=np.zeros_like(w), where=w > 0)
        return sv[:, None] * self.kernel * isw[None, :]

    def to_json(self) -> dict:
        lat = self.lattice
        if self.multiplier is not None:
            kern = {
                "mode": "multiplier",
                "lambda": [
                    {"cube": c.to_json(), "value": float(self.multiplier[c.g][lat.index(c)])}
                    for c in lat.cubes()
                    if c.g < lat.depth
                ],
            }
        else:
            perm = lat.lex_to_morton
            kern = {"mode": "dense", "rows": self.kernel[np.ix_(perm, perm)].tolist()}
        return {"lattice": lat.to_json(), "kernel": kern}

    @classmethod
    def from_json(cls, obj: dict, mu: Measure, nu: Measure) -> "OperatorRep":
        lat = Lattice.from_json(obj["lattice"])
        kern = obj["kernel"]
        if kern["mode"] == "dense":
            rows = np.asarray(kern["rows"], dtype=float)
            K = np.empty_like(rows)
            perm = lat.lex_to_morton
            K[np.ix_(perm, perm)] = rows
            return cls(lat, K, mu, nu)
        if kern["mode"] == "multiplier":
            lam = {CubeId.from_json(e["cube"]): float(e["value"]) for e in kern["lambda"]}
            return make_haar_multiplier(lat, mu, lam)
        raise ValueError(f"unknown kernel mode {kern['mode']!r}")


def apply(T: OperatorRep, f) -> np.ndarray:
    return _check(T.lattice, f) @ T.kernel.T


def bilinear(T: OperatorRep, f, g) -> float:
    return inner(apply(T, f), g, T.nu)


def adjoint(T: OperatorRep) -> OperatorRep:
    w = T.mu.weights
    inv = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0)
    K = inv[:, None] * T.kernel.T * T.nu.weights[None, :]
    return OperatorRep(T.lattice, K, T.nu, T.mu)


def operator_norm(T: OperatorRep) -> float:
    """Largest singular value of the weight-conjugated kernel (dense LAPACK SVD)."""
    A = T.scaled()
    if not A.any():
        return 0.0
    return float(np.linalg.norm(A, ord=2))


# generators ----------------------------------------------------------------------------

def _per_generation(lattice: Lattice, lam) -> list[np.ndarray]:
    if isinstance(lam, dict):
        out = [np.zeros(lattice.size(g)) for g in range(lattice.depth)]
        for c, v in lam.items():
            if c.g < lattice.depth:
                out[c.g][lattice.index(c)] = v
        return out
    out = [np.asarray(a, dtype=float) for a in lam][: lattice.depth]
    if len(out) != lattice.depth or any(a.shape != (lattice.size(g),) for g, a in enumerate(out)):
        raise ValueError("multiplier coefficients do not match the lattice")
    return out


def make_haar_multiplier(lattice: Lattice, m: Measure, lam) -> OperatorRep:
    """sum_Q lam_Q D_Q for the standard differences of m (b = 1); lam is a dict or per-generation arrays."""
    lam = _per_generation(lattice, lam)
    N = lattice.num_leaves
    basis = np.eye(N)
    prev = None
    K = np.zeros((N, N))
    for g in range(lattice.depth + 1):
        cur = lattice.spread(m.level_averages(basis, g), g)  # [basis i, leaf x]
        if prev is not None:
            K += (lattice.spread(lam[g - 1], g - 1)[None, :] * (cur - prev)).T
        prev = cur
    return OperatorRep(lattice, K, m, m, multiplier=lam)


def random_dense_operator(lattice: Lattice, mu: Measure, nu: Measure, rng: np.random.Generator) -> OperatorRep:
    N = lattice.num_leaves
    return OperatorRep(lattice, rng.normal(size=(N, N)) / np.sqrt(N), mu, nu)


def _children_unchanged(sys: AccretiveSystem) -> list[np.ndarray]:
    """Per non-leaf generation: cubes whose children all lie outside every changed cube."""
    lat = sys.lattice
    part = partition(lat, sys.change_set())
    return [
        (part.container[g + 1] < 0).reshape(lat.size(g), lat.arity).all(axis=1)
        for g in range(lat.depth)
    ]


def make_shift_candidate(
    pair: PairedSystem,
    r: int,
    rng: np.random.Generator,
    coef_bound: float = 1.0,
    density: float = 0.5,
    wide: float = 0.0,
    restrict: bool = False,
    para: float = 0.0,
) -> OperatorRep:
    """Random sum of rank-one couplings (D^nu_J)^* u_J <D^mu_I f, v_I>_mu with J inside I.

    The generation gap J - I is at most max(r - 1, 0); with probability ``wide`` a
    coupling may use gap r.  With ``restrict`` only cubes whose children avoid the
    change sets are used, which makes the result well-localized; the checker stays
    the judge either way.

    With probability ``para`` per cube J a paraproduct coupling (D^nu_J)^* u_J <f, 1_I>_mu
    is added, I being the ancestor of J max(r - 1, 0) generations up.  These reach
    pairs of cubes far apart in scale while staying well-localized.
    """
    lat = pair.b1.lattice
    mu, nu = pair.mu, pair.nu
    ok1 = _children_unchanged(pair.b1)
    ok2 = _children_unchanged(pair.b2)
    N = lat.num_leaves
    K = np.zeros((N, N))
    base_gap = max(r - 1, 0)
    for gi in range(lat.depth):
        for i in range(lat.size(gi)):
            if restrict and not ok1[gi][i]:
                continue
            I = lat.cube(gi, i)
            for gap in range(0, min(r, lat.depth - 1 - gi) + 1):
                if gap > base_gap and rng.random() >= wide:
                    continue
                gj = gi + gap
                for j in range(i * lat.arity**gap, (i + 1) * lat.arity**gap):
                    if (restrict and not ok2[gj][j]) or rng.random() >= density:
                        continue
                    J = lat.cube(gj, j)
                    u = _random_unit(lat, J, nu, rng)
                    v = _random_unit(lat, I, mu, rng)
                    left = sys_adjoint_difference(pair.b2, nu, J, u)
                    right = mu.weights * sys_adjoint_difference(pair.b1, mu, I, v)
                    K += rng.uniform(-coef_bound, coef_bound) * np.outer(left, right)
    if para > 0:
        for J in lat.cubes():
            if J.g >= lat.depth or rng.random() >= para:
                continue
            I = lat.ancestor(J, base_gap)
            mass = mu.mass(I)
            if mass == 0:
                continue
            left = sys_adjoint_difference(pair.b2, nu, J, _random_unit(lat, J, nu, rng))
            right = np.zeros(N)
            right[lat.leaf_slice(I)] = mu.weights[lat.leaf_slice(I)] / np.sqrt(mass)
            K += rng.uniform(-coef_bound, coef_bound) * np.outer(left, right)
    return OperatorRep(lat, K, mu, nu)


def _random_unit(lat: Lattice, Q: CubeId, m: Measure, rng) -> np.ndarray:
    out = np.zeros(lat.num_leaves)
    sl = lat.leaf_slice(Q)
    out[sl] = rng.uniform(-1, 1, sl.stop - sl.start)
    n2 = float(np.dot(out**2, m.weights))
    return out / np.sqrt(n2) if n2 > 0 else out


def sample_well_localized(pair: PairedSystem, r: int, rng: np.random.Generator,
                          max_attempts: int = 20, tol: float = WL_TOL, **kwargs):
    """Rejection-sample shift candidates until one passes the local check."""
    wide = kwargs.pop("wide", 0.3)
    kwargs.setdefault("para", 0.25)
    for attempt in range(max_attempts):
        T = make_shift_candidate(pair, r, rng, wide=wide / (1 + attempt), **kwargs)
        rep = check_wl_local(T, pair, r, tol=tol)
        if rep.passed:
            return T, rep, attempt + 1
    raise GeneratorExhausted(f"no well-localized candidate in {max_attempts} attempts")


# localization checks ---------------------------------------------------------------------

def _images(K: np.ndarray, values: np.ndarray, lat: Lattice, g: int) -> np.ndarray:
    """Row i is K applied to values 1_Q for the i-th cube Q of generation g."""
    N = lat.num_leaves
    return (K * values[None, :]).reshape(N, lat.size(g), lat.block(g)).sum(axis=-1).T


def _pair_masks(lat: Lattice, gq: int, gr: int, r: int):
    """(forbidden, exempt) boolean matrices over (Q index, R index)."""
    n = lat.n
    q = np.arange(lat.size(gq))[:, None]
    R = np.arange(lat.size(gr))[None, :]
    a = max(gq - r, 0)
    in_anc = (R >> (n * (gr - a))) == (q >> (n * (gq - a))) if gr >= a else np.zeros((q.size, R.size), bool)
    in_q = (R >> (n * (gr - gq))) == q if gr >= gq else np.zeros((q.size, R.size), bool)
    forbidden = ~in_anc | ((gr >= gq + r) & ~in_q)
    exempt = np.zeros_like(forbidden)
    if r == 0 and gr == gq - 1:
        exempt = (q >> n) == R
    return forbidden & ~exempt, exempt


@dataclass
class WLSide:
    max_violation: float = 0.0
    worst_pair: tuple | None = None
    boundary_violation: float = 0.0
    boundary_pair: tuple | None = None
    csc_kappa: float = 0.0
    csc_pair: tuple | None = None
    csc_identity_gap: float = 0.0

    def to_json(self) -> dict:
        def pair(p):
            return None if p is None else [c.to_json() for c in p]

        return {
            "max_violation": self.max_violation,
            "worst_pair": pair(self.worst_pair),
            "boundary_violation": self.boundary_violation,
            "boundary_pair": pair(self.boundary_pair),
            "csc_kappa": self.csc_kappa,
            "csc_pair": pair(self.csc_pair),
            "csc_identity_gap": self.csc_identity_gap,
        }


@dataclass
class WLReport:
    radius: int
    tol: float
    forward: WLSide
    adjoint: WLSide
    scale: float
    local: bool = True

    @property
    def max_violation(self) -> float:
        return max(self.forward.max_violation, self.adjoint.max_violation)

    @property
    def boundary_violation(self) -> float:
        return max(self.forward.boundary_violation, self.adjoint.boundary_violation)

    @property
    def csc_kappa(self) -> float:
        return max(self.forward.csc_kappa, self.adjoint.csc_kappa)

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    def to_json(self) -> dict:
        out = {
            "passed": self.passed,
            "radius": self.radius,
            "tol": self.tol,
            "max_violation": self.max_violation,
            "boundary_violation": self.boundary_violation,
            "operator_norm": self.scale,
            "forward": self.forward.to_json(),
            "adjoint": self.adjoint.to_json(),
        }
        if self.local:
            out["csc_kappa"] = self.csc_kappa
        return out


def _triangular(K, src: AccretiveSystem, src_m: Measure, tgt: AccretiveSystem, tgt_m: Measure,
                r: int, scale: float, side: WLSide) -> None:
    lat = src.lattice
    for gq in range(lat.depth + 1):
        norms = sys_adjoint_norms_sq(tgt, tgt_m, _images(K, src.levels[gq], lat, gq))
        sq = np.sqrt(src_m.masses[gq])
        denom = scale * np.where(sq > 0, sq, 1.0)
        for gr in range(max(gq - 1, 0), lat.depth):
            viol = np.sqrt(norms[gr]) / denom[:, None]
            forbidden, exempt = _pair_masks(lat, gq, gr, r)
            for mask, attr in ((forbidden, "max_violation"), (exempt, "boundary_violation")):
                if not mask.any():
                    continue
                v = np.where(mask, viol, -1.0)
                k = np.unravel_index(np.argmax(v), v.shape)
                if v[k] > getattr(side, attr):
                    setattr(side, attr, float(v[k]))
                    pair = (lat.cube(gq, int(k[0])), lat.cube(gr, int(k[1])))
                    if attr == "max_violation":
                        side.worst_pair = pair
                    else:
                        side.boundary_pair = pair


def _csc(K, src: AccretiveSystem, src_m: Measure, tgt: AccretiveSystem, tgt_m: Measure,
         r: int, scale: float, tol: float, side: WLSide) -> None:
    lat = src.lattice
    n = lat.n
    cont = partition(lat, src.change_set()).container
    ar = lat.arity**r
    own = {}
    for s in range(lat.depth + 1):
        den = sys_adjoint_norms_sq(tgt, tgt_m, _images(K, src.levels[s], lat, s))
        for q in range(s, lat.depth - r):
            gr = q + r
            imgs = _images(K, src.levels[s], lat, q)
            if q not in own:
                own[q] = _images(K, src.levels[q], lat, q)
            same = cont[q] == cont[s][np.arange(lat.size(q)) >> (n * (q - s))]
            if not same.any():
                continue
            gap = np.sqrt(((own[q] - imgs) ** 2) @ tgt_m.weights)
            side.csc_identity_gap = max(side.csc_identity_gap, float(gap[same].max()) / scale)
            num_all = sys_adjoint_norms_sq(tgt, tgt_m, imgs)[gr]
            qi = np.arange(lat.size(q))
            num = num_all.reshape(lat.size(q), lat.size(q), ar)[qi, qi]
            Ridx = qi[:, None] * ar + np.arange(ar)[None, :]
            d = den[gr][(qi >> (n * (q - s)))[:, None], Ridx]
            mq = src_m.masses[q][:, None] * scale**2
            norm_q = np.where(mq > 0, mq, scale**2)
            num_small = num / norm_q <= tol**2
            den_small = d / norm_q <= tol**2
            with np.errstate(divide="ignore", invalid="ignore"):
                kappa = np.where(den_small, np.where(num_small, 0.0, np.inf), num / d)
            kappa = np.where(same[:, None], kappa, 0.0)
            k = np.unravel_index(np.argmax(kappa), kappa.shape)
            if kappa[k] > side.csc_kappa:
                side.csc_kappa = float(kappa[k])
                side.csc_pair = (
                    lat.cube(s, int(k[0]) >> (n * (q - s))),
                    lat.cube(q, int(k[0])),
                    lat.cube(gr, int(Ridx[k])),
                )


def check_wl_local(T: OperatorRep, pair: PairedSystem, r: int, tol: float = WL_TOL, csc: bool = True) -> WLReport:
    """Lower-triangular localization of T and T* against the system differences, plus the csc scan.

    At r = 0 the parent pair R = Q^(1) is reported separately as ``boundary_violation``
    and does not affect ``passed``.
    """
    nrm = operator_norm(T)
    scale = nrm if nrm > 0 else 1.0
    Ts = adjoint(T)
    fwd, adj = WLSide(), WLSide()
    _triangular(T.kernel, pair.b1, pair.mu, pair.b2, pair.nu, r, scale, fwd)
    _triangular(Ts.kernel, pair.b2, pair.nu, pair.b1, pair.mu, r, scale, adj)
    if csc:
        _csc(T.kernel, pair.b1, pair.mu, pair.b2, pair.nu, r, scale, tol, fwd)
        _csc(Ts.kernel, pair.b2, pair.nu, pair.b1, pair.mu, r, scale, tol, adj)
    return WLReport(r, tol, fwd, adj, nrm, local=csc)


def constant_pair(T: OperatorRep, b1, b2) -> PairedSystem:
    def as_system(b, m):
        if isinstance(b, AccretiveSystem):
            return b
        if isinstance(b, AccretiveFunction):
            return AccretiveSystem.constant(b.b, m, b.delta, b.c_inf)
        return AccretiveSystem.constant(b, m)

    return PairedSystem(as_system(b1, T.mu), as_system(b2, T.nu), T.mu, T.nu)


def check_wl_global(T: OperatorRep, b1, b2, r: int, tol: float = WL_TOL) -> WLReport:
    return check_wl_local(T, constant_pair(T, b1, b2), r, tol=tol, csc=False)


# testing constants ------------------------------------------------------------------------

@dataclass
class TestingReport:
    radius: int
    t_a_fwd: float = 0.0
    t_a_adj: float = 0.0
    t_b: float = 0.0
    t_b_delta: float = 0.0
    t_c_fwd: float = 0.0
    t_c_adj: float = 0.0
    t_a_cut_fwd: float = 0.0
    t_a_cut_adj: float = 0.0
    wl_pass: bool = False
    wl_max_violation: float = 0.0
    csc_kappa: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "radius", "t_a_fwd", "t_a_adj", "t_b", "t_b_delta", "t_c_fwd", "t_c_adj",
            "t_a_cut_fwd", "t_a_cut_adj", "wl_pass", "wl_max_violation", "csc_kappa")}
        out.update(self.extras)
        return out


def _ratio_sup(num: np.ndarray, den: np.ndarray) -> float:
    """sup num/den over den > 0; inf if some den = 0 carries a positive numerator."""
    pos = den > 0
    best = float((num[pos] / den[pos]).max(initial=0.0))
    if np.any(~pos & (num > 1e-300)):
        return np.inf
    return best


def testing_a(K, src: AccretiveSystem, src_m: Measure, tgt_m: Measure) -> tuple[float, float]:
    """(cut, uncut) sup over Q of ||1_Q T(b_Q)||^2 / mu(Q) and ||T(b_Q)||^2 / mu(Q)."""
    lat = src.lattice
    cut = uncut = 0.0
    for g in range(lat.depth + 1):
        U = _images(K, src.levels[g], lat, g)
        sq = U**2 * tgt_m.weights
        full = sq.sum(axis=1)
        idx = np.arange(lat.size(g))
        own = sq.reshape(lat.size(g), lat.size(g), lat.block(g))[idx, idx].sum(axis=1)
        cut = max(cut, _ratio_sup(own, src_m.masses[g]))
        uncut = max(uncut, _ratio_sup(full, src_m.masses[g]))
    return cut, uncut


def testing_b_pairing(T: OperatorRep, b1: np.ndarray, b2: np.ndarray, r: int) -> float:
    """sup |<T(1_Q b1), 1_R b2>_nu| / (||1_Q b1|| ||1_R b2||) over generations within r."""
    lat = T.lattice
    best = 0.0
    for gq in range(lat.depth + 1):
        BQ = (T.kernel * b1[None, :]).reshape(lat.num_leaves, lat.size(gq), lat.block(gq)).sum(-1)
        nq = np.sqrt(lat.agg(b1**2 * T.mu.weights, gq))
        for gr in range(max(gq - r, 0), min(gq + r, lat.depth) + 1):
            P = (BQ * (b2 * T.nu.weights)[:, None]).reshape(lat.size(gr), lat.block(gr), -1).sum(axis=1)
            nr = np.sqrt(lat.agg(b2**2 * T.nu.weights, gr))
            den = nr[:, None] * nq[None, :]
            best = max(best, _ratio_sup(np.abs(P), den))
    return best


def range_bases(sys: AccretiveSystem, m: Measure, g: int, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal (in the sqrt-weighted coordinates) bases of every difference range at generation g.

    Returns ``(size(g), block(g), k)``: column j of cube i, divided by sqrt(weights),
    is a unit vector of L^2(m) in the range of the system difference of that cube.
    """
    lat = sys.lattice
    size, block, ar = lat.size(g), lat.block(g), lat.arity
    cb = block // ar
    w = m.weights.reshape(size, block)
    bq = sys.levels[g].reshape(size, block)
    bc = sys.levels[g + 1].reshape(size, block)
    G = np.zeros((size, block, ar + 1))
    C = np.zeros((size, ar + 1, block))
    iq = (bq * w).sum(axis=1)
    for j in range(ar):
        sl = slice(j * cb, (j + 1) * cb)
        G[:, sl, j] = bc[:, sl]
        ic = (bc[:, sl] * w[:, sl]).sum(axis=1)
        C[:, j, sl] = np.divide(w[:, sl], ic[:, None], out=np.zeros_like(w[:, sl]), where=ic[:, None] != 0)
    G[:, :, ar] = bq
    C[:, ar, :] = -np.divide(w, iq[:, None], out=np.zeros_like(w), where=iq[:, None] != 0)
    X = np.sqrt(w)[:, :, None] * (G @ (C @ C.transpose(0, 2, 1)))
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    keep = s > tol * np.maximum(s[:, :1], np.finfo(float).tiny)
    return U * keep[:, None, :]


def testing_b_delta(T: OperatorRep, pair: PairedSystem, r: int) -> float:
    """sup of the norms of T compressed between difference ranges of generations within r."""
    lat = T.lattice
    if lat.depth == 0:
        return 0.0
    A = T.scaled()
    b1 = [range_bases(pair.b1, pair.mu, g) for g in range(lat.depth)]
    b2 = [range_bases(pair.b2, pair.nu, g) for g in range(lat.depth)]
    best = 0.0
    for gq in range(lat.depth):
        for gr in range(max(gq - r, 0), min(gq + r, lat.depth - 1) + 1):
            A4 = A.reshape(lat.size(gr), lat.block(gr), lat.size(gq), lat.block(gq))
            comp = np.einsum("rxa,rxsy,syb->rsab", b2[gr], A4, b1[gq], optimize=True)
            best = max(best, float(np.linalg.norm(comp, ord=2, axis=(2, 3)).max()))
    return best


def testing_c(K, src: AccretiveSystem, src_m: Measure, tgt: AccretiveSystem, tgt_m: Measure, r: int) -> float:
    """sup over Q and P in ch^(r+1)(Q) changed in the target system of ||1_P T(b_Q)||^2 / mu(P)."""
    lat = src.lattice
    masks = tgt.change_masks()
    ar = lat.arity ** (r + 1)
    best = 0.0
    for g in range(lat.depth - r):
        gp = g + r + 1
        if not masks[gp].any():
            continue
        U = _images(K, src.levels[g], lat, g)
        sq = lat.agg(U**2 * tgt_m.weights, gp)  # (size_g, size_gp)
        qi = np.arange(lat.size(g))
        own = sq.reshape(lat.size(g), lat.size(g), ar)[qi, qi]
        mp = src_m.masses[gp].reshape(lat.size(g), ar)
        chosen = masks[gp].reshape(lat.size(g), ar)
        best = max(best, _ratio_sup(np.where(chosen, own, 0.0), np.where(chosen, mp, 1.0)))
    return best


def testing_global(T: OperatorRep, b1, b2, r: int, wl: WLReport | None = None) -> TestingReport:
    pair = constant_pair(T, b1, b2)
    Ts = adjoint(T)
    rep = TestingReport(radius=r)
    rep.t_a_cut_fwd, uncut_fwd = testing_a(T.kernel, pair.b1, T.mu, T.nu)
    rep.t_a_cut_adj, uncut_adj = testing_a(Ts.kernel, pair.b2, T.nu, T.mu)
    rep.t_a_fwd, rep.t_a_adj = rep.t_a_cut_fwd, rep.t_a_cut_adj
    rep.extras = {"t_a_uncut_fwd": uncut_fwd, "t_a_uncut_adj": uncut_adj}
    rep.t_b = testing_b_pairing(T, pair.b1.levels[0], pair.b2.levels[0], r)
    rep.t_b_delta = testing_b_delta(T, pair, r)
    wl = wl or check_wl_global(T, pair.b1, pair.b2, r)
    rep.wl_pass, rep.wl_max_violation = wl.passed, wl.max_violation
    return rep


def testing_local(T: OperatorRep, pair: PairedSystem, r: int, wl: WLReport | None = None) -> TestingReport:
    Ts = adjoint(T)
    rep = TestingReport(radius=r)
    rep.t_a_cut_fwd, rep.t_a_fwd = testing_a(T.kernel, pair.b1, pair.mu, pair.nu)
    rep.t_a_cut_adj, rep.t_a_adj = testing_a(Ts.kernel, pair.b2, pair.nu, pair.mu)
    rep.t_b = rep.t_b_delta = testing_b_delta(T, pair, r)
    rep.t_c_fwd = testing_c(T.kernel, pair.b1, pair.mu, pair.b2, pair.nu, r)
    rep.t_c_adj = testing_c(Ts.kernel, pair.b2, pair.nu, pair.b1, pair.mu, r)
    wl = wl or check_wl_local(T, pair, r)
    rep.wl_pass, rep.wl_max_violation, rep.csc_kappa = wl.passed, wl.max_violation, wl.csc_kappa
    return rep


@dataclass
class DoublingReport:
    value: float
    finite_part: float
    flagged: bool

    def to_json(self) -> dict:
        return {"value": self.value, "finite_part": self.finite_part, "flagged": self.flagged}


def doubling_constant(m: Measure) -> DoublingReport:
    """sup mu(parent)/mu(Q) over positive-mass non-root Q; infinite (flagged) if a positive
    parent has a null child."""
    lat = m.lattice
    best = 0.0
    flagged = False
    for g in range(1, lat.depth + 1):
        child = m.masses[g]
        parent = np.repeat(m.masses[g - 1], lat.arity)
        pos = child > 0
        if pos.any():
            best = max(best, float((parent[pos] / child[pos]).max()))
        flagged |= bool(np.any(~pos & (parent > 0)))
    return DoublingReport(np.inf if flagged else best, best, flagged)
