"""Carleson sequences, the dyadic embedding, sparsity and the unweighted square function."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import CubeId, Lattice
from .measure import Measure, norm

# classical constant of the dyadic Carleson embedding (Doob's L^2 inequality)
EMBEDDING_CONSTANT = 4.0


class ZeroNormError(ValueError):
    pass


@dataclass
class CubeSequence:
    """Nonnegative per-cube values, one Morton-ordered array per generation."""

    lattice: Lattice
    levels: list[np.ndarray]

    def __post_init__(self):
        lat = self.lattice
        self.levels = [np.asarray(a, dtype=float) for a in self.levels]
        if len(self.levels) != lat.depth + 1 or any(
            a.shape != (lat.size(g),) for g, a in enumerate(self.levels)
        ):
            raise ValueError("cube sequence does not match the lattice")
        if any(np.any(a < 0) for a in self.levels):
            raise ValueError("cube sequence values must be nonnegative")

    @classmethod
    def zeros(cls, lattice: Lattice) -> "CubeSequence":
        return cls(lattice, [np.zeros(lattice.size(g)) for g in range(lattice.depth + 1)])

    @classmethod
    def from_mapping(cls, lattice: Lattice, values: dict[CubeId, float]) -> "CubeSequence":
        seq = cls.zeros(lattice)
        for c, v in values.items():
            seq.levels[c.g][lattice.index(c)] = v
        seq.__post_init__()
        return seq

    def __getitem__(self, c: CubeId) -> float:
        return float(self.levels[c.g][self.lattice.index(c)])

    def to_json(self) -> list[dict]:
        lat = self.lattice
        return [
            {"cube": c.to_json(), "value": self[c]}
            for c in lat.cubes()
            if self[c] != 0.0
        ]

    @classmethod
    def from_json(cls, lattice: Lattice, items: list[dict]) -> "CubeSequence":
        return cls.from_mapping(lattice, {CubeId.from_json(i["cube"]): float(i["value"]) for i in items})


def subtree_sums(a: CubeSequence) -> list[np.ndarray]:
    """``out[g][i]`` = sum of ``a_Q`` over all Q contained in cube (g, i)."""
    lat = a.lattice
    out = [None] * (lat.depth + 1)
    out[lat.depth] = a.levels[lat.depth].copy()
    for g in range(lat.depth - 1, -1, -1):
        out[g] = a.levels[g] + out[g + 1].reshape(lat.size(g), lat.arity).sum(axis=1)
    return out


def carleson_ratios(a: CubeSequence, m: Measure) -> list[np.ndarray]:
    """Per-cube ratio sum_{Q in R} a_Q / mu(R) (inf when the mass is zero but the sum is not)."""
    ratios = []
    for s, mass in zip(subtree_sums(a), m.masses):
        r = np.zeros_like(s)
        pos = mass > 0
        r[pos] = s[pos] / mass[pos]
        r[(~pos) & (s > 0)] = np.inf
        ratios.append(r)
    return ratios


def carleson_constant(a: CubeSequence, m: Measure) -> float:
    return float(max(r.max(initial=0.0) for r in carleson_ratios(a, m)))


def embedding_ratio(a: CubeSequence, m: Measure, f) -> float:
    nf = norm(f, m)
    if nf == 0:
        raise ZeroNormError("embedding ratio needs a nonzero function")
    total = sum(
        float(np.dot(a.levels[g], m.level_averages(f, g) ** 2))
        for g in range(m.lattice.depth + 1)
    )
    return total / nf**2


def sparsity_sequence(S, m: Measure) -> CubeSequence:
    """The sequence mu(Q) 1_{Q in S}."""
    lat = m.lattice
    seq = CubeSequence.zeros(lat)
    for c in S:
        seq.levels[c.g][lat.index(c)] = m.mass(c)
    return seq


def sparsity_check(S, m: Measure) -> float:
    return carleson_constant(sparsity_sequence(S, m), m)


def usf_linear(f, m: Measure) -> np.ndarray:
    """Signed square roots of the usf terms, concatenated over generations (linear in f)."""
    lat = m.lattice
    out = []
    for g in range(1, lat.depth + 1):
        up = np.repeat(m.level_averages(f, g - 1), lat.arity, axis=-1)
        out.append((up - m.level_averages(f, g)) * np.sqrt(m.masses[g]))
    return np.concatenate(out, axis=-1) if out else np.zeros(np.shape(f)[:-1] + (0,))


def usf_terms(f, m: Measure) -> list[np.ndarray]:
    """Per non-root cube Q: |<f>_{Q^(1)} - <f>_Q|^2 mu(Q), one array per generation >= 1."""
    lat = m.lattice
    out = []
    for g in range(1, lat.depth + 1):
        up = np.repeat(m.level_averages(f, g - 1), lat.arity, axis=-1)
        out.append((up - m.level_averages(f, g)) ** 2 * m.masses[g])
    return out


def usf_ratio(f, m: Measure) -> float:
    nf = norm(f, m)
    if nf == 0:
        raise ZeroNormError("square function ratio needs a nonzero function")
    return float(sum(t.sum() for t in usf_terms(f, m))) / nf**2


def usf_sup(m: Measure) -> float:
    """Exact sup of usf_ratio over all f."""
    images = usf_linear(np.eye(m.lattice.num_leaves), m)
    return rayleigh_sup(images @ images.T, m.weights)


def embedding_sup(a: CubeSequence, m: Measure) -> float:
    """Exact sup over f of embedding_ratio(a, m, f)."""
    basis = np.eye(m.lattice.num_leaves)
    images = np.concatenate(
        [m.level_averages(basis, g) * np.sqrt(a.levels[g]) for g in range(m.lattice.depth + 1)],
        axis=-1,
    )
    return rayleigh_sup(images @ images.T, m.weights)


def rayleigh_sup(gram: np.ndarray, w: np.ndarray) -> float:
    """Largest value of x^T gram x / sum(w x^2), over x supported on positive weights."""
    pos = w > 0
    if not pos.any():
        return 0.0
    s = 1.0 / np.sqrt(w[pos])
    A = gram[np.ix_(pos, pos)] * s[:, None] * s[None, :]
    return float(np.linalg.eigvalsh((A + A.T) / 2)[-1])
