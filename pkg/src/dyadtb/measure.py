"""Leaf-atom measures, step functions, weighted averages and pairings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import CubeId, Lattice


class ShapeError(ValueError):
    pass


def _check(lattice: Lattice, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[-1:] != (lattice.num_leaves,):
        raise ShapeError(f"expected {lattice.num_leaves} leaf values, got shape {f.shape}")
    return f


@dataclass(frozen=True)
class StepFunction:
    """Leaf-constant real function; leaf values are in Morton order."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self):
        v = _check(self.lattice, self.values)
        if not np.all(np.isfinite(v)):
            raise ValueError("step function values must be finite")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def to_json(self) -> dict:
        return {"lattice": self.lattice.to_json(), "values": self.lattice.to_lex(self.values).tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "StepFunction":
        lat = Lattice.from_json(obj["lattice"])
        return cls(lat, lat.from_lex(obj["values"]))


@dataclass(frozen=True, eq=False)
class Measure:
    """Nonnegative leaf weights with per-generation cube masses."""

    lattice: Lattice
    weights: np.ndarray
    masses: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        w = _check(self.lattice, self.weights)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be finite and nonnegative")
        object.__setattr__(self, "weights", w)
        lat = self.lattice
        # top-down aggregation from the leaves keeps parent = sum of children exactly
        masses = [w]
        for g in range(lat.depth - 1, -1, -1):
            masses.append(masses[-1].reshape(lat.size(g), lat.arity).sum(axis=1))
        object.__setattr__(self, "masses", masses[::-1])

    @classmethod
    def uniform(cls, lattice: Lattice) -> "Measure":
        return cls(lattice, np.full(lattice.num_leaves, 1.0 / lattice.num_leaves))

    def mass(self, Q: CubeId) -> float:
        return float(self.masses[Q.g][self.lattice.index(Q)])

    def level_averages(self, f, g: int) -> np.ndarray:
        """Averages of ``f`` (last axis leaves) over every cube of generation ``g``."""
        f = _check(self.lattice, f)
        num = self.lattice.agg(f * self.weights, g)
        m = self.masses[g]
        return np.divide(num, m, out=np.zeros_like(num), where=m > 0)

    def to_json(self) -> dict:
        return {"lattice": self.lattice.to_json(), "leaf_weights": self.lattice.to_lex(self.weights).tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Measure":
        lat = Lattice.from_json(obj["lattice"])
        return cls(lat, lat.from_lex(obj["leaf_weights"]))


def mass(m: Measure, Q: CubeId) -> float:
    return m.mass(Q)


def average(f, Q: CubeId, m: Measure) -> float:
    """Weighted average of ``f`` over ``Q``; zero on zero-mass cubes."""
    f = _check(m.lattice, f)
    sl = m.lattice.leaf_slice(Q)
    mq = m.mass(Q)
    if mq == 0:
        return 0.0
    return float(np.dot(f[sl], m.weights[sl]) / mq)


def inner(f, g, m: Measure) -> float:
    f = _check(m.lattice, f)
    g = _check(m.lattice, g)
    return float(np.dot(f * g, m.weights))


def norm(f, m: Measure) -> float:
    return float(np.sqrt(max(inner(f, f, m), 0.0)))


def indicator(lattice: Lattice, Q: CubeId) -> np.ndarray:
    out = np.zeros(lattice.num_leaves)
    out[lattice.leaf_slice(Q)] = 1.0
    return out


def dyadic_maximal(f, m: Measure) -> np.ndarray:
    """Leafwise max over all ancestors Q of the average of ``|f|`` on Q."""
    a = np.abs(_check(m.lattice, f))
    lat = m.lattice
    return np.max([lat.spread(m.level_averages(a, g), g) for g in range(lat.depth + 1)], axis=0)
