"""Finite dyadic trees: cube addressing, navigation and enumeration.

Leaves are stored internally in Morton (Z-order) so that every cube is a
contiguous block of leaf indices.  Within a generation a cube's *index* is the
Morton code of its coordinates; ``Lattice.cubes`` still enumerates in
lexicographic coordinate order for reports.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

MAX_LEAVES = 2**22


class DepthError(ValueError):
    """Raised when a request goes below the leaf generation."""


@dataclass(frozen=True, order=True)
class CubeId:
    g: int
    coords: tuple[int, ...]

    def to_json(self) -> dict:
        return {"g": self.g, "coords": list(self.coords)}

    @classmethod
    def from_json(cls, obj: dict) -> "CubeId":
        return cls(int(obj["g"]), tuple(int(c) for c in obj["coords"]))

    def __repr__(self) -> str:
        return f"Cube(g={self.g}, {list(self.coords)})"


@dataclass(frozen=True)
class Lattice:
    n: int
    depth: int

    def __post_init__(self):
        if self.n < 1 or self.depth < 0:
            raise ValueError(f"invalid lattice n={self.n} depth={self.depth}")
        if 2 ** (self.n * self.depth) > MAX_LEAVES:
            raise DepthError(
                f"lattice n={self.n} depth={self.depth} has 2^{self.n * self.depth} leaves"
            )

    # sizes ---------------------------------------------------------------
    @property
    def arity(self) -> int:
        return 2**self.n

    @property
    def num_leaves(self) -> int:
        return 2 ** (self.n * self.depth)

    def size(self, g: int) -> int:
        """Number of cubes in generation ``g``."""
        return 2 ** (self.n * g)

    def block(self, g: int) -> int:
        """Number of leaves under one cube of generation ``g``."""
        return 2 ** (self.n * (self.depth - g))

    def offset(self, g: int) -> int:
        return sum(self.size(h) for h in range(g))

    @property
    def num_cubes(self) -> int:
        return self.offset(self.depth + 1)

    @property
    def root(self) -> CubeId:
        return CubeId(0, (0,) * self.n)

    # Morton codes ----------------------------------------------------------
    def index(self, c: CubeId) -> int:
        """Morton index of ``c`` within its generation."""
        self.validate(c)
        code = 0
        for level in range(c.g):
            bit = c.g - 1 - level
            digit = 0
            for x in c.coords:
                digit = (digit << 1) | ((x >> bit) & 1)
            code = (code << self.n) | digit
        return code

    def cube(self, g: int, index: int) -> CubeId:
        coords = [0] * self.n
        for level in range(g):
            digit = (index >> (self.n * (g - 1 - level))) & (self.arity - 1)
            for i in range(self.n):
                coords[i] = (coords[i] << 1) | ((digit >> (self.n - 1 - i)) & 1)
        return CubeId(g, tuple(coords))

    def global_id(self, c: CubeId) -> int:
        return self.offset(c.g) + self.index(c)

    def from_global_id(self, k: int) -> CubeId:
        g = 0
        while k >= self.size(g):
            k -= self.size(g)
            g += 1
        return self.cube(g, k)

    def leaf_slice(self, c: CubeId) -> slice:
        b = self.block(c.g)
        i = self.index(c)
        return slice(i * b, (i + 1) * b)

    def validate(self, c: CubeId) -> None:
        if not 0 <= c.g <= self.depth or len(c.coords) != self.n:
            raise ValueError(f"{c!r} is not a cube of {self}")
        if any(not 0 <= x < 2**c.g for x in c.coords):
            raise ValueError(f"{c!r} has coordinates out of range")

    # navigation -----------------------------------------------------------
    def parent(self, c: CubeId) -> CubeId | None:
        if c.g == 0:
            return None
        return CubeId(c.g - 1, tuple(x >> 1 for x in c.coords))

    def ancestor(self, c: CubeId, r: int) -> CubeId:
        """Order-``r`` ancestor; requests past the root return the root."""
        if r < 0:
            raise ValueError("ancestor order must be nonnegative")
        r = min(r, c.g)
        return CubeId(c.g - r, tuple(x >> r for x in c.coords))

    def children(self, c: CubeId) -> list[CubeId]:
        return self.descendants_at(c, 1)

    def descendants_at(self, c: CubeId, r: int) -> list[CubeId]:
        if c.g + r > self.depth:
            raise DepthError(f"{c!r} has no descendants {r} generations down (depth {self.depth})")
        side = 2**r
        return [
            CubeId(c.g + r, tuple((x << r) + o for x, o in zip(c.coords, offs)))
            for offs in product(range(side), repeat=self.n)
        ]

    def contains(self, a: CubeId, b: CubeId) -> bool:
        """True iff cube ``b`` is contained in cube ``a``."""
        if b.g < a.g:
            return False
        return self.ancestor(b, b.g - a.g) == a

    def cubes(self, g: int | None = None) -> list[CubeId]:
        """Cubes in (generation, lexicographic coords) order."""
        gens = range(self.depth + 1) if g is None else [g]
        return [
            CubeId(h, coords)
            for h in gens
            for coords in product(range(2**h), repeat=self.n)
        ]

    # array helpers ---------------------------------------------------------
    def agg(self, values: np.ndarray, g: int) -> np.ndarray:
        """Sum leaf values (last axis) over each cube of generation ``g``."""
        values = np.asarray(values)
        shape = values.shape[:-1] + (self.size(g), self.block(g))
        return values.reshape(shape).sum(axis=-1)

    def spread(self, per_cube: np.ndarray, g: int) -> np.ndarray:
        """Broadcast per-cube values (last axis) back to the leaves."""
        return np.repeat(np.asarray(per_cube), self.block(g), axis=-1)

    def anc_index(self, idx, g: int, h: int):
        """Index at generation ``h <= g`` of the ancestor of cube(s) ``idx`` at ``g``."""
        return np.asarray(idx) >> (self.n * (g - h))

    @cached_property
    def lex_to_morton(self) -> np.ndarray:
        """``perm[i]`` is the Morton position of the i-th leaf in lexicographic order."""
        return np.array([self.index(c) for c in self.cubes(self.depth)], dtype=np.int64)

    def to_lex(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[..., self.lex_to_morton]

    def from_lex(self, values) -> np.ndarray:
        out = np.empty(self.num_leaves, dtype=float)
        out[self.lex_to_morton] = np.asarray(values, dtype=float)
        return out

    def to_json(self) -> dict:
        return {"n": self.n, "depth": self.depth}

    @classmethod
    def from_json(cls, obj: dict) -> "Lattice":
        return cls(int(obj["n"]), int(obj["depth"]))
