"""Seeded instance generation and the instance file format.

An instance bundles a lattice, two measures, a pair of accretive systems (constant
systems stand for a single accretive function), an operator and a radius.  The
seed fixes everything, and files are written with sorted keys so regenerating
with the same parameters reproduces the same bytes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .accretive_system import (
    AccretiveSystem,
    PairedSystem,
    StoppingInputError,
    random_stopping_system,
    random_table_system,
    verify_system,
)
from .lattice import DepthError, Lattice
from .measure import Measure
from .operators import (
    GeneratorExhausted,
    OperatorRep,
    make_haar_multiplier,
    random_dense_operator,
    sample_well_localized,
)

MEASURE_LAWS = ("uniform", "iid-positive", "atom-heavy")
SYSTEM_MODES = ("constant", "stopping", "table")
OPERATOR_FAMILIES = ("multiplier", "shift-candidate", "dense-random")
# dense kernels are N x N, so keep N modest
MAX_LEAVES = 4096
FORMAT = "dyadtb-instance"
VERSION = 1


class InfeasibleParams(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class GenParams:
    n: int = 1
    depth: int = 4
    seed: int = 0
    radius: int = 0
    delta: float = 0.5
    cbound: float = 2.0
    measure: str = "uniform"
    system: str = "constant"
    operator: str = "multiplier"

    def validate(self) -> None:
        if self.measure not in MEASURE_LAWS:
            raise InfeasibleParams(f"unknown measure law {self.measure!r}; choose from {MEASURE_LAWS}")
        if self.system not in SYSTEM_MODES:
            raise InfeasibleParams(f"unknown system mode {self.system!r}; choose from {SYSTEM_MODES}")
        if self.operator not in OPERATOR_FAMILIES:
            raise InfeasibleParams(f"unknown operator family {self.operator!r}; choose from {OPERATOR_FAMILIES}")
        if self.n < 1 or self.depth < 0 or self.radius < 0:
            raise InfeasibleParams("need n >= 1, depth >= 0 and radius >= 0")
        if self.n * self.depth > 60 or 2 ** (self.n * self.depth) > MAX_LEAVES:
            raise InfeasibleParams(
                f"2^(n*depth) = 2^{self.n * self.depth} leaves exceeds the dense-kernel limit {MAX_LEAVES}")
        if not 0 < self.delta <= self.cbound:
            raise InfeasibleParams("need 0 < delta <= cbound")
        if self.system == "stopping" and not self.delta < self.cbound:
            raise InfeasibleParams("the stopping construction needs delta < cbound")


@dataclass
class Instance:
    params: GenParams
    pair: PairedSystem
    operator: OperatorRep

    @property
    def lattice(self) -> Lattice:
        return self.operator.lattice

    @property
    def mu(self) -> Measure:
        return self.pair.mu

    @property
    def nu(self) -> Measure:
        return self.pair.nu

    @property
    def radius(self) -> int:
        return self.params.radius

    @property
    def seed(self) -> int:
        return self.params.seed

    @property
    def local(self) -> bool:
        """Constant systems are traced with the single-function argument, the rest locally."""
        return self.params.system != "constant"

    def to_json(self) -> dict:
        lat = self.lattice
        return {
            "format": FORMAT,
            "version": VERSION,
            "params": asdict(self.params),
            "lattice": lat.to_json(),
            "mu": lat.to_lex(self.mu.weights).tolist(),
            "nu": lat.to_lex(self.nu.weights).tolist(),
            "b1": self.pair.b1.to_json(),
            "b2": self.pair.b2.to_json(),
            "operator": self.operator.to_json(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "Instance":
        if not isinstance(obj, dict) or obj.get("format") != FORMAT:
            raise SchemaError(f"not an instance file (expected format {FORMAT!r})")
        try:
            params = GenParams(**obj["params"])
            lat = Lattice.from_json(obj["lattice"])
            mu = Measure(lat, lat.from_lex(obj["mu"]))
            nu = Measure(lat, lat.from_lex(obj["nu"]))
            b1 = AccretiveSystem.from_json(obj["b1"], lat)
            b2 = AccretiveSystem.from_json(obj["b2"], lat)
            op = OperatorRep.from_json(obj["operator"], mu, nu)
        except KeyError as e:
            raise SchemaError(f"instance is missing field {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise SchemaError(f"malformed instance: {e}") from None
        if op.lattice != lat:
            raise SchemaError("operator lattice does not match the instance lattice")
        return cls(params, PairedSystem(b1, b2, mu, nu), op)

    @classmethod
    def load(cls, path: str) -> "Instance":
        with open(path) as fh:
            text = fh.read()
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        return cls.from_json(obj)


def make_measure(lat: Lattice, law: str, rng: np.random.Generator) -> Measure:
    N = lat.num_leaves
    if law == "uniform":
        return Measure.uniform(lat)
    if law == "iid-positive":
        w = rng.uniform(0.1, 1.0, N)
    elif law == "atom-heavy":
        # a few leaves carry most of the mass; every leaf keeps a small positive floor
        w = rng.gamma(0.2, size=N) + 1e-6
        heavy = rng.choice(N, size=max(1, N // 16), replace=False)
        w[heavy] += 10.0 * rng.random(heavy.size)
    else:
        raise InfeasibleParams(f"unknown measure law {law!r}")
    return Measure(lat, w / w.sum())


def _constant_system(m: Measure, p: GenParams, rng: np.random.Generator) -> AccretiveSystem:
    b = rng.uniform(p.delta, p.cbound, m.lattice.num_leaves)
    return AccretiveSystem.constant(b, m, p.delta, p.cbound)


def _stopping_system(m: Measure, p: GenParams, seed: int) -> AccretiveSystem:
    try:
        sys, _ = random_stopping_system(m, p.delta, p.cbound, seed)
    except StoppingInputError as e:
        raise InfeasibleParams(str(e)) from None
    return sys


def generate(p: GenParams) -> Instance:
    p.validate()
    try:
        lat = Lattice(p.n, p.depth)
    except DepthError as e:
        raise InfeasibleParams(str(e)) from None
    ss = np.random.SeedSequence(p.seed)
    r_mu, r_nu, r_b1, r_b2, r_op = (np.random.default_rng(s) for s in ss.spawn(5))
    mu = make_measure(lat, p.measure, r_mu)
    # the multiplier family is the standard difference expansion of a single measure
    nu = mu if p.operator == "multiplier" else make_measure(lat, p.measure, r_nu)
    if p.system == "constant":
        b1, b2 = _constant_system(mu, p, r_b1), _constant_system(nu, p, r_b2)
    elif p.system == "stopping":
        b1 = _stopping_system(mu, p, int(r_b1.integers(2**31)))
        b2 = _stopping_system(nu, p, int(r_b2.integers(2**31)))
    else:
        b1 = random_table_system(lat, r_b1, lo=p.delta, hi=p.cbound)
        b2 = random_table_system(lat, r_b2, lo=p.delta, hi=p.cbound)
    pair = PairedSystem(b1, b2, mu, nu)
    for name, sys, m in (("b1", b1, mu), ("b2", b2, nu)):
        rep = verify_system(sys, m)
        if not rep.ok:
            raise InfeasibleParams(f"generated system {name} failed verification: {rep.failures[:3]}")
    if not all(np.isfinite(v) for v in pair.sparsity().values()):
        raise InfeasibleParams("a change set is not sparse in one of the measures")

    if p.operator == "multiplier":
        lam = [r_op.uniform(-1, 1, lat.size(g)) for g in range(lat.depth)]
        op = make_haar_multiplier(lat, mu, lam)
    elif p.operator == "shift-candidate":
        try:
            op, _, _ = sample_well_localized(pair, p.radius, r_op)
        except GeneratorExhausted as e:
            raise InfeasibleParams(str(e)) from None
    else:
        op = random_dense_operator(lat, mu, nu, r_op)
    return Instance(p, pair, op)


def random_pair_functions(inst: Instance, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Test functions f over mu and g over nu for tracing."""
    rng = np.random.default_rng([seed, 1])
    N = inst.lattice.num_leaves
    return rng.normal(size=N), rng.normal(size=N)
