"""Command line entry point: generate, check, measure, trace and run ensembles.

Every command writes a JSON report (CSV for ensembles) and exits nonzero exactly
when one of the checks it asserts fails.  Input problems exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .accretive_system import random_stopping_system, stopping_tau, verify_system
from .carleson import sparsity_check
from .instances import (
    MEASURE_LAWS,
    OPERATOR_FAMILIES,
    SYSTEM_MODES,
    GenParams,
    InfeasibleParams,
    Instance,
    SchemaError,
    generate,
    make_measure,
    random_pair_functions,
)
from .lattice import Lattice
from .operators import (
    WL_TOL,
    adjoint,
    check_wl_global,
    check_wl_local,
    operator_norm,
    testing_global,
    testing_local,
)
from .tracer import TracePreconditionError, trace_appendix, trace_global, trace_local

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _finite(x):
    """JSON has no infinities; write them as strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return _finite(x.item())
    return x


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(_finite(report), sort_keys=True, indent=1) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _params(a: argparse.Namespace) -> GenParams:
    return GenParams(n=a.n, depth=a.depth, seed=a.seed, radius=a.radius, delta=a.delta,
                     cbound=a.cbound, measure=a.measure, system=a.system, operator=a.operator)


def _wl(inst: Instance, tol: float):
    T, pair, r = inst.operator, inst.pair, inst.radius
    if inst.local:
        return check_wl_local(T, pair, r, tol=tol)
    return check_wl_global(T, pair.b1, pair.b2, r, tol=tol)


def _testing(inst: Instance, wl):
    T, pair, r = inst.operator, inst.pair, inst.radius
    if inst.local:
        return testing_local(T, pair, r, wl=wl)
    return testing_global(T, pair.b1, pair.b2, r, wl=wl)


# commands ------------------------------------------------------------------------------

def cmd_gen(a) -> int:
    inst = generate(_params(a))
    text = inst.dumps()
    if a.out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(a.out, "w") as fh:
            fh.write(text)
    return EXIT_OK


def check_report(inst: Instance, tol: float = WL_TOL) -> dict:
    pair = inst.pair
    acc = {
        "b1": verify_system(pair.b1, pair.mu).to_json(),
        "b2": verify_system(pair.b2, pair.nu).to_json(),
    }
    sparsity = pair.sparsity()
    wl = _wl(inst, tol)
    tst = _testing(inst, wl)
    ok = acc["b1"]["ok"] and acc["b2"]["ok"] and wl.passed and all(math.isfinite(v) for v in sparsity.values())
    return {"pass": bool(ok), "mode": "local" if inst.local else "global", "radius": inst.radius,
            "accretivity": acc, "sparsity": sparsity, "wl": wl.to_json(), "testing": tst.to_json()}


def cmd_check(a) -> int:
    rep = check_report(Instance.load(a.instance), a.tol)
    _emit(rep, a.out)
    return EXIT_OK if rep["pass"] else EXIT_FAIL


def norm_report(inst: Instance, tol: float = WL_TOL) -> dict:
    T = inst.operator
    wl = _wl(inst, tol)
    tst = _testing(inst, wl)
    nrm = operator_norm(T)
    denom = math.sqrt(tst.t_a_fwd) + math.sqrt(tst.t_a_adj) + tst.t_b
    ratio = nrm / denom if denom > 0 else (math.inf if nrm > 0 else 0.0)
    gap = abs(nrm - operator_norm(adjoint(T)))
    return {"pass": bool(gap <= 1e-9 * max(1.0, nrm)), "norm": nrm, "adjoint_norm_gap": gap,
            "ratio": ratio, "testing": tst.to_json()}


def cmd_norm(a) -> int:
    rep = norm_report(Instance.load(a.instance), a.tol)
    _emit(rep, a.out)
    return EXIT_OK if rep["pass"] else EXIT_FAIL


def _load_function(path: str, lat: Lattice) -> np.ndarray:
    with open(path) as fh:
        try:
            vals = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if isinstance(vals, dict):
        vals = vals.get("values")
    if not isinstance(vals, list) or len(vals) != lat.num_leaves:
        raise SchemaError(f"{path}: expected a list of {lat.num_leaves} leaf values in lexicographic order")
    return lat.from_lex(vals)


def trace_report(inst: Instance, f: np.ndarray, g: np.ndarray) -> dict:
    T, pair, r = inst.operator, inst.pair, inst.radius
    try:
        if inst.local:
            res = trace_local(T, pair, r, f, g)
        else:
            res = trace_global(T, pair.b1, pair.b2, r, f, g)
    except TracePreconditionError as e:
        return {"pass": False, "error": str(e)}
    out = {"pass": res.passed, "trace": res.to_json()}
    if inst.local:
        apps = {"b1": trace_appendix(pair.b1, pair.mu, f), "b2": trace_appendix(pair.b2, pair.nu, g)}
        out["appendix"] = {k: v.to_json() for k, v in apps.items()}
        out["pass"] = res.passed and all(v.passed for v in apps.values())
    return out


def cmd_trace(a) -> int:
    inst = Instance.load(a.instance)
    f, g = random_pair_functions(inst, a.seed)
    if a.f:
        f = _load_function(a.f, inst.lattice)
    if a.g:
        g = _load_function(a.g, inst.lattice)
    rep = trace_report(inst, f, g)
    _emit(rep, a.out)
    return EXIT_OK if rep["pass"] else EXIT_FAIL


ENSEMBLE_COLUMNS = [
    "seed", "status", "n", "depth", "measure", "system", "operator", "radius", "delta", "cbound",
    "lam1_mu", "lam1_nu", "lam2_mu", "lam2_nu", "wl_pass", "wl_max_violation", "csc_kappa",
    "t_a_fwd", "t_a_adj", "t_b", "t_b_delta", "t_c_fwd", "t_c_adj", "norm", "ratio",
    "traced_constant", "trace_pass_rate", "trace_pass",
]


def ensemble_row(p: GenParams) -> dict:
    row = {"seed": p.seed, "n": p.n, "depth": p.depth, "measure": p.measure, "system": p.system,
           "operator": p.operator, "radius": p.radius, "delta": p.delta, "cbound": p.cbound}
    try:
        inst = generate(p)
    except InfeasibleParams as e:
        row["status"] = f"infeasible: {e}"
        return row
    row.update(inst.pair.sparsity())
    nrep = norm_report(inst)
    tst = nrep["testing"]
    row.update({k: tst[k] for k in ("t_a_fwd", "t_a_adj", "t_b", "t_b_delta", "t_c_fwd", "t_c_adj")})
    row.update(wl_pass=tst["wl_pass"], wl_max_violation=tst["wl_max_violation"],
               csc_kappa=tst["csc_kappa"], norm=nrep["norm"], ratio=nrep["ratio"])
    if not tst["wl_pass"]:
        row["status"] = "not well-localized"
        return row
    f, g = random_pair_functions(inst, p.seed)
    rep = trace_report(inst, f, g)
    steps = rep["trace"]["steps"] + [s for v in rep.get("appendix", {}).values() for s in v["steps"]]
    row.update(traced_constant=rep["trace"]["total_constant"],
               trace_pass_rate=sum(s["pass"] for s in steps) / len(steps), trace_pass=rep["pass"])
    row["status"] = "ok" if rep["pass"] else "trace step failed"
    return row


def cmd_ensemble(a) -> int:
    base = _params(a)
    plist = [replace(base, seed=base.seed + k) for k in range(a.count)]
    if a.workers == 1:
        rows = [ensemble_row(p) for p in plist]
    else:
        with ProcessPoolExecutor(max_workers=a.workers) as ex:
            # map keeps submission order, so rows come out in seed order
            rows = list(ex.map(ensemble_row, plist, chunksize=max(1, a.count // 32)))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ENSEMBLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, "") for k in ENSEMBLE_COLUMNS})
    if a.out in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        with open(a.out, "w") as fh:
            fh.write(buf.getvalue())
    failed = [r for r in rows if r.get("status") == "trace step failed"]
    return EXIT_FAIL if failed else EXIT_OK


def stopping_report(p: GenParams, tol: float = 1e-12) -> dict:
    lat = Lattice(p.n, p.depth)
    m = make_measure(lat, p.measure, np.random.default_rng(np.random.SeedSequence(p.seed).spawn(1)[0]))
    sys_, rep = random_stopping_system(m, p.delta, p.cbound, p.seed)
    tau = stopping_tau(p.delta, p.cbound)
    by_gen: dict[int, float] = {}
    for item in rep.ratios:
        g = item["cube"]["g"]
        by_gen[g] = max(by_gen.get(g, 0.0), float(item["ratio"]))
    lam = sparsity_check(sys_.change_set(), m)
    ok_ratio = all(v <= tau + tol for v in by_gen.values())
    ok_carleson = lam <= 1 / (1 - tau) + 0.01
    verified = verify_system(sys_, m)
    return {
        "pass": bool(ok_ratio and ok_carleson and verified.ok),
        "tau": tau,
        "threshold": rep.threshold,
        "generations": [{"generation": g, "max_ratio": by_gen[g]} for g in sorted(by_gen)],
        "max_ratio": rep.max_ratio,
        "carleson_constant": lam,
        "carleson_bound": 1 / (1 - tau),
        "system": verified.to_json(),
        "report": rep.to_json(),
    }


def cmd_stopping(a) -> int:
    p = _params(a)
    p.validate()
    if not p.delta < p.cbound:
        raise InfeasibleParams("the stopping construction needs delta < cbound")
    rep = stopping_report(p, a.tol if a.tol is not None else 1e-12)
    _emit(rep, a.out)
    return EXIT_OK if rep["pass"] else EXIT_FAIL


# argument parsing ------------------------------------------------------------------------

def _add_common(sp: argparse.ArgumentParser, tol_default) -> None:
    sp.add_argument("--out", default=None, help="output path (default: stdout)")
    sp.add_argument("--tol", type=float, default=tol_default, help="check tolerance")


def _add_gen(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--n", type=int, default=1, help="dimension (arity 2^n)")
    sp.add_argument("--depth", type=int, default=4, help="number of generations below the root")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--radius", type=int, default=0, help="well-localization radius r")
    sp.add_argument("--delta", type=float, default=0.5, help="accretivity floor")
    sp.add_argument("--cbound", type=float, default=2.0, help="sup bound of the test functions")
    sp.add_argument("--measure", choices=MEASURE_LAWS, default="uniform")
    sp.add_argument("--system", choices=SYSTEM_MODES, default="constant")
    sp.add_argument("--operator", choices=OPERATOR_FAMILIES, default="multiplier")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dyadtb", description="Finite dyadic two-weight Tb lab")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", help="write a seeded instance file")
    _add_gen(sp)
    _add_common(sp, WL_TOL)
    sp.set_defaults(func=cmd_gen)

    for name, func, helptext in (("check", cmd_check, "accretivity, sparsity, localization and testing"),
                                 ("norm", cmd_norm, "operator norm against the testing constants")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("instance")
        _add_common(sp, WL_TOL)
        sp.set_defaults(func=func)

    sp = sub.add_parser("trace", help="step-by-step audit of the bound")
    sp.add_argument("instance")
    sp.add_argument("--seed", type=int, default=0, help="seed for random f and g")
    sp.add_argument("--f", default=None, help="JSON list of leaf values of f (lexicographic order)")
    sp.add_argument("--g", default=None, help="JSON list of leaf values of g (lexicographic order)")
    _add_common(sp, WL_TOL)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("ensemble", help="CSV of constants over consecutive seeds")
    _add_gen(sp)
    sp.add_argument("--count", type=int, default=10, help="number of instances")
    sp.add_argument("--workers", type=int, default=None, help="worker processes (default: cpu count)")
    _add_common(sp, WL_TOL)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("stopping", help="per-generation ratios of the stopping construction")
    _add_gen(sp)
    _add_common(sp, 1e-12)
    sp.set_defaults(func=cmd_stopping)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleParams, SchemaError, OSError) as e:
        print(f"dyadtb {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
