"""Command-line front end: ``index``, ``simulate`` and ``verify``."""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .index import (
    DegenerateAffineMapError,
    IndexConvergenceError,
    SingularSystemError,
    build_index_table,
)
from .optimal import StateSpaceGuardError, ValueIterationConvergenceError, optimal_policy_vi
from .policies import Policy
from .scenario import PRESETS, ScenarioError, load_scenario
from .simulator import SimConfig, SimulationError, compare, dump_json, run
from .verify import DEFAULT_PRESETS, run_verify

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_GUARD, EXIT_PROPERTY = 0, 1, 2, 3, 4


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _scenario(args):
    try:
        scn = load_scenario(args.scenario)
    except ScenarioError as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None
    ix = scn.index
    if getattr(args, "method", None):
        ix.method = args.method
    if getattr(args, "eta", None) is not None:
        ix.eta = args.eta
    if getattr(args, "nmax", None) is not None:
        ix.n_max = args.nmax
    ex = scn.experiment
    if getattr(args, "seed", None) is not None:
        ex.seed = args.seed
    if getattr(args, "replications", None) is not None:
        ex.replications = args.replications
    if getattr(args, "horizon", None) is not None:
        ex.horizon = args.horizon
    if getattr(args, "policies", None):
        ex.policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    return scn


def _table(scn):
    ix = scn.index
    try:
        return build_index_table(
            scn.topology, max_queue=ix.max_queue, method=ix.method, n_max=ix.n_max, eta=ix.eta, tol=ix.tol
        )
    except (SingularSystemError, DegenerateAffineMapError, IndexConvergenceError) as exc:
        raise _Fail(EXIT_SOLVER, f"solver failure: {exc}") from None
    except ValueError as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None


def cmd_index(args) -> int:
    scn = _scenario(args)
    table = _table(scn)
    text = table.to_csv(args.out)
    if not args.out:
        sys.stdout.write(text)
    strict = table.monotone(strict=True)
    weak = table.monotone(strict=False)
    for i, k in table.edges:
        label = "strictly decreasing" if strict[(i, k)] else ("non-increasing" if weak[(i, k)] else "NOT monotone")
        note = f" [{table.notes[(i, k)]}]" if (i, k) in table.notes else ""
        print(f"file {i} server {k}: {label}{note}", file=sys.stderr)
    return EXIT_OK


def _policies(scn, table):
    topo = scn.topology
    out = []
    for name in scn.experiment.policies:
        if name == "whittle":
            out.append(Policy(name, topo, table=table))
        elif name == "optimal":
            try:
                sol = optimal_policy_vi(topo, scn.optimal.buffer, scn.optimal.tol)
            except StateSpaceGuardError as exc:
                raise _Fail(EXIT_GUARD, f"refusing optimal policy: {exc}") from None
            except ValueIterationConvergenceError as exc:
                raise _Fail(EXIT_SOLVER, f"optimal policy: {exc}") from None
            out.append(Policy(name, topo, optimal=sol))
        else:
            try:
                out.append(Policy(name, topo))
            except (ValueError, NotImplementedError) as exc:
                raise _Fail(EXIT_VALIDATION, str(exc)) from None
    return out


def simulate_bundle(scn) -> dict:
    """Run a scenario's experiment and assemble the result bundle."""
    ex = scn.experiment
    if not ex.policies:
        raise _Fail(EXIT_VALIDATION, "no policies requested")
    table = _table(scn) if "whittle" in ex.policies else None
    pols = _policies(scn, table)
    try:
        if len(pols) == 1:
            res = run(SimConfig(scn.topology, pols[0], ex.horizon, ex.warmup, ex.seed, ex.replications))
            payload = {"policies": {pols[0].kind: res.to_json()}, "differences": []}
        else:
            payload = compare(scn.topology, pols, ex.horizon, ex.seed, ex.replications, ex.warmup).to_json()
    except (SimulationError, ValueError) as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None
    bundle = {
        "provenance": {
            "scenario": scn.name,
            "scenario_hash": scn.digest(),
            "seed": ex.seed,
            "tool_version": __version__,
        },
        "estimates": payload["policies"],
        "differences": payload["differences"],
    }
    if table is not None:
        bundle["index_tables"] = [
            {"file": i, "server": k, "method": table.method, "index": [float(v) for v in table.values[(i, k)][1:]]}
            for i, k in table.edges
        ]
    return bundle


def cmd_simulate(args) -> int:
    scn = _scenario(args)
    text = dump_json(simulate_bundle(scn), args.out)
    if not args.out:
        print(text)
    for line in _summary(json.loads(text)):
        print(line, file=sys.stderr)
    return EXIT_OK


def _summary(bundle: dict) -> list[str]:
    lines = []
    for name, est in bundle["estimates"].items():
        ci = "not-available" if est["ci"] is None else f"+/- {est['ci']:.6g}"
        lines.append(f"{name}: {est['mean']:.6g} {ci} ({est['replications']} replications)")
    return lines


def cmd_verify(args) -> int:
    presets = tuple(args.scenario) if args.scenario else DEFAULT_PRESETS
    try:
        report = run_verify(presets, quick=args.quick)
    except ScenarioError as exc:
        raise _Fail(EXIT_VALIDATION, str(exc)) from None
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_PROPERTY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdn-whittle", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    scn_help = f"scenario YAML file or preset name ({', '.join(PRESETS)})"

    p = sub.add_parser("index", help="build the index table of a scenario")
    p.add_argument("--scenario", required=True, help=scn_help)
    p.add_argument("--out", help="CSV output path (stdout if omitted)")
    p.add_argument("--method", choices=("direct", "iterative"))
    p.add_argument("--eta", type=float)
    p.add_argument("--nmax", type=int)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("simulate", help="compare policies on a scenario")
    p.add_argument("--scenario", required=True, help=scn_help)
    p.add_argument("--out", help="JSON output path (stdout if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--policies", help="comma-separated policy names")
    p.add_argument("--method", choices=("direct", "iterative"))
    p.add_argument("--eta", type=float)
    p.add_argument("--nmax", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--scenario", action="append", help="preset or file to check (repeatable)")
    p.add_argument("--quick", action="store_true", help="smaller randomized oracle")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
