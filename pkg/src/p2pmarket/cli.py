"""Command-line interface.

Subcommands: validate a scenario file, clear a market (report + trace),
run the centralized oracle, compare two result files, generate scenario
files, and run an experiment spec. Exit codes: 0 success, 1 usage or
validation error, 2 numerical failure, 3 infeasible problem.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_INFEASIBLE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p2pmarket",
        description="Prosumer energy market: clearing, certification, studies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario")

    p = sub.add_parser("clear", help="run the market clearing loop")
    p.add_argument("scenario")
    p.add_argument("--mode", choices=["gne", "wardrop"], default=None)
    p.add_argument("--tol", type=float, default=None,
                   help="primal and coupling stopping tolerance")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("oracle", help="solve the centralized certification QP")
    p.add_argument("scenario")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("compare", help="compare two result files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--scenario", default=None,
                   help="scenario file for cost gaps")

    p = sub.add_parser("gen", help="generate a scenario file")
    gen_sub = p.add_subparsers(dest="generator", required=True)
    g = gen_sub.add_parser("ieee37", help="bundled 37-bus market")
    g.add_argument("--prosumers", type=int, default=12)
    g.add_argument("--passive", type=int, default=15)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=24)
    g.add_argument("--connectivity", type=float, default=0.35)
    g.add_argument("--out", required=True)
    g = gen_sub.add_parser("random", help="random desk-scale market")
    g.add_argument("--prosumers", type=int, default=5)
    g.add_argument("--buses", type=int, default=4)
    g.add_argument("--horizon", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--connectivity", type=float, default=None,
                   help="trading connectivity; omit for a tree")
    g.add_argument("--out", required=True)

    p = sub.add_parser("experiment", help="run an experiment spec (JSON)")
    p.add_argument("spec")
    p.add_argument("--out", default="experiment_out")
    return parser


def _decisions_from_json(doc: dict) -> dict:
    from p2pmarket.model import ProsumerDecision

    out = {}
    for key, d in doc["decisions"].items():
        out[int(key)] = ProsumerDecision(
            p_di=np.asarray(d["p_di"]), p_ch=np.asarray(d["p_ch"]),
            p_ds=np.asarray(d["p_ds"]), p_mg=np.asarray(d["p_mg"]),
            trades={int(j): np.asarray(t) for j, t in d["trades"].items()})
    return out


def _cmd_validate(args) -> int:
    from p2pmarket import scenario_io

    try:
        sc = scenario_io.load_scenario(args.scenario)
    except (scenario_io.ScenarioIOError, OSError) as err:
        print(f"invalid: {err}", file=sys.stderr)
        return EXIT_USAGE
    print(f"ok: {len(sc.prosumers)} prosumers, {len(sc.buses)} buses, "
          f"{len(sc.trade_links)} trade links, horizon {sc.H}")
    return EXIT_OK


def _cmd_clear(args) -> int:
    from p2pmarket import clearing, scenario_io

    try:
        sc, algo = scenario_io.load_scenario(args.scenario, with_algorithm=True)
    except (scenario_io.ScenarioIOError, OSError) as err:
        print(f"invalid scenario: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.mode:
        algo["mode"] = args.mode
    if args.tol:
        algo["primal_tol"] = algo["coupling_tol"] = args.tol
    if args.max_iter:
        algo["max_outer_iters"] = args.max_iter
    cfg = clearing.ClearingConfig(**{k: v for k, v in algo.items()
                                     if k in ("max_outer_iters", "primal_tol",
                                              "coupling_tol", "mode", "safety",
                                              "seed", "trace_stride")})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = clearing.run_clearing(sc, cfg)
    except clearing.ClearingError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as err:
        if "infeasible" in str(err).lower():
            print(f"infeasible: {err}", file=sys.stderr)
            return EXIT_INFEASIBLE
        raise
    clearing.write_report_json(report, out / "report.json")
    clearing.write_trace_csv(report, out / "trace.csv")
    print(f"{report.status} after {report.iterations} iterations; "
          f"coupling residual {report.coupling.max():.3g}; "
          f"wrote {out / 'report.json'} and {out / 'trace.csv'}")
    return EXIT_OK if report.status == "converged" else EXIT_NUMERICAL


def _cmd_oracle(args) -> int:
    from p2pmarket import model, oracle, scenario_io

    try:
        sc = scenario_io.load_scenario(args.scenario)
    except (scenario_io.ScenarioIOError, OSError) as err:
        print(f"invalid scenario: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        res = oracle.solve_vgne(sc, tol=args.tol)
    except model.ModelError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if res.solution.status == "max_iter":
        print("numerical failure: oracle did not reach tolerance",
              file=sys.stderr)
        return EXIT_NUMERICAL
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "objective": res.objective,
        "sigma": res.sigma.tolist(),
        "decisions": {
            str(i): {
                "p_di": d.p_di.tolist(), "p_ch": d.p_ch.tolist(),
                "p_ds": d.p_ds.tolist(), "p_mg": d.p_mg.tolist(),
                "trades": {str(j): t.tolist() for j, t in sorted(d.trades.items())},
            } for i, d in sorted(res.decisions.items())
        },
        "multipliers": {
            "mu_tg": res.multipliers["mu_tg"].tolist(),
            "lam_mg": res.multipliers["lam_mg"].tolist(),
            "mu_tr": {f"{i}-{j}": v.tolist()
                      for (i, j), v in sorted(res.multipliers["mu_tr"].items())},
            "mu_pb": {str(y): v.tolist()
                      for y, v in sorted(res.multipliers["mu_pb"].items())},
        },
    }
    with open(out / "oracle.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"solved; objective {res.objective:.6f}; wrote {out / 'oracle.json'}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    from p2pmarket import oracle, scenario_io

    try:
        with open(args.a) as fh:
            doc_a = json.load(fh)
        with open(args.b) as fh:
            doc_b = json.load(fh)
        dec_a = _decisions_from_json(doc_a)
        dec_b = _decisions_from_json(doc_b)
    except (OSError, KeyError, json.JSONDecodeError) as err:
        print(f"cannot read result files: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.scenario:
        sc = scenario_io.load_scenario(args.scenario)
        rep = oracle.compare(dec_a, dec_b, sc)
        print(f"max prosumer component distance: {rep.max_prosumer_kw():.6g} kW")
        print(f"max per-prosumer cost gap: {rep.max_cost_gap():.6g} EUR")
        for name, val in sorted(rep.component_dist.items()):
            print(f"  {name}: {val:.6g}")
    else:
        worst = 0.0
        for i in dec_a:
            a, b = dec_a[i], dec_b[i]
            for xa, xb in ((a.p_di, b.p_di), (a.p_ch, b.p_ch), (a.p_ds, b.p_ds),
                           (a.p_mg, b.p_mg)):
                worst = max(worst, float(np.max(np.abs(xa - xb), initial=0.0)))
            for j, t in a.trades.items():
                worst = max(worst, float(np.max(np.abs(t - b.trades[j]),
                                                initial=0.0)))
        print(f"max prosumer component distance: {worst:.6g} kW")
    return EXIT_OK


def _cmd_gen(args) -> int:
    from p2pmarket import instances, scenario_io

    try:
        if args.generator == "ieee37":
            sc = instances.builtin_ieee37(
                n_prosumers=args.prosumers, n_passive=args.passive,
                seed=args.seed, horizon=args.horizon,
                connectivity=args.connectivity)
        else:
            trading = "tree" if args.connectivity is None else args.connectivity
            sc = instances.random_market(args.prosumers, horizon=args.horizon,
                                         n_buses=args.buses, seed=args.seed,
                                         trading=trading)
    except Exception as err:
        print(f"generation failed: {err}", file=sys.stderr)
        return EXIT_USAGE
    scenario_io.save_scenario(sc, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    from p2pmarket import experiments, model

    try:
        with open(args.spec) as fh:
            doc = json.load(fh)
        spec = experiments.ExperimentSpec(
            experiment=doc["experiment"], params=doc.get("params", {}),
            replications=doc.get("replications", 1), seed=doc.get("seed", 0))
    except (OSError, KeyError, json.JSONDecodeError, model.ModelError) as err:
        print(f"invalid spec: {err}", file=sys.stderr)
        return EXIT_USAGE
    summary = experiments.run_experiment(spec, args.out)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "clear": _cmd_clear,
    "oracle": _cmd_oracle,
    "compare": _cmd_compare,
    "gen": _cmd_gen,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
