"""Experiment drivers: comparison studies over clearing runs.

Five studies: the effect of line-capacity limits, the economics of
allowing trades, the load-shifting effect of storage, iteration-count
scaling over population size and trading connectivity, and the
sensitivity of total traded power to the price parameters. Every driver
writes one CSV table per result family plus a JSON summary, reproducible
bit-for-bit from (spec, seed).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from p2pmarket import clearing, instances, model
from p2pmarket.clearing import ClearingConfig, run_clearing
from p2pmarket.model import ModelError, Scenario

__all__ = ["ExperimentSpec", "run_experiment", "EXPERIMENTS", "line_saturation"]

EXPERIMENTS = ("line_safety", "trading_benefit", "storage_impact",
               "scalability", "price_sweep")


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    params: dict = field(default_factory=dict)
    replications: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ModelError(f"unknown experiment {self.experiment!r}; "
                             f"choose one of {EXPERIMENTS}")
        if self.replications < 1:
            raise ModelError("replications must be >= 1")
        for key, val in self.params.items():
            if isinstance(val, (list, tuple)) and len(val) == 0:
                raise ModelError(f"empty parameter grid {key!r}")


def _write_csv(path: Path, rows: list, columns: list):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def line_saturation(report: clearing.ClearingReport, scenario: Scenario,
                    reference: Scenario = None) -> dict:
    """Peak loading of every line in percent of its (reference) capacity."""
    ref = reference or scenario
    out = {}
    for line in ref.lines:
        y, z = line.pair
        p = report.grid.p_flow[(y, z)]
        q = report.grid.q_flow[(y, z)]
        out[line.pair] = float(np.max(np.hypot(p, q)) / line.capacity * 100.0)
    return out


def _avg_trade_price(report: clearing.ClearingReport, scenario: Scenario) -> np.ndarray:
    """Average bilateral price per hour: unit cost + tariff + mean shadow."""
    H = scenario.H
    mu_sum = np.zeros(H)
    n_links = max(len(scenario.trade_links), 1)
    c_tr = 0.0
    for link in scenario.trade_links:
        i, j = link.pair
        mu_sum = mu_sum + report.duals["mu_tr"][i][j]
        c_tr += link.trade_cost
    c_tr /= n_links
    return c_tr + scenario.pricing.tariff + mu_sum / n_links


def _traded_per_hour(report: clearing.ClearingReport, scenario: Scenario) -> np.ndarray:
    total = np.zeros(scenario.H)
    for link in scenario.trade_links:
        i, j = link.pair
        total = total + np.abs(report.decisions[i].trades[j])
    return total


def _clearing_config(params: dict) -> ClearingConfig:
    return ClearingConfig(
        max_outer_iters=int(params.get("max_outer_iters", 5000)),
        primal_tol=float(params.get("primal_tol", 1e-4)),
        coupling_tol=float(params.get("coupling_tol", 1e-4)),
        mode=params.get("mode", "gne"))


# ---------------------------------------------------------------------
# individual studies
# ---------------------------------------------------------------------

def _run_line_safety(spec: ExperimentSpec, out: Path) -> dict:
    params = dict(spec.params)
    horizon = int(params.get("horizon", 4))
    cfg = _clearing_config(params)
    constrained = instances.line_safety_instance(seed=spec.seed, horizon=horizon,
                                                 constrained=True)
    unconstrained = instances.line_safety_instance(seed=spec.seed, horizon=horizon,
                                                   constrained=False)
    rep_c = run_clearing(constrained, cfg)
    rep_u = run_clearing(unconstrained, cfg)
    sat_c = line_saturation(rep_c, constrained)
    sat_u = line_saturation(rep_u, unconstrained, reference=constrained)
    rows = []
    for pair in sorted(sat_c):
        rows.append({"line": f"{pair[0]}-{pair[1]}",
                     "saturation_constrained_pct": sat_c[pair],
                     "saturation_unconstrained_pct": sat_u[pair]})
    _write_csv(out / "line_saturation.csv", rows,
               ["line", "saturation_constrained_pct", "saturation_unconstrained_pct"])
    return {
        "max_saturation_constrained_pct": max(sat_c.values()),
        "max_saturation_unconstrained_pct": max(sat_u.values()),
        "status": [rep_c.status, rep_u.status],
        "iterations": [rep_c.iterations, rep_u.iterations],
    }


def _run_trading_benefit(spec: ExperimentSpec, out: Path) -> dict:
    params = dict(spec.params)
    n = int(params.get("n_prosumers", 10))
    horizon = int(params.get("horizon", 6))
    cap = float(params.get("trade_cap", 30.0))
    cfg = _clearing_config(params)
    with_trade = instances.random_market(n, horizon=horizon, seed=spec.seed,
                                         trading=params.get("connectivity", 0.4),
                                         trade_cap=cap)
    no_trade = instances.random_market(n, horizon=horizon, seed=spec.seed,
                                       trading=params.get("connectivity", 0.4),
                                       trade_cap=0.0)
    rep_t = run_clearing(with_trade, cfg)
    rep_n = run_clearing(no_trade, cfg)
    rows = []
    for i in sorted(rep_t.costs):
        rows.append({"prosumer": i, "cost_with_trading": rep_t.costs[i],
                     "cost_without_trading": rep_n.costs[i],
                     "delta": rep_t.costs[i] - rep_n.costs[i]})
    _write_csv(out / "trading_benefit.csv", rows,
               ["prosumer", "cost_with_trading", "cost_without_trading", "delta"])
    deltas = [r["delta"] for r in rows]
    return {
        "max_delta": max(deltas),
        "all_weakly_better": bool(max(deltas) <= 1e-4),
        "status": [rep_t.status, rep_n.status],
        "iterations": [rep_t.iterations, rep_n.iterations],
    }


def _run_storage_impact(spec: ExperimentSpec, out: Path) -> dict:
    params = dict(spec.params)
    n = int(params.get("n_prosumers", 10))
    horizon = int(params.get("horizon", 12))
    cfg = _clearing_config(params)

    def build(all_storage: bool):
        sc = instances.random_market(n, horizon=horizon, seed=spec.seed,
                                     trading=params.get("connectivity", 0.4),
                                     with_storage=False)
        if not all_storage:
            return sc
        pros = []
        for p in sc.prosumers:
            pros.append(model.Prosumer(
                id=p.id, bus_id=p.bus_id, demand=p.demand,
                dispatchable=p.dispatchable,
                storage=model.StorageUnit(cost_coeff=0.001, capacity=10.0,
                                          leakage=0.995, charge_eff=0.95,
                                          discharge_eff=0.95, soc_min=0.1,
                                          soc_max=0.9, p_ch_max=4.0,
                                          p_ds_max=4.0, soc_init=0.5),
                neighbors=p.neighbors))
        return model.Scenario(time=sc.time, prosumers=tuple(pros),
                              passive_consumers=sc.passive_consumers,
                              trade_links=sc.trade_links, buses=sc.buses,
                              lines=sc.lines, pricing=sc.pricing)

    rows = []
    summary = {}
    reps = {}
    for label in ("none", "all"):
        sc = build(all_storage=(label == "all"))
        rep = run_clearing(sc, cfg)
        reps[label] = (sc, rep)
        imported_generated = np.zeros(horizon)
        for i, dec in rep.decisions.items():
            imported_generated += dec.p_mg + dec.p_di
        traded = _traded_per_hour(rep, sc)
        price = _avg_trade_price(rep, sc)
        d = model.as_profile(sc.pricing.price_coeff, horizon)
        sigma = sum(dec.p_mg for dec in rep.decisions.values())
        grid_price = d * (sigma + sc.passive_load)
        for h in range(horizon):
            rows.append({"storage": label, "hour": h,
                         "import_plus_generation_kw": float(imported_generated[h]),
                         "traded_kw": float(traded[h]),
                         "avg_trade_price": float(price[h]),
                         "grid_price": float(grid_price[h])})
        summary[label] = {
            "peak_import_plus_generation": float(imported_generated.max()),
            "iterations": rep.iterations,
            "status": rep.status,
        }
    _write_csv(out / "storage_impact.csv", rows,
               ["storage", "hour", "import_plus_generation_kw", "traded_kw",
                "avg_trade_price", "grid_price"])
    summary["peak_shaving_kw"] = (summary["none"]["peak_import_plus_generation"]
                                  - summary["all"]["peak_import_plus_generation"])
    return summary


def _run_scalability(spec: ExperimentSpec, out: Path) -> dict:
    params = dict(spec.params)
    n_grid = list(params.get("n_grid", [5, 10, 20, 40]))
    conn_grid = list(params.get("connectivity_grid", [0.2, 0.6, 1.0]))
    fixed_conn = float(params.get("fixed_connectivity", 0.6))
    fixed_n = int(params.get("fixed_n", 20))
    horizon = int(params.get("horizon", 6))
    cfg = _clearing_config(params)
    rows = []
    cells = ([("n", n, fixed_conn) for n in n_grid]
             + [("connectivity", fixed_n, c) for c in conn_grid])
    failures = 0
    for kind, n, conn in cells:
        for rep_idx in range(spec.replications):
            seed = spec.seed + 1000 * rep_idx + n
            try:
                sc = instances.random_market(int(n), horizon=horizon, seed=seed,
                                             trading=conn)
                rep = run_clearing(sc, cfg)
                rows.append({"sweep": kind, "n_prosumers": int(n),
                             "connectivity": conn, "replication": rep_idx,
                             "seed": seed, "iterations": rep.iterations,
                             "status": rep.status,
                             "wall_time_s": rep.wall_time})
            except Exception as err:  # record and continue
                failures += 1
                rows.append({"sweep": kind, "n_prosumers": int(n),
                             "connectivity": conn, "replication": rep_idx,
                             "seed": seed, "iterations": -1,
                             "status": f"error: {err}", "wall_time_s": -1.0})
    _write_csv(out / "scalability.csv", rows,
               ["sweep", "n_prosumers", "connectivity", "replication", "seed",
                "iterations", "status", "wall_time_s"])
    by_n = {}
    for row in rows:
        if row["sweep"] == "n" and row["iterations"] > 0:
            by_n.setdefault(row["n_prosumers"], []).append(row["iterations"])
    mean_iters = {n: float(np.mean(v)) for n, v in sorted(by_n.items())}
    growth = (mean_iters[max(mean_iters)] / mean_iters[min(mean_iters)]
              if len(mean_iters) >= 2 else 1.0)
    return {"mean_iterations_by_n": {str(k): v for k, v in mean_iters.items()},
            "growth_factor": growth, "failures": failures,
            "horizon": horizon}


def _run_price_sweep(spec: ExperimentSpec, out: Path) -> dict:
    params = dict(spec.params)
    n = int(params.get("n_prosumers", 10))
    horizon = int(params.get("horizon", 6))
    tr_grid = list(params.get("trade_cost_grid", [0.0, 0.04, 0.08, 0.12, 0.16]))
    ta_grid = list(params.get("tariff_grid", [0.0, 0.01, 0.02, 0.04]))
    cfg = _clearing_config(params)
    base = instances.random_market(n, horizon=horizon, seed=spec.seed,
                                   trading=params.get("connectivity", 0.4))
    rows = []

    def rebuild(c_tr=None, c_ta=None):
        links = tuple(model.TradeLink(pair=l.pair,
                                      trade_cost=l.trade_cost if c_tr is None else c_tr,
                                      trade_cap=l.trade_cap)
                      for l in base.trade_links)
        pricing = base.pricing if c_ta is None else model.GridPricing(
            price_coeff=base.pricing.price_coeff, tariff=c_ta,
            agg_min=base.pricing.agg_min, agg_max=base.pricing.agg_max)
        return model.Scenario(time=base.time, prosumers=base.prosumers,
                              passive_consumers=base.passive_consumers,
                              trade_links=links, buses=base.buses,
                              lines=base.lines, pricing=pricing)

    for c_tr in tr_grid:
        sc = rebuild(c_tr=float(c_tr))
        rep = run_clearing(sc, cfg)
        traded = _traded_per_hour(rep, sc)
        for h in range(horizon):
            rows.append({"sweep": "trade_cost", "value": float(c_tr), "hour": h,
                         "traded_kw": float(traded[h]), "status": rep.status})
    for c_ta in ta_grid:
        sc = rebuild(c_ta=float(c_ta))
        rep = run_clearing(sc, cfg)
        traded = _traded_per_hour(rep, sc)
        for h in range(horizon):
            rows.append({"sweep": "tariff", "value": float(c_ta), "hour": h,
                         "traded_kw": float(traded[h]), "status": rep.status})
    _write_csv(out / "price_sweep.csv", rows,
               ["sweep", "value", "hour", "traded_kw", "status"])
    totals = {}
    for row in rows:
        key = (row["sweep"], row["value"])
        totals[key] = totals.get(key, 0.0) + row["traded_kw"]
    return {"total_traded_by_value": {f"{k[0]}={k[1]}": v
                                      for k, v in sorted(totals.items())}}


_RUNNERS = {
    "line_safety": _run_line_safety,
    "trading_benefit": _run_trading_benefit,
    "storage_impact": _run_storage_impact,
    "scalability": _run_scalability,
    "price_sweep": _run_price_sweep,
}


def run_experiment(spec: ExperimentSpec, out_dir) -> dict:
    """Run one study; returns the summary (also written as JSON)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = _RUNNERS[spec.experiment](spec, out)
    summary = {"experiment": spec.experiment, "seed": spec.seed,
               "replications": spec.replications, "params": dict(spec.params),
               **summary}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    return summary
