"""Semi-decentralized market clearing: the outer iteration loop.

Each round runs every prosumer's local dual/primal update against the
iteration-k broadcast, exchanges messages (injections and grid imports to
the operator, trades to the partners), runs the operator's central
update, and broadcasts the refreshed coordination signals. The loop
stops when the profile stops moving and the shared constraints hold.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from p2pmarket import model, qp
from p2pmarket.gridproj import DrsConfig
from p2pmarket.model import GridDecision, ProsumerDecision, Scenario
from p2pmarket.updates import (Broadcast, DnoAgent, ProsumerAgent,
                               ProsumerLayout, StepSizes, build_local_problem,
                               default_step_sizes)

__all__ = ["ClearingConfig", "ClearingReport", "ClearingError", "run_clearing",
           "residuals", "best_response_gap", "write_report_json",
           "write_trace_csv"]

TRACE_COLUMNS = ("iter", "primal_change", "recip_res", "agg_res", "bus_res",
                 "tg_res", "total_cost")


class ClearingError(RuntimeError):
    """Clearing failed (bad configuration or a non-finite iterate)."""


@dataclass(frozen=True)
class ClearingConfig:
    max_outer_iters: int = 5000
    primal_tol: float = 1e-4       # on the inf-norm profile change
    coupling_tol: float = 1e-4     # on every shared-constraint residual
    mode: str = "gne"              # gne | wardrop
    safety: float = 0.9            # step-size safety factor
    seed: int = 0                  # echoed into the report
    trace_stride: int = 1
    qp_tol: float = 1e-8
    drs_tol: float = 1e-9
    step_sizes: Optional[StepSizes] = None

    def __post_init__(self):
        if self.primal_tol <= 0 or self.coupling_tol <= 0:
            raise ClearingError("stopping tolerances must be > 0")
        if self.mode not in ("gne", "wardrop"):
            raise ClearingError(f"unknown mode {self.mode!r}")
        if self.trace_stride < 1:
            raise ClearingError("trace_stride must be >= 1")


@dataclass
class ClearingReport:
    status: str                    # converged | max_iter
    iterations: int
    decisions: dict                # prosumer id -> ProsumerDecision
    grid: GridDecision
    costs: dict                    # prosumer id -> final J_i
    primal_change: float
    coupling: model.CouplingResiduals
    duals: dict
    trace: list = field(default_factory=list)
    wall_time: float = 0.0
    projection_fallbacks: int = 0
    config: dict = field(default_factory=dict)


def residuals(profile: dict, previous: dict, grid: GridDecision,
              scenario: Scenario):
    """Profile change plus the shared-constraint violation record."""
    change = 0.0
    for i, dec in profile.items():
        prev = previous[i]
        for a, b in ((dec.p_di, prev.p_di), (dec.p_ch, prev.p_ch),
                     (dec.p_ds, prev.p_ds), (dec.p_mg, prev.p_mg)):
            change = max(change, float(np.max(np.abs(a - b), initial=0.0)))
        for j, t in dec.trades.items():
            change = max(change, float(np.max(np.abs(t - prev.trades[j]),
                                              initial=0.0)))
    coupling = model.coupling_residuals(profile, grid, scenario)
    return change, coupling


def _config_echo(cfg: ClearingConfig, sizes: StepSizes) -> dict:
    return {
        "max_outer_iters": cfg.max_outer_iters,
        "primal_tol": cfg.primal_tol,
        "coupling_tol": cfg.coupling_tol,
        "mode": cfg.mode,
        "safety": cfg.safety,
        "seed": cfg.seed,
        "trace_stride": cfg.trace_stride,
        "qp_tol": cfg.qp_tol,
        "drs_tol": cfg.drs_tol,
        "alpha_dno": sizes.alpha_dno,
        "gamma_mg": sizes.gamma_mg,
        "beta_tg": sizes.beta_tg,
        "stopping_rule": "primal_change <= primal_tol AND coupling <= coupling_tol",
    }


def run_clearing(scenario: Scenario, cfg: ClearingConfig = ClearingConfig()) -> ClearingReport:
    """Run the clearing loop to convergence (or the iteration cap)."""
    t_start = time.perf_counter()
    sizes = cfg.step_sizes or default_step_sizes(scenario, cfg.safety)
    sizes.validate(scenario)

    agents = {}
    for pro in sorted(scenario.prosumers, key=lambda p: p.id):
        agents[pro.id] = ProsumerAgent(
            pro, scenario, alpha=sizes.alpha[pro.id],
            beta_tr={j: sizes.beta_tr[(min(pro.id, j), max(pro.id, j))]
                     for j in sorted(pro.neighbors)},
            mode=cfg.mode, qp_tol=cfg.qp_tol)
    order = sorted(agents)
    dno = DnoAgent(scenario, sizes, DrsConfig(tol=cfg.drs_tol))

    injections = {i: agents[i].injection() for i in order}
    sigma = np.zeros(scenario.H)
    dno.init_memories(injections, sigma)
    broadcast = dno.broadcast()
    trades_k = {}
    for i in order:
        for j in agents[i].layout.partners:
            trades_k[(i, j)] = agents[i].trade(j)

    def full_vector():
        parts = [agents[i].state.u for i in order]
        parts.append(dno.state.u)
        return np.concatenate(parts)

    trace = []
    status = "max_iter"
    change, coupling = np.inf, None
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        prev_vec = full_vector()

        for i in order:
            agent = agents[i]
            agent.dual_update({j: trades_k[(j, i)] for j in agent.layout.partners})
            agent.primal_update(broadcast)

        # communication: trades to partners, injections/imports to the DNO
        for i in order:
            for j in agents[i].layout.partners:
                trades_k[(i, j)] = agents[i].trade(j)
        injections = {i: agents[i].injection() for i in order}
        sigma = np.zeros(scenario.H)
        for i in order:
            sigma = sigma + agents[i].p_mg()

        dno.primal_update()
        dno.dual_update(injections, sigma)
        broadcast = dno.broadcast()

        new_vec = full_vector()
        if not np.all(np.isfinite(new_vec)):
            raise ClearingError(
                f"non-finite iterate at outer iteration {it}; "
                f"first bad index {int(np.argmin(np.isfinite(new_vec)))}")
        change = float(np.max(np.abs(new_vec - prev_vec)))
        profile = {i: agents[i].decision for i in order}
        grid_dec = dno.decision
        coupling = model.coupling_residuals(profile, grid_dec, scenario)

        if it % cfg.trace_stride == 0 or it == 1:
            total_cost = sum(model.eval_total_cost(i, profile[i], profile, scenario)
                             for i in order)
            trace.append({
                "iter": it,
                "primal_change": change,
                "recip_res": coupling.reciprocity,
                "agg_res": coupling.aggregate_bounds,
                "bus_res": coupling.bus_balance,
                "tg_res": coupling.grid_exchange,
                "total_cost": total_cost,
            })

        if change <= cfg.primal_tol and coupling.max() <= cfg.coupling_tol:
            status = "converged"
            break

    profile = {i: agents[i].decision for i in order}
    grid_dec = dno.decision
    costs = {i: model.eval_total_cost(i, profile[i], profile, scenario)
             for i in order}
    duals = {
        "lam_mg": dno.state.lam_mg.copy(),
        "mu_tg": dno.state.mu_tg.copy(),
        "mu_pb": {y: v.copy() for y, v in dno.state.mu_pb.items()},
        "mu_tr": {i: {j: agents[i].state.mu_tr[j].copy()
                      for j in agents[i].layout.partners} for i in order},
    }
    return ClearingReport(
        status=status, iterations=it, decisions=profile, grid=grid_dec,
        costs=costs, primal_change=change, coupling=coupling, duals=duals,
        trace=trace, wall_time=time.perf_counter() - t_start,
        projection_fallbacks=dno.state.projection_fallbacks,
        config=_config_echo(cfg, sizes))


def best_response_gap(scenario: Scenario, report: ClearingReport, i: int,
                      qp_tol: float = 1e-9) -> float:
    """Equilibrium certificate for one prosumer: re-solve its best
    response with the others fixed and the shared constraints priced at
    the report's final multipliers; returns the inf-norm decision change.
    """
    pro = scenario.prosumer_by_id[i]
    lay = ProsumerLayout(pro, scenario.H)
    problem = build_local_problem(pro, scenario, mode="gne", prox_alpha=None)
    q = problem.q.copy()

    d = model.as_profile(scenario.pricing.price_coeff, scenario.H)
    sigma = np.zeros(scenario.H)
    for dec in report.decisions.values():
        sigma = sigma + dec.p_mg
    sigma_other = sigma - report.decisions[i].p_mg
    lam = report.duals["lam_mg"]
    mu_tg = report.duals["mu_tg"]
    mu_pb = report.duals["mu_pb"][pro.bus_id]
    H = scenario.H
    q[lay.slices["p_mg"]] += (d * (sigma_other + scenario.passive_load)
                              + lam[:H] - lam[H:] + mu_tg)
    q[lay.slices["p_di"]] -= mu_pb
    q[lay.slices["p_ch"]] += mu_pb
    q[lay.slices["p_ds"]] -= mu_pb
    for j in lay.partners:
        q[lay.slices[("t", j)]] += report.duals["mu_tr"][i][j]
    problem.q = q
    sol = qp.solve(problem, tol=qp_tol)
    u_star = lay.pack(report.decisions[i])
    return float(np.max(np.abs(sol.x[:lay.n] - u_star), initial=0.0))


# ---------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------

def _arr(x):
    return np.asarray(x).tolist()


def write_trace_csv(report: ClearingReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in report.trace:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in TRACE_COLUMNS})


def write_report_json(report: ClearingReport, path):
    doc = {
        "status": report.status,
        "iterations": report.iterations,
        "primal_change": report.primal_change,
        "coupling": report.coupling.as_dict(),
        "wall_time_s": report.wall_time,
        "projection_fallbacks": report.projection_fallbacks,
        "config": report.config,
        "costs": {str(i): c for i, c in report.costs.items()},
        "decisions": {
            str(i): {
                "p_di": _arr(d.p_di), "p_ch": _arr(d.p_ch), "p_ds": _arr(d.p_ds),
                "p_mg": _arr(d.p_mg),
                "trades": {str(j): _arr(t) for j, t in sorted(d.trades.items())},
            } for i, d in sorted(report.decisions.items())
        },
        "grid": {
            "theta": {str(y): _arr(v) for y, v in sorted(report.grid.theta.items())},
            "v": {str(y): _arr(v) for y, v in sorted(report.grid.v.items())},
            "p_tg": {str(y): _arr(v) for y, v in sorted(report.grid.p_tg.items())},
            "p_flow": {f"{y}-{z}": _arr(v)
                       for (y, z), v in sorted(report.grid.p_flow.items())},
            "q_flow": {f"{y}-{z}": _arr(v)
                       for (y, z), v in sorted(report.grid.q_flow.items())},
        },
        "duals": {
            "lam_mg": _arr(report.duals["lam_mg"]),
            "mu_tg": _arr(report.duals["mu_tg"]),
            "mu_pb": {str(y): _arr(v)
                      for y, v in sorted(report.duals["mu_pb"].items())},
            "mu_tr": {str(i): {str(j): _arr(v) for j, v in sorted(per.items())}
                      for i, per in sorted(report.duals["mu_tr"].items())},
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
