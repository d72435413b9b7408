"""Centralized ground truth: equilibrium via exact-potential minimization.

The agents' costs couple only through the aggregate grid import, and the
coupling matrix is symmetric, so the game's pseudo-gradient is the
gradient of a single convex potential. Minimizing that potential over
the global feasible set (local sets plus shared constraints) yields a
variational equilibrium, which certifies the distributed clearing loop.

The potential adds, on top of each agent's private terms, half of the
quadratic aggregate-price energy and half of every agent's own-quadratic
price term; its block gradients then reproduce each agent's marginal
cost exactly (validated by the gradient-consistency tests before the
oracle is trusted).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from p2pmarket import qp
from p2pmarket.gridproj import GridSets
from p2pmarket.model import (GridDecision, ModelError, ProsumerDecision,
                             Scenario, as_profile)
from p2pmarket.updates import ProsumerLayout

__all__ = ["PotentialProblem", "VgneResult", "build_potential", "solve_vgne",
           "potential_gradient", "pseudo_gradient", "feasible_point",
           "compare", "CompareReport"]


@dataclass
class PotentialProblem:
    problem: qp.QpProblem
    scenario: Scenario
    layouts: dict                  # prosumer id -> ProsumerLayout
    u_slices: dict                 # prosumer id -> slice in the stacked vector
    grid_sets: GridSets
    grid_slice: slice
    sigma_slice: slice
    rows: dict = field(default_factory=dict)  # named equality-row slices


@dataclass
class VgneResult:
    decisions: dict
    grid: GridDecision
    sigma: np.ndarray
    multipliers: dict
    objective: float
    solution: qp.QpSolution
    stacked: np.ndarray


def build_potential(scenario: Scenario) -> PotentialProblem:
    """Assemble the potential-minimization QP over the global feasible set."""
    H = scenario.H
    d = as_profile(scenario.pricing.price_coeff, H)
    b_load = scenario.passive_load
    builder = qp.QpBuilder()
    layouts = {}
    u_slices = {}
    soc_slices = {}

    order = sorted(p.id for p in scenario.prosumers)
    for i in order:
        pro = scenario.prosumer_by_id[i]
        lay = ProsumerLayout(pro, H)
        layouts[i] = lay
        start = builder.n
        if pro.dispatchable is not None:
            unit = pro.dispatchable
            sl = builder.add_block(("p_di", i), H, lo=unit.p_min, hi=unit.p_max)
            builder.add_quad_diag(sl, as_profile(unit.quad_coeff, H))
            builder.add_lin(sl, as_profile(unit.lin_coeff, H))
        else:
            builder.add_block(("p_di", i), H, lo=0.0, hi=0.0)
        if pro.storage is not None:
            st = pro.storage
            ch = builder.add_block(("p_ch", i), H, lo=0.0, hi=st.p_ch_max)
            ds = builder.add_block(("p_ds", i), H, lo=0.0, hi=st.p_ds_max)
            if st.cost_coeff:
                builder.add_quad_diag(ch, st.cost_coeff)
                builder.add_quad_diag(ds, st.cost_coeff)
        else:
            builder.add_block(("p_ch", i), H, lo=0.0, hi=0.0)
            builder.add_block(("p_ds", i), H, lo=0.0, hi=0.0)
        mg = builder.add_block(("p_mg", i), H)
        builder.add_quad_diag(mg, 0.5 * d)      # own-quadratic half term
        builder.add_lin(mg, d * b_load)          # passive-load price term
        links = scenario.links_of(i)
        for j in lay.partners:
            link = links[j]
            sl = builder.add_block(("t", i, j), H, lo=-link.trade_cap,
                                   hi=link.trade_cap, l1=scenario.pricing.tariff)
            builder.add_lin(sl, link.trade_cost)
        u_slices[i] = slice(start, builder.n)

    for i in order:
        pro = scenario.prosumer_by_id[i]
        if pro.storage is not None:
            st = pro.storage
            soc_slices[i] = builder.add_block(("soc", i), H, lo=st.soc_min,
                                              hi=st.soc_max)

    sets = GridSets(scenario)
    grid_start = builder.n
    for k, c in enumerate(sets.components):
        builder.add_block(("grid", c), H, lo=sets.lo[k], hi=sets.hi[k])
    grid_slice = slice(grid_start, builder.n)
    for k in range(sets.disk_p.size):
        base_p = grid_start + int(sets.disk_p[k]) * H
        base_q = grid_start + int(sets.disk_q[k]) * H
        for h in range(H):
            builder.add_disk(base_p + h, base_q + h, float(sets.disk_r[k]))

    # aggregate import with its box (the shared bounds)
    sigma_slice = builder.add_block("sigma", H,
                                    lo=scenario.pricing.agg_min - b_load,
                                    hi=scenario.pricing.agg_max - b_load)
    builder.add_quad_diag(sigma_slice, 0.5 * d)  # aggregate price energy

    rows = {}

    def mark(name, count):
        rows[name] = slice(builder._n_rows, builder._n_rows + count)

    # local balance per prosumer
    for i in order:
        lay = layouts[i]
        off = u_slices[i].start
        mark(("balance", i), H)
        r, c, v = [], [], []
        for h in range(H):
            for nm, s in (("p_di", 1.0), ("p_ds", 1.0), ("p_ch", -1.0), ("p_mg", 1.0)):
                r.append(h)
                c.append(off + lay.slices[nm].start + h)
                v.append(s)
            for j in lay.partners:
                r.append(h)
                c.append(off + lay.slices[("t", j)].start + h)
                v.append(1.0)
        builder.add_eq_rows(r, c, v, scenario.prosumer_by_id[i].demand)

    # storage dynamics
    for i in order:
        pro = scenario.prosumer_by_id[i]
        if pro.storage is None:
            continue
        st = pro.storage
        lay = layouts[i]
        off = u_slices[i].start
        soc = soc_slices[i]
        c_ch = scenario.time.sampling_hours / st.capacity * st.charge_eff
        c_ds = scenario.time.sampling_hours / (st.capacity * st.discharge_eff)
        mark(("soc", i), H)
        r, c, v, rhs = [], [], [], []
        for h in range(H):
            r += [h, h, h]
            c += [soc.start + h, off + lay.slices["p_ch"].start + h,
                  off + lay.slices["p_ds"].start + h]
            v += [1.0, -c_ch, c_ds]
            if h == 0:
                rhs.append(st.leakage * st.soc_init)
            else:
                r.append(h)
                c.append(soc.start + h - 1)
                v.append(-st.leakage)
                rhs.append(0.0)
        builder.add_eq_rows(r, c, v, rhs)

    # reciprocity per link
    for link in sorted(scenario.trade_links, key=lambda l: l.pair):
        i, j = link.pair
        ti = u_slices[i].start + layouts[i].slices[("t", j)].start
        tj = u_slices[j].start + layouts[j].slices[("t", i)].start
        mark(("recip", link.pair), H)
        r = list(range(H)) * 2
        c = [ti + h for h in range(H)] + [tj + h for h in range(H)]
        builder.add_eq_rows(r, c, [1.0] * (2 * H), np.zeros(H))

    # flow equations (per hour, from the grid topology matrix)
    nz_rows, nz_cols = np.nonzero(sets.A0)
    mark("flow", sets.A0.shape[0] * H)
    r, c, v = [], [], []
    for rr, cc in zip(nz_rows, nz_cols):
        val = sets.A0[rr, cc]
        for h in range(H):
            r.append(int(rr) * H + h)
            c.append(grid_start + int(cc) * H + h)
            v.append(float(val))
    builder.add_eq_rows(r, c, v, np.zeros(sets.A0.shape[0] * H))

    # bus balance: passive + injections - ptg - outgoing flows = 0
    for bus in sorted(scenario.buses, key=lambda x: x.id):
        y = bus.id
        rhs = np.zeros(H)
        for cons in scenario.passive_on_bus[y]:
            rhs = rhs - cons.demand
        r, c, v = [], [], []
        for i in scenario.prosumers_on_bus[y]:
            lay = layouts[i]
            off = u_slices[i].start
            rhs = rhs - scenario.prosumer_by_id[i].demand
            for h in range(H):
                for nm, s in (("p_di", -1.0), ("p_ds", -1.0), ("p_ch", 1.0)):
                    r.append(h)
                    c.append(off + lay.slices[nm].start + h)
                    v.append(s)
        ptg = grid_start + sets.index[("ptg", y)] * H
        for h in range(H):
            r.append(h)
            c.append(ptg + h)
            v.append(-1.0)
        for z in scenario.bus_neighbors[y]:
            fl = grid_start + sets.index[("pflow", y, z)] * H
            for h in range(H):
                r.append(h)
                c.append(fl + h)
                v.append(-1.0)
        mark(("bus", y), H)
        builder.add_eq_rows(r, c, v, rhs)

    # total exchange: sigma + b = sum_y ptg
    mark("exchange", H)
    r, c, v = [], [], []
    for h in range(H):
        r.append(h)
        c.append(sigma_slice.start + h)
        v.append(1.0)
    for bus in scenario.buses:
        ptg = grid_start + sets.index[("ptg", bus.id)] * H
        for h in range(H):
            r.append(h)
            c.append(ptg + h)
            v.append(-1.0)
    builder.add_eq_rows(r, c, v, -b_load)

    # aggregate definition: sigma = sum_i p_mg_i
    mark("sigma_def", H)
    r, c, v = [], [], []
    for h in range(H):
        r.append(h)
        c.append(sigma_slice.start + h)
        v.append(1.0)
        for i in order:
            r.append(h)
            c.append(u_slices[i].start + layouts[i].slices["p_mg"].start + h)
            v.append(-1.0)
    builder.add_eq_rows(r, c, v, np.zeros(H))

    return PotentialProblem(problem=builder.build(), scenario=scenario,
                            layouts=layouts, u_slices=u_slices, grid_sets=sets,
                            grid_slice=grid_slice, sigma_slice=sigma_slice,
                            rows=rows)


# ---------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------

def _stack(pp: PotentialProblem, decisions: Mapping[int, ProsumerDecision]) -> np.ndarray:
    x = np.zeros(pp.problem.n)
    for i, sl in pp.u_slices.items():
        x[sl] = pp.layouts[i].pack(decisions[i])
    sigma = np.zeros(pp.scenario.H)
    for dec in decisions.values():
        sigma = sigma + dec.p_mg
    x[pp.sigma_slice] = sigma
    return x


def potential_gradient(pp: PotentialProblem, decisions: Mapping[int, ProsumerDecision],
                       i: int) -> np.ndarray:
    """Gradient block of the assembled potential for prosumer i, with the
    aggregate variable chained back onto the grid-import coordinates."""
    x = _stack(pp, decisions)
    full = pp.problem.P @ x + pp.problem.q
    if pp.problem.l1 is not None:
        full = full + pp.problem.l1 * np.sign(x)
    g = full[pp.u_slices[i]].copy()
    lay = pp.layouts[i]
    g[lay.slices["p_mg"]] += full[pp.sigma_slice]
    return g


def pseudo_gradient(i: int, decisions: Mapping[int, ProsumerDecision],
                    scenario: Scenario) -> np.ndarray:
    """Partial gradient of J_i in its own decision (analytic form)."""
    pro = scenario.prosumer_by_id[i]
    lay = ProsumerLayout(pro, scenario.H)
    dec = decisions[i]
    g = np.zeros(lay.n)
    if pro.dispatchable is not None:
        g[lay.slices["p_di"]] = (2.0 * as_profile(pro.dispatchable.quad_coeff, scenario.H)
                                 * dec.p_di + as_profile(pro.dispatchable.lin_coeff,
                                                         scenario.H))
    if pro.storage is not None and pro.storage.cost_coeff:
        g[lay.slices["p_ch"]] = 2.0 * pro.storage.cost_coeff * dec.p_ch
        g[lay.slices["p_ds"]] = 2.0 * pro.storage.cost_coeff * dec.p_ds
    d = as_profile(scenario.pricing.price_coeff, scenario.H)
    sigma = np.zeros(scenario.H)
    for other in decisions.values():
        sigma = sigma + other.p_mg
    g[lay.slices["p_mg"]] = d * (sigma + scenario.passive_load) + d * dec.p_mg
    links = scenario.links_of(i)
    for j in lay.partners:
        g[lay.slices[("t", j)]] = (links[j].trade_cost
                                   + scenario.pricing.tariff * np.sign(dec.trades[j]))
    return g


# ---------------------------------------------------------------------
# solving and certification
# ---------------------------------------------------------------------

def _unpack(pp: PotentialProblem, x: np.ndarray):
    decisions = {i: pp.layouts[i].unpack(x[sl]) for i, sl in pp.u_slices.items()}
    grid = pp.grid_sets.unpack(x[pp.grid_slice])
    return decisions, grid


def solve_vgne(scenario: Scenario, tol: float = 1e-7, max_iter: int = 200000,
               pp: Optional[PotentialProblem] = None) -> VgneResult:
    """Minimize the potential over the global feasible set."""
    pp = pp or build_potential(scenario)
    sol = qp.solve(pp.problem, tol=tol, max_iter=max_iter)
    if sol.status == "infeasible_detected":
        raise ModelError("scenario detected infeasible by the oracle")
    decisions, grid = _unpack(pp, sol.x)
    H = scenario.H
    y = sol.y_eq
    mults = {
        "mu_tr": {pair: y[pp.rows[("recip", pair)]].copy()
                  for pair in (l.pair for l in scenario.trade_links)},
        "mu_pb": {b.id: y[pp.rows[("bus", b.id)]].copy() for b in scenario.buses},
        "mu_tg": y[pp.rows["exchange"]].copy(),
        "lam_mg": np.concatenate([
            np.maximum(sol.y_box[pp.sigma_slice], 0.0),
            np.maximum(-sol.y_box[pp.sigma_slice], 0.0),
        ]),
    }
    return VgneResult(decisions=decisions, grid=grid,
                      sigma=sol.x[pp.sigma_slice].copy(), multipliers=mults,
                      objective=sol.obj, solution=sol, stacked=sol.x.copy())


def feasible_point(scenario: Scenario, seed: Optional[int] = None,
                   pp: Optional[PotentialProblem] = None, tol: float = 1e-8):
    """A strictly feasible profile: projection-style QP over the global
    set, optionally tilted by a random linear objective."""
    pp = pp or build_potential(scenario)
    base = pp.problem
    n = base.n
    q = np.zeros(n)
    if seed is not None:
        q = np.random.default_rng(seed).normal(size=n)
    from scipy import sparse

    prob = qp.QpProblem(P=2e-3 * sparse.eye(n, format="csc"), q=q,
                        A_eq=base.A_eq, b_eq=base.b_eq, lo=base.lo, hi=base.hi,
                        disks=list(base.disks))
    sol = qp.solve(prob, tol=tol)
    if sol.status == "infeasible_detected":
        raise ModelError("scenario detected infeasible while sampling")
    decisions, grid = _unpack(pp, sol.x)
    return decisions, grid


def vi_gap(pp: PotentialProblem, res: VgneResult,
           w_decisions: Mapping[int, ProsumerDecision]) -> float:
    """(w - u*)' F(u*) for one feasible comparison profile w; nonnegative
    (up to tolerance) at a variational equilibrium.

    The trade-cost subgradient at a zero trade is recovered from the QP
    duals so the certificate uses the optimality-consistent selection.
    """
    total = 0.0
    tariff = pp.scenario.pricing.tariff
    for i, sl in pp.u_slices.items():
        lay = pp.layouts[i]
        g = pseudo_gradient(i, res.decisions, pp.scenario)
        dec = res.decisions[i]
        for j in lay.partners:
            t = dec.trades[j]
            if tariff > 0:
                dual = res.solution.y_box[sl][lay.slices[("t", j)]]
                sub = np.where(np.abs(t) > 1e-7, np.sign(t),
                               np.clip(dual / tariff, -1.0, 1.0))
                link = pp.scenario.links_of(i)[j]
                g[lay.slices[("t", j)]] = link.trade_cost + tariff * sub
        wi = lay.pack(w_decisions[i])
        total += float(np.dot(wi - lay.pack(dec), g))
    return total


# ---------------------------------------------------------------------
# profile comparison
# ---------------------------------------------------------------------

@dataclass
class CompareReport:
    component_dist: dict           # name -> inf distance
    cost_gap: dict                 # prosumer id -> |J_a - J_b|

    def max_prosumer_kw(self) -> float:
        keys = ("p_di", "p_ch", "p_ds", "p_mg", "trades")
        return max(self.component_dist[k] for k in keys)

    def max_cost_gap(self) -> float:
        return max(self.cost_gap.values()) if self.cost_gap else 0.0


def compare(profile_a, profile_b, scenario: Scenario,
            grid_a: Optional[GridDecision] = None,
            grid_b: Optional[GridDecision] = None) -> CompareReport:
    """Symmetric per-component distance and per-prosumer cost gaps."""
    def gap(x, y):
        return float(np.max(np.abs(np.asarray(x) - np.asarray(y)), initial=0.0))

    dist = {k: 0.0 for k in ("p_di", "p_ch", "p_ds", "p_mg", "trades")}
    for i in profile_a:
        a, b = profile_a[i], profile_b[i]
        dist["p_di"] = max(dist["p_di"], gap(a.p_di, b.p_di))
        dist["p_ch"] = max(dist["p_ch"], gap(a.p_ch, b.p_ch))
        dist["p_ds"] = max(dist["p_ds"], gap(a.p_ds, b.p_ds))
        dist["p_mg"] = max(dist["p_mg"], gap(a.p_mg, b.p_mg))
        for j, t in a.trades.items():
            dist["trades"] = max(dist["trades"], gap(t, b.trades[j]))
    if grid_a is not None and grid_b is not None:
        for name, da, db in (("theta", grid_a.theta, grid_b.theta),
                             ("v", grid_a.v, grid_b.v),
                             ("p_tg", grid_a.p_tg, grid_b.p_tg),
                             ("p_flow", grid_a.p_flow, grid_b.p_flow),
                             ("q_flow", grid_a.q_flow, grid_b.q_flow)):
            dist[name] = max(gap(da[k], db[k]) for k in da)
    cost_gap = {}
    for i in profile_a:
        ca = model_total(i, profile_a, scenario)
        cb = model_total(i, profile_b, scenario)
        cost_gap[i] = abs(ca - cb)
    return CompareReport(component_dist=dist, cost_gap=cost_gap)


def model_total(i, profile, scenario):
    from p2pmarket import model

    return model.eval_total_cost(i, profile[i], profile, scenario)
