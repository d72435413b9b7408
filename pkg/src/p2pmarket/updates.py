"""Per-iteration state transitions of the market-clearing algorithm.

Each prosumer runs a reflected-residual dual step on its trading
reciprocity multipliers followed by a proximal best-response solved as a
QP over its local set; the network operator shifts its physical
variables along the coupling multipliers, projects back onto its
feasible set and integrates the operational-constraint violations.

All updates read only iteration-k data of the other agents, so the
prosumer transitions within one iteration are order-independent and safe
to run in parallel workers; this module keeps them single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from p2pmarket import gridproj, qp
from p2pmarket.model import (DNO_ID, GridDecision, ModelError, Prosumer,
                             ProsumerDecision, Scenario, as_profile)

__all__ = [
    "ProsumerLayout",
    "StepSizes",
    "Broadcast",
    "ProsumerState",
    "DnoState",
    "ProsumerAgent",
    "DnoAgent",
    "default_step_sizes",
    "step_size_bounds",
    "assemble_prosumer_shift",
    "build_local_problem",
    "dno_shift",
]


class ProsumerLayout:
    """Index map of one prosumer's flat decision vector.

    Blocks in order: generation, charging, discharging, grid import,
    then one trade block per partner in ascending id order.
    """

    def __init__(self, prosumer: Prosumer, horizon: int):
        self.H = horizon
        self.partners = tuple(sorted(prosumer.neighbors))
        names = ["p_di", "p_ch", "p_ds", "p_mg"] + [("t", j) for j in self.partners]
        self.slices = {}
        at = 0
        for name in names:
            self.slices[name] = slice(at, at + horizon)
            at += horizon
        self.n = at

    def pack(self, dec: ProsumerDecision) -> np.ndarray:
        out = np.empty(self.n)
        out[self.slices["p_di"]] = dec.p_di
        out[self.slices["p_ch"]] = dec.p_ch
        out[self.slices["p_ds"]] = dec.p_ds
        out[self.slices["p_mg"]] = dec.p_mg
        for j in self.partners:
            out[self.slices[("t", j)]] = dec.trades[j]
        return out

    def unpack(self, vec: np.ndarray) -> ProsumerDecision:
        return ProsumerDecision(
            p_di=vec[self.slices["p_di"]].copy(),
            p_ch=vec[self.slices["p_ch"]].copy(),
            p_ds=vec[self.slices["p_ds"]].copy(),
            p_mg=vec[self.slices["p_mg"]].copy(),
            trades={j: vec[self.slices[("t", j)]].copy() for j in self.partners})


# ---------------------------------------------------------------------
# step sizes
# ---------------------------------------------------------------------

def step_size_bounds(scenario: Scenario) -> dict:
    """Strict upper bounds on every step size, per agent."""
    N = scenario.n_prosumers
    d_max = float(np.max(as_profile(scenario.pricing.price_coeff, scenario.H)))
    bounds = {
        "alpha": {p.id: 1.0 / (3.0 + N * d_max) for p in scenario.prosumers},
        "beta_tr": {l.pair: 0.5 for l in scenario.trade_links},
        "alpha_dno": 2.0,
        "gamma_mg": 1.0 / N,
        "beta_tg": 1.0 / (N + len(scenario.buses)),
        "beta_pb": {},
    }
    for bus in scenario.buses:
        y = bus.id
        n_pro = len(scenario.prosumers_on_bus[y])
        n_adj = len(scenario.bus_neighbors[y])
        bounds["beta_pb"][y] = 1.0 / (1.0 + 2.0 * n_pro + n_adj)
    return bounds


@dataclass(frozen=True)
class StepSizes:
    alpha: dict       # prosumer id -> prox weight
    beta_tr: dict     # link pair -> reciprocity dual step
    alpha_dno: float
    gamma_mg: float
    beta_tg: float
    beta_pb: dict     # bus id -> balance dual step

    def validate(self, scenario: Scenario):
        bounds = step_size_bounds(scenario)
        for i, a in self.alpha.items():
            if not (0 < a < bounds["alpha"][i]):
                raise ModelError(
                    f"alpha[{i}]={a} violates the bound {bounds['alpha'][i]:.6g}")
        for pair, b in self.beta_tr.items():
            if not (0 < b < 0.5):
                raise ModelError(f"beta_tr[{pair}]={b} must lie in (0, 1/2)")
        if not (0 < self.alpha_dno < 2.0):
            raise ModelError("alpha_dno must lie in (0, 2)")
        if not (0 < self.gamma_mg < bounds["gamma_mg"]):
            raise ModelError(f"gamma_mg must lie in (0, {bounds['gamma_mg']:.6g})")
        if not (0 < self.beta_tg < bounds["beta_tg"]):
            raise ModelError(f"beta_tg must lie in (0, {bounds['beta_tg']:.6g})")
        for y, b in self.beta_pb.items():
            if not (0 < b < bounds["beta_pb"][y]):
                raise ModelError(
                    f"beta_pb[{y}]={b} violates the bound {bounds['beta_pb'][y]:.6g}")


def default_step_sizes(scenario: Scenario, safety: float = 0.9) -> StepSizes:
    """Safety-factor scaling of every agent's step-size bound."""
    if not (0 < safety < 1):
        raise ModelError("step-size safety factor must lie in (0, 1)")
    b = step_size_bounds(scenario)
    sizes = StepSizes(
        alpha={i: safety * v for i, v in b["alpha"].items()},
        beta_tr={pair: safety * 0.5 for pair in b["beta_tr"]},
        alpha_dno=safety * 2.0,
        gamma_mg=safety * b["gamma_mg"],
        beta_tg=safety * b["beta_tg"],
        beta_pb={y: safety * v for y, v in b["beta_pb"].items()},
    )
    sizes.validate(scenario)
    return sizes


# ---------------------------------------------------------------------
# messages and states
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class Broadcast:
    """Coordinator-to-prosumer message of one iteration."""

    sigma_mg: np.ndarray          # aggregate import, length H
    lam_mg: np.ndarray            # aggregate-bound multipliers, length 2H
    mu_tg: np.ndarray             # grid-exchange multiplier, length H
    mu_pb: Mapping[int, np.ndarray]  # per-bus balance multiplier


@dataclass
class ProsumerState:
    u: np.ndarray                 # flat decision (ProsumerLayout order)
    mu_tr: dict                   # partner -> reciprocity multiplier
    zeta_tr_prev: dict            # partner -> previous residual memory
    alpha: float
    beta_tr: dict                 # partner -> dual step


@dataclass
class DnoState:
    u: np.ndarray                 # flat grid decision (GridSets order)
    lam_mg: np.ndarray
    mu_tg: np.ndarray
    mu_pb: dict
    zeta_tg: np.ndarray
    zeta_pb: dict
    sigma_mg: np.ndarray          # memory of the last aggregate import
    alpha: float
    gamma_mg: float
    beta_tg: float
    beta_pb: dict
    xi: Optional[np.ndarray] = None  # DRS driver carried across iterations
    projection_fallbacks: int = 0


# ---------------------------------------------------------------------
# prosumer updates
# ---------------------------------------------------------------------

def assemble_prosumer_shift(layout: ProsumerLayout, state: ProsumerState,
                            broadcast: Broadcast, bus_id: int) -> np.ndarray:
    """The proximal center psi_i: current decision minus alpha times the
    coupling-multiplier direction of each component."""
    H = layout.H
    mu_pb = broadcast.mu_pb[bus_id]
    shift = np.zeros(layout.n)
    shift[layout.slices["p_di"]] = -mu_pb
    shift[layout.slices["p_ch"]] = mu_pb
    shift[layout.slices["p_ds"]] = -mu_pb
    shift[layout.slices["p_mg"]] = (broadcast.lam_mg[:H] - broadcast.lam_mg[H:]
                                    + broadcast.mu_tg)
    for j in layout.partners:
        shift[layout.slices[("t", j)]] = state.mu_tr[j]
    return state.u - state.alpha * shift


def build_local_problem(prosumer: Prosumer, scenario: Scenario, mode: str = "gne",
                        prox_alpha: Optional[float] = None) -> qp.QpProblem:
    """QP data of one prosumer's local problem: private cost terms over
    the local constraint set, optionally with a proximal diagonal.

    The grid-price linear term (which depends on the broadcast aggregate)
    and the proximal center are left out; callers add them to ``q``.
    """
    H = scenario.H
    lay = ProsumerLayout(prosumer, H)
    b = qp.QpBuilder()

    if prosumer.dispatchable is not None:
        unit = prosumer.dispatchable
        sl = b.add_block("p_di", H, lo=unit.p_min, hi=unit.p_max)
        b.add_quad_diag(sl, as_profile(unit.quad_coeff, H))
        b.add_lin(sl, as_profile(unit.lin_coeff, H))
    else:
        b.add_block("p_di", H, lo=0.0, hi=0.0)
    if prosumer.storage is not None:
        st = prosumer.storage
        ch = b.add_block("p_ch", H, lo=0.0, hi=st.p_ch_max)
        ds = b.add_block("p_ds", H, lo=0.0, hi=st.p_ds_max)
        if st.cost_coeff:
            b.add_quad_diag(ch, st.cost_coeff)
            b.add_quad_diag(ds, st.cost_coeff)
    else:
        b.add_block("p_ch", H, lo=0.0, hi=0.0)
        b.add_block("p_ds", H, lo=0.0, hi=0.0)
    mg = b.add_block("p_mg", H)
    if mode == "gne":
        b.add_quad_diag(mg, as_profile(scenario.pricing.price_coeff, H))
    links = scenario.links_of(prosumer.id)
    for j in lay.partners:
        link = links[j]
        sl = b.add_block(("t", j), H, lo=-link.trade_cap, hi=link.trade_cap,
                         l1=scenario.pricing.tariff)
        b.add_lin(sl, link.trade_cost)
    if prox_alpha is not None:
        for name in ["p_di", "p_ch", "p_ds", "p_mg"] + [("t", j) for j in lay.partners]:
            b.add_quad_diag(b.slices[name], 1.0 / (2.0 * prox_alpha))

    # local balance: p_di + p_ds - p_ch + p_mg + sum_j t_j = demand
    cols_per_h = [b.slices["p_di"], b.slices["p_ds"], b.slices["p_ch"],
                  b.slices["p_mg"]] + [b.slices[("t", j)] for j in lay.partners]
    signs = [1.0, 1.0, -1.0, 1.0] + [1.0] * len(lay.partners)
    rows, cols, vals = [], [], []
    for h in range(H):
        for sl, s in zip(cols_per_h, signs):
            rows.append(h)
            cols.append(sl.start + h)
            vals.append(s)
    b.add_eq_rows(rows, cols, vals, prosumer.demand)

    if prosumer.storage is not None:
        st = prosumer.storage
        soc = b.add_block("soc", H, lo=st.soc_min, hi=st.soc_max)
        c_ch = scenario.time.sampling_hours / st.capacity * st.charge_eff
        c_ds = scenario.time.sampling_hours / (st.capacity * st.discharge_eff)
        ch, ds = b.slices["p_ch"], b.slices["p_ds"]
        rows, cols, vals, rhs = [], [], [], []
        for h in range(H):
            rows += [h, h, h]
            cols += [soc.start + h, ch.start + h, ds.start + h]
            vals += [1.0, -c_ch, c_ds]
            if h == 0:
                rhs.append(st.leakage * st.soc_init)
            else:
                rows.append(h)
                cols.append(soc.start + h - 1)
                vals.append(-st.leakage)
                rhs.append(0.0)
        b.add_eq_rows(rows, cols, vals, rhs)

    return b.build()


class ProsumerAgent:
    """One prosumer's local data: layout, cached QP, and dual state."""

    def __init__(self, prosumer: Prosumer, scenario: Scenario, alpha: float,
                 beta_tr: dict, mode: str = "gne", qp_tol: float = 1e-8,
                 qp_max_iter: int = 20000):
        if mode not in ("gne", "wardrop"):
            raise ModelError(f"unknown mode {mode!r}")
        self.prosumer = prosumer
        self.scenario = scenario
        self.mode = mode
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        H = scenario.H
        self.layout = ProsumerLayout(prosumer, H)
        self.state = ProsumerState(
            u=np.zeros(self.layout.n),
            mu_tr={j: np.zeros(H) for j in self.layout.partners},
            zeta_tr_prev={j: np.zeros(H) for j in self.layout.partners},
            alpha=alpha,
            beta_tr=dict(beta_tr),
        )
        self._base_problem = build_local_problem(prosumer, scenario, mode,
                                                 prox_alpha=alpha)
        self._base_q = self._base_problem.q.copy()
        self._solver = qp.QpSolver(self._base_problem)
        self._d = as_profile(scenario.pricing.price_coeff, H)
        self._b = scenario.passive_load
        self._mg_slice = self.layout.slices["p_mg"]

    # -- Algorithm steps -------------------------------------------------

    def dual_update(self, incoming: Mapping[int, np.ndarray]):
        """Reciprocity dual step from the partners' iteration-k trades."""
        st = self.state
        for j in self.layout.partners:
            if j not in incoming:
                raise ModelError(
                    f"prosumer {self.prosumer.id} missing trade message from {j}")
            zeta = st.u[self.layout.slices[("t", j)]] + incoming[j]
            st.mu_tr[j] = st.mu_tr[j] + st.beta_tr[j] * (2.0 * zeta - st.zeta_tr_prev[j])
            st.zeta_tr_prev[j] = zeta

    def primal_update(self, broadcast: Broadcast) -> np.ndarray:
        """Proximal best response; returns (and stores) the new decision."""
        st = self.state
        psi = assemble_prosumer_shift(self.layout, st, broadcast,
                                      self.prosumer.bus_id)
        q = self._base_q.copy()
        if self.mode == "gne":
            sigma_other = broadcast.sigma_mg - st.u[self._mg_slice]
            q[self._mg_slice] += self._d * (sigma_other + self._b)
        else:
            q[self._mg_slice] += self._d * (broadcast.sigma_mg + self._b)
        q[:self.layout.n] -= psi / st.alpha
        self._solver.update_lin(q=q)
        sol = self._solver.solve(tol=self.qp_tol, max_iter=self.qp_max_iter)
        if sol.status == "infeasible_detected":
            raise ModelError(
                f"prosumer {self.prosumer.id}: local set detected infeasible")
        st.u = sol.x[:self.layout.n].copy()
        return st.u

    # -- views -----------------------------------------------------------

    @property
    def decision(self) -> ProsumerDecision:
        return self.layout.unpack(self.state.u)

    def injection(self) -> np.ndarray:
        lay = self.layout
        return (self.prosumer.demand - self.state.u[lay.slices["p_di"]]
                - self.state.u[lay.slices["p_ds"]] + self.state.u[lay.slices["p_ch"]])

    def p_mg(self) -> np.ndarray:
        return self.state.u[self._mg_slice].copy()

    def trade(self, j: int) -> np.ndarray:
        return self.state.u[self.layout.slices[("t", j)]].copy()


# ---------------------------------------------------------------------
# network operator updates
# ---------------------------------------------------------------------

def dno_shift(sets: gridproj.GridSets, mu_tg: np.ndarray,
              mu_pb: Mapping[int, np.ndarray]) -> np.ndarray:
    """Multiplier direction of the operator's primal step: the
    grid-exchange slot of bus y gets mu_tg + mu_pb_y, every outgoing real
    flow gets mu_pb_y, angles/voltages/reactive flows get zero."""
    shift = np.zeros((sets.n_comp, sets.H))
    for k, c in enumerate(sets.components):
        if c[0] == "ptg":
            shift[k] = mu_tg + mu_pb[c[1]]
        elif c[0] == "pflow":
            shift[k] = mu_pb[c[1]]
    return shift.reshape(-1)


class DnoAgent:
    """Network operator: projection sets, duals, residual memories."""

    def __init__(self, scenario: Scenario, sizes: StepSizes,
                 drs_cfg: gridproj.DrsConfig = gridproj.DrsConfig()):
        self.scenario = scenario
        self.sets = gridproj.GridSets(scenario)
        self.drs_cfg = drs_cfg
        H = scenario.H
        u0 = self._initial_point()
        self.state = DnoState(
            u=u0,
            lam_mg=np.zeros(2 * H),
            mu_tg=np.zeros(H),
            mu_pb={b.id: np.zeros(H) for b in scenario.buses},
            zeta_tg=np.zeros(H),
            zeta_pb={b.id: np.zeros(H) for b in scenario.buses},
            sigma_mg=np.zeros(H),
            alpha=sizes.alpha_dno,
            gamma_mg=sizes.gamma_mg,
            beta_tg=sizes.beta_tg,
            beta_pb=dict(sizes.beta_pb),
        )

    def _initial_point(self) -> np.ndarray:
        res = gridproj.project_grid_feasible(
            self.sets.unpack(np.zeros(self.sets.size)), self.sets, self.drs_cfg)
        return self.sets.pack(res.decision)

    def init_memories(self, injections: Mapping[int, np.ndarray],
                      sigma_mg: np.ndarray):
        """Residual memories of the initial profile (iteration 0)."""
        st = self.state
        st.sigma_mg = sigma_mg.copy()
        st.zeta_tg = sigma_mg + self.scenario.passive_load - self._sigma_tg()
        st.zeta_pb = self._bus_residuals(injections)

    def _sigma_tg(self) -> np.ndarray:
        U = self.state.u.reshape(self.sets.n_comp, self.sets.H)
        total = np.zeros(self.sets.H)
        for k, c in enumerate(self.sets.components):
            if c[0] == "ptg":
                total = total + U[k]
        return total

    def _bus_residuals(self, injections: Mapping[int, np.ndarray]) -> dict:
        sc = self.scenario
        U = self.state.u.reshape(self.sets.n_comp, self.sets.H)
        out = {}
        for bus in sc.buses:
            y = bus.id
            val = np.zeros(sc.H)
            for c in sc.passive_on_bus[y]:
                val = val + c.demand
            for i in sc.prosumers_on_bus[y]:
                val = val + injections[i]
            val = val - U[self.sets.index[("ptg", y)]]
            for z in sc.bus_neighbors[y]:
                val = val - U[self.sets.index[("pflow", y, z)]]
            out[y] = val
        return out

    def primal_update(self) -> np.ndarray:
        """Shift along the multipliers, project back onto the grid set."""
        st = self.state
        target = st.u + dno_shift(self.sets, st.mu_tg, st.mu_pb) / st.alpha
        res = gridproj.project_grid_feasible(
            self.sets.unpack(target), self.sets, self.drs_cfg, xi0=st.xi)
        if res.status != "converged":
            # rare stall: redo the projection through the QP route
            sol = qp.solve(self._projection_qp(target), tol=self.drs_cfg.tol * 100)
            st.u = sol.x
            st.xi = None
            st.projection_fallbacks += 1
        else:
            st.u = self.sets.pack(res.decision)
            st.xi = res.xi
        return st.u

    def _projection_qp(self, target: np.ndarray) -> qp.QpProblem:
        from scipy import sparse as sp

        sets = self.sets
        H = sets.H
        A = sp.kron(sp.csr_matrix(sets.A0), sp.eye(H), format="csr")
        disks = [(int(sets.disk_p[k]) * H + h, int(sets.disk_q[k]) * H + h,
                  float(sets.disk_r[k]))
                 for k in range(sets.disk_p.size) for h in range(H)]
        return qp.QpProblem(
            P=2 * sp.eye(sets.size, format="csc"), q=-2.0 * target,
            A_eq=A, b_eq=np.zeros(A.shape[0]),
            lo=np.repeat(sets.lo, H), hi=np.repeat(sets.hi, H), disks=disks)

    def dual_update(self, injections: Mapping[int, np.ndarray],
                    sigma_new: np.ndarray):
        """Operational-feasibility dual step from the k+1 primal data."""
        st = self.state
        sc = self.scenario
        b = sc.passive_load
        pricing = sc.pricing
        refl = 2.0 * sigma_new - st.sigma_mg
        delta = np.concatenate([
            refl - (pricing.agg_max * np.ones(sc.H) - b),
            -refl - (-pricing.agg_min * np.ones(sc.H) + b),
        ])
        st.lam_mg = np.maximum(st.lam_mg + st.gamma_mg * delta, 0.0)

        zeta_tg = sigma_new + b - self._sigma_tg()
        st.mu_tg = st.mu_tg + st.beta_tg * (2.0 * zeta_tg - st.zeta_tg)
        st.zeta_tg = zeta_tg

        zeta_pb = self._bus_residuals(injections)
        for y, z_new in zeta_pb.items():
            st.mu_pb[y] = st.mu_pb[y] + st.beta_pb[y] * (2.0 * z_new - st.zeta_pb[y])
        st.zeta_pb = zeta_pb
        st.sigma_mg = sigma_new.copy()

    def broadcast(self) -> Broadcast:
        st = self.state
        return Broadcast(sigma_mg=st.sigma_mg.copy(), lam_mg=st.lam_mg.copy(),
                         mu_tg=st.mu_tg.copy(),
                         mu_pb={y: v.copy() for y, v in st.mu_pb.items()})

    @property
    def decision(self) -> GridDecision:
        return self.sets.unpack(self.state.u)
