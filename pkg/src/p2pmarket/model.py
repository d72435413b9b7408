"""Domain model: market instances and pure cost/constraint evaluation.

Types describing one market instance (prosumers and their devices, the
bilateral trading graph, the physical grid, main-grid pricing) together
with side-effect-free evaluation of every cost term and constraint
residual. All per-hour quantities are numpy arrays of length ``H``.

Units: power kW, energy kWh, money EUR, prices EUR/kWh (quadratic price
coefficients EUR/kWh^2), state of charge as a fraction of capacity,
angles rad, voltage magnitudes p.u.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

__all__ = [
    "DNO_ID",
    "TimeGrid",
    "DispatchableUnit",
    "StorageUnit",
    "Prosumer",
    "PassiveConsumer",
    "TradeLink",
    "GridPricing",
    "Bus",
    "Line",
    "Scenario",
    "ProsumerDecision",
    "GridDecision",
    "LocalResiduals",
    "CouplingResiduals",
    "ModelError",
    "as_profile",
    "eval_dispatch_cost",
    "eval_storage_cost",
    "eval_trade_cost",
    "eval_grid_cost",
    "eval_total_cost",
    "soc_trajectory",
    "power_injection",
    "local_residuals",
    "coupling_residuals",
    "scenarios_equal",
]

#: Agent index used for the network operator in APIs that take an agent id.
DNO_ID = -1


class ModelError(ValueError):
    """Invalid market data (broken invariant, inconsistent dimensions)."""


def as_profile(value, horizon: int) -> np.ndarray:
    """Return ``value`` as a float vector of length ``horizon``.

    Scalars broadcast; vectors must already have the right length.
    """
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 or arr.size == 1:
        return np.full(horizon, arr.reshape(-1)[0] if arr.ndim else float(arr))
    if arr.shape != (horizon,):
        raise ModelError(f"expected profile of length {horizon}, got shape {arr.shape}")
    return arr


def _vec(value) -> np.ndarray:
    return np.atleast_1d(np.asarray(value, dtype=float))


@dataclass(frozen=True)
class TimeGrid:
    horizon_steps: int
    sampling_hours: float = 1.0

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ModelError("horizon_steps must be >= 1")
        if self.sampling_hours <= 0:
            raise ModelError("sampling_hours must be > 0")

    @property
    def H(self) -> int:
        return self.horizon_steps


@dataclass(frozen=True)
class DispatchableUnit:
    """Fuel-based generator with quadratic cost and output box.

    ``quad_coeff``/``lin_coeff`` may be scalars (broadcast over the
    horizon) or length-H vectors of per-hour coefficients.
    """

    quad_coeff: np.ndarray
    lin_coeff: np.ndarray
    p_min: float
    p_max: float

    def __post_init__(self):
        object.__setattr__(self, "quad_coeff", _vec(self.quad_coeff))
        object.__setattr__(self, "lin_coeff", _vec(self.lin_coeff))
        if np.any(self.quad_coeff < 0):
            raise ModelError("dispatchable quad_coeff entries must be >= 0")
        if not (0 <= self.p_min < self.p_max):
            raise ModelError("dispatchable bounds need 0 <= p_min < p_max")


@dataclass(frozen=True)
class StorageUnit:
    """Battery with leakage, charge/discharge efficiencies and a SoC box."""

    cost_coeff: float
    capacity: float
    leakage: float = 1.0
    charge_eff: float = 1.0
    discharge_eff: float = 1.0
    soc_min: float = 0.0
    soc_max: float = 1.0
    p_ch_max: float = 0.0
    p_ds_max: float = 0.0
    soc_init: float = 0.5

    def __post_init__(self):
        if self.cost_coeff < 0:
            raise ModelError("storage cost_coeff must be >= 0")
        if self.capacity <= 0:
            raise ModelError("storage capacity must be > 0")
        for name in ("leakage", "charge_eff", "discharge_eff"):
            val = getattr(self, name)
            if not (0 < val <= 1):
                raise ModelError(f"storage {name} must lie in (0, 1]")
        if not (0 <= self.soc_min <= self.soc_max <= 1):
            raise ModelError("need 0 <= soc_min <= soc_max <= 1")
        if not (self.soc_min <= self.soc_init <= self.soc_max):
            raise ModelError("soc_init must lie in [soc_min, soc_max]")
        if self.p_ch_max < 0 or self.p_ds_max < 0:
            raise ModelError("charge/discharge limits must be >= 0")


@dataclass(frozen=True)
class Prosumer:
    """Market participant. ``demand`` is net of non-dispatchable generation
    and may be negative when on-site solar/wind exceeds the load."""

    id: int
    bus_id: int
    demand: np.ndarray
    dispatchable: Optional[DispatchableUnit] = None
    storage: Optional[StorageUnit] = None
    neighbors: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "demand", _vec(self.demand))
        object.__setattr__(self, "neighbors", frozenset(self.neighbors))
        if self.id in self.neighbors:
            raise ModelError(f"prosumer {self.id} cannot trade with itself")


@dataclass(frozen=True)
class PassiveConsumer:
    bus_id: int
    demand: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "demand", _vec(self.demand))


@dataclass(frozen=True)
class TradeLink:
    """Undirected trading link; parameters shared by both directions."""

    pair: tuple
    trade_cost: float
    trade_cap: float

    def __post_init__(self):
        i, j = self.pair
        if i == j:
            raise ModelError("trade link endpoints must differ")
        object.__setattr__(self, "pair", (min(i, j), max(i, j)))
        if self.trade_cost < 0:
            raise ModelError("trade_cost must be >= 0")
        if self.trade_cap < 0:
            raise ModelError("trade_cap must be >= 0")


@dataclass(frozen=True)
class GridPricing:
    """Main-grid price model and aggregate exchange bounds.

    The unit price at hour h is ``price_coeff[h] * (sigma_h + b_h)`` where
    ``b`` is the total passive load (derived on the Scenario, never stored).
    """

    price_coeff: np.ndarray
    tariff: float
    agg_min: float
    agg_max: float

    def __post_init__(self):
        object.__setattr__(self, "price_coeff", _vec(self.price_coeff))
        if np.any(self.price_coeff <= 0):
            raise ModelError("grid price coefficients must be > 0")
        if self.tariff < 0:
            raise ModelError("tariff must be >= 0")
        if not (self.agg_max > self.agg_min >= 0):
            raise ModelError("aggregate bounds need agg_max > agg_min >= 0")


@dataclass(frozen=True)
class Bus:
    id: int
    theta_min: float = -0.25
    theta_max: float = 0.25
    v_min: float = 0.95
    v_max: float = 1.05
    grid_connected: bool = False

    def __post_init__(self):
        if self.theta_min > self.theta_max:
            raise ModelError(f"bus {self.id}: theta_min > theta_max")
        if self.v_min > self.v_max:
            raise ModelError(f"bus {self.id}: v_min > v_max")


@dataclass(frozen=True)
class Line:
    """Undirected physical line with linearized parameters."""

    pair: tuple
    susceptance: float
    conductance: float
    capacity: float

    def __post_init__(self):
        y, z = self.pair
        if y == z:
            raise ModelError("line endpoints must differ")
        object.__setattr__(self, "pair", (min(y, z), max(y, z)))
        if self.capacity <= 0:
            raise ModelError("line capacity must be > 0")


@dataclass(frozen=True)
class Scenario:
    """Complete market instance. Immutable after construction."""

    time: TimeGrid
    prosumers: tuple
    passive_consumers: tuple
    trade_links: tuple
    buses: tuple
    lines: tuple
    pricing: GridPricing

    def __post_init__(self):
        object.__setattr__(self, "prosumers", tuple(self.prosumers))
        object.__setattr__(self, "passive_consumers", tuple(self.passive_consumers))
        object.__setattr__(self, "trade_links", tuple(self.trade_links))
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        self.validate()

    # -- derived views -------------------------------------------------

    @cached_property
    def H(self) -> int:
        return self.time.horizon_steps

    @cached_property
    def n_prosumers(self) -> int:
        return len(self.prosumers)

    @cached_property
    def prosumer_by_id(self) -> dict:
        return {p.id: p for p in self.prosumers}

    @cached_property
    def bus_by_id(self) -> dict:
        return {b.id: b for b in self.buses}

    @cached_property
    def link_by_pair(self) -> dict:
        return {l.pair: l for l in self.trade_links}

    @cached_property
    def line_by_pair(self) -> dict:
        return {l.pair: l for l in self.lines}

    @cached_property
    def bus_neighbors(self) -> dict:
        """Adjacent buses per bus id (both directions)."""
        adj = {b.id: [] for b in self.buses}
        for line in self.lines:
            y, z = line.pair
            adj[y].append(z)
            adj[z].append(y)
        return {y: tuple(sorted(zs)) for y, zs in adj.items()}

    @cached_property
    def prosumers_on_bus(self) -> dict:
        on = {b.id: [] for b in self.buses}
        for p in self.prosumers:
            on[p.bus_id].append(p.id)
        return {y: tuple(ids) for y, ids in on.items()}

    @cached_property
    def passive_on_bus(self) -> dict:
        on = {b.id: [] for b in self.buses}
        for c in self.passive_consumers:
            on[c.bus_id].append(c)
        return {y: tuple(cs) for y, cs in on.items()}

    @cached_property
    def passive_load(self) -> np.ndarray:
        """Aggregate passive demand b, derived from the consumer list."""
        b = np.zeros(self.H)
        for c in self.passive_consumers:
            b = b + c.demand
        return b

    @cached_property
    def reference_bus(self) -> int:
        return min(b.id for b in self.buses)

    def links_of(self, prosumer_id: int) -> dict:
        """Trade links of one prosumer, keyed by partner id."""
        out = {}
        for link in self.trade_links:
            i, j = link.pair
            if i == prosumer_id:
                out[j] = link
            elif j == prosumer_id:
                out[i] = link
        return out

    def link(self, i: int, j: int) -> TradeLink:
        return self.link_by_pair[(min(i, j), max(i, j))]

    # -- validation ----------------------------------------------------

    def validate(self):
        H = self.time.horizon_steps
        bus_ids = {b.id for b in self.buses}
        if len(bus_ids) != len(self.buses):
            raise ModelError("duplicate bus ids")
        pro_ids = [p.id for p in self.prosumers]
        if len(set(pro_ids)) != len(pro_ids):
            raise ModelError("duplicate prosumer ids")

        ref = min(bus_ids)
        ref_bus = next(b for b in self.buses if b.id == ref)
        if ref_bus.theta_min != 0 or ref_bus.theta_max != 0:
            raise ModelError(
                f"reference bus {ref} must pin the angle: theta_min = theta_max = 0"
            )
        if not any(b.grid_connected for b in self.buses):
            raise ModelError("at least one bus must be grid-connected")

        for p in self.prosumers:
            if p.bus_id not in bus_ids:
                raise ModelError(f"prosumer {p.id} references unknown bus {p.bus_id}")
            if p.demand.shape != (H,):
                raise ModelError(f"prosumer {p.id} demand length != horizon {H}")
        for c in self.passive_consumers:
            if c.bus_id not in bus_ids:
                raise ModelError(f"passive consumer references unknown bus {c.bus_id}")
            if c.demand.shape != (H,):
                raise ModelError("passive demand length != horizon")

        if self.pricing.price_coeff.shape != (H,) and self.pricing.price_coeff.size != 1:
            raise ModelError("grid price coefficient length != horizon")

        pro_set = set(pro_ids)
        pairs = set()
        for link in self.trade_links:
            i, j = link.pair
            if link.pair in pairs:
                raise ModelError(f"duplicate trade link {link.pair}")
            pairs.add(link.pair)
            if i not in pro_set or j not in pro_set:
                raise ModelError(f"trade link {link.pair} references unknown prosumer")
        for p in self.prosumers:
            for j in p.neighbors:
                if (min(p.id, j), max(p.id, j)) not in pairs:
                    raise ModelError(f"prosumer {p.id} neighbor {j} has no trade link")
        for pair in pairs:
            i, j = pair
            pi, pj = self.prosumer_by_id[i], self.prosumer_by_id[j]
            if j not in pi.neighbors or i not in pj.neighbors:
                raise ModelError(f"trade link {pair} not mirrored in neighbor sets")

        line_pairs = set()
        for line in self.lines:
            y, z = line.pair
            if line.pair in line_pairs:
                raise ModelError(f"duplicate line {line.pair}")
            line_pairs.add(line.pair)
            if y not in bus_ids or z not in bus_ids:
                raise ModelError(f"line {line.pair} references unknown bus")
        if len(self.buses) > 1:
            seen = {self.reference_bus}
            frontier = [self.reference_bus]
            adj = {b.id: set() for b in self.buses}
            for line in self.lines:
                y, z = line.pair
                adj[y].add(z)
                adj[z].add(y)
            while frontier:
                y = frontier.pop()
                for z in adj[y]:
                    if z not in seen:
                        seen.add(z)
                        frontier.append(z)
            if seen != bus_ids:
                raise ModelError("physical grid is not connected")


@dataclass(frozen=True)
class ProsumerDecision:
    """One prosumer's strategy over the horizon.

    Components for absent devices stay identically zero; ``trades`` maps a
    partner id to the power bought from (positive) or sold to (negative)
    that partner.
    """

    p_di: np.ndarray
    p_ch: np.ndarray
    p_ds: np.ndarray
    p_mg: np.ndarray
    trades: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "p_di", _vec(self.p_di))
        object.__setattr__(self, "p_ch", _vec(self.p_ch))
        object.__setattr__(self, "p_ds", _vec(self.p_ds))
        object.__setattr__(self, "p_mg", _vec(self.p_mg))
        object.__setattr__(
            self, "trades", {j: _vec(t) for j, t in dict(self.trades).items()}
        )

    @staticmethod
    def zeros(horizon: int, neighbors=()) -> "ProsumerDecision":
        z = np.zeros(horizon)
        return ProsumerDecision(
            z.copy(), z.copy(), z.copy(), z.copy(),
            {j: np.zeros(horizon) for j in sorted(neighbors)},
        )


@dataclass(frozen=True)
class GridDecision:
    """Network operator strategy: per-bus angles/voltages/grid exchange and
    per directed bus pair line flows (both directions stored)."""

    theta: Mapping[int, np.ndarray]
    v: Mapping[int, np.ndarray]
    p_tg: Mapping[int, np.ndarray]
    p_flow: Mapping[tuple, np.ndarray]
    q_flow: Mapping[tuple, np.ndarray]

    def __post_init__(self):
        for name in ("theta", "v", "p_tg", "p_flow", "q_flow"):
            raw = getattr(self, name)
            object.__setattr__(self, name, {k: _vec(x) for k, x in dict(raw).items()})

    @staticmethod
    def zeros(scenario: Scenario) -> "GridDecision":
        H = scenario.H
        theta = {b.id: np.zeros(H) for b in scenario.buses}
        v = {b.id: np.zeros(H) for b in scenario.buses}
        p_tg = {b.id: np.zeros(H) for b in scenario.buses}
        p_flow, q_flow = {}, {}
        for y, zs in scenario.bus_neighbors.items():
            for z in zs:
                p_flow[(y, z)] = np.zeros(H)
                q_flow[(y, z)] = np.zeros(H)
        return GridDecision(theta, v, p_tg, p_flow, q_flow)


# ---------------------------------------------------------------------
# cost evaluation
# ---------------------------------------------------------------------

def eval_dispatch_cost(p_di, unit: DispatchableUnit, time: TimeGrid) -> float:
    """Quadratic generation cost  sum_h Q_h p_h^2 + c_h p_h."""
    H = time.horizon_steps
    p = as_profile(p_di, H)
    quad = as_profile(unit.quad_coeff, H)
    lin = as_profile(unit.lin_coeff, H)
    return float(np.dot(quad * p, p) + np.dot(lin, p))


def eval_storage_cost(p_ch, p_ds, unit: StorageUnit) -> float:
    """Usage penalty  Q_st (||p_ch||^2 + ||p_ds||^2)."""
    ch = _vec(p_ch)
    ds = _vec(p_ds)
    if ch.shape != ds.shape:
        raise ModelError("charge/discharge profiles must share a length")
    return float(unit.cost_coeff * (np.dot(ch, ch) + np.dot(ds, ds)))


def eval_trade_cost(trades: Mapping[int, np.ndarray], links: Mapping[int, TradeLink],
                    tariff: float) -> float:
    """Bilateral trading cost: per-unit price plus network tariff on |trade|."""
    total = 0.0
    for j, t in trades.items():
        if j not in links:
            raise ModelError(f"no trade link parameters for partner {j}")
        t = _vec(t)
        total += links[j].trade_cost * float(np.sum(t)) + tariff * float(np.sum(np.abs(t)))
    return total


def eval_grid_cost(p_mg, sigma_mg, scenario: Scenario) -> float:
    """Main-grid cost  sum_h d_h (sigma_h + b_h) p_h for one prosumer.

    ``sigma_mg`` is the full aggregate import profile of all prosumers.
    """
    H = scenario.H
    p = as_profile(p_mg, H)
    sigma = as_profile(sigma_mg, H)
    d = as_profile(scenario.pricing.price_coeff, H)
    return float(np.dot(d * (sigma + scenario.passive_load), p))


def aggregate_import(all_decisions: Mapping[int, ProsumerDecision], H: int) -> np.ndarray:
    """sigma^mg: the aggregate prosumer import from the main grid."""
    sigma = np.zeros(H)
    for dec in all_decisions.values():
        sigma = sigma + dec.p_mg
    return sigma


def eval_total_cost(i: int, decision, all_decisions: Mapping[int, ProsumerDecision],
                    scenario: Scenario) -> float:
    """Total cost J_i of agent i given the full decision profile.

    The network operator (``i == DNO_ID``) is indifferent and gets 0.
    """
    if i == DNO_ID:
        return 0.0
    pro = scenario.prosumer_by_id[i]
    sigma = aggregate_import(all_decisions, scenario.H)
    total = eval_grid_cost(decision.p_mg, sigma, scenario)
    total += eval_trade_cost(decision.trades, scenario.links_of(i),
                             scenario.pricing.tariff)
    if pro.dispatchable is not None:
        total += eval_dispatch_cost(decision.p_di, pro.dispatchable, scenario.time)
    if pro.storage is not None:
        total += eval_storage_cost(decision.p_ch, decision.p_ds, pro.storage)
    return total


# ---------------------------------------------------------------------
# constraint evaluation
# ---------------------------------------------------------------------

def soc_trajectory(unit: StorageUnit, p_ch, p_ds, time: TimeGrid) -> np.ndarray:
    """State-of-charge path under the battery dynamics, x_0 included.

    x_{h+1} = leak * x_h + (T_s / cap) * (eta_ch * p_ch_h - p_ds_h / eta_ds)
    """
    H = time.horizon_steps
    ch = as_profile(p_ch, H)
    ds = as_profile(p_ds, H)
    ratio = time.sampling_hours / unit.capacity
    x = np.empty(H + 1)
    x[0] = unit.soc_init
    for h in range(H):
        x[h + 1] = unit.leakage * x[h] + ratio * (
            unit.charge_eff * ch[h] - ds[h] / unit.discharge_eff
        )
    return x


def power_injection(i: int, decision: ProsumerDecision, scenario: Scenario) -> np.ndarray:
    """Active power drawn from the bus by prosumer i:
    demand minus local generation/discharge plus charging."""
    pro = scenario.prosumer_by_id[i]
    return pro.demand - decision.p_di - decision.p_ds + decision.p_ch


def _box_violation(x: np.ndarray, lo: float, hi: float) -> float:
    return float(max(np.max(lo - x, initial=0.0), np.max(x - hi, initial=0.0)))


@dataclass(frozen=True)
class LocalResiduals:
    """Per-prosumer feasibility violations, all in inf-norm."""

    balance: float
    device_bounds: float
    soc: float

    def max(self) -> float:
        return max(self.balance, self.device_bounds, self.soc)

    def as_dict(self) -> dict:
        return {"balance": self.balance, "device_bounds": self.device_bounds,
                "soc": self.soc}


def local_residuals(i: int, decision: ProsumerDecision, scenario: Scenario) -> LocalResiduals:
    """Violation magnitudes of prosumer i's local constraint set."""
    pro = scenario.prosumer_by_id[i]
    H = scenario.H

    lhs = decision.p_di + decision.p_ds - decision.p_ch + decision.p_mg
    for j in sorted(pro.neighbors):
        lhs = lhs + decision.trades.get(j, np.zeros(H))
    balance = float(np.max(np.abs(lhs - pro.demand), initial=0.0))

    dev = 0.0
    if pro.dispatchable is not None:
        dev = max(dev, _box_violation(decision.p_di, pro.dispatchable.p_min,
                                      pro.dispatchable.p_max))
    else:
        dev = max(dev, float(np.max(np.abs(decision.p_di), initial=0.0)))
    if pro.storage is not None:
        dev = max(dev, _box_violation(decision.p_ch, 0.0, pro.storage.p_ch_max))
        dev = max(dev, _box_violation(decision.p_ds, 0.0, pro.storage.p_ds_max))
    else:
        dev = max(dev, float(np.max(np.abs(decision.p_ch), initial=0.0)))
        dev = max(dev, float(np.max(np.abs(decision.p_ds), initial=0.0)))
    for j, t in decision.trades.items():
        cap = scenario.link(i, j).trade_cap
        dev = max(dev, _box_violation(t, -cap, cap))

    soc = 0.0
    if pro.storage is not None:
        x = soc_trajectory(pro.storage, decision.p_ch, decision.p_ds, scenario.time)
        soc = _box_violation(x[1:], pro.storage.soc_min, pro.storage.soc_max)

    return LocalResiduals(balance=balance, device_bounds=dev, soc=soc)


@dataclass(frozen=True)
class CouplingResiduals:
    """Inf-norm violations of the shared (coupling) constraints."""

    reciprocity: float
    aggregate_bounds: float
    bus_balance: float
    grid_exchange: float

    def max(self) -> float:
        return max(self.reciprocity, self.aggregate_bounds,
                   self.bus_balance, self.grid_exchange)

    def as_dict(self) -> dict:
        return {
            "reciprocity": self.reciprocity,
            "aggregate_bounds": self.aggregate_bounds,
            "bus_balance": self.bus_balance,
            "grid_exchange": self.grid_exchange,
        }


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    """Field-by-field equality with exact array comparison."""
    def arr_eq(x, y):
        return np.array_equal(np.asarray(x), np.asarray(y))

    if a.time != b.time or len(a.prosumers) != len(b.prosumers):
        return False
    for pa, pb in zip(a.prosumers, b.prosumers):
        if (pa.id, pa.bus_id, pa.neighbors) != (pb.id, pb.bus_id, pb.neighbors):
            return False
        if not arr_eq(pa.demand, pb.demand):
            return False
        if (pa.dispatchable is None) != (pb.dispatchable is None):
            return False
        if pa.dispatchable is not None:
            da, db = pa.dispatchable, pb.dispatchable
            if not (arr_eq(da.quad_coeff, db.quad_coeff)
                    and arr_eq(da.lin_coeff, db.lin_coeff)
                    and (da.p_min, da.p_max) == (db.p_min, db.p_max)):
                return False
        if (pa.storage is None) != (pb.storage is None):
            return False
        if pa.storage is not None and pa.storage != pb.storage:
            return False
    if len(a.passive_consumers) != len(b.passive_consumers):
        return False
    for ca, cb in zip(a.passive_consumers, b.passive_consumers):
        if ca.bus_id != cb.bus_id or not arr_eq(ca.demand, cb.demand):
            return False
    if a.trade_links != b.trade_links or a.buses != b.buses or a.lines != b.lines:
        return False
    return (arr_eq(a.pricing.price_coeff, b.pricing.price_coeff)
            and (a.pricing.tariff, a.pricing.agg_min, a.pricing.agg_max)
            == (b.pricing.tariff, b.pricing.agg_min, b.pricing.agg_max))


def coupling_residuals(all_decisions: Mapping[int, ProsumerDecision],
                       grid: GridDecision, scenario: Scenario) -> CouplingResiduals:
    """Violations of trade reciprocity, the aggregate import bounds, the
    per-bus power balance and the total grid-exchange identity."""
    H = scenario.H

    recip = 0.0
    for link in scenario.trade_links:
        i, j = link.pair
        tij = all_decisions[i].trades.get(j, np.zeros(H))
        tji = all_decisions[j].trades.get(i, np.zeros(H))
        recip = max(recip, float(np.max(np.abs(tij + tji), initial=0.0)))

    sigma = aggregate_import(all_decisions, H)
    total = sigma + scenario.passive_load
    agg = _box_violation(total, scenario.pricing.agg_min, scenario.pricing.agg_max)

    bus_res = 0.0
    for bus in scenario.buses:
        y = bus.id
        lhs = np.zeros(H)
        for c in scenario.passive_on_bus[y]:
            lhs = lhs + c.demand
        for i in scenario.prosumers_on_bus[y]:
            lhs = lhs + power_injection(i, all_decisions[i], scenario)
        lhs = lhs - grid.p_tg[y]
        rhs = np.zeros(H)
        for z in scenario.bus_neighbors[y]:
            rhs = rhs + grid.p_flow[(y, z)]
        bus_res = max(bus_res, float(np.max(np.abs(lhs - rhs), initial=0.0)))

    sigma_tg = np.zeros(H)
    for bus in scenario.buses:
        sigma_tg = sigma_tg + grid.p_tg[bus.id]
    exch = float(np.max(np.abs(total - sigma_tg), initial=0.0))

    return CouplingResiduals(reciprocity=recip, aggregate_bounds=agg,
                             bus_balance=bus_res, grid_exchange=exch)
