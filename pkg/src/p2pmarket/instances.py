"""Instance generators: the bundled 37-bus market plus random markets.

Demand and solar shapes are synthetic daily archetypes (household,
multiple households, restaurant, office, hospital, school); they stand
in for non-redistributable metering data and are documented as such.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from p2pmarket import model
from p2pmarket.model import (Bus, DispatchableUnit, GridPricing, Line,
                             ModelError, PassiveConsumer, Prosumer, Scenario,
                             StorageUnit, TimeGrid, TradeLink)

__all__ = ["ARCHETYPES", "demand_profile", "solar_profile",
           "random_trading_graph", "builtin_ieee37", "random_market",
           "line_safety_instance", "load_grid_data"]

#: peak-normalized daily shapes, sampled at the scenario's resolution
ARCHETYPES = ("household", "multi_household", "restaurant", "office",
              "hospital", "school")


def _hours(time: TimeGrid) -> np.ndarray:
    return (np.arange(time.horizon_steps) * time.sampling_hours) % 24.0


def _bump(hours, center, width):
    return np.exp(-0.5 * ((hours - center) / width) ** 2)


def demand_profile(archetype: str, time: TimeGrid) -> np.ndarray:
    """Daily demand shape with unit peak."""
    h = _hours(time)
    if archetype == "household":
        shape = 0.25 + 0.35 * _bump(h, 7.5, 1.5) + 1.0 * _bump(h, 19.5, 2.2)
    elif archetype == "multi_household":
        shape = 0.35 + 0.3 * _bump(h, 8.0, 2.5) + 0.9 * _bump(h, 19.0, 3.0)
    elif archetype == "restaurant":
        shape = 0.2 + 0.8 * _bump(h, 12.5, 1.2) + 1.0 * _bump(h, 20.0, 1.8)
    elif archetype == "office":
        shape = 0.15 + 1.0 / (1 + np.exp(-(h - 8.0) * 2)) / (1 + np.exp((h - 18.0) * 2)) * 1.0
        shape = 0.15 + 1.0 * (1 / (1 + np.exp(-(h - 8.0) * 2))) * (1 / (1 + np.exp((h - 18.0) * 2)))
    elif archetype == "hospital":
        shape = 0.6 + 0.4 * _bump(h, 13.0, 4.0)
    elif archetype == "school":
        shape = 0.1 + 1.0 * _bump(h, 11.5, 3.0) * (h < 17.0)
    else:
        raise ModelError(f"unknown demand archetype {archetype!r}")
    return shape / shape.max()


def solar_profile(time: TimeGrid) -> np.ndarray:
    """Half-sine daylight generation shape with unit peak."""
    h = _hours(time)
    out = np.sin((h - 6.0) / 12.0 * np.pi)
    return np.clip(out, 0.0, None)


# ---------------------------------------------------------------------
# trading graphs
# ---------------------------------------------------------------------

def random_trading_graph(n: int, connectivity: float, seed) -> list:
    """Connected undirected edge set with round(connectivity * n(n-1)/2)
    edges: a random spanning tree plus uniform extra edges."""
    if n < 2:
        raise ModelError("a trading graph needs at least 2 prosumers")
    if not (0 < connectivity <= 1):
        raise ModelError("connectivity must lie in (0, 1]")
    total = n * (n - 1) // 2
    n_edges = int(round(connectivity * total))
    if n_edges < n - 1:
        raise ModelError(
            f"connectivity {connectivity} gives {n_edges} edges; "
            f"connecting {n} prosumers needs >= {n - 1} "
            f"(minimum feasible connectivity {(n - 1) / total:.4f})")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    nodes = list(range(1, n + 1))
    perm = rng.permutation(nodes)
    edges = set()
    for k in range(1, n):
        a = int(perm[k])
        b = int(perm[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    rest = [(a, b) for ai, a in enumerate(nodes) for b in nodes[ai + 1:]
            if (a, b) not in edges]
    extra = n_edges - len(edges)
    if extra > 0:
        pick = rng.choice(len(rest), size=extra, replace=False)
        for k in sorted(pick):
            edges.add(rest[k])
    return sorted(edges)


def _spanning_tree(n: int, rng) -> list:
    perm = rng.permutation(list(range(1, n + 1)))
    edges = set()
    for k in range(1, n):
        a = int(perm[k])
        b = int(perm[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    return sorted(edges)


# ---------------------------------------------------------------------
# bundled 37-bus market
# ---------------------------------------------------------------------

def load_grid_data() -> dict:
    with resources.files("p2pmarket.data").joinpath("ieee37_grid.json").open() as fh:
        return json.load(fh)


def _grid_from_data(data: dict, capacity_scale: float = 1.0):
    buses = [Bus(id=1, theta_min=0.0, theta_max=0.0, grid_connected=True)]
    ids = sorted({s["from"] for s in data["segments"]}
                 | {s["to"] for s in data["segments"]})
    for y in ids:
        if y != 1:
            buses.append(Bus(id=y))
    lines = []
    scale = data["coupling_scale"]
    for seg in data["segments"]:
        cfg = data["configs"][seg["config"]]
        miles = seg["length_ft"] / 5280.0
        R = cfg["r_ohm_per_mile"] * miles
        X = cfg["x_ohm_per_mile"] * miles
        z2 = R * R + X * X
        lines.append(Line(pair=(seg["from"], seg["to"]),
                          susceptance=X / z2 * scale,
                          conductance=R / z2 * scale,
                          capacity=cfg["capacity_kva"] * capacity_scale))
    return tuple(buses), tuple(lines)


def _draw_demand(rng, time: TimeGrid, archetype=None, peak=None,
                 solar_peak=0.0) -> np.ndarray:
    archetype = archetype or ARCHETYPES[rng.integers(0, len(ARCHETYPES))]
    if peak is None:
        peak = {"household": rng.uniform(2, 6),
                "multi_household": rng.uniform(8, 20),
                "restaurant": rng.uniform(6, 15),
                "office": rng.uniform(10, 25),
                "hospital": rng.uniform(15, 30),
                "school": rng.uniform(8, 18)}[archetype]
    demand = peak * demand_profile(archetype, time)
    if solar_peak > 0:
        demand = demand - solar_peak * solar_profile(time)
    return demand


def builtin_ieee37(n_prosumers: int = 12, n_passive: int = 15, seed: int = 0,
                   horizon: int = 24, connectivity: float = 0.35,
                   trade_cap: float = 30.0, capacity_scale: float = 1.0,
                   storage_fraction: float = 0.5,
                   dispatch_fraction: float = 0.5) -> Scenario:
    """The bundled 37-bus market with randomly placed participants.

    Default cost parameters: zero quadratic device costs, 0.045 EUR/kWh
    dispatchable energy, 0.08 EUR/kWh trades, 0.01 EUR/kWh tariff, and a
    grid price coefficient 0.1624 / b_h.
    """
    if n_prosumers < 1:
        raise ModelError("need at least one prosumer")
    rng = np.random.default_rng(seed)
    time = TimeGrid(horizon, 24.0 / horizon if horizon < 24 else 1.0)
    data = load_grid_data()
    buses, lines = _grid_from_data(data, capacity_scale)
    host_buses = [b.id for b in buses if b.id != 1]

    passive = []
    for _ in range(n_passive):
        bus = int(rng.choice(host_buses))
        demand = _draw_demand(rng, time)
        passive.append(PassiveConsumer(bus_id=bus, demand=np.maximum(demand, 0.2)))

    prosumers = []
    if n_prosumers >= 2:
        edges = random_trading_graph(n_prosumers, connectivity, rng)
    else:
        edges = []
    partners = {i: set() for i in range(1, n_prosumers + 1)}
    for a, b in edges:
        partners[a].add(b)
        partners[b].add(a)
    n_disp = max(1, int(round(dispatch_fraction * n_prosumers)))
    n_stor = max(1, int(round(storage_fraction * n_prosumers)))
    disp_ids = set(rng.choice(np.arange(1, n_prosumers + 1), size=n_disp,
                              replace=False).tolist())
    stor_ids = set(rng.choice(np.arange(1, n_prosumers + 1), size=n_stor,
                              replace=False).tolist())
    for i in range(1, n_prosumers + 1):
        bus = int(rng.choice(host_buses))
        solar_peak = rng.uniform(2, 8) if rng.random() < 0.5 else 0.0
        demand = _draw_demand(rng, time, solar_peak=solar_peak)
        dispatchable = None
        if i in disp_ids:
            dispatchable = DispatchableUnit(quad_coeff=0.0, lin_coeff=0.045,
                                            p_min=0.0,
                                            p_max=float(rng.uniform(8, 30)))
        storage = None
        if i in stor_ids:
            storage = StorageUnit(cost_coeff=0.0, capacity=13.5, leakage=0.995,
                                  charge_eff=0.95, discharge_eff=0.95,
                                  soc_min=0.1, soc_max=0.9, p_ch_max=5.0,
                                  p_ds_max=5.0, soc_init=0.5)
        prosumers.append(Prosumer(id=i, bus_id=bus, demand=demand,
                                  dispatchable=dispatchable, storage=storage,
                                  neighbors=frozenset(partners[i])))

    links = tuple(TradeLink(pair=e, trade_cost=0.08, trade_cap=trade_cap)
                  for e in edges)
    b_load = np.zeros(horizon)
    for c in passive:
        b_load = b_load + c.demand
    total_pos = b_load + sum(np.maximum(p.demand, 0.0) for p in prosumers)
    pricing = GridPricing(price_coeff=0.1624 / b_load, tariff=0.01,
                          agg_min=0.1 * float(b_load.min()),
                          agg_max=4.0 * float(total_pos.max()))
    return Scenario(time=time, prosumers=tuple(prosumers),
                    passive_consumers=tuple(passive), trade_links=links,
                    buses=buses, lines=lines, pricing=pricing)


# ---------------------------------------------------------------------
# random small markets (certification instances)
# ---------------------------------------------------------------------

def _small_grid(n_buses: int, rng, capacity: float = 500.0):
    buses = [Bus(id=1, theta_min=0.0, theta_max=0.0, grid_connected=True)]
    for y in range(2, n_buses + 1):
        buses.append(Bus(id=y))
    lines = []
    for y in range(2, n_buses + 1):
        parent = int(rng.integers(1, y))
        lines.append(Line(pair=(parent, y),
                          susceptance=float(rng.uniform(80, 160)),
                          conductance=float(rng.uniform(20, 45)),
                          capacity=capacity))
    return tuple(buses), tuple(lines)


def random_market(n_prosumers: int, horizon: int = 4, n_buses: int = 4,
                  seed: int = 0, trading: str = "tree",
                  strictly_convex: bool = True, trade_cap: float = 30.0,
                  with_storage: bool = True, with_dispatch: bool = True,
                  line_capacity: float = 500.0) -> Scenario:
    """Random desk-scale market on a small grid.

    ``trading`` is "tree" (bilateral trades then pinned by the balances,
    so the equilibrium's prosumer block is unique) or a connectivity
    level in (0, 1] passed to the random graph generator.
    """
    rng = np.random.default_rng(seed)
    time = TimeGrid(horizon, 1.0)
    buses, lines = _small_grid(n_buses, rng, capacity=line_capacity)
    host_buses = [b.id for b in buses]

    if n_prosumers >= 2:
        if trading == "tree":
            edges = _spanning_tree(n_prosumers, rng)
        else:
            edges = random_trading_graph(n_prosumers, float(trading), rng)
    else:
        edges = []
    partners = {i: set() for i in range(1, n_prosumers + 1)}
    for a, b in edges:
        partners[a].add(b)
        partners[b].add(a)

    stor_ids = set()
    disp_ids = set()
    if with_storage:
        stor_ids = {int(x) for x in
                    rng.choice(np.arange(1, n_prosumers + 1),
                               size=max(1, n_prosumers // 3), replace=False)}
    if with_dispatch:
        disp_ids = {int(x) for x in
                    rng.choice(np.arange(1, n_prosumers + 1),
                               size=max(1, n_prosumers // 2), replace=False)}

    prosumers = []
    for i in range(1, n_prosumers + 1):
        archetype = ARCHETYPES[int(rng.integers(0, len(ARCHETYPES)))]
        peak = rng.uniform(1.5, 5.0)
        demand = peak * demand_profile(archetype, time)
        dispatchable = None
        if i in disp_ids:
            quad = rng.uniform(0.005, 0.02) if strictly_convex else 0.0
            dispatchable = DispatchableUnit(quad_coeff=quad, lin_coeff=0.045,
                                            p_min=0.0,
                                            p_max=float(rng.uniform(4, 10)))
        storage = None
        if i in stor_ids:
            quad = rng.uniform(0.002, 0.01) if strictly_convex else 0.0
            storage = StorageUnit(cost_coeff=quad, capacity=8.0, leakage=0.99,
                                  charge_eff=0.95, discharge_eff=0.95,
                                  soc_min=0.1, soc_max=0.9, p_ch_max=3.0,
                                  p_ds_max=3.0, soc_init=0.5)
        prosumers.append(Prosumer(id=i, bus_id=int(rng.choice(host_buses)),
                                  demand=demand, dispatchable=dispatchable,
                                  storage=storage,
                                  neighbors=frozenset(partners[i])))

    passive = []
    for _ in range(max(2, n_prosumers // 2)):
        archetype = ARCHETYPES[int(rng.integers(0, len(ARCHETYPES)))]
        peak = rng.uniform(2.0, 6.0)
        passive.append(PassiveConsumer(
            bus_id=int(rng.choice(host_buses)),
            demand=np.maximum(peak * demand_profile(archetype, time), 0.5)))

    links = tuple(TradeLink(pair=e, trade_cost=0.08, trade_cap=trade_cap)
                  for e in edges)
    b_load = np.zeros(horizon)
    for c in passive:
        b_load = b_load + c.demand
    total_pos = b_load + sum(np.maximum(p.demand, 0.0) for p in prosumers)
    pricing = GridPricing(price_coeff=0.1624 / b_load, tariff=0.01,
                          agg_min=0.05 * float(b_load.min()),
                          agg_max=4.0 * float(total_pos.max()))
    return Scenario(time=time, prosumers=tuple(prosumers),
                    passive_consumers=tuple(passive), trade_links=links,
                    buses=buses, lines=lines, pricing=pricing)


def line_safety_instance(seed: int = 0, horizon: int = 4,
                         constrained: bool = True) -> Scenario:
    """Synthetic overload case: one heavy consumer sits behind a thin
    feeder line but owns a pricey local generator. With the capacity
    limits active the feeder saturates at 100% and local generation
    covers the rest; without them the cheap grid import overloads it.

    Labeled synthetic: the load levels of the corresponding study are
    not public.
    """
    rng = np.random.default_rng(seed)
    time = TimeGrid(horizon, 1.0)
    cap_thin = 8.0 if constrained else 1e6
    buses = (Bus(id=1, theta_min=0.0, theta_max=0.0, grid_connected=True),
             Bus(id=2), Bus(id=3))
    lines = (Line(pair=(1, 2), susceptance=130.0, conductance=35.0,
                  capacity=500.0),
             Line(pair=(2, 3), susceptance=110.0, conductance=30.0,
                  capacity=cap_thin))
    heavy = Prosumer(
        id=1, bus_id=3, demand=np.full(horizon, 20.0),
        dispatchable=DispatchableUnit(quad_coeff=0.002, lin_coeff=0.30,
                                      p_min=0.0, p_max=25.0),
        neighbors=frozenset({2}))
    helper = Prosumer(
        id=2, bus_id=2, demand=np.full(horizon, 2.0),
        dispatchable=DispatchableUnit(quad_coeff=0.002, lin_coeff=0.25,
                                      p_min=0.0, p_max=10.0),
        neighbors=frozenset({1}))
    links = (TradeLink(pair=(1, 2), trade_cost=0.02, trade_cap=30.0),)
    passive = (PassiveConsumer(bus_id=2, demand=np.full(horizon, 4.0)),)
    pricing = GridPricing(price_coeff=np.full(horizon, 0.002), tariff=0.005,
                          agg_min=0.01, agg_max=500.0)
    del rng
    return Scenario(time=time, prosumers=(heavy, helper),
                    passive_consumers=passive, trade_links=links, buses=buses,
                    lines=lines, pricing=pricing)
