import numpy as np
import pytest

from p2pmarket import model


def make_two_bus_scenario(H=2, with_storage=True, with_dispatch=True,
                          trade_cap=30.0, demand_scale=1.0):
    """Tiny 2-bus, 2-prosumer instance used across the unit tests."""
    time = model.TimeGrid(H, 1.0)
    dispatch = model.DispatchableUnit(quad_coeff=0.01, lin_coeff=0.045,
                                      p_min=0.0, p_max=50.0) if with_dispatch else None
    storage = model.StorageUnit(cost_coeff=0.02, capacity=10.0, leakage=0.98,
                                charge_eff=0.95, discharge_eff=0.95,
                                soc_min=0.1, soc_max=0.9, p_ch_max=5.0,
                                p_ds_max=5.0, soc_init=0.5) if with_storage else None
    p1 = model.Prosumer(id=1, bus_id=1, demand=demand_scale * np.linspace(1.0, 2.0, H),
                        dispatchable=dispatch, storage=None, neighbors={2})
    p2 = model.Prosumer(id=2, bus_id=2, demand=demand_scale * np.linspace(2.0, 1.0, H),
                        dispatchable=None, storage=storage, neighbors={1})
    passive = (model.PassiveConsumer(bus_id=2, demand=np.full(H, 5.0)),)
    links = (model.TradeLink(pair=(1, 2), trade_cost=0.08, trade_cap=trade_cap),)
    buses = (
        model.Bus(id=1, theta_min=0.0, theta_max=0.0, grid_connected=True),
        model.Bus(id=2),
    )
    lines = (model.Line(pair=(1, 2), susceptance=80.0, conductance=25.0,
                        capacity=200.0),)
    pricing = model.GridPricing(price_coeff=np.full(H, 0.02), tariff=0.01,
                                agg_min=0.0001, agg_max=500.0)
    return model.Scenario(time=time, prosumers=(p1, p2), passive_consumers=passive,
                          trade_links=links, buses=buses, lines=lines, pricing=pricing)


def make_four_bus_scenario(H=3, capacity=10.0, with_cycle=True, v_bounds=(0.95, 1.05)):
    """4-bus grid with a cycle; three prosumers, one trade link."""
    time = model.TimeGrid(H, 1.0)
    v_lo, v_hi = v_bounds
    mk_demand = lambda lo, hi: np.linspace(lo, hi, H)
    p1 = model.Prosumer(id=1, bus_id=2, demand=mk_demand(1.0, 2.0),
                        dispatchable=model.DispatchableUnit(0.02, 0.045, 0.0, 20.0),
                        neighbors={2})
    p2 = model.Prosumer(id=2, bus_id=3, demand=mk_demand(2.0, 1.0),
                        storage=model.StorageUnit(cost_coeff=0.01, capacity=8.0,
                                                  leakage=0.99, charge_eff=0.95,
                                                  discharge_eff=0.95, soc_min=0.1,
                                                  soc_max=0.9, p_ch_max=4.0,
                                                  p_ds_max=4.0),
                        neighbors={1})
    p3 = model.Prosumer(id=3, bus_id=4, demand=mk_demand(0.5, 1.5))
    passive = (model.PassiveConsumer(bus_id=3, demand=np.full(H, 4.0)),
               model.PassiveConsumer(bus_id=4, demand=np.full(H, 3.0)))
    links = (model.TradeLink(pair=(1, 2), trade_cost=0.08, trade_cap=30.0),)
    buses = (
        model.Bus(id=1, theta_min=0.0, theta_max=0.0, v_min=v_lo, v_max=v_hi,
                  grid_connected=True),
        model.Bus(id=2, v_min=v_lo, v_max=v_hi),
        model.Bus(id=3, v_min=v_lo, v_max=v_hi),
        model.Bus(id=4, v_min=v_lo, v_max=v_hi),
    )
    lines = [
        model.Line(pair=(1, 2), susceptance=120.0, conductance=40.0, capacity=capacity),
        model.Line(pair=(2, 3), susceptance=90.0, conductance=30.0, capacity=capacity),
        model.Line(pair=(2, 4), susceptance=100.0, conductance=25.0, capacity=capacity),
    ]
    if with_cycle:
        lines.append(model.Line(pair=(3, 4), susceptance=80.0, conductance=20.0,
                                capacity=capacity))
    pricing = model.GridPricing(price_coeff=np.full(H, 0.01), tariff=0.01,
                                agg_min=0.001, agg_max=400.0)
    return model.Scenario(time=time, prosumers=(p1, p2, p3),
                          passive_consumers=passive, trade_links=links,
                          buses=buses, lines=tuple(lines), pricing=pricing)


def make_single_prosumer_scenario(H=1, demand=1.0, dispatchable=None,
                                  storage=None, d_price=0.1, passive=5.0):
    """One bus, one prosumer, no trading."""
    time = model.TimeGrid(H, 1.0)
    pro = model.Prosumer(id=1, bus_id=1, demand=np.full(H, float(demand)),
                         dispatchable=dispatchable, storage=storage)
    buses = (model.Bus(id=1, theta_min=0.0, theta_max=0.0, grid_connected=True),)
    passive_consumers = ()
    if passive:
        passive_consumers = (model.PassiveConsumer(bus_id=1, demand=np.full(H, passive)),)
    pricing = model.GridPricing(price_coeff=np.full(H, d_price), tariff=0.01,
                                agg_min=0.0, agg_max=1000.0)
    return model.Scenario(time=time, prosumers=(pro,),
                          passive_consumers=passive_consumers, trade_links=(),
                          buses=buses, lines=(), pricing=pricing)


def make_symmetric_pair_scenario(H=2, d_price=0.02):
    """Two identical prosumers on twin buses, one trade link."""
    time = model.TimeGrid(H, 1.0)
    unit = model.DispatchableUnit(quad_coeff=0.05, lin_coeff=0.02, p_min=0.0,
                                  p_max=10.0)
    demand = np.full(H, 2.0)
    p1 = model.Prosumer(id=1, bus_id=2, demand=demand.copy(), dispatchable=unit,
                        neighbors={2})
    p2 = model.Prosumer(id=2, bus_id=3, demand=demand.copy(), dispatchable=unit,
                        neighbors={1})
    links = (model.TradeLink(pair=(1, 2), trade_cost=0.08, trade_cap=30.0),)
    buses = (model.Bus(id=1, theta_min=0.0, theta_max=0.0, grid_connected=True),
             model.Bus(id=2), model.Bus(id=3))
    lines = (model.Line(pair=(1, 2), susceptance=100.0, conductance=30.0,
                        capacity=100.0),
             model.Line(pair=(1, 3), susceptance=100.0, conductance=30.0,
                        capacity=100.0))
    pricing = model.GridPricing(price_coeff=np.full(H, d_price), tariff=0.01,
                                agg_min=0.0001, agg_max=500.0)
    return model.Scenario(time=time, prosumers=(p1, p2), passive_consumers=(),
                          trade_links=links, buses=buses, lines=lines,
                          pricing=pricing)


def grid_operating_sample(sets, rng):
    """Random operator point near the grid's operating range.

    A flat feasible point (pinned angles, nominal voltage, idle lines)
    plus component-scaled perturbations; flow perturbations exceed the
    line capacities often enough to activate the disks.
    """
    cap = sets.disk_r.max() if sets.disk_r.size else 1.0
    U = np.empty((sets.n_comp, sets.H))
    for k, c in enumerate(sets.components):
        if c[0] == "theta":
            U[k] = rng.uniform(-0.15, 0.15, sets.H)
        elif c[0] == "v":
            U[k] = 1.0 + rng.uniform(-0.07, 0.07, sets.H)
        elif c[0] == "ptg":
            U[k] = rng.uniform(-2 * cap, 2 * cap, sets.H)
        else:
            U[k] = rng.uniform(-2 * cap, 2 * cap, sets.H)
    return U.reshape(-1)


@pytest.fixture
def two_bus():
    return make_two_bus_scenario()


@pytest.fixture
def four_bus():
    return make_four_bus_scenario()
