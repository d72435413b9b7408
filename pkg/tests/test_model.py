import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2pmarket import model

from conftest import make_two_bus_scenario


def test_dispatch_cost_zero_input():
    unit = model.DispatchableUnit(quad_coeff=0.3, lin_coeff=0.045, p_min=0, p_max=10)
    assert model.eval_dispatch_cost(np.zeros(4), unit, model.TimeGrid(4)) == 0.0


def test_dispatch_cost_linear_default_coefficient():
    # 24 hours at 1 kW with the 0.045 EUR/kWh default: 24 * 0.045
    unit = model.DispatchableUnit(quad_coeff=0.0, lin_coeff=0.045, p_min=0, p_max=10)
    cost = model.eval_dispatch_cost(np.ones(24), unit, model.TimeGrid(24))
    assert cost == pytest.approx(1.08, abs=1e-12)


def test_dispatch_cost_quadratic():
    unit = model.DispatchableUnit(quad_coeff=0.01, lin_coeff=0.0, p_min=0, p_max=10)
    cost = model.eval_dispatch_cost(np.array([2.0, 3.0]), unit, model.TimeGrid(2))
    assert cost == pytest.approx(0.01 * (4 + 9), abs=1e-12)


def test_dispatch_cost_length_mismatch():
    unit = model.DispatchableUnit(quad_coeff=0.0, lin_coeff=1.0, p_min=0, p_max=10)
    with pytest.raises(model.ModelError):
        model.eval_dispatch_cost(np.ones(3), unit, model.TimeGrid(2))


def test_storage_cost_cases():
    unit = model.StorageUnit(cost_coeff=1.0, capacity=5.0, p_ch_max=2, p_ds_max=2)
    assert model.eval_storage_cost(np.zeros(2), np.zeros(2), unit) == 0.0
    got = model.eval_storage_cost(np.array([1.0, 0.0]), np.array([0.0, 2.0]), unit)
    assert got == pytest.approx(5.0)
    free = model.StorageUnit(cost_coeff=0.0, capacity=5.0, p_ch_max=2, p_ds_max=2)
    assert model.eval_storage_cost(np.array([3.0, 1.0]), np.array([2.0, 2.0]), free) == 0.0


def test_trade_cost_cases():
    links = {2: model.TradeLink(pair=(1, 2), trade_cost=0.08, trade_cap=30)}
    assert model.eval_trade_cost({2: np.zeros(2)}, links, tariff=0.01) == 0.0
    # +1 then -1: linear parts cancel, tariff pays on both hours
    got = model.eval_trade_cost({2: np.array([1.0, -1.0])}, links, tariff=0.01)
    assert got == pytest.approx(0.02)
    # constant selling earns money when the tariff is off
    got = model.eval_trade_cost({2: np.array([-1.0, -1.0])}, links, tariff=0.0)
    assert got == pytest.approx(-0.16)
    with pytest.raises(model.ModelError):
        model.eval_trade_cost({3: np.zeros(2)}, links, tariff=0.0)


def test_grid_cost_single_hour():
    sc = make_two_bus_scenario(H=1)
    # d=0.1, sigma=5, b=5, own import 2  ->  0.1 * 10 * 2
    sc = model.Scenario(
        time=sc.time, prosumers=sc.prosumers,
        passive_consumers=(model.PassiveConsumer(bus_id=2, demand=np.array([5.0])),),
        trade_links=sc.trade_links, buses=sc.buses, lines=sc.lines,
        pricing=model.GridPricing(price_coeff=np.array([0.1]), tariff=0.0,
                                  agg_min=0.0001, agg_max=500.0),
    )
    assert model.eval_grid_cost(np.array([2.0]), np.array([5.0]), sc) == pytest.approx(2.0)


def test_grid_cost_reference_price_identity():
    # with d_h = 0.1624 / b_h, sigma = 0 and p_mg = b the cost telescopes
    sc = make_two_bus_scenario(H=4)
    b = sc.passive_load
    d = 0.1624 / b
    sc2 = model.Scenario(
        time=sc.time, prosumers=sc.prosumers, passive_consumers=sc.passive_consumers,
        trade_links=sc.trade_links, buses=sc.buses, lines=sc.lines,
        pricing=model.GridPricing(price_coeff=d, tariff=0.0, agg_min=0.0001,
                                  agg_max=500.0),
    )
    got = model.eval_grid_cost(b, np.zeros(4), sc2)
    assert got == pytest.approx(0.1624 * b.sum(), abs=1e-12)


def test_grid_cost_zero_import(two_bus):
    assert model.eval_grid_cost(np.zeros(2), np.ones(2), two_bus) == 0.0


def test_total_cost_additivity(two_bus):
    H = two_bus.H
    dec1 = model.ProsumerDecision(
        p_di=np.array([1.0, 2.0]), p_ch=np.zeros(H), p_ds=np.zeros(H),
        p_mg=np.array([0.5, 0.5]), trades={2: np.array([1.0, -1.0])})
    dec2 = model.ProsumerDecision.zeros(H, neighbors=[1])
    decs = {1: dec1, 2: dec2}
    total = model.eval_total_cost(1, dec1, decs, two_bus)
    pro = two_bus.prosumer_by_id[1]
    parts = (
        model.eval_dispatch_cost(dec1.p_di, pro.dispatchable, two_bus.time)
        + model.eval_trade_cost(dec1.trades, two_bus.links_of(1), two_bus.pricing.tariff)
        + model.eval_grid_cost(dec1.p_mg, dec1.p_mg, two_bus)
    )
    assert total == pytest.approx(parts, abs=1e-12)


def test_total_cost_zero_profile_and_dno(two_bus):
    decs = {p.id: model.ProsumerDecision.zeros(two_bus.H, p.neighbors)
            for p in two_bus.prosumers}
    assert model.eval_total_cost(1, decs[1], decs, two_bus) == 0.0
    assert model.eval_total_cost(model.DNO_ID, None, decs, two_bus) == 0.0


def test_eval_functions_pure(two_bus):
    dec = model.ProsumerDecision(
        p_di=np.array([1.0, 2.0]), p_ch=np.zeros(2), p_ds=np.zeros(2),
        p_mg=np.array([0.5, 0.5]), trades={2: np.array([1.0, -1.0])})
    decs = {1: dec, 2: model.ProsumerDecision.zeros(2, [1])}
    a = model.eval_total_cost(1, dec, decs, two_bus)
    b = model.eval_total_cost(1, dec, decs, two_bus)
    assert a == b  # bit-for-bit


# -- storage dynamics ------------------------------------------------


def test_soc_constant_when_idle():
    unit = model.StorageUnit(cost_coeff=0, capacity=10, leakage=1.0,
                             p_ch_max=2, p_ds_max=2, soc_init=0.4)
    x = model.soc_trajectory(unit, np.zeros(5), np.zeros(5), model.TimeGrid(5))
    assert np.allclose(x, 0.4)
    assert x.shape == (6,)


def test_soc_single_charge_step():
    unit = model.StorageUnit(cost_coeff=0, capacity=1.0, leakage=1.0,
                             charge_eff=1.0, discharge_eff=1.0,
                             p_ch_max=2, p_ds_max=2, soc_init=0.5)
    x = model.soc_trajectory(unit, np.array([0.1, 0.0]), np.zeros(2),
                             model.TimeGrid(2, 1.0))
    assert x[1] == pytest.approx(0.6)


def test_soc_leakage_decay():
    unit = model.StorageUnit(cost_coeff=0, capacity=1.0, leakage=0.9,
                             soc_min=0.0, soc_max=1.0, p_ch_max=1, p_ds_max=1,
                             soc_init=1.0)
    x = model.soc_trajectory(unit, np.zeros(4), np.zeros(4), model.TimeGrid(4))
    assert np.allclose(x, 0.9 ** np.arange(5))


# -- injections and residuals ----------------------------------------


def test_power_injection(two_bus):
    dec = model.ProsumerDecision.zeros(2, [2])
    np.testing.assert_allclose(model.power_injection(1, dec, two_bus),
                               two_bus.prosumer_by_id[1].demand)
    pro = two_bus.prosumer_by_id[1]
    dec2 = model.ProsumerDecision(p_di=pro.demand, p_ch=np.zeros(2),
                                  p_ds=np.zeros(2), p_mg=np.zeros(2),
                                  trades={2: np.zeros(2)})
    np.testing.assert_allclose(model.power_injection(1, dec2, two_bus), 0.0)


def test_power_injection_arithmetic():
    sc = make_two_bus_scenario(H=1)
    sc_pro = model.Prosumer(id=1, bus_id=1, demand=np.array([1.0]),
                            dispatchable=sc.prosumer_by_id[1].dispatchable,
                            storage=model.StorageUnit(cost_coeff=0, capacity=1,
                                                      p_ch_max=1, p_ds_max=1),
                            neighbors={2})
    sc = model.Scenario(time=sc.time, prosumers=(sc_pro, sc.prosumers[1]),
                        passive_consumers=sc.passive_consumers,
                        trade_links=sc.trade_links, buses=sc.buses,
                        lines=sc.lines, pricing=sc.pricing)
    dec = model.ProsumerDecision(p_di=np.array([0.3]), p_ch=np.array([0.1]),
                                 p_ds=np.array([0.2]), p_mg=np.zeros(1),
                                 trades={2: np.zeros(1)})
    np.testing.assert_allclose(model.power_injection(1, dec, sc), [0.6])


def test_local_residuals_feasible_self_supply(two_bus):
    pro = two_bus.prosumer_by_id[1]
    dec = model.ProsumerDecision(p_di=pro.demand, p_ch=np.zeros(2),
                                 p_ds=np.zeros(2), p_mg=np.zeros(2),
                                 trades={2: np.zeros(2)})
    res = model.local_residuals(1, dec, two_bus)
    assert res.max() == 0.0


def test_local_residuals_balance_gap(two_bus):
    pro = two_bus.prosumer_by_id[1]
    p_mg = pro.demand.copy()
    p_mg[0] -= 1.0  # 1 kW short at the first hour
    dec = model.ProsumerDecision(p_di=np.zeros(2), p_ch=np.zeros(2),
                                 p_ds=np.zeros(2), p_mg=p_mg,
                                 trades={2: np.zeros(2)})
    res = model.local_residuals(1, dec, two_bus)
    assert res.balance == pytest.approx(1.0)


def test_local_residuals_soc_violation(two_bus):
    pro = two_bus.prosumer_by_id[2]
    st = pro.storage
    # drive the battery 0.05 above soc_max with one big charge
    target = st.soc_max + 0.05
    p_ch0 = (target - st.leakage * st.soc_init) * st.capacity / (
        st.charge_eff * two_bus.time.sampling_hours)
    p_ch = np.array([p_ch0, 0.0])
    p_ds = np.zeros(2)
    x = model.soc_trajectory(st, p_ch, p_ds, two_bus.time)
    assert x[1] == pytest.approx(target)
    balance = pro.demand - p_ch * 0  # keep balance satisfied via p_mg
    dec = model.ProsumerDecision(p_di=np.zeros(2), p_ch=p_ch, p_ds=p_ds,
                                 p_mg=pro.demand + p_ch, trades={1: np.zeros(2)})
    res = model.local_residuals(2, dec, two_bus)
    assert res.soc == pytest.approx(0.05, abs=1e-9)
    assert res.balance == pytest.approx(0.0, abs=1e-12)
    del balance


def test_coupling_residuals_zero_profile():
    sc = make_two_bus_scenario(H=2, demand_scale=0.0)
    # zero demand everywhere, no passive load
    sc = model.Scenario(time=sc.time, prosumers=sc.prosumers,
                        passive_consumers=(), trade_links=sc.trade_links,
                        buses=sc.buses, lines=sc.lines,
                        pricing=model.GridPricing(price_coeff=np.full(2, 0.02),
                                                  tariff=0.01, agg_min=0.0,
                                                  agg_max=500.0))
    decs = {p.id: model.ProsumerDecision.zeros(2, p.neighbors) for p in sc.prosumers}
    grid = model.GridDecision.zeros(sc)
    res = model.coupling_residuals(decs, grid, sc)
    assert res.max() == 0.0


def test_coupling_residuals_reciprocity_gap(two_bus):
    decs = {p.id: model.ProsumerDecision.zeros(2, p.neighbors)
            for p in two_bus.prosumers}
    decs[1].trades[2][:] = [1.0, 0.0]
    decs[2].trades[1][:] = [-0.5, 0.0]
    grid = model.GridDecision.zeros(two_bus)
    res = model.coupling_residuals(decs, grid, two_bus)
    assert res.reciprocity == pytest.approx(0.5)


# -- invariants / property tests -------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_cost_convexity_in_own_decision(data):
    sc = make_two_bus_scenario(H=2)
    draw = lambda: np.array([data.draw(st.floats(-5, 5)) for _ in range(2)])
    mk = lambda: model.ProsumerDecision(p_di=draw(), p_ch=draw(), p_ds=draw(),
                                        p_mg=draw(), trades={2: draw()})
    ua, ub = mk(), mk()
    other = model.ProsumerDecision.zeros(2, [1])
    lam = data.draw(st.floats(0, 1))

    def blend(a, b):
        return model.ProsumerDecision(
            p_di=lam * a.p_di + (1 - lam) * b.p_di,
            p_ch=lam * a.p_ch + (1 - lam) * b.p_ch,
            p_ds=lam * a.p_ds + (1 - lam) * b.p_ds,
            p_mg=lam * a.p_mg + (1 - lam) * b.p_mg,
            trades={2: lam * a.trades[2] + (1 - lam) * b.trades[2]})

    um = blend(ua, ub)
    J = lambda u: model.eval_total_cost(1, u, {1: u, 2: other}, sc)
    assert J(um) <= lam * J(ua) + (1 - lam) * J(ub) + 1e-9


def test_trade_linear_part_antisymmetry(two_bus):
    # both directions of a reciprocal trade: linear parts cancel exactly
    t = np.array([1.7, -0.3])
    link = two_bus.link(1, 2)
    cost_i = model.eval_trade_cost({2: t}, {2: link}, tariff=0.0)
    cost_j = model.eval_trade_cost({1: -t}, {1: link}, tariff=0.0)
    assert cost_i + cost_j == 0.0


# -- scenario validation ----------------------------------------------


def test_scenario_rejects_missing_reference_pin():
    sc = make_two_bus_scenario()
    buses = (model.Bus(id=1, theta_min=-0.1, theta_max=0.1, grid_connected=True),
             model.Bus(id=2))
    with pytest.raises(model.ModelError, match="reference bus"):
        model.Scenario(time=sc.time, prosumers=sc.prosumers,
                       passive_consumers=sc.passive_consumers,
                       trade_links=sc.trade_links, buses=buses,
                       lines=sc.lines, pricing=sc.pricing)


def test_scenario_rejects_unknown_trade_partner():
    sc = make_two_bus_scenario()
    links = (model.TradeLink(pair=(1, 7), trade_cost=0.08, trade_cap=30),)
    with pytest.raises(model.ModelError):
        model.Scenario(time=sc.time, prosumers=sc.prosumers,
                       passive_consumers=sc.passive_consumers,
                       trade_links=links, buses=sc.buses, lines=sc.lines,
                       pricing=sc.pricing)


def test_scenario_rejects_disconnected_grid():
    sc = make_two_bus_scenario()
    buses = sc.buses + (model.Bus(id=3),)
    with pytest.raises(model.ModelError, match="not connected"):
        model.Scenario(time=sc.time, prosumers=sc.prosumers,
                       passive_consumers=sc.passive_consumers,
                       trade_links=sc.trade_links, buses=buses,
                       lines=sc.lines, pricing=sc.pricing)


def test_storage_validates_soc_init():
    with pytest.raises(model.ModelError):
        model.StorageUnit(cost_coeff=0, capacity=1, soc_min=0.2, soc_max=0.8,
                          soc_init=0.9)


def test_passive_load_derived(two_bus):
    np.testing.assert_allclose(two_bus.passive_load, np.full(2, 5.0))
