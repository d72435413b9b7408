import numpy as np
import pytest

from p2pmarket import gridproj, model, updates
from p2pmarket.updates import (Broadcast, DnoAgent, ProsumerAgent,
                               assemble_prosumer_shift, default_step_sizes,
                               dno_shift, step_size_bounds)

from conftest import (make_four_bus_scenario, make_single_prosumer_scenario,
                      make_two_bus_scenario)


def zero_broadcast(scenario):
    H = scenario.H
    return Broadcast(sigma_mg=np.zeros(H), lam_mg=np.zeros(2 * H),
                     mu_tg=np.zeros(H),
                     mu_pb={b.id: np.zeros(H) for b in scenario.buses})


def make_agent(scenario, i=1, mode="gne", alpha=None):
    sizes = default_step_sizes(scenario)
    pro = scenario.prosumer_by_id[i]
    return ProsumerAgent(pro, scenario, alpha=alpha or sizes.alpha[i],
                         beta_tr={j: sizes.beta_tr[(min(i, j), max(i, j))]
                                  for j in pro.neighbors}, mode=mode)


# -- step sizes ---------------------------------------------------------


def test_step_size_formulas(two_bus):
    b = step_size_bounds(two_bus)
    d_max = 0.02
    assert b["alpha"][1] == pytest.approx(1.0 / (3 + 2 * d_max))
    assert b["gamma_mg"] == pytest.approx(0.5)
    assert b["beta_tg"] == pytest.approx(1.0 / (2 + 2))
    # bus 2 hosts one prosumer and touches one line
    assert b["beta_pb"][2] == pytest.approx(1.0 / (1 + 2 * 1 + 1))


def test_step_size_bus_degree_formula():
    # a bus with two prosumers and three adjacent buses: bound 1/8
    sc = make_four_bus_scenario()
    extra = model.Prosumer(id=4, bus_id=2, demand=np.zeros(sc.H))
    sc2 = model.Scenario(time=sc.time, prosumers=sc.prosumers + (extra,),
                         passive_consumers=sc.passive_consumers,
                         trade_links=sc.trade_links, buses=sc.buses,
                         lines=sc.lines, pricing=sc.pricing)
    b = step_size_bounds(sc2)
    assert b["beta_pb"][2] == pytest.approx(1.0 / 8.0)
    sizes = default_step_sizes(sc2, safety=0.9)
    assert sizes.beta_pb[2] == pytest.approx(0.9 / 8.0)


def test_default_step_sizes_safety(two_bus):
    sizes = default_step_sizes(two_bus, safety=0.9)
    assert sizes.alpha[1] == pytest.approx(0.9 / (3 + 2 * 0.02))
    assert sizes.beta_tr[(1, 2)] == pytest.approx(0.45)
    assert sizes.alpha_dno == pytest.approx(1.8)
    sizes.validate(two_bus)


def test_step_sizes_symmetric_by_construction(two_bus):
    sizes = default_step_sizes(two_bus)
    # one entry per unordered pair: both directions read the same value
    assert set(sizes.beta_tr) == {(1, 2)}


def test_step_size_validation_rejects_violations(two_bus):
    sizes = default_step_sizes(two_bus)
    bad = updates.StepSizes(alpha={i: 2.0 for i in sizes.alpha},
                            beta_tr=sizes.beta_tr, alpha_dno=sizes.alpha_dno,
                            gamma_mg=sizes.gamma_mg, beta_tg=sizes.beta_tg,
                            beta_pb=sizes.beta_pb)
    with pytest.raises(model.ModelError):
        bad.validate(two_bus)
    with pytest.raises(model.ModelError):
        default_step_sizes(two_bus, safety=1.5)


# -- prosumer dual update ------------------------------------------------


def test_dual_update_reciprocal_trades_no_move(two_bus):
    agent = make_agent(two_bus)
    agent.state.u[agent.layout.slices[("t", 2)]] = [1.5, -0.5]
    agent.dual_update({2: np.array([-1.5, 0.5])})  # perfectly mirrored
    np.testing.assert_allclose(agent.state.mu_tr[2], 0.0)


def test_dual_update_reflected_residual(two_bus):
    agent = make_agent(two_bus)
    agent.state.beta_tr[2] = 0.4
    agent.state.u[agent.layout.slices[("t", 2)]] = [1.0, 1.0]
    agent.dual_update({2: np.zeros(2)})  # zeta = 1, zeta_prev = 0
    np.testing.assert_allclose(agent.state.mu_tr[2], 0.8)
    np.testing.assert_allclose(agent.state.zeta_tr_prev[2], 1.0)


def test_dual_update_missing_message(two_bus):
    agent = make_agent(two_bus)
    with pytest.raises(model.ModelError, match="missing trade message"):
        agent.dual_update({})


def test_dual_symmetry_between_partners(two_bus):
    a1, a2 = make_agent(two_bus, 1), make_agent(two_bus, 2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        t12 = rng.normal(size=2)
        t21 = rng.normal(size=2)
        a1.state.u[a1.layout.slices[("t", 2)]] = t12
        a2.state.u[a2.layout.slices[("t", 1)]] = t21
        a1.dual_update({2: t21})
        a2.dual_update({1: t12})
        np.testing.assert_array_equal(a1.state.mu_tr[2], a2.state.mu_tr[1])


# -- shift assembly -------------------------------------------------------


def test_shift_identity_with_zero_duals(two_bus):
    agent = make_agent(two_bus)
    agent.state.u = np.arange(agent.layout.n, dtype=float)
    psi = assemble_prosumer_shift(agent.layout, agent.state,
                                  zero_broadcast(two_bus), bus_id=1)
    np.testing.assert_array_equal(psi, agent.state.u)


def test_shift_bus_balance_signs(two_bus):
    agent = make_agent(two_bus, alpha=0.1)
    bc = zero_broadcast(two_bus)
    bc.mu_pb[1][:] = 1.0
    psi = assemble_prosumer_shift(agent.layout, agent.state, bc, bus_id=1)
    lay = agent.layout
    np.testing.assert_allclose(psi[lay.slices["p_di"]], 0.1)
    np.testing.assert_allclose(psi[lay.slices["p_ch"]], -0.1)
    np.testing.assert_allclose(psi[lay.slices["p_ds"]], 0.1)
    np.testing.assert_allclose(psi[lay.slices["p_mg"]], 0.0)
    np.testing.assert_allclose(psi[lay.slices[("t", 2)]], 0.0)


def test_shift_lower_bound_multiplier_sign(two_bus):
    agent = make_agent(two_bus, alpha=0.1)
    bc = zero_broadcast(two_bus)
    bc.lam_mg[two_bus.H:] = 1.0  # lower aggregate bound multiplier
    psi = assemble_prosumer_shift(agent.layout, agent.state, bc, bus_id=1)
    np.testing.assert_allclose(psi[agent.layout.slices["p_mg"]], 0.1)
    np.testing.assert_allclose(psi[agent.layout.slices["p_di"]], 0.0)


# -- prosumer primal update ----------------------------------------------


def test_degenerate_prosumer_stays_zero():
    sc = make_single_prosumer_scenario(H=2, demand=0.0, passive=3.0)
    agent = make_agent(sc)
    bc = zero_broadcast(sc)
    for _ in range(3):
        u = agent.primal_update(bc)
    np.testing.assert_allclose(u, 0.0, atol=1e-7)


def test_grid_only_prosumer_forced_import():
    sc = make_single_prosumer_scenario(H=2, demand=1.0, passive=3.0)
    agent = make_agent(sc)
    bc = zero_broadcast(sc)
    bc.mu_pb[1][:] = 0.7  # arbitrary duals cannot move a forced balance
    bc.mu_tg[:] = -0.3
    u = agent.primal_update(bc)
    np.testing.assert_allclose(u[agent.layout.slices["p_mg"]], 1.0, atol=1e-7)
    res = model.local_residuals(1, agent.decision, sc)
    assert res.max() <= 1e-7


def test_primal_update_matches_grid_enumeration():
    # two prosumers at H=1; free dims of prosumer 1 are (p_di, trade)
    sc = make_two_bus_scenario(H=1, with_storage=False)
    agent = make_agent(sc, 1, alpha=0.3)
    st = agent.state
    st.u[:] = 0.0
    st.mu_tr[2][:] = 0.05
    bc = Broadcast(sigma_mg=np.array([2.0]), lam_mg=np.array([0.01, 0.0]),
                   mu_tg=np.array([0.02]), mu_pb={1: np.array([0.03]),
                                                  2: np.array([0.0])})
    u = agent.primal_update(bc)

    pro = sc.prosumer_by_id[1]
    demand = pro.demand[0]
    d = sc.pricing.price_coeff[0]
    b = sc.passive_load[0]
    link = sc.link(1, 2)
    psi = assemble_prosumer_shift(agent.layout, updates.ProsumerState(
        u=np.zeros(4 + 1), mu_tr={2: np.array([0.05])},
        zeta_tr_prev={2: np.zeros(1)}, alpha=0.3, beta_tr={2: 0.45}), bc, 1)

    g = np.arange(0.0, 50.0 + 1e-9, 0.01)
    t = np.arange(-30.0, 30.0 + 1e-9, 0.01)
    G, T = np.meshgrid(g, t, indexing="ij")
    M = demand - G - T  # balance pins the import
    sigma_other = 2.0 - 0.0
    quad = sc.prosumer_by_id[1].dispatchable.quad_coeff[0]
    lin = sc.prosumer_by_id[1].dispatchable.lin_coeff[0]
    J = (quad * G**2 + lin * G + link.trade_cost * T
         + sc.pricing.tariff * np.abs(T) + d * (M + sigma_other + b) * M)
    lay = agent.layout
    prox = ((G - psi[lay.slices["p_di"]][0]) ** 2
            + (M - psi[lay.slices["p_mg"]][0]) ** 2
            + (T - psi[lay.slices[("t", 2)]][0]) ** 2
            + (0.0 - psi[lay.slices["p_ch"]][0]) ** 2
            + (0.0 - psi[lay.slices["p_ds"]][0]) ** 2) / (2 * 0.3)
    k = np.unravel_index(np.argmin(J + prox), J.shape)
    assert u[lay.slices["p_di"]][0] == pytest.approx(G[k], abs=0.02)
    assert u[lay.slices[("t", 2)]][0] == pytest.approx(T[k], abs=0.02)
    assert u[lay.slices["p_mg"]][0] == pytest.approx(M[k], abs=0.02)


def test_primal_update_stays_local_feasible(four_bus):
    sizes = default_step_sizes(four_bus)
    rng = np.random.default_rng(1)
    for i in (1, 2, 3):
        agent = make_agent(four_bus, i)
        bc = Broadcast(sigma_mg=rng.normal(size=3),
                       lam_mg=np.abs(rng.normal(size=6)),
                       mu_tg=rng.normal(size=3),
                       mu_pb={b.id: rng.normal(size=3) for b in four_bus.buses})
        agent.primal_update(bc)
        res = model.local_residuals(i, agent.decision, four_bus)
        assert res.max() <= 1e-6


def test_wardrop_mode_freezes_price(two_bus):
    # with the aggregate frozen, a bigger sigma means a dearer price and a
    # cheaper alternative wins; the gne update internalizes its own impact
    sc = make_two_bus_scenario(H=1, with_storage=False)
    a_gne = make_agent(sc, 1, mode="gne")
    a_war = make_agent(sc, 1, mode="wardrop")
    bc = zero_broadcast(sc)
    u_g = a_gne.primal_update(bc).copy()
    u_w = a_war.primal_update(bc).copy()
    # wardrop sees price d*(0+b), gne adds its own import: gne imports less
    assert u_w[a_war.layout.slices["p_mg"]][0] >= u_g[a_gne.layout.slices["p_mg"]][0] - 1e-9


# -- network operator updates ---------------------------------------------


def test_dno_shift_alignment(four_bus):
    sets = gridproj.GridSets(four_bus)
    H = four_bus.H
    mu_tg = np.full(H, 0.2)
    mu_pb = {b.id: np.zeros(H) for b in four_bus.buses}
    mu_pb[2][:] = 1.0
    shift = dno_shift(sets, mu_tg, mu_pb).reshape(sets.n_comp, H)
    for k, c in enumerate(sets.components):
        if c[0] == "ptg":
            expected = 0.2 + (1.0 if c[1] == 2 else 0.0)
            np.testing.assert_allclose(shift[k], expected)
        elif c[0] == "pflow":
            np.testing.assert_allclose(shift[k], 1.0 if c[1] == 2 else 0.0)
        else:
            np.testing.assert_allclose(shift[k], 0.0)


def test_dno_primal_fixed_point_with_zero_duals(four_bus):
    sizes = default_step_sizes(four_bus)
    dno = DnoAgent(four_bus, sizes)
    u0 = dno.state.u.copy()  # feasible by construction
    u1 = dno.primal_update()
    np.testing.assert_allclose(u1, u0, atol=1e-7)


def test_dno_dual_update_formulas(four_bus):
    sizes = default_step_sizes(four_bus)
    dno = DnoAgent(four_bus, sizes)
    H = four_bus.H
    zero_inj = {i: np.zeros(H) for i in (1, 2, 3)}

    # strictly interior aggregate, stationary: multipliers stay zero
    b = four_bus.passive_load
    sigma_mid = 0.5 * (four_bus.pricing.agg_min + four_bus.pricing.agg_max) - b
    dno.state.sigma_mg = sigma_mid.copy()
    dno.dual_update(zero_inj, sigma_mid)
    np.testing.assert_allclose(dno.state.lam_mg, 0.0)

    # pinned one above the upper bound: the upper block grows by gamma
    dno2 = DnoAgent(four_bus, sizes)
    sigma_hi = four_bus.pricing.agg_max - b + 1.0
    dno2.state.sigma_mg = sigma_hi.copy()
    dno2.dual_update(zero_inj, sigma_hi)
    np.testing.assert_allclose(dno2.state.lam_mg[:H], sizes.gamma_mg * 1.0)
    np.testing.assert_allclose(dno2.state.lam_mg[H:], 0.0)


def test_dno_balanced_bus_keeps_mu(four_bus):
    sizes = default_step_sizes(four_bus)
    dno = DnoAgent(four_bus, sizes)
    H = four_bus.H
    # injections that exactly balance each bus given the current grid state
    inj = {}
    U = dno.state.u.reshape(dno.sets.n_comp, H)
    for i in (1, 2, 3):
        y = four_bus.prosumer_by_id[i].bus_id
        val = U[dno.sets.index[("ptg", y)]].copy()
        for z in four_bus.bus_neighbors[y]:
            val = val + U[dno.sets.index[("pflow", y, z)]]
        for c in four_bus.passive_on_bus[y]:
            val = val - c.demand
        inj[i] = val
    mu_before = {y: v.copy() for y, v in dno.state.mu_pb.items()}
    dno.state.zeta_pb = dno._bus_residuals(inj)  # stationary residuals
    dno.dual_update(inj, dno.state.sigma_mg)
    for i in (1, 2, 3):
        y = four_bus.prosumer_by_id[i].bus_id
        np.testing.assert_allclose(dno.state.mu_pb[y], mu_before[y], atol=1e-12)


def test_lam_nonnegative_invariant(four_bus):
    sizes = default_step_sizes(four_bus)
    dno = DnoAgent(four_bus, sizes)
    rng = np.random.default_rng(3)
    for _ in range(20):
        sigma = rng.normal(scale=50.0, size=four_bus.H)
        inj = {i: rng.normal(size=four_bus.H) for i in (1, 2, 3)}
        dno.dual_update(inj, sigma)
        assert np.all(dno.state.lam_mg >= 0.0)
