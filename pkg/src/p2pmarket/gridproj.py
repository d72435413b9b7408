"""Projection machinery for the network operator's feasible set.

The operator's constraints split into two projection-friendly blocks:

* ``S1`` -- separable bounds: per-bus angle/voltage boxes, the zero
  pattern of the grid exchange on buses without a main-grid connection,
  and per-line-per-hour capacity disks on the (p, q) flow pair;
* ``S2`` -- the affine subspace of the linearized power-flow equations.

Both projections are closed form. The projection onto the intersection
runs a Douglas-Rachford best-approximation loop over the two blocks.

Internally the operator decision is a flat vector laid out
component-major: for every bus (ascending id) the angle, voltage and
grid-exchange profiles, then for every neighbouring bus the directed
real/reactive flow profiles; each component is one contiguous slice of
``H`` hours. The flow equations decouple per hour, so the affine
projection factorizes one small Gram matrix per scenario topology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from p2pmarket.model import GridDecision, Scenario

__all__ = ["GridSets", "DrsConfig", "DrsResult", "project_S1", "project_S2",
           "project_grid_feasible"]


@dataclass(frozen=True)
class DrsConfig:
    relaxation: float = 1.0
    tol: float = 1e-9
    max_iter: int = 200000

    def __post_init__(self):
        if not (0 < self.relaxation < 2):
            raise ValueError("DRS relaxation must lie in (0, 2)")
        if self.tol <= 0:
            raise ValueError("DRS tol must be > 0")


@dataclass(frozen=True)
class DrsResult:
    decision: GridDecision
    iterations: int
    change: float
    flow_residual: float
    status: str  # converged | max_iter
    xi: np.ndarray = None  # driver iterate, reusable as a warm start


class GridSets:
    """Scenario-bound projection data (built once per topology)."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        H = scenario.H
        self.H = H

        comp = []
        for bus in sorted(scenario.buses, key=lambda b: b.id):
            y = bus.id
            comp.append(("theta", y))
            comp.append(("v", y))
            comp.append(("ptg", y))
            for z in scenario.bus_neighbors[y]:
                comp.append(("pflow", y, z))
                comp.append(("qflow", y, z))
        self.components = comp
        self.index = {c: k for k, c in enumerate(comp)}
        self.n_comp = len(comp)
        self.size = self.n_comp * H

        lo = np.empty(self.n_comp)
        hi = np.empty(self.n_comp)
        for k, c in enumerate(comp):
            kind = c[0]
            if kind == "theta":
                bus = scenario.bus_by_id[c[1]]
                lo[k], hi[k] = bus.theta_min, bus.theta_max
            elif kind == "v":
                bus = scenario.bus_by_id[c[1]]
                lo[k], hi[k] = bus.v_min, bus.v_max
            elif kind == "ptg":
                if scenario.bus_by_id[c[1]].grid_connected:
                    lo[k], hi[k] = -np.inf, np.inf
                else:
                    lo[k], hi[k] = 0.0, 0.0
            else:
                lo[k], hi[k] = -np.inf, np.inf
        self.lo = lo
        self.hi = hi

        # capacity disks: one (p, q) pair per directed line
        rows_p, rows_q, radii = [], [], []
        for c in comp:
            if c[0] == "pflow":
                _, y, z = c
                rows_p.append(self.index[("pflow", y, z)])
                rows_q.append(self.index[("qflow", y, z)])
                radii.append(scenario.line_by_pair[(min(y, z), max(y, z))].capacity)
        self.disk_p = np.array(rows_p, dtype=int)
        self.disk_q = np.array(rows_q, dtype=int)
        self.disk_r = np.array(radii, dtype=float)

        # flow equations p = B (th_y - th_z) - G (v_y - v_z),
        #                q = G (th_y - th_z) + B (v_y - v_z)
        n_rows = 2 * self.disk_p.size
        A0 = np.zeros((n_rows, self.n_comp))
        r = 0
        for c in comp:
            if c[0] != "pflow":
                continue
            _, y, z = c
            line = scenario.line_by_pair[(min(y, z), max(y, z))]
            B, G = line.susceptance, line.conductance
            ty, vy = self.index[("theta", y)], self.index[("v", y)]
            tz, vz = self.index[("theta", z)], self.index[("v", z)]
            A0[r, self.index[("pflow", y, z)]] = 1.0
            A0[r, ty] -= B
            A0[r, tz] += B
            A0[r, vy] += G
            A0[r, vz] -= G
            r += 1
            A0[r, self.index[("qflow", y, z)]] = 1.0
            A0[r, ty] -= G
            A0[r, tz] += G
            A0[r, vy] -= B
            A0[r, vz] += B
            r += 1
        self.A0 = A0
        self._gram = cho_factor(A0 @ A0.T) if n_rows else None

    # -- vector packing ---------------------------------------------------

    def pack(self, dec: GridDecision) -> np.ndarray:
        U = np.empty((self.n_comp, self.H))
        for k, c in enumerate(self.components):
            if c[0] == "theta":
                U[k] = dec.theta[c[1]]
            elif c[0] == "v":
                U[k] = dec.v[c[1]]
            elif c[0] == "ptg":
                U[k] = dec.p_tg[c[1]]
            elif c[0] == "pflow":
                U[k] = dec.p_flow[(c[1], c[2])]
            else:
                U[k] = dec.q_flow[(c[1], c[2])]
        return U.reshape(-1)

    def unpack(self, vec: np.ndarray) -> GridDecision:
        U = vec.reshape(self.n_comp, self.H)
        theta, v, ptg, pf, qf = {}, {}, {}, {}, {}
        for k, c in enumerate(self.components):
            if c[0] == "theta":
                theta[c[1]] = U[k].copy()
            elif c[0] == "v":
                v[c[1]] = U[k].copy()
            elif c[0] == "ptg":
                ptg[c[1]] = U[k].copy()
            elif c[0] == "pflow":
                pf[(c[1], c[2])] = U[k].copy()
            else:
                qf[(c[1], c[2])] = U[k].copy()
        return GridDecision(theta, v, ptg, pf, qf)

    # -- projections -------------------------------------------------------

    def project_s1_cols(self, U: np.ndarray) -> np.ndarray:
        """S1 projection of one column per hour (shape (n_comp, m))."""
        out = np.clip(U, self.lo[:, None], self.hi[:, None])
        if self.disk_p.size:
            p = out[self.disk_p]
            q = out[self.disk_q]
            norm = np.hypot(p, q)
            r = self.disk_r[:, None]
            # the tiny margin keeps the scaling exactly idempotent in floats
            scale = np.where(norm > r * (1 + 1e-14),
                             r / np.maximum(norm, 1e-300), 1.0)
            out[self.disk_p] = p * scale
            out[self.disk_q] = q * scale
        return out

    def project_s2_cols(self, U: np.ndarray) -> np.ndarray:
        if self._gram is None:  # no lines: the flow equations are vacuous
            return U.copy()
        R = self.A0 @ U
        return U - self.A0.T @ cho_solve(self._gram, R)

    def project_s1_vec(self, vec: np.ndarray) -> np.ndarray:
        return self.project_s1_cols(vec.reshape(self.n_comp, self.H)).reshape(-1)

    def project_s2_vec(self, vec: np.ndarray) -> np.ndarray:
        return self.project_s2_cols(vec.reshape(self.n_comp, self.H)).reshape(-1)

    def flow_residual_vec(self, vec: np.ndarray) -> float:
        U = vec.reshape(self.n_comp, self.H)
        R = self.A0 @ U
        return float(np.max(np.abs(R), initial=0.0))

    def s1_residual_vec(self, vec: np.ndarray) -> float:
        U = vec.reshape(self.n_comp, self.H)
        box = max(np.max(self.lo[:, None] - U, initial=0.0),
                  np.max(U - self.hi[:, None], initial=0.0))
        disk = 0.0
        if self.disk_p.size:
            norm = np.hypot(U[self.disk_p], U[self.disk_q])
            disk = float(np.max(norm - self.disk_r[:, None], initial=0.0))
        return float(max(box, disk, 0.0))


def project_S1(dec: GridDecision, sets: GridSets) -> GridDecision:
    """Clamp boxes, zero out grid exchange off the main-grid buses and
    radially scale every over-capacity (p, q) flow pair."""
    return sets.unpack(sets.project_s1_vec(sets.pack(dec)))


def project_S2(dec: GridDecision, sets: GridSets) -> GridDecision:
    """Euclidean-nearest point satisfying the linearized flow equations."""
    return sets.unpack(sets.project_s2_vec(sets.pack(dec)))


def project_grid_feasible(dec: GridDecision, sets: GridSets,
                          cfg: DrsConfig = DrsConfig(),
                          xi0: np.ndarray = None) -> DrsResult:
    """Best approximation of ``dec`` in S1 and S2 via Douglas-Rachford.

    Iterates  z(k) = proj_S1(xi(k)/2 + u/2),
              xi(k+1) = xi(k) + eta (proj_S2(2 z(k) - xi(k)) - z(k))
    and returns the feasible shadow iterate z at convergence.

    Every hour runs its own independent fixed-point iteration (the two
    blocks decouple across the horizon), so converged hours freeze while
    stragglers keep iterating. ``xi0`` warm-starts the driver sequence;
    without it the driver starts at the input point.
    """
    n_comp, H = sets.n_comp, sets.H
    U = sets.pack(dec).reshape(n_comp, H)
    Xi = U.copy() if xi0 is None else xi0.reshape(n_comp, H).copy()
    eta = cfg.relaxation
    Z = sets.project_s1_cols(0.5 * Xi + 0.5 * U)
    active = np.ones(H, dtype=bool)
    it = 0
    last_change = np.inf
    while it < cfg.max_iter and active.any():
        it += 1
        cols = np.nonzero(active)[0]
        xi_a, u_a, z_a = Xi[:, cols], U[:, cols], Z[:, cols]
        xi_a = xi_a + eta * (sets.project_s2_cols(2.0 * z_a - xi_a) - z_a)
        z_new = sets.project_s1_cols(0.5 * xi_a + 0.5 * u_a)
        change = np.max(np.abs(z_new - z_a), axis=0)
        if sets.A0.shape[0]:
            flow = np.max(np.abs(sets.A0 @ z_new), axis=0)
        else:
            flow = np.zeros(z_new.shape[1])
        Xi[:, cols] = xi_a
        Z[:, cols] = z_new
        active[cols] = (change > cfg.tol) | (flow > cfg.tol)
        last_change = float(change.max())
    z = Z.reshape(-1)
    flow_res = sets.flow_residual_vec(z)
    status = "converged" if not active.any() else "max_iter"
    return DrsResult(sets.unpack(z), it, last_change, flow_res, status,
                     xi=Xi.reshape(-1).copy())
