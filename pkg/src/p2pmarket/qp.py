"""Operator-splitting solver for structured convex quadratic programs.

Problems have the form::

    minimize    0.5 x'Px + q'x + l1'|x| + c0
    subject to  A_eq x = b_eq
                lo <= x <= hi
                x_a^2 + x_b^2 <= r^2      for every disk (a, b, r)

solved by ADMM alternating between an affine/quadratic block (cached
sparse KKT factorization) and a separable projection block (box, per-pair
disk, soft-threshold for the |x| terms). Every constraint type here is
projection-friendly, which keeps the per-iteration cost at one triangular
solve pair plus elementwise work.

The same solver backs the prosumers' proximal updates and the
centralized certification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

__all__ = [
    "QpProblem",
    "QpSolution",
    "QpError",
    "QpBuilder",
    "solve",
    "prox_quadratic",
    "abs_reformulate",
    "kkt_residuals",
    "QpSolver",
]

_SYM_TOL = 1e-12


class QpError(ValueError):
    """Malformed QP data."""


@dataclass
class QpProblem:
    """Data of one QP; see the module docstring for the problem form.

    ``l1`` holds per-coordinate nonnegative weights of absolute-value
    terms (zero / ``None`` when absent). ``disks`` is a list of
    ``(index_a, index_b, radius)`` tuples.
    """

    P: sparse.spmatrix
    q: np.ndarray
    A_eq: Optional[sparse.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    disks: list = field(default_factory=list)
    l1: Optional[np.ndarray] = None
    c0: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        n = self.q.shape[0]
        self.P = sparse.csc_matrix(self.P)
        if self.P.shape != (n, n):
            raise QpError("P shape does not match q")
        if self.A_eq is None:
            self.A_eq = sparse.csr_matrix((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = sparse.csr_matrix(self.A_eq)
            self.b_eq = np.asarray(self.b_eq, dtype=float)
            if self.A_eq.shape[1] != n or self.b_eq.shape[0] != self.A_eq.shape[0]:
                raise QpError("equality system dimensions inconsistent")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float)
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float)
        if self.lo.shape != (n,) or self.hi.shape != (n,):
            raise QpError("box bounds must have length n")
        self.l1 = None if self.l1 is None else np.asarray(self.l1, dtype=float)
        self.validate()

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def validate(self):
        gap = abs(self.P - self.P.T)
        if gap.nnz and gap.max() > _SYM_TOL:
            raise QpError("P must be symmetric within 1e-12")
        if np.any(self.lo > self.hi):
            raise QpError("box requires lo <= hi")
        if self.l1 is not None and np.any(self.l1 < 0):
            raise QpError("absolute-value weights must be >= 0")
        seen = set()
        for a, b, r in self.disks:
            if r <= 0:
                raise QpError("disk radii must be > 0")
            if a == b or not (0 <= a < self.n and 0 <= b < self.n):
                raise QpError("disk indices invalid")
            if a in seen or b in seen:
                raise QpError("a coordinate may appear in at most one disk")
            seen.update((a, b))
            if self.l1 is not None and (self.l1[a] != 0 or self.l1[b] != 0):
                raise QpError("absolute-value terms not supported on disk coordinates")

    def disk_set_empty(self) -> bool:
        """True when some box-and-disk pair has an empty intersection."""
        for a, b, r in self.disks:
            ca = min(max(0.0, self.lo[a]), self.hi[a])
            cb = min(max(0.0, self.lo[b]), self.hi[b])
            if np.hypot(ca, cb) > r:
                return True
        return False

    def objective(self, x: np.ndarray) -> float:
        val = 0.5 * float(x @ (self.P @ x)) + float(self.q @ x) + self.c0
        if self.l1 is not None:
            val += float(self.l1 @ np.abs(x))
        return val


@dataclass
class QpSolution:
    x: np.ndarray
    obj: float
    primal_res: float
    dual_res: float
    iterations: int
    status: str  # solved | max_iter | infeasible_detected
    y_eq: np.ndarray = None
    y_box: np.ndarray = None


# ---------------------------------------------------------------------
# exact projection onto a 2-D box-and-disk intersection
# ---------------------------------------------------------------------

def _project_box_disk(va, vb, la, ua, lb, ub, r):
    ca = min(max(va, la), ua)
    cb = min(max(vb, lb), ub)
    if ca * ca + cb * cb <= r * r:
        return ca, cb
    nv = np.hypot(va, vb)
    if nv > r:
        da, db = va * r / nv, vb * r / nv
    else:
        da, db = va, vb
    if la <= da <= ua and lb <= db <= ub:
        return da, db
    # projection sits where the circle crosses the box boundary
    best, best_d = None, np.inf
    for xa in (la, ua):
        if np.isfinite(xa) and abs(xa) <= r:
            s = np.sqrt(max(r * r - xa * xa, 0.0))
            for xb in (s, -s):
                if lb <= xb <= ub:
                    d = (va - xa) ** 2 + (vb - xb) ** 2
                    if d < best_d:
                        best, best_d = (xa, xb), d
    for xb in (lb, ub):
        if np.isfinite(xb) and abs(xb) <= r:
            s = np.sqrt(max(r * r - xb * xb, 0.0))
            for xa in (s, -s):
                if la <= xa <= ua:
                    d = (va - xa) ** 2 + (vb - xb) ** 2
                    if d < best_d:
                        best, best_d = (xa, xb), d
    if best is None:
        raise QpError("box-and-disk intersection is empty")
    return best


# ---------------------------------------------------------------------
# ADMM engine
# ---------------------------------------------------------------------

class QpSolver:
    """Reusable solver instance with a cached KKT factorization.

    The factorization depends only on (P, A_eq, rho); linear terms and
    warm starts can change between `solve` calls, which is what the
    clearing loop exploits (the prosumer QP structure is
    iteration-invariant).
    """

    def __init__(self, problem: QpProblem, rho: float = 0.1, sigma: float = 1e-6,
                 alpha: float = 1.6, adaptive_rho: bool = True,
                 check_interval: int = 25):
        self.prob = problem
        self.rho = float(rho)
        self.sigma = float(sigma)
        self.alpha = float(alpha)
        self.adaptive_rho = adaptive_rho
        self.check_interval = int(check_interval)
        self._eq_rho_scale = 1e3

        n = problem.n
        self.x = np.zeros(n)
        self.w = problem.b_eq.copy(), np.clip(np.zeros(n), problem.lo, problem.hi)
        self.y_eq = np.zeros(problem.A_eq.shape[0])
        self.y_z = np.zeros(n)

        # vectorized disk data: "pure" pairs have free boxes and no |x| term
        self._ia = np.array([d[0] for d in problem.disks], dtype=int)
        self._ib = np.array([d[1] for d in problem.disks], dtype=int)
        self._ir = np.array([d[2] for d in problem.disks], dtype=float)
        pure = []
        for a, b, r in problem.disks:
            pure.append(np.isinf(problem.lo[a]) and np.isinf(problem.hi[a])
                        and np.isinf(problem.lo[b]) and np.isinf(problem.hi[b]))
        self._pure = np.array(pure, dtype=bool)
        self._factorize()

    # -- linear algebra -------------------------------------------------

    def _factorize(self):
        p = self.prob
        n = p.n
        m_eq = p.A_eq.shape[0]
        self.rho_eq = self.rho * self._eq_rho_scale
        diag = sparse.diags(np.full(n, self.sigma + self.rho))
        if m_eq:
            kkt = sparse.bmat(
                [[p.P + diag, p.A_eq.T],
                 [p.A_eq, -sparse.diags(np.full(m_eq, 1.0 / self.rho_eq))]],
                format="csc")
        else:
            kkt = (p.P + diag).tocsc()
        self._lu = splu(kkt)
        self._m_eq = m_eq

    def update_lin(self, q=None, b_eq=None):
        if q is not None:
            self.prob.q = np.asarray(q, dtype=float)
        if b_eq is not None:
            self.prob.b_eq = np.asarray(b_eq, dtype=float)

    def warm_start(self, x0=None, y_eq=None, y_z=None):
        if x0 is not None:
            self.x = np.asarray(x0, dtype=float).copy()
            self.w = self.prob.b_eq.copy(), self._proj_z(self.x.copy())
        if y_eq is not None:
            self.y_eq = np.asarray(y_eq, dtype=float).copy()
        if y_z is not None:
            self.y_z = np.asarray(y_z, dtype=float).copy()

    # -- projection block ------------------------------------------------

    def _proj_z(self, v: np.ndarray) -> np.ndarray:
        p = self.prob
        if p.l1 is not None:
            v = np.sign(v) * np.maximum(np.abs(v) - p.l1 / self.rho, 0.0)
        out = np.clip(v, p.lo, p.hi)
        if self._ia.size:
            pa = out[self._ia[self._pure]]
            pb = out[self._ib[self._pure]]
            norm = np.hypot(pa, pb)
            scale = np.where(norm > self._ir[self._pure],
                             self._ir[self._pure] / np.maximum(norm, 1e-300), 1.0)
            out[self._ia[self._pure]] = pa * scale
            out[self._ib[self._pure]] = pb * scale
            for k in np.nonzero(~self._pure)[0]:
                a, b, r = self.prob.disks[k]
                out[a], out[b] = _project_box_disk(v[a], v[b], p.lo[a], p.hi[a],
                                                   p.lo[b], p.hi[b], r)
        return out

    # -- residuals --------------------------------------------------------

    def _residuals(self):
        p = self.prob
        w_eq, w_z = self.w
        ax = p.A_eq @ self.x if self._m_eq else np.zeros(0)
        r_prim = max(
            np.max(np.abs(ax - p.b_eq), initial=0.0),
            np.max(np.abs(self.x - w_z), initial=0.0),
        )
        px = p.P @ self.x
        aty = p.A_eq.T @ self.y_eq if self._m_eq else 0.0
        r_dual = np.max(np.abs(px + p.q + aty + self.y_z), initial=0.0)
        return r_prim, r_dual, px, ax, aty

    def _support(self, dy_eq, dy_z):
        """Support function of the constraint set in the direction dy."""
        p = self.prob
        val = float(p.b_eq @ dy_eq) if dy_eq.size else 0.0
        up = np.maximum(dy_z, 0.0)
        dn = np.minimum(dy_z, 0.0)
        with np.errstate(invalid="ignore"):
            box = np.where(up > 0, np.where(np.isinf(p.hi), np.inf, p.hi * up), 0.0)
            box = box + np.where(dn < 0, np.where(np.isinf(p.lo), np.inf, p.lo * dn), 0.0)
        if self._ia.size:
            disk = self._ir * np.hypot(dy_z[self._ia], dy_z[self._ib])
            pair_box = box[self._ia] + box[self._ib]
            contrib = np.minimum(pair_box, disk)
            box[self._ia] = 0.0
            box[self._ib] = 0.0
            val += float(np.sum(contrib))
        return val + float(np.sum(box))

    # -- main loop ---------------------------------------------------------

    def solve(self, tol: float = 1e-8, max_iter: int = 20000,
              x0: Optional[np.ndarray] = None) -> QpSolution:
        p = self.prob
        if p.disk_set_empty():
            return self._finish(0, np.inf, np.inf, "infeasible_detected")
        if x0 is not None:
            self.warm_start(x0=x0)
        n = p.n
        w_z = self.w[1]
        w_eq = p.b_eq.copy()
        y_chk = np.concatenate([self.y_eq, self.y_z])
        r_prim = r_dual = np.inf

        for it in range(1, max_iter + 1):
            rhs_x = self.sigma * self.x - p.q + self.rho * w_z - self.y_z
            if self._m_eq:
                rhs = np.concatenate([rhs_x, p.b_eq - self.y_eq / self.rho_eq])
                sol = self._lu.solve(rhs)
                x_t, nu_eq = sol[:n], sol[n:]
                w_eq_t = w_eq + (nu_eq - self.y_eq) / self.rho_eq
            else:
                x_t = self._lu.solve(rhs_x)
                w_eq_t = w_eq
            # the relaxed z-block target; for the identity rows w_tilde = x_tilde
            self.x = self.alpha * x_t + (1 - self.alpha) * self.x
            v_z = self.alpha * x_t + (1 - self.alpha) * w_z
            w_z_new = self._proj_z(v_z + self.y_z / self.rho)
            self.y_z = self.y_z + self.rho * (v_z - w_z_new)
            w_z = w_z_new
            v_eq = self.alpha * w_eq_t + (1 - self.alpha) * w_eq
            self.y_eq = self.y_eq + self.rho_eq * (v_eq - p.b_eq)
            w_eq = p.b_eq.copy()

            if it % self.check_interval == 0 or it == max_iter:
                self.w = w_eq, w_z
                r_prim, r_dual, px, ax, aty = self._residuals()
                if r_prim <= tol and r_dual <= tol:
                    return self._finish(it, r_prim, r_dual, "solved")
                y_now = np.concatenate([self.y_eq, self.y_z])
                dy = y_now - y_chk
                y_chk = y_now
                nd = np.max(np.abs(dy), initial=0.0)
                if nd > 1e-10:
                    cty = (p.A_eq.T @ dy[:self._m_eq] if self._m_eq else 0.0) + dy[self._m_eq:]
                    if (np.max(np.abs(cty)) <= 1e-8 * nd
                            and self._support(dy[:self._m_eq], dy[self._m_eq:])
                            <= -1e-8 * nd):
                        return self._finish(it, r_prim, r_dual, "infeasible_detected")
                if self.adaptive_rho:
                    self._maybe_rescale(r_prim, r_dual, px, ax, aty, w_z)
                    w_eq, w_z = self.w

        self.w = w_eq, w_z
        r_prim, r_dual, *_ = self._residuals()
        status = "solved" if (r_prim <= tol and r_dual <= tol) else "max_iter"
        return self._finish(max_iter, r_prim, r_dual, status)

    def _maybe_rescale(self, r_prim, r_dual, px, ax, aty, w_z):
        p = self.prob
        denom_p = max(np.max(np.abs(ax), initial=0.0),
                      np.max(np.abs(self.x), initial=0.0),
                      np.max(np.abs(w_z), initial=0.0), 1e-12)
        denom_d = max(np.max(np.abs(px), initial=0.0),
                      np.max(np.abs(p.q), initial=0.0),
                      np.max(np.abs(aty + self.y_z), initial=0.0), 1e-12)
        ratio = np.sqrt((r_prim / denom_p) / max(r_dual / denom_d, 1e-300))
        if ratio > 5.0 or ratio < 1.0 / 5.0:
            self.rho = float(np.clip(self.rho * ratio, 1e-6, 1e6))
            self._factorize()

    def _finish(self, it, r_prim, r_dual, status):
        x = self.x.copy()
        return QpSolution(
            x=x, obj=self.prob.objective(x), primal_res=float(r_prim),
            dual_res=float(r_dual), iterations=it, status=status,
            y_eq=self.y_eq.copy(), y_box=self.y_z.copy())


# ---------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------

def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 20000,
          x0: Optional[np.ndarray] = None, **solver_kw) -> QpSolution:
    """Solve one QP from scratch (deterministic given identical inputs)."""
    return QpSolver(problem, **solver_kw).solve(tol=tol, max_iter=max_iter, x0=x0)


def prox_quadratic(problem: QpProblem, center: np.ndarray, alpha: float,
                   tol: float = 1e-8, max_iter: int = 20000,
                   x0: Optional[np.ndarray] = None) -> QpSolution:
    """Minimize the problem objective plus ``(1/(2 alpha)) ||x - center||^2``.

    The proximal term covers the first ``len(center)`` coordinates only,
    so auxiliary variables (e.g. state-of-charge states) stay free of it.
    Strong convexity of the regularized block makes that part of the
    minimizer unique.
    """
    if alpha <= 0:
        raise QpError("prox weight needs alpha > 0")
    center = np.asarray(center, dtype=float)
    k = center.shape[0]
    if k > problem.n:
        raise QpError("prox center longer than the variable vector")
    d = np.zeros(problem.n)
    d[:k] = 1.0 / alpha
    q = problem.q.copy()
    q[:k] -= center / alpha
    shifted = QpProblem(
        P=problem.P + sparse.diags(d), q=q, A_eq=problem.A_eq,
        b_eq=problem.b_eq, lo=problem.lo, hi=problem.hi,
        disks=list(problem.disks), l1=problem.l1,
        c0=problem.c0 + float(center @ center) / (2 * alpha))
    return solve(shifted, tol=tol, max_iter=max_iter, x0=x0)


def abs_reformulate(problem: QpProblem) -> QpProblem:
    """Rewrite the |x| terms with nonnegative split variables.

    Every coordinate ``t`` carrying a weight ``c > 0`` gains auxiliaries
    ``t+ , t- >= 0`` with ``t = t+ - t-`` and linear cost ``c (t+ + t-)``.
    The first ``problem.n`` coordinates of a minimizer solve the original
    problem at identical optimal cost.
    """
    if problem.l1 is None or not np.any(problem.l1 > 0):
        return QpProblem(P=problem.P, q=problem.q, A_eq=problem.A_eq,
                         b_eq=problem.b_eq, lo=problem.lo, hi=problem.hi,
                         disks=list(problem.disks), l1=None, c0=problem.c0)
    idx = np.nonzero(problem.l1 > 0)[0]
    n, k = problem.n, idx.size
    P = sparse.block_diag([problem.P, sparse.csc_matrix((2 * k, 2 * k))], format="csc")
    q = np.concatenate([problem.q, problem.l1[idx], problem.l1[idx]])
    lo = np.concatenate([problem.lo, np.zeros(2 * k)])
    hi = np.concatenate([problem.hi, np.full(2 * k, np.inf)])
    # t - t+ + t- = 0
    rows = np.repeat(np.arange(k), 3)
    cols = np.concatenate([[idx[r], n + r, n + k + r] for r in range(k)])
    vals = np.tile([1.0, -1.0, 1.0], k)
    link = sparse.csr_matrix((vals, (rows, cols)), shape=(k, n + 2 * k))
    A = sparse.vstack([
        sparse.hstack([problem.A_eq, sparse.csr_matrix((problem.A_eq.shape[0], 2 * k))]),
        link]).tocsr()
    b = np.concatenate([problem.b_eq, np.zeros(k)])
    return QpProblem(P=P, q=q, A_eq=A, b_eq=b, lo=lo, hi=hi,
                     disks=list(problem.disks), l1=None, c0=problem.c0)


def kkt_residuals(problem: QpProblem, sol: QpSolution) -> dict:
    """Recompute KKT residuals of a returned solution from scratch."""
    x = sol.x
    stat = problem.P @ x + problem.q + sol.y_box
    if problem.A_eq.shape[0]:
        stat = stat + problem.A_eq.T @ sol.y_eq
        eq = float(np.max(np.abs(problem.A_eq @ x - problem.b_eq)))
    else:
        eq = 0.0
    box = float(max(np.max(problem.lo - x, initial=0.0),
                    np.max(x - problem.hi, initial=0.0)))
    disk = 0.0
    for a, b, r in problem.disks:
        disk = max(disk, float(np.hypot(x[a], x[b]) - r))
    disk = max(disk, 0.0)
    return {
        "stationarity": float(np.max(np.abs(stat))),
        "eq": eq,
        "box": box,
        "disk": disk,
    }


# ---------------------------------------------------------------------
# incremental assembly helper
# ---------------------------------------------------------------------

class QpBuilder:
    """Collects variable blocks, quadratic/linear terms, equality rows,
    boxes and disks, then emits one QpProblem plus a name -> slice map."""

    def __init__(self):
        self.n = 0
        self.slices = {}
        self._box = []  # (lo, hi, l1) arrays per block
        self._quad = []  # (index array, coeff array)
        self._lin = []
        self._rows = []
        self._cols = []
        self._vals = []
        self._rhs = []
        self._n_rows = 0
        self.disks = []

    def add_block(self, name, size, lo=-np.inf, hi=np.inf, l1=0.0) -> slice:
        """Append `size` variables; returns their slice in the flat vector."""
        if name in self.slices:
            raise QpError(f"duplicate variable block {name!r}")
        sl = slice(self.n, self.n + size)
        self.slices[name] = sl
        self.n += size
        self._box.append((
            np.broadcast_to(np.asarray(lo, dtype=float), (size,)),
            np.broadcast_to(np.asarray(hi, dtype=float), (size,)),
            np.broadcast_to(np.asarray(l1, dtype=float), (size,)),
        ))
        return sl

    @staticmethod
    def _indices(sl: slice) -> np.ndarray:
        return np.arange(sl.start, sl.stop)

    def add_quad_diag(self, sl: slice, coeff):
        """Add `sum coeff_i x_i^2` (stored as P-diagonal 2*coeff)."""
        idx = self._indices(sl)
        self._quad.append((idx, np.broadcast_to(
            2.0 * np.asarray(coeff, dtype=float), idx.shape).copy()))

    def add_lin(self, sl: slice, coeff):
        idx = self._indices(sl)
        self._lin.append((idx, np.broadcast_to(
            np.asarray(coeff, dtype=float), idx.shape).copy()))

    def add_eq_row(self, cols, vals, rhs: float):
        cols = np.atleast_1d(np.asarray(cols, dtype=int))
        vals = np.atleast_1d(np.asarray(vals, dtype=float))
        self._rows.extend([self._n_rows] * cols.size)
        self._cols.extend(cols.tolist())
        self._vals.extend(vals.tolist())
        self._rhs.append(float(rhs))
        self._n_rows += 1

    def add_eq_rows(self, rows, cols, vals, rhs):
        """Bulk variant: `rows` are 0-based within this batch."""
        rows = np.asarray(rows, dtype=int) + self._n_rows
        self._rows.extend(rows.tolist())
        self._cols.extend(np.asarray(cols, dtype=int).tolist())
        self._vals.extend(np.asarray(vals, dtype=float).tolist())
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        self._rhs.extend(rhs.tolist())
        self._n_rows += rhs.size

    def add_disk(self, a: int, b: int, r: float):
        self.disks.append((int(a), int(b), float(r)))

    def build(self, c0: float = 0.0) -> QpProblem:
        pdiag = np.zeros(self.n)
        for idx, coeff in self._quad:
            np.add.at(pdiag, idx, coeff)
        q = np.zeros(self.n)
        for idx, coeff in self._lin:
            np.add.at(q, idx, coeff)
        lo = np.concatenate([b[0] for b in self._box]) if self._box else np.zeros(0)
        hi = np.concatenate([b[1] for b in self._box]) if self._box else np.zeros(0)
        l1 = np.concatenate([b[2] for b in self._box]) if self._box else np.zeros(0)
        A = sparse.csr_matrix(
            (self._vals, (self._rows, self._cols)), shape=(self._n_rows, self.n))
        return QpProblem(
            P=sparse.diags(pdiag, format="csc"), q=q, A_eq=A,
            b_eq=np.asarray(self._rhs, dtype=float),
            lo=lo, hi=hi, disks=list(self.disks),
            l1=l1 if np.any(l1 > 0) else None, c0=c0)
