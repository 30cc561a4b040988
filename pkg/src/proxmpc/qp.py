"""Affine-dynamics convex planning problems in canonical QP form.

A :class:`PlanProblem` covers the cost class: linear + entrywise absolute
value + diagonal quadratic input costs, linear + diagonal quadratic state
costs, finite input boxes, state boxes, and terminal affine equalities.
Absolute values are canonicalized with the classic split u = u+ - u-, which
is exact at any optimum because the absolute-value coefficients are
nonnegative.

Solutions come from Clarabel (interior point) and are re-certified here:
primal feasibility and KKT stationarity residuals are computed from the
returned primal/dual pair, and a nominally "solved" answer that fails the
residual tolerances is demoted to solver_failure.

The two operations the incremental proximal method needs live here too:
``scenario_value`` (the optimal recourse cost as a function of the first
input) and ``prox_step`` (the proximal update for one scenario).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import SolverFailure

FEAS_TOL = 1e-6  # certification threshold on primal residuals
STAT_TOL = 1e-6  # certification threshold on stationarity, scaled by 1 + |q|
SOLVER_TOL = 1e-9  # requested interior-point tolerance
MAX_ITER = 200

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
FAILURE = "solver_failure"


@dataclass(frozen=True)
class AffineDynamics:
    """x_{tau+1} = A_tau x_tau + B_tau u_tau + c_tau for tau = 0..H-1."""

    A: np.ndarray  # (H, n, n)
    B: np.ndarray  # (H, n, m)
    c: np.ndarray  # (H, n)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("A must be (H, n, n)")
        H, n = A.shape[0], A.shape[1]
        if B.shape[:2] != (H, n) or B.ndim != 3:
            raise ValueError("B must be (H, n, m)")
        if c.shape != (H, n):
            raise ValueError("c must be (H, n)")
        for name, arr in (("A", A), ("B", B), ("c", c)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"dynamics {name} must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[2]

    @classmethod
    def constant(cls, A, B, c, horizon: int) -> "AffineDynamics":
        """Time-invariant dynamics repeated over the horizon."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(
            np.repeat(A[None], horizon, axis=0),
            np.repeat(B[None], horizon, axis=0),
            np.repeat(c[None], horizon, axis=0),
        )


@dataclass(frozen=True)
class StageCost:
    """Per-stage costs, boxes, and the terminal equality.

    Stage tau charges  u_lin.u + u_abs.|u| + 1/2 u_quad.u^2  on the input and
    x_lin.x + 1/2 x_quad.x^2  on the resulting state x_{tau+1}.  Input boxes
    must be finite on both sides (this is what keeps every scenario value
    function well behaved); state boxes may be infinite.
    """

    u_lin: np.ndarray  # (H, m)
    u_abs: np.ndarray  # (H, m), >= 0
    u_quad: np.ndarray  # (H, m), >= 0 (diagonal quadratic)
    u_lo: np.ndarray  # (H, m), finite
    u_hi: np.ndarray  # (H, m), finite
    x_lin: np.ndarray  # (H, n)
    x_quad: np.ndarray  # (H, n), >= 0
    x_lo: np.ndarray  # (H, n), may be -inf
    x_hi: np.ndarray  # (H, n), may be +inf
    E_term: np.ndarray | None = None  # (k, n)
    f_term: np.ndarray | None = None  # (k,)

    def __post_init__(self):
        arrays = {}
        for name in ("u_lin", "u_abs", "u_quad", "u_lo", "u_hi", "x_lin", "x_quad", "x_lo", "x_hi"):
            arrays[name] = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arrays[name])
        H, m = arrays["u_lin"].shape
        n = arrays["x_lin"].shape[1]
        for name in ("u_abs", "u_quad", "u_lo", "u_hi"):
            if arrays[name].shape != (H, m):
                raise ValueError(f"{name} must be (H, m) = ({H}, {m})")
        for name in ("x_quad", "x_lo", "x_hi"):
            if arrays[name].shape != (H, n):
                raise ValueError(f"{name} must be (H, n) = ({H}, {n})")
        if np.any(arrays["u_abs"] < 0):
            raise ValueError("absolute-value coefficients must be nonnegative")
        if np.any(arrays["u_quad"] < 0) or np.any(arrays["x_quad"] < 0):
            raise ValueError("quadratic coefficients must be nonnegative")
        if not (np.all(np.isfinite(arrays["u_lo"])) and np.all(np.isfinite(arrays["u_hi"]))):
            raise ValueError("input boxes must be finite on both sides")
        if np.any(arrays["u_lo"] > arrays["u_hi"]):
            raise ValueError("input box is empty")
        if (self.E_term is None) != (self.f_term is None):
            raise ValueError("terminal equality needs both E_term and f_term")
        if self.E_term is not None:
            E = np.atleast_2d(np.asarray(self.E_term, dtype=float))
            f = np.atleast_1d(np.asarray(self.f_term, dtype=float))
            if E.shape != (len(f), n):
                raise ValueError("terminal equality shapes must be (k, n) and (k,)")
            object.__setattr__(self, "E_term", E)
            object.__setattr__(self, "f_term", f)

    @property
    def horizon(self) -> int:
        return self.u_lin.shape[0]

    @property
    def m(self) -> int:
        return self.u_lin.shape[1]

    @property
    def n(self) -> int:
        return self.x_lin.shape[1]

    def scaled(self, factor: float) -> "StageCost":
        """Scale all cost terms (not the feasible set) by a positive factor."""
        if factor <= 0:
            raise ValueError("cost scaling factor must be positive")
        return replace(
            self,
            u_lin=self.u_lin * factor,
            u_abs=self.u_abs * factor,
            u_quad=self.u_quad * factor,
            x_lin=self.x_lin * factor,
            x_quad=self.x_quad * factor,
        )

    @classmethod
    def zeros(cls, horizon: int, m: int, n: int, u_lo, u_hi) -> "StageCost":
        """All-zero costs with the given input box and free states."""
        shape_u = (horizon, m)
        shape_x = (horizon, n)
        return cls(
            u_lin=np.zeros(shape_u),
            u_abs=np.zeros(shape_u),
            u_quad=np.zeros(shape_u),
            u_lo=np.broadcast_to(np.asarray(u_lo, dtype=float), shape_u).copy(),
            u_hi=np.broadcast_to(np.asarray(u_hi, dtype=float), shape_u).copy(),
            x_lin=np.zeros(shape_x),
            x_quad=np.zeros(shape_x),
            x_lo=np.full(shape_x, -np.inf),
            x_hi=np.full(shape_x, np.inf),
        )


@dataclass(frozen=True)
class PlanProblem:
    """One affine-dynamics convex planning problem.

    `prox` is an optional (u_ref, rho) pair adding rho/2 ||u_0 - u_ref||^2 on
    the first input; `first_input_fixed` pins u_0 instead.  At most one of
    the two may be set.
    """

    dynamics: AffineDynamics
    cost: StageCost
    x_init: np.ndarray
    prox: tuple[np.ndarray, float] | None = None
    first_input_fixed: np.ndarray | None = None

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x_init, dtype=float))
        if x0.shape != (self.dynamics.n,):
            raise ValueError(f"x_init must have length {self.dynamics.n}")
        if (self.cost.horizon, self.cost.m, self.cost.n) != (
            self.dynamics.horizon,
            self.dynamics.m,
            self.dynamics.n,
        ):
            raise ValueError("cost and dynamics shapes disagree")
        if self.prox is not None and self.first_input_fixed is not None:
            raise ValueError("at most one of prox and first_input_fixed may be set")
        object.__setattr__(self, "x_init", x0)
        if self.prox is not None:
            ref, rho = self.prox
            ref = np.atleast_1d(np.asarray(ref, dtype=float))
            if ref.shape != (self.dynamics.m,) or rho <= 0:
                raise ValueError("prox must be (m-vector, positive weight)")
            object.__setattr__(self, "prox", (ref, float(rho)))
        if self.first_input_fixed is not None:
            v = np.atleast_1d(np.asarray(self.first_input_fixed, dtype=float))
            if v.shape != (self.dynamics.m,):
                raise ValueError("first_input_fixed must be an m-vector")
            object.__setattr__(self, "first_input_fixed", v)

    @property
    def horizon(self) -> int:
        return self.dynamics.horizon


class _Triplets:
    """COO triplet accumulator."""

    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
        vals = np.atleast_1d(np.asarray(vals, dtype=float))
        n = max(len(rows), len(cols), len(vals))
        self.rows.append(np.broadcast_to(rows, (n,)))
        self.cols.append(np.broadcast_to(cols, (n,)))
        self.vals.append(np.broadcast_to(vals, (n,)))

    def matrix(self, shape) -> sp.csc_matrix:
        if not self.rows:
            return sp.csc_matrix(shape)
        M = sp.csc_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape,
        )
        M.eliminate_zeros()
        return M


@dataclass(frozen=True)
class BlockLayout:
    """Column bookkeeping for one scenario block of a canonical QP."""

    pos: np.ndarray  # (H, m) column of u (or of u+ when split)
    neg: np.ndarray  # (H, m) column of u-; -1 where the coordinate is unsplit
    state: np.ndarray  # (H, n)


@dataclass(frozen=True)
class CanonicalQP:
    """minimize 1/2 z'Pz + q'z + const  s.t.  A_eq z = b_eq, G z <= h.

    P holds the upper triangle of the symmetric quadratic term.
    """

    P: sp.csc_matrix
    q: np.ndarray
    A_eq: sp.csc_matrix
    b_eq: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    const: float
    shared: np.ndarray | None  # columns of the shared first input, coupled form only
    blocks: tuple[BlockLayout, ...]

    @property
    def nv(self) -> int:
        return len(self.q)

    def sym_product(self, z: np.ndarray) -> np.ndarray:
        """P_sym @ z where P_sym is the full symmetric quadratic matrix."""
        return self.P @ z + self.P.T @ z - self.P.diagonal() * z

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.sym_product(z) + self.q @ z + self.const)

    def to_dict(self) -> dict:
        def trip(M):
            coo = M.tocoo()
            return {
                "shape": list(coo.shape),
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
            }

        return {
            "P_upper": trip(self.P),
            "q": self.q.tolist(),
            "A_eq": trip(self.A_eq),
            "b_eq": self.b_eq.tolist(),
            "G": trip(self.G),
            "h": self.h.tolist(),
            "const": self.const,
        }

    def dump(self, path) -> None:
        """Debug dump for cross-checking against an external solver."""
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


class _Builder:
    def __init__(self):
        self.P = _Triplets()
        self.q_entries: list[tuple[np.ndarray, np.ndarray]] = []
        self.eq = _Triplets()
        self.b_parts: list[np.ndarray] = []
        self.ineq = _Triplets()
        self.h_parts: list[np.ndarray] = []
        self.const = 0.0
        self.ncols = 0
        self.neq = 0
        self.nineq = 0

    def new_cols(self, k: int) -> np.ndarray:
        cols = np.arange(self.ncols, self.ncols + k)
        self.ncols += k
        return cols

    def add_q(self, cols, vals):
        self.q_entries.append((np.atleast_1d(cols), np.atleast_1d(np.asarray(vals, dtype=float))))

    def add_eq_row(self, cols, vals, rhs: float):
        if np.size(cols):
            self.eq.add(self.neq, cols, vals)
        self.b_parts.append(np.array([rhs], dtype=float))
        self.neq += 1

    def add_ineq_row(self, cols, vals, rhs: float):
        if np.size(cols):
            self.ineq.add(self.nineq, cols, vals)
        self.h_parts.append(np.array([rhs], dtype=float))
        self.nineq += 1

    def add_box(self, col: int, lo: float, hi: float):
        if np.isfinite(hi):
            self.add_ineq_row(col, 1.0, hi)
        if np.isfinite(lo):
            self.add_ineq_row(col, -1.0, -lo)

    def _bound_rows(self, cols: np.ndarray, coeffs, rhs: np.ndarray, keep: np.ndarray):
        """Vectorized single-entry inequality rows coeff*z[col] <= rhs."""
        k = int(keep.sum())
        if k == 0:
            return
        rows = self.nineq + np.arange(k)
        self.ineq.add(rows, cols[keep], np.broadcast_to(np.asarray(coeffs, dtype=float), cols.shape)[keep])
        self.h_parts.append(np.asarray(rhs, dtype=float)[keep])
        self.nineq += k

    def add_block(self, problem: PlanProblem) -> BlockLayout:
        """Emit one scenario's variables, dynamics, boxes, terminal and costs."""
        dyn, cost = problem.dynamics, problem.cost
        H, n, m = dyn.horizon, dyn.n, dyn.m
        split = cost.u_abs > 0

        # column allocation: inputs stage-major (split coords take two columns),
        # then all states
        widths = 1 + split.reshape(-1).astype(np.int64)
        starts = self.ncols + np.concatenate([[0], np.cumsum(widths)[:-1]])
        self.ncols += int(widths.sum())
        pos = starts.reshape(H, m)
        neg = np.where(split, pos + 1, -1)
        state = self.new_cols(H * n).reshape(H, n)

        posf, negf, splitf = pos.reshape(-1), neg.reshape(-1), split.reshape(-1)
        linf, absf = cost.u_lin.reshape(-1), cost.u_abs.reshape(-1)
        lof, hif = cost.u_lo.reshape(-1), cost.u_hi.reshape(-1)

        # input linear/abs costs: split coords get (lin + abs, -lin + abs)
        self.add_q(posf, np.where(splitf, linf + absf, linf))
        if splitf.any():
            self.add_q(negf[splitf], (-linf + absf)[splitf])

        # input quadratic costs (diagonal; split coords add the cross term)
        quadf = cost.u_quad.reshape(-1)
        qs = (quadf > 0) & splitf
        qp = (quadf > 0) & ~splitf
        if qp.any():
            self.P.add(posf[qp], posf[qp], quadf[qp])
        if qs.any():
            self.P.add(posf[qs], posf[qs], quadf[qs])
            self.P.add(negf[qs], negf[qs], quadf[qs])
            self.P.add(posf[qs], negf[qs], -quadf[qs])

        # input boxes: u+ in [0, max(hi,0)] and u- in [0, max(-lo,0)] keep the
        # split bounded without cutting any u in [lo, hi]; boxes not containing
        # zero additionally need the pairwise rows on u+ - u-
        self._bound_rows(posf, 1.0, np.where(splitf, np.maximum(hif, 0.0), hif), np.ones_like(splitf))
        self._bound_rows(posf, -1.0, np.where(splitf, 0.0, -lof), np.ones_like(splitf))
        self._bound_rows(negf, 1.0, np.maximum(-lof, 0.0), splitf)
        self._bound_rows(negf, -1.0, np.zeros_like(lof), splitf)
        pairwise = splitf & ((lof > 0.0) | (hif < 0.0))
        if pairwise.any():
            for sign, rhs in ((1.0, hif[pairwise]), (-1.0, -lof[pairwise])):
                k = len(rhs)
                rows = self.nineq + np.arange(k)
                self.ineq.add(rows, posf[pairwise], np.full(k, sign))
                self.ineq.add(rows, negf[pairwise], np.full(k, -sign))
                self.h_parts.append(rhs)
                self.nineq += k

        # state costs and boxes (on x_1 .. x_H)
        statef = state.reshape(-1)
        xlin, xquad = cost.x_lin.reshape(-1), cost.x_quad.reshape(-1)
        if np.any(xlin != 0.0):
            nz = xlin != 0.0
            self.add_q(statef[nz], xlin[nz])
        if np.any(xquad > 0.0):
            nz = xquad > 0.0
            self.P.add(statef[nz], statef[nz], xquad[nz])
        xlo, xhi = cost.x_lo.reshape(-1), cost.x_hi.reshape(-1)
        self._bound_rows(statef, 1.0, xhi, np.isfinite(xhi))
        self._bound_rows(statef, -1.0, -xlo, np.isfinite(xlo))

        # dynamics equalities x_{tau+1} - A x_tau - B u_tau = c (x_0 is data)
        rows = (self.neq + np.arange(H * n)).reshape(H, n)
        self.eq.add(rows.reshape(-1), statef, np.ones(H * n))
        if H > 1:
            self.eq.add(
                np.repeat(rows[1:].reshape(-1), n),
                np.repeat(state[:-1][:, None, :], n, axis=1).reshape(-1),
                -dyn.A[1:].reshape(-1),
            )
        self.eq.add(
            np.repeat(rows.reshape(-1), m),
            np.repeat(pos[:, None, :], n, axis=1).reshape(-1),
            -dyn.B.reshape(-1),
        )
        negmask = np.repeat(split[:, None, :], n, axis=1).reshape(-1)
        if negmask.any():
            self.eq.add(
                np.repeat(rows.reshape(-1), m)[negmask],
                np.repeat(neg[:, None, :], n, axis=1).reshape(-1)[negmask],
                dyn.B.reshape(-1)[negmask],
            )
        rhs = dyn.c.copy()
        rhs[0] += dyn.A[0] @ problem.x_init
        self.b_parts.append(rhs.reshape(-1))
        self.neq += H * n

        # terminal affine equality on x_H
        if cost.E_term is not None:
            k = len(cost.f_term)
            rows = self.neq + np.arange(k)
            nz = cost.E_term != 0.0
            if nz.any():
                self.eq.add(
                    np.repeat(rows, n)[nz.reshape(-1)],
                    np.tile(state[-1], k)[nz.reshape(-1)],
                    cost.E_term.reshape(-1)[nz.reshape(-1)],
                )
            self.b_parts.append(cost.f_term.astype(float))
            self.neq += k

        # pinned first input
        if problem.first_input_fixed is not None:
            for j in range(m):
                cp, cn = pos[0, j], neg[0, j]
                if cn >= 0:
                    self.add_eq_row([cp, cn], [1.0, -1.0], float(problem.first_input_fixed[j]))
                else:
                    self.add_eq_row(cp, 1.0, float(problem.first_input_fixed[j]))

        # proximal term on the first input (single-problem form)
        if problem.prox is not None:
            ref, rho = problem.prox
            for j in range(m):
                self._add_prox_quadratic(pos[0, j], neg[0, j], ref[j], rho)

        return BlockLayout(pos, neg, state)

    def _add_prox_quadratic(self, cp: int, cn: int, ref: float, rho: float):
        """rho/2 (u - ref)^2 with u = z[cp] (- z[cn] when split)."""
        if cn >= 0:
            self.P.add([cp, cn, cp], [cp, cn, cn], [rho, rho, -rho])
            self.add_q([cp, cn], [-rho * ref, rho * ref])
        else:
            self.P.add(cp, cp, rho)
            self.add_q(cp, -rho * ref)
        self.const += 0.5 * rho * ref * ref

    def finish(self, shared: np.ndarray | None, blocks: list[BlockLayout]) -> CanonicalQP:
        q = np.zeros(self.ncols)
        for cols, vals in self.q_entries:
            np.add.at(q, cols, vals)
        return CanonicalQP(
            P=self.P.matrix((self.ncols, self.ncols)),
            q=q,
            A_eq=self.eq.matrix((self.neq, self.ncols)),
            b_eq=np.concatenate(self.b_parts) if self.b_parts else np.zeros(0),
            G=self.ineq.matrix((self.nineq, self.ncols)),
            h=np.concatenate(self.h_parts) if self.h_parts else np.zeros(0),
            const=self.const,
            shared=shared,
            blocks=tuple(blocks),
        )


def canonicalize(problem: PlanProblem) -> CanonicalQP:
    """Standard-form QP for a single planning problem.

    Inputs with a positive absolute-value coefficient are split as
    u = u+ - u- with costs (lin + abs) and (-lin + abs); all other inputs
    stay as single columns, so without absolute values the variable count is
    exactly H(m + n).
    """
    b = _Builder()
    block = b.add_block(problem)
    return b.finish(None, [block])


def canonicalize_coupled(
    problems: list[PlanProblem],
    prox: tuple[np.ndarray, float] | None = None,
) -> CanonicalQP:
    """Coupled QP: one block per scenario plus a shared first input.

    Every block's first input is tied to the shared variable by an equality;
    the optional prox term applies to the shared input.  Scenario weighting
    is expected to be folded into each problem's cost (see StageCost.scaled).
    """
    if not problems:
        raise ValueError("need at least one scenario problem")
    m = problems[0].dynamics.m
    for p in problems:
        if p.dynamics.m != m:
            raise ValueError("all scenarios must share the first-input dimension")
        if p.prox is not None or p.first_input_fixed is not None:
            raise ValueError("per-scenario prox/fixed input not allowed in the coupled form")

    b = _Builder()
    shared = b.new_cols(m)
    # shared input box: intersection over scenarios of the stage-0 boxes
    lo = np.max([p.cost.u_lo[0] for p in problems], axis=0)
    hi = np.min([p.cost.u_hi[0] for p in problems], axis=0)
    for j in range(m):
        b.add_box(shared[j], lo[j], hi[j])
    if prox is not None:
        ref, rho = prox
        ref = np.atleast_1d(np.asarray(ref, dtype=float))
        for j in range(m):
            b._add_prox_quadratic(shared[j], -1, float(ref[j]), float(rho))

    blocks = []
    for p in problems:
        block = b.add_block(p)
        for j in range(m):
            cp, cn = block.pos[0, j], block.neg[0, j]
            if cn >= 0:
                b.add_eq_row([cp, cn, shared[j]], [1.0, -1.0, -1.0], 0.0)
            else:
                b.add_eq_row([cp, shared[j]], [1.0, -1.0], 0.0)
        blocks.append(block)
    return b.finish(shared, blocks)


@dataclass(frozen=True)
class QPSolution:
    """Primal/dual answer plus the residuals certified from it."""

    z: np.ndarray
    y_eq: np.ndarray
    y_ineq: np.ndarray
    status: str
    objective: float
    residuals: dict
    solve_time: float


def solve(qp: CanonicalQP) -> QPSolution:
    """Solve the canonical QP and certify the result.

    Returns status "optimal" only when the backend reports success and the
    recomputed primal residuals are <= 1e-6 and the stationarity residual is
    <= 1e-6 (1 + max|q|).
    """
    t0 = time.perf_counter()
    neq, nineq = qp.A_eq.shape[0], qp.G.shape[0]
    A = sp.vstack([qp.A_eq, qp.G], format="csc") if nineq else qp.A_eq.tocsc()
    bvec = np.concatenate([qp.b_eq, qp.h])
    cones = []
    if neq:
        cones.append(clarabel.ZeroConeT(neq))
    if nineq:
        cones.append(clarabel.NonnegativeConeT(nineq))

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = MAX_ITER
    settings.tol_feas = SOLVER_TOL
    settings.tol_gap_abs = SOLVER_TOL
    settings.tol_gap_rel = SOLVER_TOL

    solver = clarabel.DefaultSolver(qp.P, qp.q, A, bvec, cones, settings)
    raw = solver.solve()
    elapsed = time.perf_counter() - t0

    z = np.asarray(raw.x, dtype=float)
    y = np.asarray(raw.z, dtype=float)
    y_eq, y_in = y[:neq], y[neq:]
    status_name = str(raw.status)

    if status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return QPSolution(z, y_eq, y_in, INFEASIBLE, np.inf, {"backend_status": status_name}, elapsed)

    residuals = _kkt_residuals(qp, z, y_eq, y_in)
    residuals["backend_status"] = status_name
    ok = (
        status_name in ("Solved", "AlmostSolved")
        and residuals["primal_eq"] <= FEAS_TOL
        and residuals["primal_ineq"] <= FEAS_TOL
        and residuals["stationarity"] <= STAT_TOL * (1.0 + residuals["q_scale"])
    )
    status = OPTIMAL if ok else FAILURE
    return QPSolution(z, y_eq, y_in, status, qp.objective(z), residuals, elapsed)


def _kkt_residuals(qp: CanonicalQP, z, y_eq, y_in) -> dict:
    grad = qp.sym_product(z) + qp.q
    if len(y_eq):
        grad = grad + qp.A_eq.T @ y_eq
    comp = 0.0
    if len(y_in):
        slack = qp.h - qp.G @ z
        grad = grad + qp.G.T @ y_in
        comp = float(np.max(np.abs(y_in * slack))) if len(slack) else 0.0
    return {
        "primal_eq": float(np.max(np.abs(qp.A_eq @ z - qp.b_eq))) if len(qp.b_eq) else 0.0,
        "primal_ineq": float(np.max(np.maximum(qp.G @ z - qp.h, 0.0))) if len(qp.h) else 0.0,
        "stationarity": float(np.max(np.abs(grad))),
        "complementarity": comp,
        "q_scale": float(np.max(np.abs(qp.q))) if len(qp.q) else 0.0,
    }


def recover_inputs(qp: CanonicalQP, z: np.ndarray, block: int = 0) -> np.ndarray:
    lay = qp.blocks[block]
    u = z[lay.pos]
    has_neg = lay.neg >= 0
    u = np.where(has_neg, u - z[np.where(has_neg, lay.neg, 0)], u)
    return u


@dataclass(frozen=True)
class Plan:
    """States, inputs, objective and certification residuals of one solve."""

    u: np.ndarray  # (H, m)
    x: np.ndarray  # (H, n), states x_1..x_H
    objective: float
    status: str
    residuals: dict


def _plan_residuals(problem: PlanProblem, u: np.ndarray, x: np.ndarray) -> dict:
    dyn, cost = problem.dynamics, problem.cost
    xs = np.vstack([problem.x_init, x])
    dyn_res = max(
        float(np.max(np.abs(xs[t + 1] - dyn.A[t] @ xs[t] - dyn.B[t] @ u[t] - dyn.c[t])))
        for t in range(dyn.horizon)
    )
    box = max(
        float(np.max(np.maximum(cost.u_lo - u, 0.0))),
        float(np.max(np.maximum(u - cost.u_hi, 0.0))),
        float(np.max(np.maximum(np.where(np.isfinite(cost.x_lo), cost.x_lo - x, 0.0), 0.0))),
        float(np.max(np.maximum(np.where(np.isfinite(cost.x_hi), x - cost.x_hi, 0.0), 0.0))),
    )
    term = 0.0
    if cost.E_term is not None:
        term = float(np.max(np.abs(cost.E_term @ x[-1] - cost.f_term)))
    return {"dynamics": dyn_res, "box": box, "terminal": term}


def solve_plan(problem: PlanProblem) -> Plan:
    """Canonicalize, solve, and recover the plan with residual checks."""
    qp = canonicalize(problem)
    sol = solve(qp)
    if sol.status != OPTIMAL:
        return Plan(
            np.zeros((problem.horizon, problem.dynamics.m)),
            np.zeros((problem.horizon, problem.dynamics.n)),
            np.inf,
            sol.status,
            sol.residuals,
        )
    u = recover_inputs(qp, sol.z)
    x = sol.z[qp.blocks[0].state]
    residuals = dict(sol.residuals)
    residuals.update(_plan_residuals(problem, u, x))
    return Plan(u, x, sol.objective, sol.status, residuals)


@dataclass(frozen=True)
class CoupledSolution:
    """Result of a coupled multi-scenario solve with a shared first input."""

    u_first: np.ndarray
    objective: float
    status: str
    residuals: dict
    plans: tuple[Plan, ...] | None
    solve_time: float


def solve_coupled(
    problems: list[PlanProblem],
    prox: tuple[np.ndarray, float] | None = None,
    return_plans: bool = False,
) -> CoupledSolution:
    """Solve scenarios coupled through their shared first input."""
    qp = canonicalize_coupled(problems, prox)
    sol = solve(qp)
    if sol.status != OPTIMAL:
        return CoupledSolution(
            np.zeros(problems[0].dynamics.m), np.inf, sol.status, sol.residuals, None, sol.solve_time
        )
    u_first = sol.z[qp.shared]
    plans = None
    if return_plans:
        plans = tuple(
            Plan(
                recover_inputs(qp, sol.z, i),
                sol.z[qp.blocks[i].state],
                np.nan,
                sol.status,
                {},
            )
            for i in range(len(problems))
        )
    return CoupledSolution(u_first, sol.objective, sol.status, sol.residuals, plans, sol.solve_time)


def evaluate_cost(problem: PlanProblem, u: np.ndarray, x: np.ndarray) -> float:
    """Objective of a (u, x) pair under the true (unsplit) cost, prox included."""
    cost = problem.cost
    total = float(
        np.sum(cost.u_lin * u)
        + np.sum(cost.u_abs * np.abs(u))
        + 0.5 * np.sum(cost.u_quad * u * u)
        + np.sum(cost.x_lin * x)
        + 0.5 * np.sum(cost.x_quad * x * x)
    )
    if problem.prox is not None:
        ref, rho = problem.prox
        total += 0.5 * rho * float(np.sum((u[0] - ref) ** 2))
    return total


def scenario_value(problem: PlanProblem, u_fixed, weight: float = 1.0) -> float:
    """Optimal recourse cost with the first input pinned: w * F(u_fixed).

    Returns +inf when u_fixed violates the first-stage input box or the
    pinned problem is infeasible.
    """
    u_fixed = np.atleast_1d(np.asarray(u_fixed, dtype=float))
    if np.any(u_fixed < problem.cost.u_lo[0] - 1e-9) or np.any(u_fixed > problem.cost.u_hi[0] + 1e-9):
        return np.inf
    pinned = replace(
        problem,
        cost=problem.cost.scaled(weight) if weight != 1.0 else problem.cost,
        prox=None,
        first_input_fixed=u_fixed,
    )
    plan = solve_plan(pinned)
    if plan.status == INFEASIBLE:
        return np.inf
    if plan.status != OPTIMAL:
        raise SolverFailure(f"scenario value solve failed: {plan.residuals}")
    return plan.objective


def prox_step(problem: PlanProblem, u_prev, alpha: float, weight: float = 1.0) -> np.ndarray:
    """argmin alpha * w * F(u) + 1/2 ||u - u_prev||^2 over the first input.

    Solved in unfolded form: the scenario plan problem with its cost scaled
    by alpha * w plus the quadratic proximal term on the first input.
    """
    if alpha <= 0:
        raise ValueError("prox step size must be positive")
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    scaled = replace(
        problem,
        cost=problem.cost.scaled(alpha * weight),
        prox=(u_prev, 1.0),
        first_input_fixed=None,
    )
    plan = solve_plan(scaled)
    if plan.status == INFEASIBLE:
        raise SolverFailure("prox step: scenario problem has an empty feasible set")
    if plan.status != OPTIMAL:
        raise SolverFailure(f"prox step solve failed: {plan.residuals}")
    return plan.u[0]
