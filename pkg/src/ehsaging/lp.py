"""Two-phase revised simplex for  min c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  x >= 0.

The basis is held as a sparse LU factorization plus a short file of eta
(column-replacement) updates and is refactorized every ``refactor_every``
pivots. Pricing is Dantzig's rule; after ``stall_limit`` consecutive
degenerate pivots it switches to Bland's rule until the objective moves
again, which rules out cycling. Rows that phase 1 proves redundant keep their
artificial variable basic at zero for the rest of the solve.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
PIVOT_TOL = 1e-10
OPT_TOL = 1e-9
REL_PIVOT_TOL = 1e-7
CLEAN_TOL = 1e-13


class LpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class LpNumericalError(RuntimeError):
    """Singular basis or iteration limit; the solve could not be completed."""


def _as_csr(a, n: int) -> sp.csr_matrix:
    if a is None:
        return sp.csr_matrix((0, n))
    m = sp.csr_matrix(a, dtype=float)
    if m.shape[1] != n:
        raise ValueError(f"constraint matrix has {m.shape[1]} columns, expected {n}")
    return m


@dataclass(eq=False)
class LpProblem:
    c: np.ndarray
    a_eq: sp.csr_matrix | None = None
    b_eq: np.ndarray | None = None
    a_ub: sp.csr_matrix | None = None
    b_ub: np.ndarray | None = None
    row_names: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.a_eq = _as_csr(self.a_eq, n)
        self.a_ub = _as_csr(self.a_ub, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, dtype=float).ravel()
        if self.b_eq.size != self.a_eq.shape[0] or self.b_ub.size != self.a_ub.shape[0]:
            raise ValueError("right-hand side length does not match constraint rows")
        for name, v in (("c", self.c), ("b_eq", self.b_eq), ("b_ub", self.b_ub)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.a_eq.shape[0]

    @property
    def n_ub(self) -> int:
        return self.a_ub.shape[0]

    def residuals(self, x) -> tuple[float, float]:
        """(max |A_eq x - b_eq|, max positive part of A_ub x - b_ub)."""
        eq = float(np.abs(self.a_eq @ x - self.b_eq).max()) if self.n_eq else 0.0
        ub = float(np.maximum(self.a_ub @ x - self.b_ub, 0.0).max()) if self.n_ub else 0.0
        return eq, ub


@dataclass(eq=False)
class LpSolution:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float = float("nan")
    duals_eq: np.ndarray | None = None
    duals_ub: np.ndarray | None = None
    iterations: int = 0
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def _factor(B):
    # Occupation-measure bases are close to I - P^T restricted to a subset of
    # columns; a symmetric ordering keeps the fill several times lower than
    # COLAMD on them.
    return splu(B.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1)


class _Basis:
    """B^{-1} as LU(B0) followed by eta column replacements."""

    def __init__(self, A: sp.csc_matrix, cols: np.ndarray):
        self.A = A
        self.m = A.shape[0]
        try:
            self.lu = _factor(A[:, cols])
        except RuntimeError as exc:
            raise LpNumericalError(f"basis factorization failed: {exc}") from exc
        self.etas: list[tuple[int, np.ndarray]] = []

    def ftran(self, v: np.ndarray) -> np.ndarray:
        u = self.lu.solve(v)
        for r, alpha in self.etas:
            ur = u[r] / alpha[r]
            u -= alpha * ur
            u[r] = ur
        return u

    def btran(self, v: np.ndarray) -> np.ndarray:
        u = v.copy()
        for r, alpha in reversed(self.etas):
            ur = u[r]
            u[r] = 0.0
            u[r] = (ur - alpha @ u) / alpha[r]
        return self.lu.solve(u, trans="T")

    def replace(self, r: int, alpha: np.ndarray) -> None:
        self.etas.append((r, alpha.copy()))


class _Simplex:
    def __init__(self, A, b, basis, barred, feas_tol, pivot_tol, opt_tol, refactor_every, stall_limit, max_iter):
        self.A = A
        self.AT = A.T.tocsr()
        self.b = b
        self.m, self.n = A.shape
        self.basis = np.array(basis, dtype=np.int64)
        self.barred = barred
        self.feas_tol, self.pivot_tol, self.opt_tol = feas_tol, pivot_tol, opt_tol
        self.refactor_every = refactor_every
        self.stall_limit = stall_limit
        self.max_iter = max_iter
        self.iterations = 0
        self.frozen_rows = np.zeros(0, dtype=np.int64)
        self.refactor()

    def refactor(self) -> None:
        self.B = _Basis(self.A, self.basis)
        xb = self.B.ftran(self.b)
        xb[np.abs(xb) < 1e-13] = 0.0
        self.xb = xb

    def pivot(self, r: int, q: int, alpha: np.ndarray, step: float) -> None:
        self.xb -= step * alpha
        self.xb[r] = step
        self.basis[r] = q
        self.B.replace(r, alpha)
        self.iterations += 1
        if len(self.B.etas) >= self.refactor_every:
            self.refactor()

    def reduced_costs(self, cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = self.B.btran(cost[self.basis])
        d = cost - self.AT @ y
        d[self.basis] = 0.0
        d[self.barred] = 0.0
        return y, d

    def run(self, cost: np.ndarray) -> str:
        """Iterate to optimality; returns 'optimal' or 'unbounded'."""
        degenerate_run = 0
        bland = False
        while True:
            if self.iterations >= self.max_iter:
                raise LpNumericalError(f"iteration limit {self.max_iter} reached")
            _, d = self.reduced_costs(cost)
            candidates = np.flatnonzero(d < -self.opt_tol)
            if candidates.size == 0:
                return "optimal"
            q = int(candidates[0]) if bland else int(candidates[np.argmin(d[candidates])])
            a_q = self.A[:, [q]].toarray().ravel()
            alpha = self.B.ftran(a_q)
            alpha_rt = alpha.copy()
            alpha_rt[self.frozen_rows] = 0.0
            rows = np.flatnonzero(alpha_rt > self.pivot_tol)
            if rows.size == 0:
                return "unbounded"
            # relative threshold keeps eta updates well conditioned
            rows = rows[alpha[rows] >= REL_PIVOT_TOL * alpha[rows].max()]
            xb = np.maximum(self.xb[rows], 0.0)
            ratios = xb / alpha[rows]
            best = ratios.min()
            ties = rows[ratios <= best + self.feas_tol * 1e-3]
            if bland:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                # largest pivot among ties, then lowest basis index
                amax = alpha[ties].max()
                big = ties[alpha[ties] >= amax * (1 - 1e-9)]
                r = int(big[np.argmin(self.basis[big])])
            step = max(self.xb[r], 0.0) / alpha[r]
            if step * -d[q] <= 1e-14:
                degenerate_run += 1
                if degenerate_run >= self.stall_limit and not bland:
                    log.debug("stall after %d degenerate pivots; switching to Bland's rule", degenerate_run)
                    bland = True
            else:
                degenerate_run = 0
                bland = False
            self.pivot(r, q, alpha, step)

    def dual_cleanup(self, cost: np.ndarray, tol: float = CLEAN_TOL) -> bool:
        """Dual simplex pivots until x_B >= -tol; False if the rows admit no fix."""
        while True:
            neg = np.flatnonzero(self.xb < -tol)
            if neg.size == 0:
                return True
            if self.iterations >= self.max_iter:
                raise LpNumericalError(f"iteration limit {self.max_iter} reached in cleanup")
            r = int(neg[np.argmin(self.xb[neg])])
            _, d = self.reduced_costs(cost)
            e = np.zeros(self.m)
            e[r] = 1.0
            row = self.AT @ self.B.btran(e)
            row[self.basis] = 0.0
            row[self.barred] = 0.0
            cand = np.flatnonzero(row < -self.pivot_tol)
            cand = cand[row[cand] <= REL_PIVOT_TOL * row[cand].min()]
            if cand.size == 0:
                return False
            ratios = np.maximum(d[cand], 0.0) / -row[cand]
            best = ratios.min()
            ties = cand[ratios <= best + 1e-12]
            q = int(ties[np.argmin(row[ties])])
            alpha = self.B.ftran(self.A[:, [q]].toarray().ravel())
            self.pivot(r, q, alpha, self.xb[r] / alpha[r])

    def drive_out(self, artificial: np.ndarray) -> list[int]:
        """Pivot zero-level artificials out of the basis; returns redundant rows."""
        redundant = []
        is_art = np.zeros(self.n, dtype=bool)
        is_art[artificial] = True
        for r in range(self.m):
            if not is_art[self.basis[r]]:
                continue
            e = np.zeros(self.m)
            e[r] = 1.0
            rho = self.B.btran(e)
            row = self.AT @ rho
            row[is_art] = 0.0
            row[self.basis] = 0.0
            cand = np.flatnonzero(np.abs(row) > 1e-7)
            if cand.size == 0:
                redundant.append(r)
                continue
            q = int(cand[np.argmax(np.abs(row[cand]))])
            alpha = self.B.ftran(self.A[:, [q]].toarray().ravel())
            self.pivot(r, q, alpha, 0.0)
        return redundant


def _ill_conditioned(lu, tol: float = 1e-11) -> bool:
    diag = np.abs(lu.U.diagonal())
    return diag.size > 0 and diag.min() <= tol * diag.max()


def _default_start(b: np.ndarray, m_eq: int, n: int, n_std: int) -> tuple[np.ndarray, np.ndarray]:
    m = b.size
    basis = n_std + np.arange(m)
    art_sign = np.where(b < 0, -1.0, 1.0)
    slack_rows = np.flatnonzero((np.arange(m) >= m_eq) & (b >= 0))
    basis[slack_rows] = n + slack_rows - m_eq
    return basis, art_sign


def _hinted_start(A, b, hint, m_eq, n, n_std, feas_tol):
    """Basis from caller-supplied structural columns; None if unusable."""
    cols, filler_rows = (np.asarray(v, dtype=np.int64) for v in hint)
    m = b.size
    if cols.size + filler_rows.size != m or np.unique(filler_rows).size != filler_rows.size:
        return None
    fill = np.where(filler_rows >= m_eq, n + filler_rows - m_eq, n_std + filler_rows)
    art_sign = np.ones(m)
    A_try = sp.hstack([A, sp.identity(m, format="csc")]).tocsc()
    basis = np.concatenate([cols, fill])
    try:
        lu = _factor(A_try[:, basis])
    except RuntimeError:
        lu = None
    if lu is None or _ill_conditioned(lu):
        log.debug("basis hint is singular; using the default start")
        return None
    xb = lu.solve(b)
    if np.any(xb[: cols.size] < -feas_tol):
        log.debug("basis hint is not primal feasible; using the default start")
        return None
    for pos, row in zip(range(cols.size, m), filler_rows):
        if xb[pos] < 0:
            art_sign[row] = -1.0
            basis[pos] = n_std + row
    return basis, art_sign


def solve(
    problem: LpProblem,
    *,
    feas_tol: float = FEAS_TOL,
    pivot_tol: float = PIVOT_TOL,
    opt_tol: float = OPT_TOL,
    refactor_every: int = 64,
    stall_limit: int = 50,
    max_iter: int | None = None,
    basis_hint: tuple | None = None,
    perturb: float = 1e-7,
) -> LpSolution:
    """Solve ``problem``; infeasible and unbounded outcomes are reported in the status.

    ``basis_hint`` is ``(columns, rows)``: structural columns to start from and
    the rows to cover with their slack (inequality rows) or an artificial
    (equality rows). It is used only if the resulting basis is nonsingular
    and its structural part is nonnegative.

    ``perturb`` > 0 solves a problem whose rhs is nudged by that order of
    magnitude (fixed seed) to break degeneracy, then removes the nudge and
    restores feasibility with dual simplex pivots.
    """
    n = problem.n_vars
    m_eq, m_ub = problem.n_eq, problem.n_ub
    m = m_eq + m_ub
    if m == 0:
        if np.any(problem.c < -opt_tol):
            return LpSolution(LpStatus.UNBOUNDED, message="objective decreases along a free ray")
        return LpSolution(LpStatus.OPTIMAL, np.zeros(n), 0.0, np.zeros(0), np.zeros(0))

    # standard form [x | slacks | artificials], one artificial per row
    A = sp.vstack([
        sp.hstack([problem.a_eq, sp.csr_matrix((m_eq, m_ub))]),
        sp.hstack([problem.a_ub, sp.identity(m_ub, format="csr")]),
    ]).tocsc()
    b = np.concatenate([problem.b_eq, problem.b_ub])
    n_std = n + m_ub
    start = _hinted_start(A, b, basis_hint, m_eq, n, n_std, feas_tol) if basis_hint is not None else None
    if start is None:
        start = _default_start(b, m_eq, n, n_std)
    basis, art_sign = start
    art_cols = n_std + np.arange(m)
    A_full = sp.hstack([A, sp.diags(art_sign, format="csc")]).tocsc()
    n_total = n_std + m
    if max_iter is None:
        max_iter = 50 * (m + n_total) + 1000

    splx = _Simplex(A_full, b, basis, np.zeros(0, dtype=np.int64), feas_tol, pivot_tol, opt_tol,
                    refactor_every, stall_limit, max_iter)
    if perturb > 0:
        # shift the rhs inside the span of the starting basis so every
        # non-artificial basic starts strictly positive
        delta = perturb * (1.0 + np.random.default_rng(0).random(m))
        delta[np.isin(splx.basis, art_cols)] = 0.0
        splx.b = b + A_full[:, splx.basis] @ delta
        splx.refactor()
    in_basis = np.isin(splx.basis, art_cols)
    if np.any(in_basis):
        if np.sum(np.maximum(splx.xb[in_basis], 0.0)) > 0.0:
            cost1 = np.zeros(n_total)
            cost1[art_cols] = 1.0
            splx.run(cost1)
            splx.refactor()
        infeas = float(np.sum(np.maximum(splx.xb[np.isin(splx.basis, art_cols)], 0.0)))
        if infeas > feas_tol * max(1.0, float(np.abs(b).max())):
            return LpSolution(
                LpStatus.INFEASIBLE,
                iterations=splx.iterations,
                message=f"phase 1 ended with infeasibility {infeas:.3g}",
            )
        redundant = splx.drive_out(art_cols)
        if redundant:
            log.debug("%d redundant constraint rows", len(redundant))
        splx.frozen_rows = np.asarray(redundant, dtype=np.int64)
        splx.refactor()
    splx.barred = art_cols
    cost2 = np.zeros(n_total)
    cost2[:n] = problem.c
    outcome = splx.run(cost2)
    if outcome == "unbounded":
        return LpSolution(LpStatus.UNBOUNDED, iterations=splx.iterations, message="unbounded ray found in phase 2")
    if perturb > 0:
        splx.b = b
        splx.refactor()
        if not splx.dual_cleanup(cost2):
            raise LpNumericalError("could not restore primal feasibility after removing the perturbation")
        if splx.run(cost2) == "unbounded":
            return LpSolution(LpStatus.UNBOUNDED, iterations=splx.iterations, message="unbounded ray found in phase 2")
    splx.refactor()
    xs = np.zeros(n_total)
    xs[splx.basis] = splx.xb
    x = xs[:n].copy()
    x[np.abs(x) < 1e-15] = 0.0
    y = splx.B.btran(cost2[splx.basis])
    return LpSolution(
        LpStatus.OPTIMAL,
        x=x,
        objective=float(problem.c @ x),
        duals_eq=y[:m_eq],
        duals_ub=y[m_eq:],
        iterations=splx.iterations,
    )


def write_mps(problem: LpProblem, path, name: str = "LP") -> None:
    """Free-format MPS dump for cross-checking with external solvers."""
    a_eq = problem.a_eq.tocsc()
    a_ub = problem.a_ub.tocsc()
    lines = [f"NAME {name}", "ROWS", " N obj"]
    lines += [f" E e{i}" for i in range(problem.n_eq)]
    lines += [f" L u{i}" for i in range(problem.n_ub)]
    lines.append("COLUMNS")
    for j in range(problem.n_vars):
        # always list the objective entry so that empty columns survive a round trip
        lines.append(f" x{j} obj {float(problem.c[j])!r}")
        for mat, prefix in ((a_eq, "e"), (a_ub, "u")):
            lo, hi = mat.indptr[j], mat.indptr[j + 1]
            for i, v in zip(mat.indices[lo:hi], mat.data[lo:hi]):
                if v != 0.0:
                    lines.append(f" x{j} {prefix}{i} {float(v)!r}")
    lines.append("RHS")
    lines += [f" rhs e{i} {float(v)!r}" for i, v in enumerate(problem.b_eq) if v != 0.0]
    lines += [f" rhs u{i} {float(v)!r}" for i, v in enumerate(problem.b_ub) if v != 0.0]
    lines.append("ENDATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mps(path) -> LpProblem:
    """Read back what :func:`write_mps` produces (free MPS, E/L rows, default bounds)."""
    section = None
    row_kind: dict[str, str] = {}
    eq_rows: list[str] = []
    ub_rows: list[str] = []
    cols: dict[str, int] = {}
    entries: list[tuple[str, int, float]] = []
    rhs: dict[str, float] = {}
    obj_row = None
    with open(path) as fh:
        for raw in fh:
            tok = raw.split()
            if not tok or raw.startswith("*"):
                continue
            if not raw[0].isspace():
                section = tok[0]
                continue
            if section == "ROWS":
                kind, rname = tok
                row_kind[rname] = kind
                if kind == "N":
                    obj_row = rname
                elif kind == "E":
                    eq_rows.append(rname)
                elif kind == "L":
                    ub_rows.append(rname)
                else:
                    raise ValueError(f"unsupported row type {kind}")
            elif section == "COLUMNS":
                cname = tok[0]
                j = cols.setdefault(cname, len(cols))
                for rname, val in zip(tok[1::2], tok[2::2]):
                    entries.append((rname, j, float(val)))
            elif section == "RHS":
                for rname, val in zip(tok[1::2], tok[2::2]):
                    rhs[rname] = float(val)
            elif section in ("BOUNDS", "RANGES"):
                raise ValueError(f"{section} section not supported")
    n = len(cols)
    c = np.zeros(n)
    eq_idx = {r: i for i, r in enumerate(eq_rows)}
    ub_idx = {r: i for i, r in enumerate(ub_rows)}
    eq_t, ub_t = [], []
    for rname, j, v in entries:
        if rname == obj_row:
            c[j] = v
        elif rname in eq_idx:
            eq_t.append((eq_idx[rname], j, v))
        else:
            ub_t.append((ub_idx[rname], j, v))

    def mat(trip, m):
        if not trip:
            return sp.csr_matrix((m, n))
        r, cc, v = zip(*trip)
        return sp.csr_matrix((v, (r, cc)), shape=(m, n))

    return LpProblem(
        c,
        mat(eq_t, len(eq_rows)),
        np.array([rhs.get(r, 0.0) for r in eq_rows]),
        mat(ub_t, len(ub_rows)),
        np.array([rhs.get(r, 0.0) for r in ub_rows]),
    )
