"""Average-cost constrained MDP via the occupation-measure linear program.

The decision variables are the stationary joint probabilities x(z, a). Flow
balance, normalization and one row per finite aging bound make the feasible
set; the optimal randomized policy is x(z, a) / sum_a x(z, a).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components
from scipy.sparse.linalg import spsolve

from . import lp
from .aging import CONSTRAINT_NAMES, AgingBounds, CostSpec
from .system import STATE_ORDERING, Kernel

log = logging.getLogger(__name__)

OCCUPATION_TOL = 1e-9
BALANCE_TOL = 1e-8
UNREACHED_MASS = 1e-12
POLICY_FORMAT = "ehsaging-policy v1"


class InfeasibleBoundsError(RuntimeError):
    def __init__(self, message: str, violated: dict):
        super().__init__(message)
        self.violated = violated


class StationarySolveError(RuntimeError):
    pass


@dataclass(eq=False)
class Policy:
    """Randomized stationary policy, ``mu[z, a_idx]``."""

    mu: np.ndarray
    actions: tuple = (0, 1)
    config_hash: str = ""

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if self.mu.ndim != 2 or self.mu.shape[1] != len(self.actions):
            raise ValueError("mu must have shape (|Z|, |A|)")
        if np.any(self.mu < -OCCUPATION_TOL) or np.abs(self.mu.sum(axis=1) - 1.0).max() > OCCUPATION_TOL:
            raise ValueError("every policy row must be a probability distribution")

    @property
    def n_states(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def constant(cls, n_states: int, actions, a_idx: int = 0) -> "Policy":
        mu = np.zeros((n_states, len(actions)))
        mu[:, a_idx] = 1.0
        return cls(mu, tuple(actions))

    def randomized_states(self, tol: float = 1e-9) -> np.ndarray:
        return np.flatnonzero((self.mu > tol).sum(axis=1) > 1)

    def save(self, path) -> None:
        rows = [
            f"# {POLICY_FORMAT}",
            f"# ordering: {STATE_ORDERING}",
            f"# config_hash: {self.config_hash}",
            f"# n_states: {self.n_states}",
            "# actions: " + ",".join(str(a) for a in self.actions),
            "state,action,probability",
        ]
        zs, acts = np.nonzero(self.mu > 0.0)
        rows += [f"{z},{a},{float(self.mu[z, a])!r}" for z, a in zip(zs, acts)]
        Path(path).write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, path) -> "Policy":
        header = {}
        data = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                header[key.strip()] = val.strip()
            elif line and not line.startswith("state"):
                z, a, p = line.split(",")
                data.append((int(z), int(a), float(p)))
        try:
            n = int(header["n_states"])
            actions = tuple(int(a) for a in header["actions"].split(","))
        except KeyError as exc:
            raise ValueError(f"policy file {path} lacks header field {exc}") from None
        mu = np.zeros((n, len(actions)))
        for z, a, p in data:
            mu[z, a] = p
        return cls(mu, actions, header.get("config_hash", ""))


@dataclass(eq=False)
class Diagnostics:
    status: str
    objective: float
    achieved: dict
    bounds: dict
    binding: list
    randomized_states: int
    iterations: int
    recurrent_classes: int | None = None

    def rows(self) -> list[tuple]:
        out = [("objective", self.objective, math.nan, False)]
        for name in CONSTRAINT_NAMES:
            out.append((name, self.achieved[name], self.bounds[name], name in self.binding))
        return out


@dataclass(eq=False)
class CmdpResult:
    policy: Policy
    occupation: np.ndarray
    diagnostics: Diagnostics
    solution: lp.LpSolution = field(repr=False)


def _collapse(n_states: int, n_actions: int) -> sp.csr_matrix:
    n = n_states * n_actions
    return sp.csr_matrix((np.ones(n), (np.repeat(np.arange(n_states), n_actions), np.arange(n))), shape=(n_states, n))


def build_lp(kernel: Kernel, costs: CostSpec, bounds: AgingBounds) -> lp.LpProblem:
    nz, na = kernel.n_states, kernel.n_actions
    if costs.objective.shape != (nz, na):
        raise ValueError(f"cost arrays have shape {costs.objective.shape}, kernel expects {(nz, na)}")
    balance = (_collapse(nz, na) - kernel.matrix.T).tocsr()
    a_eq = sp.vstack([balance, sp.csr_matrix(np.ones((1, nz * na)))]).tocsr()
    b_eq = np.zeros(nz + 1)
    b_eq[-1] = 1.0
    finite = [k for k, v in enumerate(bounds.values) if math.isfinite(v)]
    a_ub = np.array([costs.constraints[k].ravel() for k in finite]).reshape(len(finite), nz * na)
    b_ub = np.array([bounds.values[k] for k in finite])
    names = [f"balance{z}" for z in range(nz)] + ["normalization"] + [CONSTRAINT_NAMES[k] for k in finite]
    return lp.LpProblem(costs.objective.ravel(), a_eq, b_eq, sp.csr_matrix(a_ub), b_ub, row_names=names)


def extract_policy(x: np.ndarray, n_states: int, actions, kernel: Kernel | None = None) -> Policy:
    """Normalize the occupation measure per state.

    States without occupation mass are never visited by the stationary chain,
    but a rollout may start in one. With ``kernel`` given they are routed
    towards the visited set: working backwards from it, each such state takes
    the action with the largest one-step probability of entering the states
    already routed. States that cannot reach the visited set idle.
    """
    occ = np.maximum(np.asarray(x, dtype=float).reshape(n_states, len(actions)), 0.0)
    mass = occ.sum(axis=1)
    mu = np.zeros_like(occ)
    seen = mass > UNREACHED_MASS
    mu[seen] = occ[seen] / mass[seen, None]
    routed = seen.copy()
    if kernel is not None:
        mats = [kernel.action_matrix(a) for a in range(len(actions))]
        while not routed.all():
            into = np.column_stack([P @ routed.astype(float) for P in mats])
            best = into.argmax(axis=1)
            new = ~routed & (into.max(axis=1) > 0.0)
            if not new.any():
                break
            mu[new, best[new]] = 1.0
            routed |= new
    mu[~routed, list(actions).index(0)] = 1.0
    return Policy(mu, tuple(actions))


def closed_classes(P: sp.csr_matrix) -> tuple[np.ndarray, list[int]]:
    """Strongly connected component labels and the labels of closed components."""
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    mask = (labels[coo.row] != labels[coo.col]) & (coo.data > 0)
    leaving[labels[coo.row[mask]]] = True
    return labels, [c for c in range(n_comp) if not leaving[c]]


def _class_stationary(P: sp.csr_matrix, members: np.ndarray) -> np.ndarray:
    sub = P[members][:, members]
    k = members.size
    if k == 1:
        return np.ones(1)
    M = (sub.T - sp.identity(k)).tolil()
    M[k - 1, :] = np.ones(k)
    rhs = np.zeros(k)
    rhs[-1] = 1.0
    pi = spsolve(M.tocsc(), rhs)
    if not np.all(np.isfinite(pi)):
        raise StationarySolveError("stationary solve on a recurrent class failed")
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def stationary_state_distribution(P: sp.csr_matrix, initial=0) -> tuple[np.ndarray, int]:
    """Long-run state distribution of the chain started from ``initial``.

    ``initial`` is a state index or a distribution over states. When several
    recurrent classes are reachable the result is their mixture weighted by
    absorption probabilities. Returns (distribution, number of classes reached).
    """
    P = sp.csr_matrix(P)
    n = P.shape[0]
    if np.isscalar(initial):
        init = np.zeros(n)
        init[int(initial)] = 1.0
    else:
        init = np.asarray(initial, dtype=float)
    labels, closed = closed_classes(P)
    starts = np.flatnonzero(init > 0)
    reach = np.zeros(n, dtype=bool)
    for s in starts:
        reach[breadth_first_order(P, int(s), directed=True, return_predecessors=False)] = True
    closed = [c for c in closed if np.any(reach & (labels == c))]
    is_closed = np.isin(labels, closed)
    pi = np.zeros(n)
    if len(closed) == 1:
        members = np.flatnonzero(labels == closed[0])
        pi[members] = _class_stationary(P, members)
        return pi, 1
    transient = np.flatnonzero(reach & ~is_closed)
    for c in closed:
        members = np.flatnonzero(labels == c)
        weight = init[members].sum()
        if transient.size:
            P_tt = P[transient][:, transient]
            into = np.asarray(P[transient][:, members].sum(axis=1)).ravel()
            absorb = spsolve((sp.identity(transient.size) - P_tt).tocsc(), into)
            weight += float(init[transient] @ np.atleast_1d(absorb))
        pi[members] = weight * _class_stationary(P, members)
    if not np.isfinite(pi).all() or abs(pi.sum() - 1.0) > 1e-8:
        raise StationarySolveError("absorption probabilities did not normalize")
    return pi, len(closed)


def evaluate_policy(policy: Policy, kernel: Kernel, costs: CostSpec, initial=0) -> tuple[float, np.ndarray]:
    """Long-run averages (C, D[4]) of ``policy`` from ``initial``."""
    if policy.mu.shape != (kernel.n_states, kernel.n_actions):
        raise ValueError("policy does not match the kernel's state/action space")
    pi, _ = stationary_state_distribution(kernel.induced(policy.mu), initial)
    joint = pi[:, None] * policy.mu
    C = float(np.sum(joint * costs.objective))
    D = np.einsum("za,kza->k", joint, costs.constraints)
    return C, D


def occupation_residuals(x: np.ndarray, kernel: Kernel) -> dict:
    nz, na = kernel.n_states, kernel.n_actions
    balance = _collapse(nz, na) @ x - kernel.matrix.T @ x
    return {
        "balance": float(np.abs(balance).max()),
        "normalization": float(abs(x.sum() - 1.0)),
        "min_entry": float(x.min()),
    }


def _start_policies(kernel: Kernel):
    space, acts = kernel.space, kernel.config.actions
    top = len(acts) - 1
    yield np.where(space.w > 0, top, 0)
    yield np.full(kernel.n_states, top)
    yield np.zeros(kernel.n_states, dtype=np.int64)


def basis_hint(kernel: Kernel, problem: lp.LpProblem) -> tuple | None:
    """Start the simplex from the stationary distribution of a simple deterministic policy.

    A policy with a single recurrent class gives a feasible basis for the
    balance and normalization rows: its columns plus an artificial on one
    (redundant) balance row.
    """
    nz, na = kernel.n_states, kernel.n_actions
    rows = np.concatenate([[nz - 1], problem.n_eq + np.arange(problem.n_ub)])
    for choice in _start_policies(kernel):
        mu = np.zeros((nz, na))
        mu[np.arange(nz), choice] = 1.0
        _, closed = closed_classes(kernel.induced(mu))
        if len(closed) == 1:
            return np.arange(nz) * na + choice, rows
    return None


def solve_lp(problem: lp.LpProblem, backend: str = "simplex", basis_hint=None) -> lp.LpSolution:
    if backend == "simplex":
        return lp.solve(problem, basis_hint=basis_hint)
    if backend == "highs":
        from scipy.optimize import linprog

        res = linprog(
            problem.c,
            A_ub=problem.a_ub if problem.n_ub else None,
            b_ub=problem.b_ub if problem.n_ub else None,
            A_eq=problem.a_eq,
            b_eq=problem.b_eq,
            bounds=(0, None),
            method="highs-ds",
        )
        status = {0: lp.LpStatus.OPTIMAL, 2: lp.LpStatus.INFEASIBLE, 3: lp.LpStatus.UNBOUNDED}.get(res.status)
        if status is None:
            raise lp.LpNumericalError(res.message)
        if status is not lp.LpStatus.OPTIMAL:
            return lp.LpSolution(status, message=res.message)
        return lp.LpSolution(status, res.x, float(res.fun), iterations=int(res.nit))
    raise ValueError(f"unknown LP backend {backend!r}")


def _violated_bounds(kernel: Kernel, costs: CostSpec, bounds: AgingBounds, backend: str) -> dict:
    """Smallest achievable value of each finite-bounded average, where it exceeds its bound."""
    out = {}
    for k, (name, bound) in enumerate(zip(CONSTRAINT_NAMES, bounds.values)):
        if not math.isfinite(bound):
            continue
        alone = CostSpec(costs.constraints[k], costs.constraints)
        problem = build_lp(kernel, alone, AgingBounds())
        sol = solve_lp(problem, backend, basis_hint(kernel, problem))
        if sol.optimal and sol.objective > bound + 1e-9:
            out[name] = {"bound": bound, "min_achievable": sol.objective}
    return out


def solve_cmdp(kernel: Kernel, costs: CostSpec, bounds: AgingBounds, backend: str = "simplex") -> CmdpResult:
    problem = build_lp(kernel, costs, bounds)
    sol = solve_lp(problem, backend, basis_hint(kernel, problem))
    if sol.status is lp.LpStatus.INFEASIBLE:
        violated = _violated_bounds(kernel, costs, bounds, backend)
        detail = ", ".join(f"{k} <= {v['bound']:g} (min achievable {v['min_achievable']:.6g})" for k, v in violated.items())
        raise InfeasibleBoundsError(
            "aging bounds are jointly infeasible" + (f"; individually violated: {detail}" if detail else ""),
            violated,
        )
    if not sol.optimal:
        raise lp.LpNumericalError(f"LP returned status {sol.status.value}: {sol.message}")
    nz, na = kernel.n_states, kernel.n_actions
    x = np.maximum(sol.x, 0.0)
    policy = extract_policy(x, nz, kernel.config.actions, kernel)
    occ = x.reshape(nz, na)
    achieved = {n: float(np.sum(occ * costs.constraints[k])) for k, n in enumerate(CONSTRAINT_NAMES)}
    bound_map = dict(zip(CONSTRAINT_NAMES, bounds.values))
    binding = [n for n in CONSTRAINT_NAMES if math.isfinite(bound_map[n]) and achieved[n] >= bound_map[n] - 1e-7]
    diag = Diagnostics(
        status=sol.status.value,
        objective=sol.objective,
        achieved=achieved,
        bounds=bound_map,
        binding=binding,
        randomized_states=int(policy.randomized_states().size),
        iterations=sol.iterations,
        recurrent_classes=len(closed_classes(kernel.induced(policy.mu))[1]),
    )
    return CmdpResult(policy, x, diag, sol)


def relative_value_iteration(
    kernel_matrix: sp.csr_matrix,
    cost: np.ndarray,
    *,
    ref_state: int = 0,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 200_000,
) -> tuple[float, np.ndarray]:
    """Optimal average cost and a greedy deterministic policy by relative value iteration.

    ``kernel_matrix`` has rows ``z * |A| + a``. The aperiodicity transform
    P -> damping * P + (1 - damping) * I leaves gains unchanged.
    """
    nz, na = cost.shape
    P = sp.csr_matrix(kernel_matrix)
    c = cost.ravel()
    h = np.zeros(nz)
    gain = 0.0
    for _ in range(max_iter):
        q = c + damping * (P @ h) + (1.0 - damping) * np.repeat(h, na)
        t = q.reshape(nz, na).min(axis=1)
        diff = t - h
        span = diff.max() - diff.min()
        gain = 0.5 * (diff.max() + diff.min())
        h = t - t[ref_state]
        if span < tol:
            break
    else:
        raise StationarySolveError("relative value iteration did not converge")
    q = (c + damping * (P @ h) + (1.0 - damping) * np.repeat(h, na)).reshape(nz, na)
    return gain, q.argmin(axis=1)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
