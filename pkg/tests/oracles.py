"""Independent reference computations used as test oracles.

Nothing here imports the solver code under test.
"""

from __future__ import annotations

import itertools

import numpy as np


def enumerate_bfs_min(c, a_eq, b_eq, a_ub, b_ub, tol=1e-9):
    """Minimum of c.x over x >= 0, A_eq x = b_eq, A_ub x <= b_ub by vertex enumeration.

    Converts to standard form with slacks, drops linearly dependent rows
    (after checking they are consistent), and evaluates every basic solution.
    Returns None when no basic feasible solution exists. The caller must make
    sure the problem is bounded.
    """
    c = np.asarray(c, float)
    n = c.size
    a_eq = np.asarray(a_eq, float).reshape(-1, n)
    a_ub = np.asarray(a_ub, float).reshape(-1, n)
    m_eq, m_ub = a_eq.shape[0], a_ub.shape[0]
    A = np.zeros((m_eq + m_ub, n + m_ub))
    A[:m_eq, :n] = a_eq
    A[m_eq:, :n] = a_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.concatenate([np.asarray(b_eq, float).ravel(), np.asarray(b_ub, float).ravel()])
    cost = np.concatenate([c, np.zeros(m_ub)])
    # keep a maximal independent row set
    rows = []
    for i in range(A.shape[0]):
        trial = rows + [i]
        if np.linalg.matrix_rank(A[trial], tol=1e-10) == len(trial):
            rows = trial
    if len(rows) < A.shape[0]:
        full = np.linalg.matrix_rank(np.column_stack([A, b]), tol=1e-10)
        if full > len(rows):
            return None  # inconsistent equalities
    A, b = A[rows], b[rows]
    m, N = A.shape
    if m == 0:
        return 0.0 if np.all(cost >= 0) else None
    combos = np.array(list(itertools.combinations(range(N), m)))
    B = A[:, combos].transpose(1, 0, 2)  # (k, m, m)
    det = np.linalg.det(B)
    ok = np.abs(det) > 1e-10
    xb = np.linalg.solve(B[ok], np.broadcast_to(b, (ok.sum(), m))[..., None])[..., 0]
    feas = np.all(xb >= -tol, axis=1)
    if not feas.any():
        return None
    vals = np.einsum("km,km->k", cost[combos[ok][feas]], xb[feas])
    return float(vals.min())


def closed_class_gains(P: np.ndarray, cost: np.ndarray) -> list[float]:
    """Average cost on every closed class of a dense stochastic matrix."""
    n = P.shape[0]
    reach = (P > 0) | np.eye(n, dtype=bool)
    for k in range(n):  # transitive closure
        reach |= reach[:, [k]] & reach[[k], :]
    recurrent = np.all(~reach | reach.T, axis=1)
    gains, done = [], np.zeros(n, dtype=bool)
    for i in np.flatnonzero(recurrent):
        if done[i]:
            continue
        members = np.flatnonzero(reach[i])
        done[members] = True
        sub = P[np.ix_(members, members)]
        k = members.size
        M = np.vstack([sub.T - np.eye(k), np.ones(k)])
        rhs = np.zeros(k + 1)
        rhs[-1] = 1.0
        pi = np.linalg.lstsq(M, rhs, rcond=None)[0]
        gains.append(float(pi @ cost[members]))
    return gains


def brute_force_optimal_gain(P_by_action: list[np.ndarray], cost: np.ndarray) -> float:
    """Minimum closed-class average cost over all deterministic stationary policies.

    Actions whose transition row and cost coincide in a state are merged
    first; this leaves the set of induced chains unchanged and shrinks the
    enumeration.
    """
    n, na = cost.shape
    options = []
    for z in range(n):
        distinct = []
        for a in range(na):
            if not any(np.array_equal(P_by_action[a][z], P_by_action[b][z]) and cost[z, a] == cost[z, b] for b in distinct):
                distinct.append(a)
        options.append(distinct)
    best = np.inf
    for choice in itertools.product(*options):
        idx = np.array(choice)
        P = np.stack([P_by_action[a][z] for z, a in enumerate(idx)])
        c = cost[np.arange(n), idx]
        best = min(best, min(closed_class_gains(P, c)))
    return best


def random_bounded_lp(rng, n_max=20):
    """Random LP that is feasible (a known 0/1 point satisfies it) and bounded (sum x <= U).

    Returns ``(c, a_eq, b_eq, a_ub, b_ub)`` as dense arrays.
    """
    n = int(rng.integers(2, n_max + 1))
    m_eq = int(rng.integers(0, 3))
    m_ub = int(rng.integers(1, 4))
    x0 = rng.integers(0, 2, n).astype(float)
    c = rng.normal(size=n)
    a_eq = rng.integers(-2, 3, (m_eq, n)).astype(float)
    b_eq = a_eq @ x0
    a_ub = np.vstack([np.ones(n), rng.integers(-2, 3, (m_ub - 1, n))]).astype(float)
    b_ub = a_ub @ x0 + rng.integers(0, 3, m_ub)  # zero slack makes degenerate vertices common
    return c, a_eq, b_eq, a_ub, b_ub
