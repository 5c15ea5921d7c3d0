"""Finite Markov chains with per-state emission distributions.

The harvesting and load processes are both two-state "burst" chains: state 1
emits, state 0 is silent, and the chain is parameterized by its long-run
arrival rate ``phi`` and the mean length ``b`` of a run of 1s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ROW_TOL = 1e-12


class ReducibleChainError(ValueError):
    """The chain has more than one communicating class."""


@dataclass(frozen=True)
class BurstParams:
    phi: float
    b: float

    def __post_init__(self):
        if not 0.0 < self.phi < 1.0:
            raise ValueError(f"phi must lie in (0, 1), got {self.phi}")
        if self.b < 1.0:
            raise ValueError(f"b must be >= 1, got {self.b}")
        up = self.phi / (self.b * (1.0 - self.phi))
        if up > 1.0:
            raise ValueError(
                f"phi={self.phi}, b={self.b} gives p(1|0)={up:.6g} > 1; "
                "the mean burst must be longer for this rate"
            )

    @property
    def p_leave_burst(self) -> float:
        """p(0|1)."""
        return 1.0 / self.b

    @property
    def p_enter_burst(self) -> float:
        """p(1|0)."""
        return self.phi / (self.b * (1.0 - self.phi))


@dataclass(frozen=True, eq=False)
class FiniteChain:
    transition: np.ndarray

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise ValueError(f"transition must be a non-empty square matrix, got shape {P.shape}")
        if np.any(P < 0.0) or np.any(P > 1.0):
            raise ValueError("transition entries must lie in [0, 1]")
        dev = np.abs(P.sum(axis=1) - 1.0).max()
        if dev > ROW_TOL:
            raise ValueError(f"transition rows must sum to 1 (max deviation {dev:.3g})")
        P.setflags(write=False)
        object.__setattr__(self, "transition", P)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True, eq=False)
class EmissionDist:
    """Per-state discrete distribution over non-negative unit counts.

    ``support[s]`` and ``probs[s]`` are parallel arrays for state ``s``.
    """

    support: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.support) != len(self.probs):
            raise ValueError("support and probs must have one entry per state")
        sup, prb = [], []
        for s, (vals, ps) in enumerate(zip(self.support, self.probs)):
            vals = np.asarray(vals, dtype=np.int64).ravel()
            ps = np.asarray(ps, dtype=float).ravel()
            if vals.shape != ps.shape or vals.size == 0:
                raise ValueError(f"state {s}: support and probs must be non-empty and aligned")
            if np.any(vals < 0):
                raise ValueError(f"state {s}: emitted unit counts must be non-negative")
            if np.any(ps < 0.0) or abs(ps.sum() - 1.0) > ROW_TOL:
                raise ValueError(f"state {s}: probabilities must be >= 0 and sum to 1")
            vals.setflags(write=False)
            ps.setflags(write=False)
            sup.append(vals)
            prb.append(ps)
        object.__setattr__(self, "support", tuple(sup))
        object.__setattr__(self, "probs", tuple(prb))

    @classmethod
    def from_mappings(cls, per_state: Sequence[Mapping[int, float]]) -> "EmissionDist":
        support = [sorted(int(k) for k in m) for m in per_state]
        probs = [[float(m[k]) for k in keys] for m, keys in zip(per_state, support)]
        return cls(tuple(support), tuple(probs))

    @classmethod
    def point_masses(cls, units: Sequence[int]) -> "EmissionDist":
        """State ``s`` emits exactly ``units[s]`` with probability one."""
        return cls(tuple([u] for u in units), tuple([1.0] for _ in units))

    @property
    def n_states(self) -> int:
        return len(self.support)

    def max_units(self) -> int:
        return int(max(v.max() for v in self.support))


def build_burst_chain(params: BurstParams) -> FiniteChain:
    """Two-state arrival chain; state 1 is the arrival state."""
    leave = params.p_leave_burst
    enter = params.p_enter_burst
    return FiniteChain(np.array([[1.0 - enter, enter], [leave, 1.0 - leave]]))


def burst_emissions(units: int = 1) -> EmissionDist:
    """State 0 emits nothing, state 1 emits ``units`` with probability one."""
    return EmissionDist.point_masses([0, units])


def is_irreducible(transition) -> bool:
    n_comp, _ = connected_components(csr_matrix(np.asarray(transition) > 0.0), directed=True, connection="strong")
    return n_comp == 1


def stationary_distribution(chain: FiniteChain) -> np.ndarray:
    P = chain.transition
    if not is_irreducible(P):
        raise ReducibleChainError("chain is reducible; the stationary distribution is not unique")
    n = chain.n_states
    # replace one balance equation with the normalization row
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(M, rhs)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def expected_emission(dist: EmissionDist, state: int) -> float:
    if not 0 <= state < dist.n_states:
        raise IndexError(f"state {state} out of range for {dist.n_states}-state emission")
    return float(np.dot(dist.support[state], dist.probs[state]))
