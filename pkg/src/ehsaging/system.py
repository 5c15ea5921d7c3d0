"""Composed state space of the harvesting system and its controlled kernel.

A state is the tuple ``(h, q, w, y, l, lam)``: harvest state, battery charge,
task backlog, index of the smoothed backlog on its grid, load state, and the
charge-direction flag. States are numbered in mixed radix with ``lam``
varying fastest and ``h`` slowest.

The kernel factorizes: harvest and load states move on their own chains,
arrivals are drawn from each chain's emission distribution in the current
state, and charge, backlog, smoothed backlog and flag follow deterministic
update rules given the action and the arrivals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .markov import EmissionDist, FiniteChain

KERNEL_ROW_TOL = 1e-10
STATE_ORDERING = "h,q,w,y,l,lam (lam fastest, h slowest)"


@dataclass(frozen=True)
class SystemConfig:
    q_max: int
    w_max: int
    theta: float
    actions: tuple = (0, 1)
    y_levels: int = 9
    delta_q: float = 1.0
    # An action can only draw energy that is stored: the effective action is
    # min(a, q). With False the update rules are applied to the raw action.
    serve_requires_charge: bool = True

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if self.q_max < 1 or self.w_max < 1:
            raise ValueError("q_max and w_max must be >= 1")
        if self.y_levels < 2:
            raise ValueError("y_levels must be >= 2")
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.delta_q <= 0:
            raise ValueError("delta_q must be positive")
        acts = self.actions
        if not acts or 0 not in acts:
            raise ValueError("action set must be non-empty and contain 0")
        if list(acts) != sorted(set(acts)) or acts[0] < 0:
            raise ValueError("actions must be sorted, distinct and non-negative")
        if acts[-1] > self.q_max:
            raise ValueError("actions must not exceed q_max")

    @property
    def y_grid(self) -> np.ndarray:
        return np.linspace(0.0, float(self.w_max), self.y_levels)

    @property
    def y_step(self) -> float:
        return self.w_max / (self.y_levels - 1)

    def y_index(self, value):
        """Nearest grid index of a smoothed-backlog value, ties rounding up."""
        scaled = np.round(np.asarray(value, dtype=float) / self.y_step, 9)
        idx = np.clip(np.floor(scaled + 0.5), 0, self.y_levels - 1).astype(np.int64)
        return int(idx) if idx.ndim == 0 else idx

    def effective_action(self, q, a):
        return np.minimum(a, q) if self.serve_requires_charge else a


class SystemState(NamedTuple):
    h: int
    q: int
    w: int
    y_idx: int
    l: int
    lam: int


@dataclass(frozen=True)
class Source:
    """A Markov-modulated arrival process: chain plus per-state emissions."""

    chain: FiniteChain
    emission: EmissionDist

    def __post_init__(self):
        if self.chain.n_states != self.emission.n_states:
            raise ValueError(
                f"chain has {self.chain.n_states} states but emission has {self.emission.n_states}"
            )

    @property
    def n_states(self) -> int:
        return self.chain.n_states


@dataclass(frozen=True, eq=False)
class StateSpace:
    n_h: int
    n_q: int
    n_w: int
    n_y: int
    n_l: int
    n_lam: int = 2
    coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        grids = np.indices(self.shape).reshape(6, -1).T.astype(np.int64)
        grids.setflags(write=False)
        object.__setattr__(self, "coords", grids)

    @classmethod
    def for_config(cls, config: SystemConfig, n_h: int, n_l: int) -> "StateSpace":
        return cls(n_h, config.q_max + 1, config.w_max + 1, config.y_levels, n_l)

    @property
    def shape(self) -> tuple:
        return (self.n_h, self.n_q, self.n_w, self.n_y, self.n_l, self.n_lam)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __len__(self) -> int:
        return self.size

    def index(self, state) -> int:
        for v, n in zip(state, self.shape):
            if not 0 <= v < n:
                raise IndexError(f"state {tuple(state)} outside space {self.shape}")
        return int(np.ravel_multi_index(tuple(int(v) for v in state), self.shape))

    def indices(self, h, q, w, y, l, lam) -> np.ndarray:
        return np.ravel_multi_index((h, q, w, y, l, lam), self.shape)

    def state_of(self, index: int) -> SystemState:
        if not 0 <= index < self.size:
            raise IndexError(f"index {index} outside [0, {self.size})")
        return SystemState(*(int(v) for v in self.coords[index]))

    # coordinate columns, indexed by state index
    @property
    def h(self):
        return self.coords[:, 0]

    @property
    def q(self):
        return self.coords[:, 1]

    @property
    def w(self):
        return self.coords[:, 2]

    @property
    def y(self):
        return self.coords[:, 3]

    @property
    def l(self):
        return self.coords[:, 4]

    @property
    def lam(self):
        return self.coords[:, 5]


def soc_update(q, a, e, q_max: int):
    return np.minimum(np.maximum(q - a, 0) + e, q_max)


def backlog_update(w, a, u, w_max: int):
    return np.minimum(np.maximum(w - a, 0) + u, w_max)


def y_update(y, w, config: SystemConfig):
    """Next grid index of the smoothed backlog given its current value ``y``.

    As theta goes to 0 the update degenerates to ``Y' = W``.
    """
    return config.y_index(config.theta * np.asarray(y, dtype=float) + (1.0 - config.theta) * np.asarray(w))


def lambda_update(q_prev, q_next, lam_prev):
    """1 after a charge increase, 0 after a decrease; a flat slot keeps the flag."""
    return np.where(q_next > q_prev, 1, np.where(q_next < q_prev, 0, lam_prev))


@dataclass(frozen=True, eq=False)
class Kernel:
    """Controlled transition kernel.

    ``matrix`` is a CSR matrix of shape ``(|Z| * |A|, |Z|)``; row ``z * |A| + a``
    holds p(. | z, a).
    """

    config: SystemConfig
    space: StateSpace
    matrix: sp.csr_matrix

    @property
    def n_states(self) -> int:
        return self.space.size

    @property
    def n_actions(self) -> int:
        return len(self.config.actions)

    def row(self, z: int, a_idx: int) -> int:
        return z * self.n_actions + a_idx

    def successors(self, z: int, a_idx: int) -> list[tuple[int, float]]:
        r = self.row(z, a_idx)
        lo, hi = self.matrix.indptr[r], self.matrix.indptr[r + 1]
        return list(zip(self.matrix.indices[lo:hi].tolist(), self.matrix.data[lo:hi].tolist()))

    def action_matrix(self, a_idx: int) -> sp.csr_matrix:
        """|Z| x |Z| transition matrix when action ``a_idx`` is taken everywhere."""
        return self.matrix[a_idx :: self.n_actions]

    def induced(self, mu: np.ndarray) -> sp.csr_matrix:
        """Transition matrix of the chain induced by the randomized policy ``mu``."""
        mu = np.asarray(mu, dtype=float)
        weights = sp.diags(mu.ravel())
        nz, na = self.n_states, self.n_actions
        collapse = sp.csr_matrix(
            (np.ones(nz * na), (np.repeat(np.arange(nz), na), np.arange(nz * na))), shape=(nz, nz * na)
        )
        return (collapse @ weights @ self.matrix).tocsr()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def export_triplets(self, path) -> None:
        coo = self.matrix.tocoo()
        na = self.n_actions
        with Path(path).open("w") as fh:
            for r, c, p in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r // na} {r % na} {c} {float(p)!r}\n")


def build_kernel(config: SystemConfig, harvest: Source, load: Source) -> Kernel:
    space = StateSpace.for_config(config, harvest.n_states, load.n_states)
    co = space.coords
    h, q, w, y, l, lam = (co[:, k] for k in range(6))
    y_next = y_update(config.y_grid[y], w, config)
    nz, na = space.size, len(config.actions)
    Ph, Pl = harvest.chain.transition, load.chain.transition
    rows, cols, vals = [], [], []
    for a_idx, a in enumerate(config.actions):
        a_eff = np.broadcast_to(config.effective_action(q, a), q.shape)
        row_ids = np.arange(nz) * na + a_idx
        for hs in range(space.n_h):
            for ls in range(space.n_l):
                sel = np.flatnonzero((h == hs) & (l == ls))
                if sel.size == 0:
                    continue
                for e, pe in zip(harvest.emission.support[hs], harvest.emission.probs[hs]):
                    if pe == 0.0:
                        continue
                    q_next = soc_update(q[sel], a_eff[sel], int(e), config.q_max)
                    lam_next = lambda_update(q[sel], q_next, lam[sel])
                    for u, pu in zip(load.emission.support[ls], load.emission.probs[ls]):
                        if pu == 0.0:
                            continue
                        w_next = backlog_update(w[sel], a_eff[sel], int(u), config.w_max)
                        for h2 in np.flatnonzero(Ph[hs]):
                            for l2 in np.flatnonzero(Pl[ls]):
                                prob = Ph[hs, h2] * pe * pu * Pl[ls, l2]
                                nxt = space.indices(
                                    np.full(sel.size, h2), q_next, w_next, y_next[sel], np.full(sel.size, l2), lam_next
                                )
                                rows.append(row_ids[sel])
                                cols.append(nxt)
                                vals.append(np.full(sel.size, prob))
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nz * na, nz)
    )
    M.sum_duplicates()
    M.sort_indices()
    kernel = Kernel(config, space, M)
    dev = np.abs(kernel.row_sums() - 1.0).max()
    if dev > KERNEL_ROW_TOL:
        raise ValueError(f"kernel rows do not sum to 1 (max deviation {dev:.3g})")
    return kernel


@dataclass(frozen=True, eq=False)
class HarvestingSystem:
    """Configuration plus the two arrival sources; builds its kernel lazily."""

    config: SystemConfig
    harvest: Source
    load: Source
    _kernel: list = field(default_factory=list, init=False, repr=False)

    @property
    def space(self) -> StateSpace:
        return StateSpace.for_config(self.config, self.harvest.n_states, self.load.n_states)

    def kernel(self) -> Kernel:
        if not self._kernel:
            self._kernel.append(build_kernel(self.config, self.harvest, self.load))
        return self._kernel[0]
