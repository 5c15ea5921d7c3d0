"""Battery degradation model and the per-(state, action) aging costs.

Degradation over a window of ``T`` slots follows the closed-form lithium
model driven by mean state of charge, its spread, and the effective number
of full cycles:

    D  = D' * C * exp(D_coef * (soc_avg - 0.5))
    D' = A * n_cyc * exp((soc_dev - 1) * B) + 0.2 * T / t_life

The four constraint costs are functions of (state, action) whose long-run
averages are the mean charge, the cycle rate, the mean step amplitude and
the persistence of charge/discharge phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .markov import expected_emission
from .system import Kernel, Source

N_CONSTRAINTS = 4
CONSTRAINT_NAMES = ("mean_charge", "cycle_rate", "step_amplitude", "persistence")


@dataclass(frozen=True)
class BatteryConstants:
    a_coef: float
    b_coef: float
    c_coef: float
    d_coef: float
    t_life: float
    q_nom: float

    def __post_init__(self):
        if not self.t_life > 0:
            raise ValueError("t_life must be positive")
        if not self.q_nom > 0:
            raise ValueError("q_nom must be positive")


def illustrative_constants(q_nom: float = 8.0) -> BatteryConstants:
    """A NON-PHYSICAL constant set for demos and trend tests.

    The shapes match the degradation model (cycling term exponential in SoC
    spread, everything exponential in mean SoC) but the magnitudes are not
    taken from any measured cell.
    """
    return BatteryConstants(a_coef=1e-5, b_coef=1.0, c_coef=1.0, d_coef=3.0, t_life=1e5, q_nom=q_nom)


@dataclass(frozen=True)
class AgingBounds:
    """Upper bounds on the four long-run averages; ``inf`` drops a constraint."""

    mean_charge: float = math.inf
    cycle_rate: float = math.inf
    step_amplitude: float = math.inf
    persistence: float = math.inf

    def __post_init__(self):
        for name, v in zip(CONSTRAINT_NAMES, self.values):
            if math.isnan(v):
                raise ValueError(f"bound {name} is NaN")
        if math.isfinite(self.persistence) and not 0.0 <= self.persistence <= 1.0:
            raise ValueError("persistence bound must lie in [0, 1]")

    @classmethod
    def unconstrained(cls) -> "AgingBounds":
        return cls()

    @property
    def values(self) -> tuple:
        return (self.mean_charge, self.cycle_rate, self.step_amplitude, self.persistence)

    @property
    def is_unconstrained(self) -> bool:
        return not any(math.isfinite(v) for v in self.values)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """``objective`` has shape (|Z|, |A|); ``constraints`` has shape (4, |Z|, |A|)."""

    objective: np.ndarray
    constraints: np.ndarray

    def __post_init__(self):
        if self.constraints.shape != (N_CONSTRAINTS,) + self.objective.shape:
            raise ValueError("constraint costs must have shape (4, |Z|, |A|)")


def square(y):
    return np.asarray(y, dtype=float) ** 2


OBJECTIVES: dict[str, Callable] = {"square": square, "linear": lambda y: np.asarray(y, dtype=float)}


def objective_cost(y_value, f: Callable = square):
    """Per-slot delay cost of a smoothed-backlog value."""
    return f(y_value)


def constraint_costs(kernel: Kernel, harvest: Source, q_nom: float, normalize_cycles: bool = True) -> np.ndarray:
    """The four aging costs for every (state, action), shape (4, |Z|, |A|).

    Charge step and persistence are expectations over the kernel so that
    their stationary averages equal the corresponding trace averages.
    """
    cfg, space = kernel.config, kernel.space
    nz, na = space.size, kernel.n_actions
    q, h, lam = space.q, space.h, space.lam
    d = np.empty((N_CONSTRAINTS, nz, na))

    d[0] = q[:, None]

    mean_e = np.array([expected_emission(harvest.emission, s) for s in range(harvest.n_states)])
    acts = np.asarray(cfg.actions)
    a_eff = cfg.effective_action(q[:, None], acts[None, :])
    scale = 2.0 * q_nom if normalize_cycles else 1.0
    d[1] = (np.abs(a_eff) + mean_e[h][:, None]) / scale

    coo = kernel.matrix.tocoo()
    z_from = coo.row // na
    q_from, q_to = q[z_from], q[coo.col]
    step = np.abs(q_to - q_from) * coo.data
    persist = ((q_to != q_from) & (lam[coo.col] == lam[z_from])) * coo.data
    d[2] = np.bincount(coo.row, weights=step, minlength=nz * na).reshape(nz, na)
    d[3] = np.bincount(coo.row, weights=persist, minlength=nz * na).reshape(nz, na)
    return d


def build_costs(
    kernel: Kernel,
    harvest: Source,
    q_nom: float,
    objective: Callable = square,
    normalize_cycles: bool = True,
) -> CostSpec:
    y_vals = kernel.config.y_grid[kernel.space.y]
    c = np.repeat(objective_cost(y_vals, objective)[:, None], kernel.n_actions, axis=1)
    return CostSpec(c, constraint_costs(kernel, harvest, q_nom, normalize_cycles))


class Degradation(NamedTuple):
    soc_avg: float
    soc_dev: float
    n_cyc: float
    d_prime: float
    degradation: float


def degrade_trace(soc_trace, throughput_trace, constants: BatteryConstants, horizon: float | None = None) -> Degradation:
    """Score a state-of-charge trace (values in [0, 1]) with the degradation model.

    ``throughput_trace`` holds the per-slot energy moved, |A| + |E|, in energy
    units. ``horizon`` defaults to the trace length and is measured in the
    same time unit as ``constants.t_life``.
    """
    soc = np.asarray(soc_trace, dtype=float)
    thr = np.asarray(throughput_trace, dtype=float)
    if soc.size == 0:
        raise ValueError("empty trace")
    if soc.shape != thr.shape:
        raise ValueError(f"trace length mismatch: {soc.shape} vs {thr.shape}")
    if soc.size < 2:
        raise ValueError("degradation needs at least two slots")
    T = float(soc.size if horizon is None else horizon)
    k = constants
    soc_avg = float(soc.mean())
    soc_dev = 2.0 * math.sqrt(3.0 * float(np.mean((soc - soc_avg) ** 2)))
    n_cyc = float(np.abs(thr).sum()) / (2.0 * k.q_nom)
    d_prime = k.a_coef * n_cyc * math.exp((soc_dev - 1.0) * k.b_coef) + 0.2 * T / k.t_life
    return Degradation(soc_avg, soc_dev, n_cyc, d_prime, d_prime * k.c_coef * math.exp(k.d_coef * (soc_avg - 0.5)))


class DiscreteMetrics(NamedTuple):
    q_mean: float
    q_var: float
    n_cyc: float
    step_mean: float
    persistence: float


def persistence_indicators(q_trace, lam0: int | None = None) -> np.ndarray:
    """Per-step indicator that the charge moved in the same direction as its last move.

    Flat steps score 0 and leave the direction unchanged. The first step is
    scored against ``lam0`` when given, otherwise it is dropped.
    """
    q = np.asarray(q_trace)
    delta = np.diff(q)
    out = np.zeros(delta.size, dtype=np.int8)
    flag = lam0
    for i, dq in enumerate(delta):
        if dq != 0:
            direction = 1 if dq > 0 else 0
            out[i] = flag is not None and direction == flag
            flag = direction
    return out if lam0 is not None else out[1:]


def discrete_metrics(q_trace, a_trace, e_trace, q_nom: float, lam0: int | None = None) -> DiscreteMetrics:
    q = np.asarray(q_trace, dtype=float)
    a = np.asarray(a_trace, dtype=float)
    e = np.asarray(e_trace, dtype=float)
    if not q.size == a.size == e.size:
        raise ValueError("q, a and e traces must be aligned")
    if q.size < 2:
        raise ValueError("metrics need at least two slots")
    q_mean = float(q.mean())
    ind = persistence_indicators(q, lam0)
    return DiscreteMetrics(
        q_mean=q_mean,
        q_var=float(np.mean((q - q_mean) ** 2)),
        n_cyc=float(np.sum(np.abs(a) + np.abs(e)) / (2.0 * q_nom)),
        step_mean=float(np.mean(np.abs(np.diff(q)))),
        persistence=float(ind.mean()) if ind.size else 0.0,
    )
