"""Monte Carlo rollouts of the closed loop and the persistent-walk validator.

Random numbers come from numpy's Philox4x64 counter-based generator. A
rollout with seed ``s`` and run index ``r`` uses
``Philox(SeedSequence(s, spawn_key=(r,)))`` and consumes five uniforms per
slot (action, harvest emission, load emission, next harvest state, next load
state) in blocks of ``DRAW_BLOCK`` slots, so a longer horizon with the same
seed extends the same trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import stats as sps

from .aging import CONSTRAINT_NAMES, BatteryConstants, Degradation, DiscreteMetrics, degrade_trace, discrete_metrics
from .cmdp import Policy
from .system import HarvestingSystem

DRAW_BLOCK = 1 << 16
N_BATCHES = 30
MIN_WARMUP = 1000
TRACE_COLUMNS = ("slot", "h", "q", "w", "y", "l", "lambda", "action", "e", "u")
COST_NAMES = ("objective",) + CONSTRAINT_NAMES


def warmup_slots(horizon: int) -> int:
    """Slots discarded before statistics: 1% of the horizon, at least 1000."""
    return max(horizon // 100, MIN_WARMUP)


def make_rng(seed: int, run: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(run,))))


def batch_means_se(x: np.ndarray, n_batches: int = N_BATCHES) -> float:
    """Standard error of the mean of a correlated series by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 * n_batches:
        return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    size = x.size // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


@dataclass(frozen=True, eq=False)
class SimTrace:
    """Per-slot record of the measured window; ``action`` holds action values."""

    h: np.ndarray
    q: np.ndarray
    w: np.ndarray
    y: np.ndarray
    l: np.ndarray
    lam: np.ndarray
    action: np.ndarray
    e: np.ndarray
    u: np.ndarray

    def __len__(self) -> int:
        return self.q.size

    def columns(self) -> dict:
        return {
            "slot": np.arange(self.q.size),
            "h": self.h,
            "q": self.q,
            "w": self.w,
            "y": self.y,
            "l": self.l,
            "lambda": self.lam,
            "action": self.action,
            "e": self.e,
            "u": self.u,
        }


@dataclass(frozen=True)
class TraceStats:
    charge_mean: float
    charge_std: float
    backlog_mean: float
    backlog_std: float
    saturation: float
    degradation: Degradation
    metrics: DiscreteMetrics
    horizon: int
    seed: int
    run: int = 0
    # long-run per-slot cost averages and their batch-means standard errors,
    # keyed by COST_NAMES
    cost_mean: dict = field(default_factory=dict)
    cost_se: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {
            "seed": self.seed,
            "run": self.run,
            "horizon": self.horizon,
            "charge_mean": self.charge_mean,
            "charge_std": self.charge_std,
            "backlog_mean": self.backlog_mean,
            "backlog_std": self.backlog_std,
            "saturation": self.saturation,
        }
        row.update({f"deg_{k}": v for k, v in self.degradation._asdict().items()})
        row.update({f"metric_{k}": v for k, v in self.metrics._asdict().items()})
        for name in COST_NAMES:
            row[f"avg_{name}"] = self.cost_mean[name]
            row[f"se_{name}"] = self.cost_se[name]
        return row


STATS_COLUMNS = (
    ("seed", "run", "horizon", "charge_mean", "charge_std", "backlog_mean", "backlog_std", "saturation")
    + tuple(f"deg_{k}" for k in Degradation._fields)
    + tuple(f"metric_{k}" for k in DiscreteMetrics._fields)
    + tuple(f"{pre}_{name}" for name in COST_NAMES for pre in ("avg", "se"))
)


def _cdf(probs: np.ndarray) -> np.ndarray:
    c = np.cumsum(probs, axis=-1)
    c[..., -1] = np.inf  # absorb rounding in the last bin
    return c


def _padded(dist) -> tuple[np.ndarray, np.ndarray]:
    width = max(v.size for v in dist.support)
    sup = np.zeros((dist.n_states, width), dtype=np.int64)
    prb = np.zeros((dist.n_states, width))
    for s, (v, p) in enumerate(zip(dist.support, dist.probs)):
        sup[s, : v.size] = v
        prb[s, : v.size] = p
        sup[s, v.size :] = v[-1]
    return sup, _cdf(prb)


@njit(cache=True)
def _draw(cdf_row, u):
    k = 0
    while u >= cdf_row[k]:
        k += 1
    return k


@njit(cache=True)
def _rollout_block(
    state, U, out, offset, mu_cdf, actions, ph_cdf, pl_cdf, e_sup, e_cdf, u_sup, u_cdf, y_next, dims, q_max, w_max, gate
):
    n_q, n_w, n_y, n_l = dims[1], dims[2], dims[3], dims[4]
    h, q, w, y, l, lam = state[0], state[1], state[2], state[3], state[4], state[5]
    n = min(U.shape[0], out.shape[1] - offset)
    for t in range(n):
        z = ((((h * n_q + q) * n_w + w) * n_y + y) * n_l + l) * 2 + lam
        ai = _draw(mu_cdf[z], U[t, 0])
        a = actions[ai]
        e = e_sup[h, _draw(e_cdf[h], U[t, 1])]
        u = u_sup[l, _draw(u_cdf[l], U[t, 2])]
        row = offset + t
        out[0, row] = h
        out[1, row] = q
        out[2, row] = w
        out[3, row] = y
        out[4, row] = l
        out[5, row] = lam
        out[6, row] = a
        out[7, row] = e
        out[8, row] = u
        a_eff = min(a, q) if gate else a
        q2 = min(max(q - a_eff, 0) + e, q_max)
        w2 = min(max(w - a_eff, 0) + u, w_max)
        y = y_next[y, w]
        lam2 = 1 if q2 > q else (0 if q2 < q else lam)
        out[9, row] = abs(q2 - q)
        out[10, row] = 1 if (q2 != q and lam2 == lam) else 0
        out[11, row] = a_eff
        q, w, lam = q2, w2, lam2
        h = _draw(ph_cdf[h], U[t, 3])
        l = _draw(pl_cdf[l], U[t, 4])
    state[0], state[1], state[2], state[3], state[4], state[5] = h, q, w, y, l, lam
    return n


def rollout(
    policy: Policy, system: HarvestingSystem, n_slots: int, rng: np.random.Generator, initial=0
) -> np.ndarray:
    """Raw closed-loop rollout of ``n_slots`` slots from state index ``initial``.

    Returns an int64 array of shape (12, n_slots); rows are h, q, w, y, l,
    lam, action, e, u (all at the start of the slot), then |q' - q|, the
    persistence indicator [q' != q and lam' == lam], and the effective action.
    """
    cfg = system.config
    space = system.space
    if policy.mu.shape != (space.size, len(cfg.actions)):
        raise ValueError(
            f"policy has shape {policy.mu.shape}, system needs ({space.size}, {len(cfg.actions)})"
        )
    if tuple(policy.actions) != tuple(cfg.actions):
        raise ValueError(f"policy actions {policy.actions} differ from system actions {cfg.actions}")
    e_sup, e_cdf = _padded(system.harvest.emission)
    u_sup, u_cdf = _padded(system.load.emission)
    y_next = np.array(
        [[cfg.y_index(cfg.theta * yv + (1.0 - cfg.theta) * w) for w in range(cfg.w_max + 1)] for yv in cfg.y_grid],
        dtype=np.int64,
    )
    state = np.array(space.state_of(int(initial)), dtype=np.int64)
    out = np.empty((12, n_slots), dtype=np.int64)
    args = (
        _cdf(policy.mu),
        np.asarray(cfg.actions, dtype=np.int64),
        _cdf(system.harvest.chain.transition),
        _cdf(system.load.chain.transition),
        e_sup,
        e_cdf,
        u_sup,
        u_cdf,
        y_next,
        np.asarray(space.shape, dtype=np.int64),
        cfg.q_max,
        cfg.w_max,
        cfg.serve_requires_charge,
    )
    done = 0
    while done < n_slots:
        U = rng.random((DRAW_BLOCK, 5))
        done += _rollout_block(state, U, out, done, *args)
    return out


def simulate(
    policy: Policy,
    system: HarvestingSystem,
    horizon: int,
    seed: int,
    constants: BatteryConstants,
    *,
    run: int = 0,
    initial=0,
    keep_trace: bool = False,
    objective=None,
) -> tuple[TraceStats, SimTrace | None]:
    """Simulate ``horizon`` measured slots after the warm-up window.

    ``objective`` maps smoothed-backlog values to per-slot cost (square by
    default).
    """
    if horizon < 2:
        raise ValueError(f"horizon must be at least 2 slots, got {horizon} (empty trace)")
    cfg = system.config
    warm = warmup_slots(horizon)
    raw = rollout(policy, system, warm + horizon, make_rng(seed, run), initial)[:, warm:]
    h, q, w, y, l, lam, act, e, u, step, persist, a_eff = raw
    y_vals = cfg.y_grid[y]
    f = objective if objective is not None else np.square
    per_slot = {
        "objective": f(y_vals),
        "mean_charge": q,
        "cycle_rate": (a_eff + e) / (2.0 * constants.q_nom),
        "step_amplitude": step,
        "persistence": persist,
    }
    throughput = (a_eff + e).astype(float)
    stats = TraceStats(
        charge_mean=float(q.mean()),
        charge_std=float(q.std()),
        backlog_mean=float(w.mean()),
        backlog_std=float(w.std()),
        saturation=float(np.mean(w == cfg.w_max)),
        degradation=degrade_trace(q / cfg.q_max, throughput, constants),
        metrics=discrete_metrics(q, a_eff, e, constants.q_nom, lam0=int(lam[0])),
        horizon=horizon,
        seed=seed,
        run=run,
        cost_mean={k: float(np.mean(v)) for k, v in per_slot.items()},
        cost_se={k: batch_means_se(v) for k, v in per_slot.items()},
    )
    trace = SimTrace(h, q, w, y, l, lam, act, e, u) if keep_trace else None
    return stats, trace


def simulate_runs(
    policy: Policy, system: HarvestingSystem, horizon: int, runs: int, seed: int, constants: BatteryConstants, **kw
) -> list[TraceStats]:
    """Independent runs ``0..runs-1`` of ``simulate``; results are in run order."""
    return [simulate(policy, system, horizon, seed, constants, run=r, **kw)[0] for r in range(runs)]


def summarize(values) -> tuple[float, float]:
    """Mean across runs and its standard error."""
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(v.mean()), se


# ---------------------------------------------------------------------------
# persistent random walk


@dataclass(frozen=True)
class WalkParams:
    p: float
    delta_max: int
    tau: int
    samples: int

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if int(self.delta_max) != self.delta_max or self.delta_max < 1:
            raise ValueError(f"delta_max must be an integer >= 1, got {self.delta_max}")
        if self.tau < 1 or self.samples < 2:
            raise ValueError("tau must be >= 1 and samples >= 2")

    @property
    def delta_bar(self) -> float:
        return (1.0 + self.delta_max) / 2.0

    def predicted_variance(self, tau: int | None = None) -> float:
        """Continuous-limit law sigma^2 = delta_bar * tau * p / (1 - p)."""
        t = self.tau if tau is None else tau
        return self.delta_bar * t * self.p / (1.0 - self.p)

    def exact_variance(self, tau: int | None = None) -> float:
        """Exact displacement variance of the simulated walk after ``tau`` steps.

        Directions form a stationary two-state chain with lag-k correlation
        r^k, r = 2p - 1, and amplitudes are i.i.d. and independent of them.
        """
        n = self.tau if tau is None else tau
        r = 2.0 * self.p - 1.0
        m1 = self.delta_bar
        m2 = (self.delta_max + 1) * (2 * self.delta_max + 1) / 6.0
        lagged = (n * r * (1.0 - r) - r * (1.0 - r**n)) / (1.0 - r) ** 2
        return n * m2 + 2.0 * m1 * m1 * lagged


@dataclass(frozen=True)
class WalkReport:
    params: WalkParams
    seed: int
    empirical_variance: float
    variance_se: float
    predicted_variance: float
    exact_variance: float
    normality: float
    # checkpoint tau -> (empirical variance, KS distance to the matched Gaussian)
    checkpoints: dict = field(default_factory=dict)


@njit(cache=True)
def _walk_block(raw, p_thr, dm, marks, out, s0):
    n_s, tau = raw.shape
    for s in range(n_s):
        x = raw[s, 0]
        direction = 1 if (x & 0xFFFFFFFF) < 0x80000000 else -1
        pos = 0
        k = 0
        for t in range(tau):
            x = raw[s, t]
            if t > 0 and (x & 0xFFFFFFFF) >= p_thr:
                direction = -direction
            pos += direction * (1 + (((x >> 32) * dm) >> 32))
            if t + 1 == marks[k]:
                out[k, s0 + s] = pos
                k += 1
                if k == marks.size:
                    break


def walk_displacements(params: WalkParams, seed: int, marks=None) -> np.ndarray:
    """Displacements of ``params.samples`` independent walks at each step count in ``marks``.

    Each walk draws one raw 64-bit Philox word per step. The low half decides
    direction (the first step picks +/-1 fairly, later steps keep the
    previous direction with probability p); the high half picks the amplitude
    uniformly from 1..delta_max.
    """
    marks = np.unique(np.asarray([params.tau] if marks is None else list(marks) + [params.tau], dtype=np.int64))
    marks = marks[(marks >= 1) & (marks <= params.tau)]
    bitgen = np.random.Philox(np.random.SeedSequence(seed))
    p_thr = np.uint64(min(int(round(params.p * 2**32)), 2**32))
    dm = np.uint64(params.delta_max)
    out = np.empty((marks.size, params.samples), dtype=np.int64)
    block = max(1, (1 << 21) // params.tau)
    for s0 in range(0, params.samples, block):
        n = min(block, params.samples - s0)
        raw = bitgen.random_raw(n * params.tau).reshape(n, params.tau)
        _walk_block(raw, p_thr, dm, marks, out, s0)
    return marks, out


def _ks_to_gaussian(x: np.ndarray) -> float:
    sd = x.std()
    if sd == 0:
        return 1.0
    return float(sps.kstest(x / sd, "norm").statistic)


def validate_walk(params: WalkParams, seed: int, checkpoints=(100,)) -> WalkReport:
    marks, disp = walk_displacements(params, seed, checkpoints)
    per_mark = {}
    for t, x in zip(marks.tolist(), disp):
        per_mark[t] = (float(np.mean(x.astype(float) ** 2)), _ks_to_gaussian(x.astype(float)))
    final = disp[-1].astype(float)
    sq = final**2
    return WalkReport(
        params=params,
        seed=seed,
        empirical_variance=float(sq.mean()),
        variance_se=float(sq.std(ddof=1) / math.sqrt(sq.size)),
        predicted_variance=params.predicted_variance(),
        exact_variance=params.exact_variance(),
        normality=per_mark[params.tau][1],
        checkpoints=per_mark,
    )
