"""Command-line driver: solve, simulate, sweep and validate-walk.

Exit codes: 0 success, 2 configuration error, 3 infeasible bounds,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import sim
from .aging import CONSTRAINT_NAMES, AgingBounds
from .cmdp import InfeasibleBoundsError, Policy, StationarySolveError, evaluate_policy, solve_cmdp
from .config import OUT_ENV, ConfigError, ExperimentConfig
from .lp import LpNumericalError

log = logging.getLogger("ehsaging")

CSV_VERSION = "ehsaging-csv v1"
EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4
SWEEP_PARAMS = {"phi_l": "phi", "b_l": "b"}
VARIANTS = ("constrained", "unconstrained")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


class CsvOut:
    """CSV file with a versioned comment line; every row is flushed on write."""

    def __init__(self, path: Path, kind: str, columns):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = self.path.open("w", newline="")
        self._fh.write(f"# {CSV_VERSION} {kind}\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row.get(c, "")) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path: Path, kind: str, rows: list[dict], columns=None) -> None:
    cols = columns or (list(rows[0]) if rows else [])
    with CsvOut(path, kind, cols) as out:
        for row in rows:
            out.write(row)


def _variant_bounds(cfg: ExperimentConfig, variant: str) -> AgingBounds:
    return cfg.bounds if variant == "constrained" else AgingBounds()


def _variant_name(bounds: AgingBounds) -> str:
    return "unconstrained" if bounds.is_unconstrained else "constrained"


def _solve(cfg: ExperimentConfig, bounds: AgingBounds):
    kernel = cfg.system.kernel()
    costs = cfg.costs()
    result = solve_cmdp(kernel, costs, bounds, backend=cfg.solver)
    result.policy.config_hash = cfg.model_hash
    return result, kernel, costs


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: ExperimentConfig, out: Path, args) -> int:
    name = _variant_name(cfg.bounds)
    log.info("solving %s CMDP over %d states", name, cfg.system.kernel().n_states)
    result, kernel, costs = _solve(cfg, cfg.bounds)
    policy_path = out / f"policy-{name}.csv"
    result.policy.save(policy_path)
    C, D = evaluate_policy(result.policy, kernel, costs)
    diag = result.diagnostics
    rows = [
        {
            "config_hash": cfg.config_hash,
            "variant": name,
            "quantity": "objective",
            "lp_value": diag.objective,
            "evaluated": C,
            "bound": math.nan,
            "binding": False,
        }
    ]
    for k, q in enumerate(CONSTRAINT_NAMES):
        rows.append(
            {
                "config_hash": cfg.config_hash,
                "variant": name,
                "quantity": q,
                "lp_value": diag.achieved[q],
                "evaluated": D[k],
                "bound": diag.bounds[q],
                "binding": q in diag.binding,
            }
        )
    write_csv(out / f"diagnostics-{name}.csv", "diagnostics", rows)
    log.info("objective %.6g, binding %s, %d randomized states", diag.objective, diag.binding or "none", diag.randomized_states)
    print(policy_path)
    return EXIT_OK


def _load_policy(path: str, cfg: ExperimentConfig) -> Policy:
    try:
        policy = Policy.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError("--policy", f"cannot load {path}: {exc}") from None
    if policy.config_hash != cfg.model_hash:
        raise ConfigError(
            "--policy",
            f"{path} was solved for model hash {policy.config_hash or '<none>'}, config has {cfg.model_hash}",
        )
    return policy


def cmd_simulate(cfg: ExperimentConfig, out: Path, args) -> int:
    if not args.policy:
        raise ConfigError("--policy", "simulate needs at least one policy file")
    policies = [(Path(p).stem.removeprefix("policy-"), _load_policy(p, cfg)) for p in args.policy]
    stat_cols = ["config_hash", "policy"] + list(sim.STATS_COLUMNS)
    summary_rows = []
    with CsvOut(out / "stats.csv", "stats", stat_cols) as stats_out:
        for name, policy in policies:
            runs = []
            for r in range(cfg.runs):
                st, trace = sim.simulate(
                    policy, cfg.system, cfg.horizon, cfg.seed, cfg.battery, run=r, keep_trace=(r == 0)
                )
                if trace is not None:
                    write_csv(out / f"trace-{name}.csv", "trace", _trace_rows(trace, cfg.config_hash))
                stats_out.write({"config_hash": cfg.config_hash, "policy": name, **st.as_row()})
                runs.append(st)
            summary_rows.append(_summary_row(cfg, name, runs))
    write_csv(out / "summary.csv", "summary", summary_rows)
    return EXIT_OK


def _trace_rows(trace: sim.SimTrace, chash: str) -> list[dict]:
    cols = trace.columns()
    n = len(trace)
    return [{"config_hash": chash, **{k: int(v[i]) for k, v in cols.items()}} for i in range(n)]


SUMMARY_FIELDS = ("charge_mean", "charge_std", "backlog_mean", "saturation")


def _summary_row(cfg: ExperimentConfig, name: str, runs: list) -> dict:
    row = {"config_hash": cfg.config_hash, "policy": name, "runs": len(runs), "horizon": cfg.horizon, "seed": cfg.seed}
    for f in SUMMARY_FIELDS:
        row[f], row[f"{f}_se"] = sim.summarize([getattr(s, f) for s in runs])
    row["degradation"], row["degradation_se"] = sim.summarize([s.degradation.degradation for s in runs])
    return row


SWEEP_COLUMNS = (
    "config_hash", "param", "value", "variant", "status", "objective",
    *CONSTRAINT_NAMES,
    "sim_degradation", "sim_degradation_se", "sim_charge_std", "sim_saturation", "runs", "horizon", "seed",
)


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError("--param", f"expected one of {sorted(SWEEP_PARAMS)}, got {args.param!r}")
    grid = _parse_grid(args.grid)
    status = EXIT_OK
    path = out / f"sweep-{args.param}.csv"
    with CsvOut(path, "sweep", SWEEP_COLUMNS) as table:
        for value in grid:
            load = dict(cfg.raw["load"])
            load[SWEEP_PARAMS[args.param]] = value
            try:
                point = cfg.with_overrides(load=load)
            except ConfigError as exc:
                raise ConfigError(f"--grid {value}", str(exc)) from None
            for variant in VARIANTS:
                row = {
                    "config_hash": point.config_hash,
                    "param": args.param,
                    "value": value,
                    "variant": variant,
                    "runs": point.runs,
                    "horizon": point.horizon,
                    "seed": point.seed,
                }
                try:
                    result, kernel, costs = _solve(point, _variant_bounds(point, variant))
                except InfeasibleBoundsError as exc:
                    log.error("%s=%g %s: %s", args.param, value, variant, exc)
                    table.write({**row, "status": "infeasible"})
                    status = EXIT_INFEASIBLE
                    continue
                C, D = evaluate_policy(result.policy, kernel, costs)
                runs = sim.simulate_runs(result.policy, point.system, point.horizon, point.runs, point.seed, point.battery)
                deg, deg_se = sim.summarize([s.degradation.degradation for s in runs])
                row.update(status="optimal", objective=C, sim_degradation=deg, sim_degradation_se=deg_se)
                row.update(dict(zip(CONSTRAINT_NAMES, D)))
                row["sim_charge_std"] = sim.summarize([s.charge_std for s in runs])[0]
                row["sim_saturation"] = sim.summarize([s.saturation for s in runs])[0]
                table.write(row)
                log.info("%s=%g %s: C=%.6g degradation=%.6g", args.param, value, variant, C, deg)
    print(path)
    return status


WALK_COLUMNS = (
    "config_hash", "p", "delta_max", "tau", "samples", "seed",
    "empirical_variance", "variance_se", "predicted_variance", "exact_variance", "ratio_to_predicted",
    "normality", "checkpoint_tau", "checkpoint_variance", "checkpoint_normality",
)


def cmd_validate_walk(cfg: ExperimentConfig, out: Path, args) -> int:
    w = cfg.walk
    p_grid = _parse_grid(args.grid) if args.param == "p" and args.grid is not None else list(w["p"])
    d_grid = list(w["delta_max"])
    path = out / "walk.csv"
    with CsvOut(path, "walk", WALK_COLUMNS) as table:
        for p in p_grid:
            for d in d_grid:
                try:
                    params = sim.WalkParams(float(p), int(d), int(w["tau"]), int(w["samples"]))
                except ValueError as exc:
                    raise ConfigError("walk", str(exc)) from None
                rep = sim.validate_walk(params, cfg.seed, checkpoints=(int(w["checkpoint"]),))
                ck = min(rep.checkpoints)
                table.write(
                    {
                        "config_hash": cfg.config_hash,
                        "p": params.p,
                        "delta_max": params.delta_max,
                        "tau": params.tau,
                        "samples": params.samples,
                        "seed": cfg.seed,
                        "empirical_variance": rep.empirical_variance,
                        "variance_se": rep.variance_se,
                        "predicted_variance": rep.predicted_variance,
                        "exact_variance": rep.exact_variance,
                        "ratio_to_predicted": rep.empirical_variance / rep.predicted_variance,
                        "normality": rep.normality,
                        "checkpoint_tau": ck,
                        "checkpoint_variance": rep.checkpoints[ck][0],
                        "checkpoint_normality": rep.checkpoints[ck][1],
                    }
                )
    print(path)
    return EXIT_OK


def _parse_grid(text: str | None) -> list[float]:
    if text is None:
        raise ConfigError("--grid", "missing")
    if not text.strip():
        return []
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--grid", f"expected comma-separated numbers, got {text!r}") from None


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "validate-walk": cmd_validate_walk,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehsaging", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML/JSON experiment config (defaults apply when omitted)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, then the config, then ./out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--runs", type=int)
        if name == "simulate":
            p.add_argument("--policy", action="append", help="policy file; repeat for several policies")
        if name in ("sweep", "validate-walk"):
            p.add_argument("--param", required=(name == "sweep"), help="swept parameter: phi_l or b_l (sweep), p (walk)")
            p.add_argument("--grid", help="comma-separated values, e.g. 0.5,0.6,0.7")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    overrides = {k: getattr(args, k) for k in ("seed", "horizon", "runs") if getattr(args, k) is not None}
    return cfg.with_overrides(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        out = cfg.output_dir(args.out)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBoundsError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (LpNumericalError, StationarySolveError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
