"""Command-line entry point.

    bb-experiments validate CONFIG
    bb-experiments run CONFIG [--seeds 0-6] [--out DIR] [--force] [--workers N]
    bb-experiments plot-data DIR

``BB_WORKERS`` sets the default worker count. Learning failures are data: the
exit status is 0 whenever every run completed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiments as ex
from . import metrics, tasks
from .errors import ConfigError

log = logging.getLogger("budgeted_broadcast")

RESOLVED_NAME = "config.resolved.ini"
RUNS_DIR = "runs"
ARTIFACTS = (
    "balance_summary.csv", "success_rates.csv", "witness_runs.csv", "scaling.csv",
    "safety_summary.csv", "shock_summary.csv", "entropy_summary.csv", "summary.txt",
    "balance_scatter.csv", "safety_traffic.csv", "cycles_vs_wlnw.csv",
)


def write_csv(path: Path, columns: list[str], rows, chash: str, units: str) -> Path:
    """CSV with a comment line naming the config hash and column units."""
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={chash}; units: {units}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if isinstance(v, float) and math.isnan(v) else v for v in row])
    return path


def read_csv(path: Path) -> tuple[str, list[dict]]:
    with Path(path).open() as fh:
        first = fh.readline()
        rows = list(csv.DictReader(fh))
    chash = first.split("config_hash=", 1)[1].split(";", 1)[0] if "config_hash=" in first else ""
    return chash, rows


# ---------------------------------------------------------------- jobs


def _jobs(cfg: cfgmod.RunConfig) -> list[tuple[str, object, dict]]:
    """``(run name, runner, kwargs)`` for every run the config asks for."""
    jobs = []
    if cfg.experiment == "xor-balance":
        for mode in cfg.xor.modes:
            plan = replace(cfg.plan, refresh_mode=mode)
            for seed in cfg.seeds:
                jobs.append((f"xor-{mode.value.lower()}-seed{seed}", ex.run_xor_balance, dict(
                    seed=seed, cfg=cfg.budget, plan=plan, hidden=tuple(cfg.xor.hidden),
                    n_per_corner=cfg.xor.n_per_corner, noise_std=cfg.xor.noise_std,
                    lr=cfg.xor.lr, eval_every=cfg.eval_every)))
    elif cfg.experiment == "dnf-safety":
        s = cfg.safety
        spec = tasks.DnfSpec(
            num_clauses=len(s.feature_freqs), literals_per_clause=s.literals_per_clause,
            feature_freqs=s.feature_freqs, label_clauses=s.label_clauses or None,
        )
        for seed in cfg.seeds:
            jobs.append((f"safety-seed{seed}", ex.run_dnf_safety, dict(
                seed=seed, spec=spec, tau=s.tau, plan=cfg.plan, n=s.n, hidden=tuple(s.hidden),
                hidden_bias=s.hidden_bias, lr=s.lr, alpha=s.alpha, warmup=s.warmup,
                corr_floor=s.corr_floor, eval_every=cfg.eval_every)))
    elif cfg.experiment in ("dnf-witness", "scaling-sweep"):
        settings = cfg.witness.settings()
        if cfg.experiment == "dnf-witness":
            grid, modes = (cfg.witness.W,), cfg.witness.modes
        else:
            grid, modes = cfg.sweep.W_grid, (ex.WitnessMode.BB_ALTERNATING,)
        for W in grid:
            for mode in modes:
                for seed in cfg.seeds:
                    jobs.append((f"witness-{mode.value.lower()}-W{W}-seed{seed}", ex.run_dnf_witness, dict(
                        seed=seed, W=W, mode=mode, plan=cfg.plan, settings=settings)))
    elif cfg.experiment == "shock-recovery":
        s = cfg.shock
        for seed in cfg.seeds:
            jobs.append((f"shock-seed{seed}", ex.run_shock_recovery, dict(
                seed=seed, shock_fraction=s.shock_fraction, shock_step=s.shock_step, cfg=cfg.budget,
                horizon=s.horizon, tolerance=s.tolerance, n_per_corner=s.n_per_corner,
                noise_std=s.noise_std, lr=s.lr)))
    elif cfg.experiment == "entropy-comparison":
        e = cfg.entropy
        for seed in cfg.seeds:
            jobs.append((f"entropy-seed{seed}", ex.run_entropy_comparison, dict(
                seed=seed, density_target=e.density_target, n=e.n, hidden=tuple(e.hidden), lr=e.lr,
                beta=e.beta, alpha=e.alpha, warmup=e.warmup, delta=e.delta, total_steps=e.total_steps,
                sigma2=e.sigma2, density_tol=e.density_tol, mi_levels=e.mi_levels)))
    return jobs


# ---------------------------------------------------------------- aggregates


def _aggregate(cfg, named_results, out: Path, chash: str) -> list[str]:
    """Write the experiment's aggregate CSV(s); return summary lines."""
    results = [r for _, r in named_results]
    lines = []
    if cfg.experiment == "xor-balance":
        rows = []
        for r in results:
            b = r.balance
            rows.append([r.extra["mode"], r.seed, b.slope, b.intercept, b.r_squared, b.n_units_used,
                         b.excluded_saturated, b.defined, b.constant_k, r.final_accuracy])
        write_csv(out / "balance_summary.csv",
                  ["mode", "seed", "slope", "intercept", "r2", "n_units", "excluded_saturated",
                   "defined", "constant_k", "final_accuracy"], rows, chash,
                  "slope=nats per edge, intercept=nats, accuracy=fraction")
        for mode in cfg.xor.modes:
            sel = [r for r in results if r.extra["mode"] == mode.value]
            r2 = [r.balance.r_squared for r in sel if r.balance.defined]
            lines.append(f"{mode.value:<11} runs={len(sel)} acc1={sum(r.success for r in sel)} "
                         f"defined_fits={len(r2)} mean_r2={np.mean(r2) if r2 else float('nan'):.3f}")
    elif cfg.experiment in ("dnf-witness", "scaling-sweep"):
        groups: dict = {}
        for r in results:
            groups.setdefault((r.extra["mode"], r.extra["W"]), []).append(r)
        rows = [[mode, W, sum(r.success for r in rs), len(rs)] for (mode, W), rs in sorted(groups.items())]
        write_csv(out / "success_rates.csv", ["mode", "W", "successes", "total"], rows, chash,
                  "W=clauses minus one, successes=runs")
        write_csv(out / "witness_runs.csv", ["mode", "W", "seed", "success", "cycles_used", "max_cycles"],
                  [[r.extra["mode"], r.extra["W"], r.seed, r.success, r.cycles_used, r.extra["max_cycles"]]
                   for r in results], chash, "cycles=SGD phases")
        for mode, W, won, total in rows:
            lines.append(f"{mode:<15} W={W:<3} success {won}/{total}")
        if cfg.experiment == "scaling-sweep":
            by_W: dict = {}
            for r in results:
                by_W.setdefault(r.extra["W"], []).append(r)
            rep = ex.summarise_scaling(by_W)
            write_csv(out / "scaling.csv",
                      ["W", "runs", "successes", "median_cycles", "oracle", "excluded"],
                      [[row.W, row.runs, row.successes, row.median_cycles, row.oracle, row.excluded]
                       for row in rep.rows], chash, "median_cycles=SGD phases, oracle=draws")
            lines.append(f"fit on W ln W: slope={rep.slope:.3f} r2={rep.r_squared:.3f} "
                         f"oracle_corr={rep.oracle_correlation:.3f}")
    elif cfg.experiment == "dnf-safety":
        keys = ["rare_max_traffic", "common_start_traffic", "common_final_traffic", "rare_below_tau",
                "common_exceeded_tau", "common_pruned", "common_ends_below_tau"]
        rows = [[r.seed, r.success, r.extra["inconclusive"], r.extra["tau"]] + [r.extra.get(k, "") for k in keys]
                for r in results]
        write_csv(out / "safety_summary.csv", ["seed", "passed", "inconclusive", "tau"] + keys, rows, chash,
                  "traffic=on-rate times edges")
        lines.append(f"safety passed {sum(r.success for r in results)}/{len(results)}")
    elif cfg.experiment == "shock-recovery":
        rows = [[r.seed, r.extra["pre_shock_loss"], r.extra["post_shock_loss"],
                 r.extra["recovery_steps_refresh"], r.extra["recovery_steps_frozen"]] for r in results]
        write_csv(out / "shock_summary.csv",
                  ["seed", "pre_shock_loss", "post_shock_loss", "recovery_steps_refresh", "recovery_steps_frozen"],
                  [["" if v is None else v for v in row] for row in rows], chash,
                  "loss=nats, recovery=SGD steps (blank: not recovered)")
        med_on = np.median([ex.recovery_key(r.extra["recovery_steps_refresh"]) for r in results])
        med_off = np.median([ex.recovery_key(r.extra["recovery_steps_frozen"]) for r in results])
        lines.append(f"median recovery steps: refresh={med_on} frozen={med_off}")
    elif cfg.experiment == "entropy-comparison":
        rows = []
        for r in results:
            bb, mag = r.extra["bb"], r.extra["magnitude"]
            rows.append([r.seed, bb["density"], mag["density"], bb["entropy_sum"], mag["entropy_sum"],
                         bb["mean_abs_corr"], mag["mean_abs_corr"], bb["code_entropy"], mag["code_entropy"],
                         r.extra["traffic_mi_pearson"], r.extra["checkpoints"]])
        write_csv(out / "entropy_summary.csv",
                  ["seed", "density_bb", "density_mag", "entropy_sum_bb", "entropy_sum_mag",
                   "mean_abs_corr_bb", "mean_abs_corr_mag", "code_entropy_bb", "code_entropy_mag",
                   "traffic_mi_pearson", "checkpoints"], rows, chash,
                  "density=fraction, entropy=nats, correlation=unitless")
        lines.append(f"BB wins on entropy and decorrelation in {sum(r.success for r in results)}/{len(results)} seeds")
    return lines


# ---------------------------------------------------------------- commands


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        # only remove what this tool writes
        shutil.rmtree(out / RUNS_DIR, ignore_errors=True)
        for name in ARTIFACTS + (RESOLVED_NAME,):
            (out / name).unlink(missing_ok=True)
    (out / RUNS_DIR).mkdir(parents=True, exist_ok=True)


def cmd_validate(args) -> int:
    cfg = cfgmod.parse_config(args.config)
    print(cfgmod.dump_config(cfg), end="")
    print(f"# config_hash={cfgmod.config_hash(cfg)}")
    return 0


def cmd_run(args) -> int:
    cfg = cfgmod.parse_config(args.config)
    if args.seeds:
        cfg = replace(cfg, seeds=cfgmod.parse_seeds(args.seeds))
    if args.out:
        cfg = replace(cfg, out=args.out)
    workers = args.workers or cfg.workers or ex.default_workers()
    out = Path(cfg.out)
    _prepare_out(out, args.force)
    chash = cfgmod.config_hash(cfg)
    (out / RESOLVED_NAME).write_text(f"# config_hash={chash}\n" + cfgmod.dump_config(cfg))
    jobs = _jobs(cfg)
    log.info("%s: %d runs on %d worker(s)", cfg.experiment, len(jobs), workers)
    results = ex.iter_parallel(_dispatch, [{"fn": fn, "kwargs": kw} for _, fn, kw in jobs], workers)
    named = []
    # each run is written as soon as it arrives so a later failure keeps earlier output
    for (name, _, _), res in zip(jobs, results):
        res.extra["config_hash"] = chash
        res.to_jsonl(out / RUNS_DIR / f"{name}.jsonl")
        named.append((name, res))
    lines = [f"experiment={cfg.experiment} config_hash={chash} runs={len(named)}"]
    lines += _aggregate(cfg, named, out, chash)
    if cfg.experiment == "shock-recovery":
        lines.insert(1, f"recovery threshold: loss within {cfg.shock.tolerance:.0%} of the pre-shock loss")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _dispatch(fn, kwargs):
    return fn(**kwargs)


def cmd_plot_data(args) -> int:
    root = Path(args.dir)
    runs = sorted((root / RUNS_DIR).glob("*.jsonl"))
    resolved = root / RESOLVED_NAME
    missing = [str(p) for p in (resolved, root / RUNS_DIR) if not p.exists()]
    if missing or not runs:
        print("missing inputs: " + ", ".join(missing or [str(root / RUNS_DIR / "*.jsonl")]), file=sys.stderr)
        return 1
    chash = resolved.read_text().splitlines()[0].split("config_hash=", 1)[-1].strip()
    loaded = [ex.read_jsonl(p) for p in runs]
    written = []
    xor = [(s, rows) for s, rows in loaded if s["experiment"].startswith("xor-balance")]
    if xor:
        table = []
        for s, _ in xor:
            for u in s["units"]:
                a = min(max(u["a"], 1e-12), 1 - 1e-12)
                table.append([s["mode"], s["seed"], u["unit"], u["k"], float(metrics.log_odds_inactive(a)),
                              u["saturated"]])
        written.append(write_csv(root / "balance_scatter.csv",
                                 ["mode", "seed", "unit", "k", "logodds", "saturated"], table, chash,
                                 "k=active outgoing edges, logodds=nats"))
    safety = [(s, rows) for s, rows in loaded if s["experiment"] == "dnf-safety"]
    if safety:
        table = []
        for s, rows in safety:
            for row in rows:
                for cls in s["classes"]:
                    val = row.get(f"traffic_{cls}")
                    table.append([s["seed"], row["step"], cls, "" if val is None else val, row["tau"]])
        written.append(write_csv(root / "safety_traffic.csv",
                                 ["seed", "step", "feature_class", "traffic", "tau"], table, chash,
                                 "step=SGD steps, traffic=on-rate times edges"))
    witness = [s for s, _ in loaded if s["experiment"] == "dnf-witness/BB_ALTERNATING"]
    if witness:
        by_W: dict = {}
        for s in witness:
            by_W.setdefault(s["W"], []).append(s)
        table = []
        for W in sorted(by_W):
            won = [s["cycles_used"] for s in by_W[W] if s["success"]]
            table.append([W, W * math.log(W) if W > 1 else 0.0, float(np.median(won)) if won else "",
                          len(won), len(by_W[W]), tasks.expected_coupon_draws(W)])
        written.append(write_csv(root / "cycles_vs_wlnw.csv",
                                 ["W", "W_ln_W", "median_cycles", "successes", "runs", "oracle"], table, chash,
                                 "median_cycles=SGD phases, oracle=expected draws W*H_W"))
    if not written:
        print(f"no plottable runs in {root / RUNS_DIR}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bb-experiments", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("validate", help="parse a config and print it fully resolved")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("run", help="run every (experiment, seed) in a config")
    p.add_argument("config")
    p.add_argument("--seeds", help="override the seed list, e.g. 0-6 or 1,3,5")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--workers", type=int, default=0, help="worker processes (default: $BB_WORKERS or 1)")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("plot-data", help="turn run artifacts into tidy figure tables")
    p.add_argument("dir")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (FileExistsError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
