"""Command-line front end.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage,
config, parse or IO errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys

from . import config as cfgmod
from .textio import ParseError, fmt, read_mdp

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("pessimistic_ac")

# flag -> config key, per subcommand
FLAG_KEYS = {
    "verify": {"only": "verify.only", "mdp": "verify.mdp", "mc_budget": "verify.mc_budget",
               "out": "verify.out"},
    "run-upper": {"instance": "run-upper.instance", "n_grid": "run-upper.n_grid",
                  "seeds": "run-upper.seeds", "T_cap": "run-upper.T_cap",
                  "eps_final": "run-upper.eps_final", "alpha_const": "run-upper.alpha_const",
                  "log_dir": "run-upper.log_dir", "out": "run-upper.out"},
    "run-lower": {"algorithm": "run-lower.algorithm", "eps": "run-lower.eps", "n": "run-lower.n",
                  "trials": "run-lower.trials", "holdout_trials": "run-lower.holdout_trials",
                  "policy_dir": "run-lower.policy_dir", "T_cap": "run-lower.T_cap",
                  "out": "run-lower.out"},
    "ftpl-bench": {"T": "ftpl-bench.T", "eta": "ftpl-bench.eta", "omega": "ftpl-bench.omega",
                   "adversaries": "ftpl-bench.adversaries", "out": "ftpl-bench.out"},
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="INI config file")
    p.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=[],
                   dest="overrides", help="override one config entry (repeatable)")
    p.add_argument("--seed", type=str, help="master seed (general.master_seed)")
    p.add_argument("--workers", type=str, help="worker processes (general.workers)")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="pessimistic-ac",
        description="Offline pessimistic actor-critic: checks, experiments and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run the structural check suite")
    p.add_argument("--only", help="comma-separated check names")
    p.add_argument("--mdp", help="also check this MDP file")
    p.add_argument("--mc-budget", dest="mc_budget")
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--list", action="store_true", help="list check names and exit")

    p = sub.add_parser("run-upper", parents=[common], help="actor runs across dataset sizes")
    p.add_argument("--instance", help="'benchmark' or an MDP file")
    p.add_argument("--n-grid", dest="n_grid", help="comma-separated dataset sizes")
    p.add_argument("--seeds")
    p.add_argument("--T-cap", dest="T_cap")
    p.add_argument("--eps-final", dest="eps_final")
    p.add_argument("--alpha-const", dest="alpha_const")
    p.add_argument("--log-dir", dest="log_dir")
    p.add_argument("--out")

    p = sub.add_parser("run-lower", parents=[common], help="gap on the adversarial hard instance")
    p.add_argument("--algorithm")
    p.add_argument("--eps")
    p.add_argument("--n")
    p.add_argument("--trials")
    p.add_argument("--holdout-trials", dest="holdout_trials")
    p.add_argument("--policy-dir", dest="policy_dir")
    p.add_argument("--T-cap", dest="T_cap")
    p.add_argument("--out")

    p = sub.add_parser("ftpl-bench", parents=[common], help="expected-FTPL regret against its bound")
    p.add_argument("--T")
    p.add_argument("--eta")
    p.add_argument("--omega")
    p.add_argument("--adversaries")
    p.add_argument("--out")
    return parser


def resolve_config(args) -> cfgmod.Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"general.master_seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"general.workers={args.workers}")
    for flag, key in FLAG_KEYS[args.command].items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return cfgmod.load(args.config, overrides)


def _cell(v) -> str:
    if isinstance(v, float):
        return fmt(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return str(v)


def write_csv(path, cfg: cfgmod.Config, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(cfgmod.comment_header(cfg))
        out = csv.writer(fh)
        out.writerow(columns)
        for row in rows:
            out.writerow([_cell(row[c]) for c in columns])


def read_csv(path) -> tuple[cfgmod.Config, str, list[dict]]:
    """Parse a CSV written by this tool: (config, recorded hash, rows as strings)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    cfg, recorded = cfgmod.parse_comment_header(lines)
    body = [ln for ln in lines if not ln.startswith("#")]
    return cfg, recorded, list(csv.DictReader(body))


# ---------------------------------------------------------------------------
# commands

def cmd_verify(cfg, args) -> int:
    from .suite import CHECKS, SuiteOptions, run_suite
    if args.list:
        print("\n".join(CHECKS))
        return EXIT_OK
    sec = cfg["verify"]
    user = read_mdp(sec["mdp"]) if sec["mdp"] else None
    only = list(sec["only"]) or None
    if only:
        unknown = [n for n in only if n not in CHECKS]
        if unknown:
            print(f"error: unknown check(s) {', '.join(unknown)}; see --list", file=sys.stderr)
            return EXIT_USAGE
    opts = SuiteOptions(cfg["general"]["master_seed"], sec["mc_budget"], tuple(sec["lb_eps"]),
                        sec["lb_bits"], user)
    rows = run_suite(opts, only)
    cols = ["check", "residual", "bound", "pass"]
    write_csv(sec["out"], cfg, cols, [
        {"check": r.name, "residual": float(r.residual), "bound": float(r.bound),
         "pass": int(bool(r.passed))} for r in rows])
    for r in rows:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  residual={float(r.residual):.3g} "
              f"bound={float(r.bound):.3g}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


def cmd_run_upper(cfg, args) -> int:
    from .experiments import UPPER_COLUMNS, run_upper
    rows = run_upper(cfg)
    write_csv(cfg["run-upper"]["out"], cfg, UPPER_COLUMNS, rows)
    sec = cfg["run-upper"]
    for n in sec["n_grid"]:
        subs = [r["suboptimality"] for r in rows if r["n"] == n]
        print(f"n={n}  mean suboptimality={sum(subs) / len(subs):.6g}  runs={len(subs)}")
    if sec["eps_be"] == 0:
        # exact-DP optimum: no mixture can beat it beyond solver slack
        worst = min(r["suboptimality"] for r in rows)
        if worst < -2 * sec["eps_solve"]:
            print(f"FAIL  negative suboptimality {worst:.3g}", file=sys.stderr)
            return EXIT_FAIL
    return EXIT_OK


def cmd_run_lower(cfg, args) -> int:
    from .experiments import LOWER_COLUMNS, run_lower
    rep, row = run_lower(cfg)
    write_csv(cfg["run-lower"]["out"], cfg, LOWER_COLUMNS, [row])
    log.info("case %d selected%s", rep.case, " (flagged)" if rep.flagged else "")
    print(f"case={rep.case} bits={rep.bits.as_string()} gap={rep.gap:.6g} "
          f"std_err={rep.std_err:.3g} threshold={rep.threshold:.6g} "
          f"{'PASS' if row['pass'] else 'FAIL'}")
    return EXIT_OK if row["pass"] else EXIT_FAIL


def cmd_ftpl_bench(cfg, args) -> int:
    from .experiments import FTPL_COLUMNS, run_ftpl_bench
    rows = run_ftpl_bench(cfg)
    write_csv(cfg["ftpl-bench"]["out"], cfg, FTPL_COLUMNS, rows)
    for r in rows:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['adversary']}  regret={r['regret']:.4g} "
              f"bound={r['bound']:.4g}")
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL


COMMANDS = {"verify": cmd_verify, "run-upper": cmd_run_upper, "run-lower": cmd_run_lower,
            "ftpl-bench": cmd_ftpl_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"io error: {err.filename}: {err.strerror}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(cfgmod.dumps(cfg))
        return EXIT_OK
    try:
        return COMMANDS[args.command](cfg, args)
    except ParseError as err:
        print(f"parse error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"io error: {err.filename}: {err.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
