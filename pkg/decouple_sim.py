#!/usr/bin/env python3
"""
decouple-sim - multi-sector trade and idea-diffusion simulator for bloc decoupling

Usage:
    python decouple_sim.py validate --economy data/toy_economy.json
    python decouple_sim.py simulate --economy data/toy_economy.json --horizon 20 --out out/base
    python decouple_sim.py scenario run --economy data/toy_economy.json --scenario full_decouple --out out/full
    python decouple_sim.py report --input out/base --var real_income
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from decouple_config import RunConfig, load_run_config, read_json, write_json
from decouple_devlog import devlog_path, log_event, prune_devlogs
from decouple_errors import SimulationError, UsageError, ValidationFailed

try:
    from decouple_session_logger import SessionLogger
    session_logger: Optional[SessionLogger] = SessionLogger()
except Exception:
    session_logger = None

__version__ = "1.0.0"

EPILOG = """
Commands (what they do):
  validate           Check an economy file (and optionally a flow directory)
  calibrate          Build an economy from base-year flows and parameters
  calibrate-beta     Grid-search β against historical growth moments
  simulate           Run one recursive path and write path tables
  scenario run       Baseline vs shocked paths; cumulative changes report
  scenario list      Show bundled presets
  analyze-diffusion  Optimal vs market sourcing, aleph, diffusion surface
  report             Print or save one variable from a path or a report
  assign-blocs       West/East assignment from UN vote similarity

Examples:
  python decouple_sim.py validate --economy data/toy_economy.json
  python decouple_sim.py calibrate --flows data/toy_flows --params data/toy_params.json --out econ.json
  python decouple_sim.py calibrate-beta --moments data/published_growth_moments.csv --weight 0.5
  python decouple_sim.py scenario run --economy data/toy_economy.json --scenario tariff_decouple --diffusion off
  python decouple_sim.py analyze-diffusion --problem data/two_by_two_problem.json --surface --out out/surface
  python decouple_sim.py assign-blocs --votes data/votes.csv --west usa --east chn

Exit codes: 0 success, 1 domain error (validation, convergence), 2 usage error.
Threads: --threads or $DECOUPLE_SIM_THREADS (default: physical cores).
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration JSON (paths, solver options)")
    common.add_argument("--threads", type=int, help="Worker threads for grid search and paired runs")
    common.add_argument("--tol", type=float, help="Solver tolerance on relative excess demand (default 1e-8)")
    common.add_argument("--max-iter", type=int, dest="max_iter", help="Solver iteration cap (default 10000)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="Print per-period solver progress")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(
        prog="decouple-sim",
        description="decouple-sim - trade and idea-diffusion simulator for bloc decoupling",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("--version", action="store_true", help="Print version and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("validate", parents=[common], help="Validate an economy file")
    p.add_argument("--economy", help="Economy JSON")
    p.add_argument("--flows", help="Baseline flow directory to check for balance")
    p.add_argument("--params", help="Parameter JSON (θ) for the profit-share check on --flows")

    p = sub.add_parser("calibrate", parents=[common], help="Calibrate an economy from flows")
    p.add_argument("--flows", help="Baseline flow directory")
    p.add_argument("--params", help="Parameter JSON (theta, sigma, beta, horizon, ...)")
    p.add_argument("--productivity", help="productivity.csv; λ₀ from productivity, τ₀ refit to shares")
    p.add_argument("--labor", help="Labor anchors CSV (region, year, value)")
    p.add_argument("--balance", action="store_true", help="RAS bilateral trade to supply and use totals first")
    p.add_argument("--rebalance", action="store_true", help="Run the two-step profit rebalancing first")
    p.add_argument("--out", type=Path, required=True, help="Economy JSON to write")

    p = sub.add_parser("calibrate-beta", parents=[common], help="Grid-search β against growth moments")
    p.add_argument("--economy", help="Economy JSON")
    p.add_argument("--historical", help="historical_gdp.csv (region, year, gdp, population)")
    p.add_argument("--moments", help="Tabulated simulated moments (skip simulation)")
    p.add_argument("--grid", default="0.40:0.50:0.01", help="lo:hi:step or comma list (default 0.40:0.50:0.01)")
    p.add_argument("--weight", type=float, default=0.5, help="Weight on GDP-per-capita terms (default 0.5)")
    p.add_argument("--calibrate-alpha", action="store_true", help="Also root-find α₀ at the best β")
    p.add_argument("--out", type=Path, help="Write loss_table.csv and beta.json here")

    p = sub.add_parser("simulate", parents=[common], help="Run one recursive path")
    p.add_argument("--economy", help="Economy JSON")
    p.add_argument("--horizon", type=int, help="Periods to simulate (default: economy horizon)")
    p.add_argument("--scenario", help="Preset name or scenario JSON to apply")
    p.add_argument("--no-diffusion", action="store_true", help="Freeze λ at its initial value")
    p.add_argument("--grids", action="store_true", help="Also write shares.csv and expenditure.csv")
    p.add_argument("--digits", type=int, help="Round emitted values (display only)")
    p.add_argument("--out", type=Path, help="Output directory (default from config)")

    p = sub.add_parser("scenario", help="Run or list decoupling scenarios")
    ssub = p.add_subparsers(dest="scenario_command", parser_class=_Parser)
    run = ssub.add_parser("run", parents=[common], help="Baseline vs shocked comparison")
    run.add_argument("--economy", help="Economy JSON")
    run.add_argument("--scenario", help="Preset name or scenario JSON")
    run.add_argument("--diffusion", choices=["on", "off"], default="on", help="Idea diffusion (default on)")
    run.add_argument("--collapse", action="store_true", help="Run on the single-sector collapse")
    run.add_argument("--bloc", action="append", default=[], metavar="REGION=BLOC", help="Override a bloc assignment")
    run.add_argument("--anchors", default="usa,chn", help="Trade partners reported (default usa,chn)")
    run.add_argument("--horizon", type=int, help="Periods to simulate")
    run.add_argument("--format", choices=["csv", "json", "both"], default="both")
    run.add_argument("--digits", type=int, help="Round emitted values (display only)")
    run.add_argument("--out", type=Path, help="Output directory")
    ssub.add_parser("list", parents=[common], help="List bundled presets")

    p = sub.add_parser("analyze-diffusion", parents=[common], help="Diffusion optimum vs market shares")
    p.add_argument("--problem", help="Diffusion problem JSON (lam, eta, landed, theta, beta)")
    p.add_argument("--economy", help="Economy JSON; the problem comes from its base-year equilibrium")
    p.add_argument("--region", help="Destination region when using --economy")
    p.add_argument("--sector", type=int, default=0, help="Using sector index (default 0)")
    p.add_argument("--other", type=int, help="Sector compared in aleph (default: the next one)")
    p.add_argument("--surface", action="store_true", help="Tabulate the two-by-two diffusion surface")
    p.add_argument("--resolution", type=int, default=101, help="Surface grid points per axis (default 101)")
    p.add_argument("--out", type=Path, help="Output directory")

    p = sub.add_parser("report", parents=[common], help="Extract one variable as CSV")
    p.add_argument("--input", type=Path, required=True, help="Simulation or scenario output directory")
    p.add_argument("--var", required=True, help="Variable name (real_income, lambda, trade, ...)")
    p.add_argument("--sector", help="Restrict sector-level variables")
    p.add_argument("--digits", type=int, help="Round values (display only)")
    p.add_argument("--out", type=Path, help="CSV file to write (default: stdout)")

    p = sub.add_parser("assign-blocs", parents=[common], help="Bloc assignment from vote similarity")
    p.add_argument("--votes", help="votes.csv (resolution, region, vote)")
    p.add_argument("--west", default="usa", help="Western anchor (default usa)")
    p.add_argument("--east", default="chn", help="Eastern anchor (default chn; rus for robustness)")
    p.add_argument("--out", type=Path, help="JSON bloc map to write")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _config(args: argparse.Namespace, **paths: Any) -> RunConfig:
    overrides = {"tol": getattr(args, "tol", None), "max_iter": getattr(args, "max_iter", None),
                 "threads": getattr(args, "threads", None), "verbosity": getattr(args, "verbose", None) or None}
    overrides.update(paths)
    cfg = load_run_config(getattr(args, "config", None), overrides)
    cfg.check_paths()
    return cfg


def _solver(cfg: RunConfig):
    from decouple_equilibrium import SolverOptions

    return SolverOptions.from_settings(cfg.solver, devlog=devlog_path())


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required (on the command line or in --config)")
    return value


def _load_valid_economy(path: str):
    from decouple_economy import load_economy, validate_economy

    economy = load_economy(Path(path))
    violations = validate_economy(economy)
    if violations:
        raise ValidationFailed(violations)
    return economy


def _progress(cfg: RunConfig):
    if not cfg.verbosity:
        return None

    def report(t: int, sol: Any):
        print(f"   period {t}: {sol.iterations} iterations, residual {sol.residual:.2e}")
    return report


def _out_dir(args: argparse.Namespace, cfg: RunConfig, leaf: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / leaf


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    from decouple_economy import ModelParameters, load_economy, load_flows, validate_economy

    cfg = _config(args, economy=args.economy, flows=args.flows, params=args.params)
    if not cfg.economy and not cfg.flows:
        raise UsageError("validate needs --economy and/or --flows")
    failed = False
    if cfg.economy:
        economy = load_economy(Path(cfg.economy))
        violations = validate_economy(economy)
        print(f"🔎 {cfg.economy}: {len(violations)} violations")
        for v in violations:
            print(f"   ❌ {v}")
        failed = bool(violations)
    if cfg.flows:
        flows = load_flows(Path(cfg.flows))
        cells = flows.balance_violations()
        if cfg.params:
            params = ModelParameters.from_dict(read_json(Path(cfg.params)), flows.sectors)
            cells += [dict(c, identity="profit_share") for c in flows.profit_gaps(params.theta)]
        print(f"🔎 {cfg.flows}: {len(cells)} unbalanced cells")
        for c in cells[:50]:
            print("   ❌ " + ", ".join(f"{k}={v}" for k, v in c.items()))
        failed = failed or bool(cells)
    if failed:
        return 1
    print("✅ Valid")
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    from decouple_calibration import balance_flows, fit_trade_costs, lambda0_from_productivity, profit_rebalance
    from decouple_dynamics import labor_path_from_anchors
    from decouple_economy import (ModelParameters, calibrate_shares, load_flows, observed_shares, save_economy,
                                  validate_economy)

    cfg = _config(args, flows=args.flows, params=args.params, productivity=args.productivity, labor=args.labor)
    flows = load_flows(Path(_require(cfg.flows, "--flows")))
    params = ModelParameters.from_dict(read_json(Path(_require(cfg.params, "--params"))), flows.sectors)
    if args.balance:
        flows = balance_flows(flows)
        print("⚖️  Bilateral trade balanced to supply and use totals")
    if args.rebalance:
        flows = profit_rebalance(flows, params.theta)
        print("🩹 Profit income rebalanced to sales/(1+θ)")
    if cfg.labor:
        params.labor_path = labor_path_from_anchors(Path(cfg.labor), flows.regions, params.base_year, params.horizon)
    economy = calibrate_shares(flows, params)
    if cfg.productivity:
        lam0 = lambda0_from_productivity(Path(cfg.productivity), economy.regions, economy.sectors)
        economy = fit_trade_costs(economy.replace(lambda0=lam0), observed_shares(flows), _solver(cfg))
        print("📦 λ₀ taken from productivity; iceberg costs refit to observed shares")
    violations = validate_economy(economy)
    if violations:
        raise ValidationFailed(violations)
    save_economy(economy, args.out)
    print(f"✅ Calibrated economy written: {args.out}")
    return 0


def cmd_calibrate_beta(args: argparse.Namespace) -> int:
    from decouple_calibration import (BetaSearchResult, best_of, beta_grid_search, calibrate_alpha0, growth_moments,
                                      loss_table_from_moments, parse_grid, read_moment_table)

    cfg = _config(args, economy=args.economy, historical=args.historical)
    grid = parse_grid(args.grid)
    if args.moments:
        hist, rows = read_moment_table(Path(args.moments))
        picked = {b: m for b, m in rows.items() if any(abs(b - g) < 1e-9 for g in grid)}
        if not picked:
            raise UsageError("No tabulated β rows fall on the requested grid")
        table = loss_table_from_moments(picked, hist, args.weight)
        result = BetaSearchResult(best_beta=best_of(table), table=table, weight=args.weight, historical=hist)
    else:
        economy = _load_valid_economy(_require(cfg.economy, "--economy"))
        hist = growth_moments(Path(_require(cfg.historical, "--historical")), economy.regions)
        result = beta_grid_search(economy, hist, grid, args.weight, _solver(cfg), workers=cfg.workers())
    print(f"{'β':>6} {'GDP':>10} {'GDPpc':>10} {'Sum':>10} {'loss':>10}")
    for row in result.table.itertuples(index=False):
        flag = "" if row.status == "ok" else f"  ❌ {row.error}"
        print(f"{row.beta:>6.2f} {row.gdp:>10.4f} {row.gdppc:>10.4f} {row.sum:>10.4f} {row.loss:>10.4f}{flag}")
    print(f"✅ β* = {result.best_beta:g} (weight {args.weight:g} on GDP per capita)")
    payload: Dict[str, Any] = result.to_dict()
    if args.calibrate_alpha:
        if args.moments:
            raise UsageError("--calibrate-alpha needs --economy and --historical")
        economy = _load_valid_economy(cfg.economy).replace(beta=result.best_beta)
        alpha0 = calibrate_alpha0(economy, hist.gdp_mean, horizon=hist.periods or None, opts=_solver(cfg))
        payload["alpha0"] = alpha0
        print(f"✅ α₀ = {alpha0:.6g} matches mean GDP growth {hist.gdp_mean:.2f}%")
    if args.out:
        from decouple_report import write_table
        write_table(result.table, Path(args.out) / "loss_table.csv")
        write_json(Path(args.out) / "beta.json", payload)
        print(f"📦 Wrote {args.out}/loss_table.csv")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    from decouple_dynamics import simulate
    from decouple_report import emit_path
    from decouple_scenario import load_scenario

    cfg = _config(args, economy=args.economy, scenario=args.scenario)
    economy = _load_valid_economy(_require(cfg.economy, "--economy"))
    shocks = load_scenario(cfg.scenario, economy.base_year) if cfg.scenario else None
    path = simulate(economy, shocks, horizon=args.horizon, opts=_solver(cfg), diffusion=not args.no_diffusion,
                    label=shocks.name if shocks else "baseline", on_period=_progress(cfg))
    out = _out_dir(args, cfg, "simulate")
    written = emit_path(path, out, grids=args.grids, digits=args.digits)
    print(f"✅ Simulated {path.horizon} period(s) for {economy.n_regions} regions × {economy.n_sectors} sectors")
    for w in written:
        print(f"📦 {w}")
    return 0


def _bloc_overrides(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--bloc expects REGION=BLOC, got {item!r}")
        region, bloc = item.split("=", 1)
        out[region.strip()] = bloc.strip()
    return out


def cmd_scenario(args: argparse.Namespace) -> int:
    from decouple_scenario import ExperimentOptions, list_presets, load_scenario, run_experiment
    from decouple_report import emit_report

    if args.scenario_command == "list":
        for preset in list_presets():
            sectors = preset.get("sectors", "all")
            extra = f", blocs override {preset['bloc_overrides']}" if preset.get("bloc_overrides") else ""
            print(f"📦 {preset['name']}: {preset['kind']} +{preset['magnitude_pp']:g}pp, sectors {sectors}{extra}")
        return 0
    if args.scenario_command != "run":
        raise UsageError("scenario needs a subcommand: run | list")
    cfg = _config(args, economy=args.economy, scenario=args.scenario)
    economy = _load_valid_economy(_require(cfg.economy, "--economy"))
    scenario = load_scenario(_require(cfg.scenario, "--scenario"), economy.base_year)
    options = ExperimentOptions(
        diffusion=args.diffusion == "on", collapse=args.collapse, bloc_overrides=_bloc_overrides(args.bloc),
        anchors=tuple(a.strip() for a in args.anchors.split(",") if a.strip()), horizon=args.horizon,
        solver=_solver(cfg), workers=cfg.workers(),
    )
    report = run_experiment(economy, scenario, options)
    out = _out_dir(args, cfg, scenario.name)
    written = emit_report(report, out, args.format, args.digits)
    summary = report.summary()
    print(f"✅ Scenario '{scenario.name}' (diffusion {args.diffusion}) over {report.horizon} periods")
    for region, value in summary["real_income"].items():
        print(f"   {region:<8} real income {100 * value:+.3f}%")
    if "cross_bloc_trade_world" in summary:
        print(f"   cross-bloc trade {100 * summary['cross_bloc_trade_world']:+.2f}%")
    for w in written:
        print(f"📦 {w}")
    return 0


def cmd_analyze_diffusion(args: argparse.Namespace) -> int:
    from decouple_diffusion import figure_surface, load_problem, problem_from_solution, summarize, write_summary
    from decouple_economy import initial_state
    from decouple_equilibrium import solve_static

    cfg = _config(args, economy=args.economy)
    if args.problem:
        problem = load_problem(Path(args.problem))
    elif cfg.economy:
        economy = _load_valid_economy(cfg.economy)
        state = initial_state(economy)
        sol = solve_static(economy, state, opts=_solver(cfg))
        problem = problem_from_solution(economy, state, sol, _require(args.region, "--region"))
    else:
        raise UsageError("analyze-diffusion needs --problem or --economy with --region")
    if not 0 <= args.sector < problem.n_sectors:
        raise UsageError(f"--sector must lie in [0, {problem.n_sectors - 1}]")
    summary = summarize(problem, args.sector, args.other)
    print(json.dumps(summary, indent=2))
    out = Path(args.out) if args.out else None
    if args.surface:
        surface = figure_surface(problem, args.resolution, args.sector)
        for name, (x, y, value) in surface.points.items():
            print(f"   {name:<8} x={x:.4f} y={y:.4f} value={value:.6f}")
        if out:
            for w in surface.write(out):
                print(f"📦 {w}")
    if out:
        print(f"📦 {write_summary(summary, out / 'diffusion.json')}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from decouple_report import variable_table, write_table

    table = variable_table(args.input, args.var, args.sector)
    text = write_table(table, args.out, args.digits)
    if args.out:
        print(f"✅ Wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_assign_blocs(args: argparse.Namespace) -> int:
    from decouple_calibration import assign_blocs, similarity_matrix

    cfg = _config(args, votes=args.votes)
    sim = similarity_matrix(Path(_require(cfg.votes, "--votes")))
    blocs, diff = assign_blocs(sim, args.west, args.east)
    for region, value in diff.items():
        print(f"   {region:<8} {value:+.3f}  {blocs[region]}")
    if args.out:
        write_json(args.out, {"west": args.west, "east": args.east, "blocs": blocs,
                              "differential": {r: float(v) for r, v in diff.items()}})
        print(f"📦 {args.out}")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "calibrate": cmd_calibrate,
    "calibrate-beta": cmd_calibrate_beta,
    "simulate": cmd_simulate,
    "scenario": cmd_scenario,
    "analyze-diffusion": cmd_analyze_diffusion,
    "report": cmd_report,
    "assign-blocs": cmd_assign_blocs,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    status, code = "ok", 0
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(f"decouple-sim v{__version__}")
            return 0
        if not args.command:
            parser.print_help()
            return 2
        prune_devlogs()
        log_event(devlog_path(), "command", {"argv": argv})
        code = COMMANDS[args.command](args)
    except SimulationError as e:
        code = e.exit_code
        status = type(e).__name__
        print(f"❌ {e.message}", file=sys.stderr)
        for line in e.describe_cells():
            print(line, file=sys.stderr)
        if session_logger:
            session_logger.log("ERROR", e.message, suggestion=status, metadata={"cells": e.cells[:20]})
    except SystemExit as e:
        # --help exits through argparse
        code = int(e.code or 0)
    except KeyboardInterrupt:
        print("\n⚠️  Interrupted", file=sys.stderr)
        code, status = 130, "interrupted"
    if session_logger:
        if code and status == "ok":
            status = f"exit {code}"
        session_logger.log_command("decouple-sim " + " ".join(argv), status)
    return code


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
