"""Command-line front end: ``panelq estimate | simulate | report``."""
from dataclasses import replace
from pathlib import Path
from typing import List, Optional
import argparse
import logging
import sys

from . import __version__
from .config import EstimatorSettings, resolve_threads
from .errors import ConfigError, IO_EXIT_CODE, PanelQError
from .md_estimator import confidence_interval, estimate_md, wald_test
from .panel_io import load_panel, read_record, write_estimate, write_record
from .qr_core import _check_tau
from .reporting import render_report, summary_frame
from .simulation import STATISTICS, PresetLibrary, SimulationConfig, SimulationReport, run_monte_carlo

logger = logging.getLogger(__name__)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--threads', type=int, default=None,
                        help="worker count (default: $PANELQ_THREADS, else all CPUs)")
    common.add_argument('--output', type=Path, default=None, help="record file to write")
    common.add_argument('--format', choices=('table', 'record'), default='table',
                        help="what goes to standard output")
    common.add_argument('-v', '--verbose', action='store_true', help="debug logging")
    common.add_argument('-q', '--quiet', action='store_true', help="warnings and errors only")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog='panelq',
        description="Minimum-distance quantile regression for fixed-effects panels.")
    parser.add_argument('--version', action='version', version=f"panelq {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    est = sub.add_parser('estimate', parents=[common], help="estimate beta_MD(tau) from a CSV panel")
    est.add_argument('--input', required=True, help="CSV long-format panel ('-' for stdin)")
    est.add_argument('--tau', type=float, action='append', dest='taus',
                     help="quantile level, repeatable (default 0.5)")
    est.add_argument('--mode', choices=('iid', 'dependent'), default='iid')
    est.add_argument('--d-t', type=float, default=None, dest='d_t', help="density bandwidth override")
    est.add_argument('--m-t', type=int, default=None, dest='m_t', help="truncation lag override")
    est.add_argument('--bandwidth-rule', choices=('hall_sheather', 'bofinger'), default='hall_sheather')
    est.add_argument('--drop-failed', action='store_true',
                     help="exclude individuals whose fit or sandwich fails instead of aborting")
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser('simulate', parents=[common], help="run a Monte Carlo experiment")
    source = sim.add_mutually_exclusive_group(required=True)
    source.add_argument('--preset', help="built-in or user preset (table1, table1_se, ..., table3_se)")
    source.add_argument('--config-file', type=Path, help="JSON SimulationConfig")
    sim.add_argument('--replications', type=int, default=None)
    sim.add_argument('--seed', type=int, default=None)
    sim.set_defaults(func=cmd_simulate)

    rep = sub.add_parser('report', parents=[common], help="render and compare simulation records")
    rep.add_argument('records', nargs='+', type=Path)
    rep.add_argument('--reference', action='store_true', help="add the published values")
    rep.add_argument('--tolerance', type=float, default=0.10,
                     help="relative deviation that flags a cell (default 0.10)")
    rep.add_argument('--statistic', choices=STATISTICS, action='append', dest='statistics')
    rep.set_defaults(func=cmd_report)
    return parser


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s',
                        stream=sys.stderr)
    logging.getLogger().setLevel(level)


def _record_path(output: Path, tau: float, many: bool) -> Path:
    if not many:
        return output
    return output.with_name(f"{output.stem}_tau{tau:g}{output.suffix or '.json'}")


def format_estimate(est) -> str:
    lines = [f"tau = {est.tau:g}   mode = {est.mode}   n = {est.n}   T = {est.T}"]
    if est.excluded:
        lines.append(f"excluded individuals: {', '.join(est.excluded)}")
    lines.append(f"{'':>8}  {'estimate':>12}  {'std.err':>12}  {'95% CI':>27}")
    for j in range(1, est.p + 1):
        lo, hi = confidence_interval(est, j)
        lines.append(f"{'beta' + str(j):>8}  {est.beta_md[j - 1]:12.6f}  {est.std_errors[j - 1]:12.6f}"
                     f"  [{lo:12.6f}, {hi:12.6f}]")
    wald = wald_test(est, [[1.0 if k == j else 0.0 for k in range(est.p)] for j in range(est.p)],
                     [0.0] * est.p)
    lines.append(f"Wald test beta = 0: statistic = {wald.statistic:.4f}, df = {wald.df}, "
                 f"p-value = {wald.p_value:.4g}")
    return "\n".join(lines)


def cmd_estimate(args) -> int:
    taus = [_check_tau(tau) for tau in (args.taus or [0.5])]
    if args.m_t is not None and args.mode != 'dependent':
        raise ConfigError("--m-t only applies to --mode dependent")
    settings = EstimatorSettings(bandwidth_rule=args.bandwidth_rule, d_T=args.d_t, m_T=args.m_t,
                                 drop_failed=args.drop_failed)
    threads = resolve_threads(args.threads)

    source = sys.stdin.buffer.read() if args.input == '-' else Path(args.input)
    panel = load_panel(source)
    config = {'input': str(args.input), 'settings': settings.to_dict()}
    blocks = []
    for tau in taus:
        est = estimate_md(panel, tau, mode=args.mode, settings=settings, threads=threads)
        if args.output is not None:
            path = _record_path(args.output, tau, len(taus) > 1)
            write_estimate(est, path, config=config)
            logger.info("wrote %s", path)
        if args.format == 'record':
            # one record per line
            write_estimate(est, sys.stdout, config=config, indent=None)
        else:
            blocks.append(format_estimate(est))
    if blocks:
        print("\n\n".join(blocks))
    return 0


def _simulation_config(args) -> SimulationConfig:
    if args.preset is not None:
        config = PresetLibrary().get_preset(args.preset)
    else:
        config = SimulationConfig.from_file(args.config_file)
    overrides = {}
    if args.replications is not None:
        overrides['replications'] = args.replications
    if args.seed is not None:
        overrides['seed'] = args.seed
    return replace(config, **overrides)


def cmd_simulate(args) -> int:
    config = _simulation_config(args)
    threads = resolve_threads(args.threads)
    report = run_monte_carlo(config, threads=threads)
    if args.output is not None:
        write_record(report.to_dict(), args.output)
        logger.info("wrote %s", args.output)
    if args.format == 'record':
        write_record(report.to_dict(), sys.stdout)
    else:
        print(render_report([report]))
        print(f"\n{config.replications} replications, wall time {report.wall_time:.1f} s")
    return 0


def cmd_report(args) -> int:
    reports = [SimulationReport.from_dict(read_record(path)) for path in args.records]
    if args.tolerance <= 0:
        raise ConfigError(f"--tolerance must be positive, got {args.tolerance}")
    if args.format == 'record':
        statistics = args.statistics or list(dict.fromkeys(r.config.statistic for r in reports))
        for statistic in statistics:
            frame = summary_frame(reports, statistic)
            frame.insert(0, 'statistic', statistic)
            frame.to_csv(sys.stdout, index=False)
        return 0
    print(render_report(reports, statistics=args.statistics, reference=args.reference,
                        tolerance=args.tolerance if args.reference else None))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args)
    try:
        return args.func(args)
    except PanelQError as e:
        logger.error("%s", e)
        print(f"panelq: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        print(f"panelq: error: {e}", file=sys.stderr)
        return IO_EXIT_CODE
