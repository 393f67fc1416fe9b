"""Command-line entry points: run, sweep, oracle-verify, render.

Exit codes: 0 success, 2 configuration error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import ConfigError, RunConfig, parse_config, render_config
from .harness import (NumericAbort, RunReport, EpochRow, render_report, report_csv,
                      run_experiment, sweep, sweep_csv, write_csv)
from .tabular import verify_derivations


def _load_config(args: argparse.Namespace) -> RunConfig:
    """File text first, then --set/--algo/--seed-list overrides, parsed as one document."""
    chunks = []
    if getattr(args, "config", None):
        chunks.append(Path(args.config).read_text(encoding="utf-8"))
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        chunks.append(item)
    if getattr(args, "algo", None):
        chunks.append(f"algorithm = {args.algo}")
    if getattr(args, "seed_list", None):
        chunks.append(f"seeds = {args.seed_list}")
    return parse_config("\n".join(chunks))


def _read_report_csv(path: Path) -> list[RunReport]:
    reports: dict[tuple[str, int], RunReport] = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        algo, seed, epoch, env_steps, *floats = line.split(",")
        key = (algo, int(seed))
        if key not in reports:
            reports[key] = RunReport(algo, int(seed), [])
        reports[key].rows.append(EpochRow(int(epoch), int(env_steps),
                                          *(float(x) for x in floats)))
    return list(reports.values())


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(render_config(cfg), encoding="utf-8")
    reports = run_experiment(cfg, workers=args.workers)
    render_report(reports, args.out / "run")
    for report in reports:
        final = report.final()
        print(f"{report.algo} seed={report.seed} epochs={len(report.rows)} "
              f"env_steps={final.env_steps} final_success={final.success_rate:.3f}")
    print(f"wrote {args.out / 'run.csv'}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    values = [float(v) for v in args.values.split(",")]
    args.out.mkdir(parents=True, exist_ok=True)
    results = sweep(cfg, args.param, values, workers=args.workers)
    for value, reports in results:
        write_csv(reports, args.out / f"sweep_{args.param}_{value!r}.csv")
    summary = args.out / f"sweep_{args.param}.csv"
    summary.write_text(sweep_csv(results, args.param), encoding="utf-8")
    for value, reports in results:
        mean_final = sum(r.final().success_rate for r in reports) / len(reports)
        print(f"{args.param}={value}: mean final success {mean_final:.3f}")
    print(f"wrote {summary}")
    return 0


def _cmd_oracle_verify(args: argparse.Namespace) -> int:
    report = verify_derivations(n_mdps=args.mdps, seed=args.seed)
    text = report.render()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0 if report.passed else 1


def _cmd_render(args: argparse.Namespace) -> int:
    reports: list[RunReport] = []
    for path in args.csv:
        reports.extend(_read_report_csv(Path(path)))
    written = render_report(reports, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dipper",
                                     description="Hierarchical preference-optimization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train one experiment (all seeds)")
    run_p.add_argument("--config", type=Path, help="key = value config file")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    run_p.add_argument("--algo", choices=("DIPPER", "DIPPER_NO_V", "DPO_FLAT", "HIER"))
    run_p.add_argument("--seed-list", help="comma-separated seeds, e.g. 0,1,2")
    run_p.add_argument("--out", type=Path, default=Path("out"))
    run_p.add_argument("--workers", type=int, default=1)
    run_p.set_defaults(fn=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="re-run the experiment over parameter values")
    sweep_p.add_argument("--config", type=Path)
    sweep_p.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep_p.add_argument("--algo", choices=("DIPPER", "DIPPER_NO_V", "DPO_FLAT", "HIER"))
    sweep_p.add_argument("--seed-list")
    sweep_p.add_argument("--param", required=True, choices=("lambda", "beta"))
    sweep_p.add_argument("--values", required=True, help="comma-separated values")
    sweep_p.add_argument("--out", type=Path, default=Path("out"))
    sweep_p.add_argument("--workers", type=int, default=1)
    sweep_p.set_defaults(fn=_cmd_sweep)

    oracle_p = sub.add_parser("oracle-verify", help="run the exact-MDP derivation checks")
    oracle_p.add_argument("--mdps", type=int, default=50)
    oracle_p.add_argument("--seed", type=int, default=0)
    oracle_p.add_argument("--out", type=Path, help="also write the log to this file")
    oracle_p.set_defaults(fn=_cmd_oracle_verify)

    render_p = sub.add_parser("render", help="re-render CSV reports to CSV+SVG")
    render_p.add_argument("--csv", nargs="+", required=True)
    render_p.add_argument("--out", type=Path, required=True, help="output path prefix")
    render_p.set_defaults(fn=_cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericAbort as exc:
        print(f"{exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
