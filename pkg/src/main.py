import argparse
import logging
import os
import sys
from typing import List, Optional

from .analysis import fit_dataset
from .config import ExperimentConfig, antenna_geometry, field_grid, load_config
from .errors import AczError, ConfigError
from .estimation import write_field_map
from .experiment import run_experiment
from .logging_config import setup_logging
from .measurement import pulse_error_map, synth_field_map
from .sensitivity_scan import run_sensitivity

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-dir", default="logs", help="directory for run logs")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on the console")
    common.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", required=True, help="experiment JSON file")
    configured.add_argument("--seed", type=int, default=None, help="overrides the config and ACZ_SEED")

    parser = argparse.ArgumentParser(prog="acz", description="AC Zeeman microwave amplitude sensing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, configured], help="generate a synthetic dataset")
    p.add_argument("--out", default=None, help="dataset directory (defaults to output_dir)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("fit", parents=[common], help="fit every trace of a dataset")
    p.add_argument("dataset", help="dataset directory holding manifest.json")
    p.add_argument("--out", default=None, help="report directory (defaults to the dataset)")

    p = sub.add_parser("sensitivity", parents=[common, configured], help="run the sensitivity scan")
    p.add_argument("--out", default=None)

    p = sub.add_parser("field-map", parents=[common, configured], help="write the synthetic antenna field map")
    p.add_argument("--out", default=None)

    sub.add_parser("validate-config", parents=[common, configured], help="check a config file and print its hash")
    return parser


def _load(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed)


def cmd_simulate(args) -> int:
    config = _load(args)
    manifest = run_experiment(config, args.out, args.threads, args.format)
    print(f"simulated {len(manifest['traces'])} traces into {args.out or config.output_dir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    summary = fit_dataset(args.dataset, args.out, args.threads)
    print(f"fitted {len(summary.rows) - len(summary.failed)}/{len(summary.rows)} traces")
    for name in summary.failed:
        print(f"error code=runtime where={name} message=fit failed", file=sys.stderr)
    return EXIT_RUNTIME if summary.failed else EXIT_OK


def cmd_sensitivity(args) -> int:
    config = _load(args)
    if config.sensitivity is None:
        raise ConfigError("required for the sensitivity command", where="sensitivity")
    report = run_sensitivity(config, args.out, args.threads)
    for n_pi in sorted(report.eta):
        print(f"N_pi={n_pi:3d} eta={report.eta[n_pi] * 1e3:.4g} uT/sqrt(Hz)")
    if report.p is not None:
        print(f"p={report.p:.3f}")
    print(f"eta_best={report.eta_best * 1e3:.4g} uT/sqrt(Hz) at tau*={report.tau_star:.4g} us")
    return EXIT_OK


def cmd_field_map(args) -> int:
    config = _load(args)
    if config.imaging is None:
        raise ConfigError("required for the field-map command", where="imaging")
    out = args.out or config.output_dir
    fmap = synth_field_map(antenna_geometry(config.imaging.antenna), field_grid(config.imaging))
    write_field_map(fmap, os.path.join(out, "field_map.csv"),
                    {"ratio": fmap.ratio(), "max_abs_pulse_error": float(abs(pulse_error_map(fmap)).max())})
    print(f"field map {fmap.width}x{fmap.height}, pixel {fmap.pixel_size:.4g} um, max/min {fmap.ratio():.3f}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    config = _load(args)
    print(f"ok scenario={config.scenario} hash={config.config_hash()}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "sensitivity": cmd_sensitivity,
    "field-map": cmd_field_map,
    "validate-config": cmd_validate_config,
}


def _error_line(code: str, where: str, message: str) -> str:
    return f"error code={code} where={where} message={message}"


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if not e.code else EXIT_VALIDATION

    setup_logging(args.log_dir, args.command, console_level=logging.WARNING if args.quiet else None)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        for issue in e.issues:
            where, _, message = issue.partition(": ")
            if not message:
                where, message = getattr(args, "config", "config"), issue
            print(_error_line("validation", where, message), file=sys.stderr)
        return EXIT_VALIDATION
    except (AczError, OSError) as e:
        logging.error(f"{args.command} failed: {e}")
        print(_error_line("runtime", args.command, str(e)), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
