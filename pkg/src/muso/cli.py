"""Command line: ``muso run <config>``, ``muso validate <config>``, ``muso report <dir>``.

Exit codes: 0 success, 1 config or usage error, 2 runtime failure.
"""

import argparse
import sys
from pathlib import Path

from .harness import ConfigError, load_config, load_reports, render_summary, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="muso", description="Exact unlearning experiments by optimal relabelling.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--output-dir", type=Path, help="overrides the config and MUSO_OUTPUT_DIR")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config", type=Path)
    p_rep = sub.add_parser("report", help="re-render summary.csv from run reports")
    p_rep.add_argument("directory", type=Path)
    p_rep.add_argument("--out", type=Path, help="write the CSV here instead of stdout")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            load_config(args.config)
            print(f"{args.config}: ok")
            return EXIT_OK
        if args.command == "run":
            cfg = load_config(args.config)
            out = run_experiment(cfg, args.output_dir)
            print(f"wrote {out / 'summary.csv'}")
            return EXIT_OK
        text = render_summary(load_reports(args.directory))
        if args.out is not None:
            args.out.write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        if args.command in ("validate",):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
