"""``icl-align`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .exceptions import InvalidArgumentError
from .experiments import (
    EXPERIMENTS,
    THREADS_ENV,
    check_config,
    load_config_file,
    resolve_config,
    run_experiment,
    write_table,
)

log = logging.getLogger("icl_align")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output table path (stdout when omitted)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--d", type=int, help="override the dimension")
    common.add_argument("--threads", type=int,
                        help=f"worker threads for sweeps (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="icl-align", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
    sub.add_parser("validate", parents=[common],
                   help="check a config file and report all findings")
    return parser


def _validate(args) -> int:
    if not args.config:
        print("validate needs --config", file=sys.stderr)
        return EXIT_INVALID
    try:
        data, text = load_config_file(args.config)
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InvalidArgumentError as exc:
        print(f"{args.config}: {exc}")
        return EXIT_INVALID
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        print(f"{args.config}: line 1: missing or unknown experiment {exp!r}")
        return EXIT_INVALID
    findings = check_config(resolve_config(exp, data), text)
    for f in findings:
        print(f"{args.config}: {f}")
    if not findings:
        print(f"{args.config}: ok")
    return EXIT_INVALID if findings else EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "validate":
        return _validate(args)

    data, text = {}, ""
    if args.config:
        try:
            data, text = load_config_file(args.config)
        except OSError as exc:
            print(f"cannot read {args.config}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        except InvalidArgumentError as exc:
            print(f"{args.config}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        if data.get("experiment", args.command) != args.command:
            print(f"{args.config}: line 1: config is for experiment "
                  f"{data['experiment']!r}, not {args.command!r}", file=sys.stderr)
            return EXIT_INVALID
    overrides = {"seed": args.seed, "format": args.format, "d": args.d,
                 "threads": args.threads, "output": args.out}
    cfg = resolve_config(args.command, data, overrides)
    findings = check_config(cfg, text)
    if findings:
        where = args.config or "<defaults>"
        for f in findings:
            print(f"{where}: {f}", file=sys.stderr)
        return EXIT_INVALID

    out = cfg.get("output")
    if out:
        parent = os.path.dirname(os.path.abspath(out))
        if not os.path.isdir(parent):
            print(f"output directory {parent} does not exist", file=sys.stderr)
            return EXIT_INVALID
    try:
        rows, cols, extra = run_experiment(cfg)
    except (ArithmeticError, RuntimeError, InvalidArgumentError, MemoryError) as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text_out, manifest = write_table(rows, cols, cfg, out, extra)
    if out is None:
        sys.stdout.write(text_out)
    else:
        log.info("wrote %s and %s", out, manifest)
    failed = sum(1 for r in rows if str(r.get("status", "ok")).startswith("error"))
    if failed:
        print(f"{failed} of {len(rows)} rows carry error markers", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
