"""Command line interface: ``apcc calibrate | run | sweep | report``.

Every experiment field can come from a JSON config file (``--config``) and
be overridden by the flag of the same name (underscores become dashes).

Exit codes: 0 success, 2 configuration error, 3 calibration artifact
mismatch, 4 a trial or cell failed at run time.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from ..errors import APCCError, ArtifactMismatch, ConfigError
from .artifacts import DefenseArtifacts
from .config import ExperimentConfig
from .engine import artifact_header, artifact_path, get_artifacts
from .experiment import ResultTable, emit, markdown, run_experiment, sweep_tradeoff

log = logging.getLogger("apcc")

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_RUNTIME = 0, 2, 3, 4

_LIST_TYPES = {"variances": float, "N_A": int, "modes": str, "alphas": float}


def _field_type(f: dataclasses.Field):
    if f.name in _LIST_TYPES:
        return _LIST_TYPES[f.name]
    hints = typing.get_type_hints(ExperimentConfig)
    t = hints[f.name]
    args = [a for a in typing.get_args(t) if a is not type(None)]
    return args[0] if args else t


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with experiment fields")
    g = p.add_argument_group("experiment fields (override the config file)")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = _field_type(f)
        if f.name in _LIST_TYPES:
            g.add_argument(flag, dest=f.name, type=typ, nargs="+", default=None)
        else:
            g.add_argument(flag, dest=f.name, type=typ, default=None)


def _config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(ExperimentConfig)
                 if getattr(args, f.name, None) is not None}
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig.from_dict(overrides)


def _preloaded(cfg: ExperimentConfig, files) -> dict | None:
    """Artifacts named on the command line; each must match the config."""
    if not files:
        return None
    out = {}
    for path in files:
        with_header = DefenseArtifacts.load(path)
        variance = float(with_header.header.get("noise", [None, None])[1])
        if variance not in [float(v) for v in cfg.variances]:
            raise ArtifactMismatch(f"{path}: calibrated for variance {variance}, "
                                   f"config asks for {cfg.variances}")
        with_header.check(artifact_header(cfg, variance))
        out[variance] = with_header
    return out


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    if not cfg.artifact_dir:
        raise ConfigError("calibrate needs --artifact-dir")
    for variance in cfg.variances:
        art = get_artifacts(cfg, float(variance))
        path = artifact_path(cfg, float(variance))
        if not path.exists():
            art.save(path)
        print(json.dumps({"variance": variance, "path": str(path), "lo": art.interval.lo,
                          "hi": art.interval.hi, "beta": art.interval.beta,
                          "u": {str(a): b.u.tolist() for a, b in sorted(art.bounds.items())}}))
    return EXIT_OK


def _output_base(cfg, args) -> Path:
    out = args.output or cfg.output
    if not out:
        raise ConfigError("no output path (use --output)")
    return Path(out)


def cmd_run(args) -> int:
    cfg = _config(args)
    base = _output_base(cfg, args)
    table = run_experiment(cfg, _preloaded(cfg, args.artifacts))
    for fmt in args.format:
        suffix = {"csv": ".csv", "json": ".json", "markdown": ".md"}[fmt]
        path = emit(table, fmt, base.with_suffix(suffix))
        print(path)
    return EXIT_RUNTIME if table.failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    base = _output_base(cfg, args)
    rows = sweep_tradeoff(cfg, _preloaded(cfg, args.artifacts))
    print(emit(rows, "csv", base.with_suffix(".csv")))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        table = ResultTable.from_json(Path(args.results).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read results {args.results}: {exc}") from None
    text = markdown(table)
    if args.output:
        Path(args.output).write_text(text)
        print(args.output)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apcc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="train the predictor and write calibration artifacts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_calibrate)

    for name, func, helptext in (("run", cmd_run, "run an experiment grid"),
                                 ("sweep", cmd_sweep, "alpha tradeoff curve as csv")):
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p)
        p.add_argument("--artifacts", nargs="+", help="artifact files to use instead of calibrating")
        if name == "run":
            p.add_argument("--format", nargs="+", choices=["csv", "json", "markdown"],
                           default=["csv", "json"])
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="render a json result table as markdown")
    p.add_argument("results")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactMismatch as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except APCCError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
