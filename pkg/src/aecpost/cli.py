"""Command-line entry point: ``aecpost {run,bench,synth,metrics}``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
runtime failures (including filter divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .adaptive import VARIANTS
from .config import ConfigError, PipelineConfig, build_config, load_config, parse_stages
from .metrics import lsd, segmental_snr
from .pipeline import CSV_COLUMNS, PipelineError, csv_text, run_benchmark, run_pipeline, synthesize
from .signals import AudioSignal, WavFormatError, read_wav, write_wav

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat section.key = value file")
    common.add_argument("--seed", type=int, help="override scenario.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--stages", help="postfilter stages, e.g. NS,RS,REVS or none")
    common.add_argument("--variant", help=f"adaptive filter, one of {', '.join(VARIANTS)}")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config entry (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="aecpost", description="Echo cancellation and OM-LSA postfilter toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="run the full pipeline on one scenario")
    sub.add_parser("bench", parents=[common], help="run a variant x environment benchmark")
    sub.add_parser("synth", parents=[common], help="write the scenario signals as WAV files")
    m = sub.add_parser("metrics", parents=[common], help="segmental SNR and LSD between two WAVs")
    m.add_argument("reference")
    m.add_argument("processed")
    return parser


def _overrides(args):
    entries = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    if args.seed is not None:
        entries["scenario.seed"] = str(args.seed)
    if args.out is not None:
        entries["outputs.dir"] = args.out
    if args.stages is not None:
        parse_stages(args.stages)
        entries["postfilter.stages"] = args.stages
    if args.variant is not None:
        if args.variant.upper() not in VARIANTS:
            raise ConfigError(f"unknown variant {args.variant!r}; expected one of {VARIANTS}")
        entries["aec.variant"] = args.variant.upper()
    return entries


def _config(args):
    entries = _overrides(args)
    if args.config:
        return load_config(args.config, entries)
    return build_config(entries)


def _cmd_run(cfg):
    result = run_pipeline(cfg)
    rep = result.report
    for key, value in rep.scalars().items():
        print(f"{key}: {value:.6g}")
    if rep.diverged:
        print("error: adaptive filter diverged", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_bench(cfg, args):
    if args.seed is not None:
        cfg = cfg.replace(bench=dataclasses.replace(cfg.bench, seeds=f"{args.seed},"))
    result = run_benchmark(cfg, out_dir=cfg.outputs.dir)
    if not cfg.outputs.dir:
        sys.stdout.write(result.csv())
    return EXIT_OK


def _cmd_synth(cfg):
    scen = synthesize(cfg.scenario)
    out = Path(cfg.outputs.dir or ".")
    fs = cfg.scenario.sample_rate
    signals = {
        "far": scen.far.samples, "mic": scen.mic.samples, "echo": scen.echo,
        "near": scen.near, "near_early": scen.near_early, "noise": scen.noise,
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, x in signals.items():
            write_wav(out / f"{name}.wav", AudioSignal(x, fs), cfg.outputs.encoding)
    except OSError as exc:
        raise PipelineError("outputs", str(exc)) from exc
    print(f"wrote {len(signals)} files to {out}")
    return EXIT_OK


def _cmd_metrics(cfg, args):
    ref = read_wav(args.reference)
    proc = read_wav(args.processed)
    if ref.sample_rate != proc.sample_rate:
        raise ValueError("sample rates differ")
    n = min(len(ref), len(proc))
    ref = ref.with_samples(ref.samples[:n])
    proc = proc.with_samples(proc.samples[:n])
    m = cfg.metrics
    seg = segmental_snr(ref, proc, m.seg_frame_s, m.clamp_db, m.activity_db, floor_db=m.floor_db)
    dist = lsd(ref, proc, cfg.stft.params(), m.activity_db)
    print(f"seg_snr_db: {seg:.6g}")
    print(f"lsd_db: {dist:.6g}")
    if cfg.outputs.dir:
        out = Path(cfg.outputs.dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / cfg.outputs.metrics).write_text(csv_text(("seg_snr_db", "lsd_db"), [[seg, dist]]))
    return EXIT_OK


def cli_main(argv=None):
    """Parse ``argv`` and run a subcommand; returns the exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        # --help exits with status 0
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return _cmd_run(cfg)
        if args.command == "bench":
            return _cmd_bench(cfg, args)
        if args.command == "synth":
            return _cmd_synth(cfg)
        return _cmd_metrics(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, WavFormatError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())


__all__ = ["cli_main", "main", "CSV_COLUMNS", "PipelineConfig"]
