"""Command-line entry point.

Subcommands cover the full experiment flow: gen-synthetic, ingest,
analyze, train, synth, eval, stats, report, export-world, serve.  Each
stage validates upstream artifacts by fingerprint and writes the resolved
config into the run directory.

Exit codes: 0 success, 2 validation error, 3 dependency error, 4 runtime
failure.
"""

import argparse
import sys

from .config import RunConfig
from .corpus import SynthCorpusConfig, generate_synthetic_corpus
from .errors import ConfigError, DependencyError, EmasynthError, ParseError
from . import pipeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DEPENDENCY = 3
EXIT_RUNTIME = 4


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if getattr(args, "run_dir", None):
        config.run_dir = args.run_dir
    if getattr(args, "corpus_root", None):
        config.corpus_root = args.corpus_root
    if getattr(args, "setup", None):
        config.setup = args.setup
    if getattr(args, "speakers", None):
        config.speakers = args.speakers
    return config


def _add_config_args(parser):
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--run-dir", help="override output run directory")
    parser.add_argument("--corpus-root", help="override corpus root")
    parser.add_argument("--setup", choices=["synthesis", "manipulation"],
                        help="override train/test setup")
    parser.add_argument("--speakers", nargs="*", help="restrict to speakers")


def cmd_gen_synthetic(args) -> int:
    config = SynthCorpusConfig(
        n_speakers=args.speakers,
        n_healthy=args.healthy,
        movement_sensors=args.movement_sensors,
        segments_range=tuple(args.segments),
        segment_duration_range_s=tuple(args.segment_duration),
        noise_scale=args.noise_scale,
        write_audio=not args.no_audio,
    ).validate()
    manifest = generate_synthetic_corpus(args.out, config, seed=args.seed)
    print(f"wrote {len(manifest.utterances)} utterances for "
          f"{len(manifest.speakers)} speaker(s) under {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    summary = pipeline.stage_ingest(_load_config(args))
    print(f"ingested {summary['n']} utterances")
    return EXIT_OK


def cmd_analyze(args) -> int:
    written = pipeline.stage_analyze(_load_config(args))
    print(f"analyzed {len(written)} audio files")
    return EXIT_OK


def cmd_train(args) -> int:
    written = pipeline.stage_train(_load_config(args))
    print(f"trained {len(written)} checkpoints")
    return EXIT_OK


def cmd_synth(args) -> int:
    summary = pipeline.stage_synth(_load_config(args), variant=args.variant,
                                   aug_seed=args.aug_seed)
    print(f"rendered {len(summary['rendered'])} utterances "
          f"({summary['variant']}, seed {summary['aug_seed']})")
    return EXIT_OK


def cmd_eval(args) -> int:
    summary = pipeline.stage_eval(_load_config(args),
                                  responses_path=args.responses)
    print(f"evaluated in mode {summary['mode']} "
          f"({summary['n_sweep_checkpoints']} sweep checkpoints)")
    return EXIT_OK


def cmd_stats(args) -> int:
    rows = pipeline.stage_stats(_load_config(args),
                                responses_path=args.responses)
    print(f"computed {len(rows)} statistical tests")
    return EXIT_OK


def cmd_report(args) -> int:
    summary = pipeline.stage_report(_load_config(args))
    print(f"report at {summary['report_txt']}")
    return EXIT_OK


def cmd_export_world(args) -> int:
    written = pipeline.stage_export_world(_load_config(args),
                                          source=args.source)
    print(f"exported {len(written)} WORLD feature sets")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ResponseStore, StimulusRegistry, create_app

    if args.registry:
        registry = StimulusRegistry.load(args.registry)
    else:
        if not args.config:
            raise ConfigError("serve needs --registry or --config")
        config = _load_config(args)
        registry = pipeline.build_run_registry(config)
        if args.save_registry:
            registry.save(args.save_registry)
    store = ResponseStore(args.log, registry)
    app = create_app(store, static_dir=args.ui_dir)
    print(f"serving listening tests on port {args.port} "
          f"({len(registry.by_id)} stimuli, log at {args.log})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emasynth",
        description="EMA-to-acoustic articulatory synthesis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=1)
    p.add_argument("--healthy", type=int, default=1)
    p.add_argument("--movement-sensors", type=int, default=3)
    p.add_argument("--segments", type=int, nargs=2, default=[3, 10])
    p.add_argument("--segment-duration", type=float, nargs=2,
                   default=[0.1, 0.4])
    p.add_argument("--noise-scale", type=float, default=0.01)
    p.add_argument("--no-audio", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)

    for name, func in (("ingest", cmd_ingest), ("analyze", cmd_analyze),
                       ("train", cmd_train), ("report", cmd_report)):
        p = sub.add_parser(name)
        _add_config_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="render predicted/resynthesis audio")
    _add_config_args(p)
    p.add_argument("--variant", default="clean",
                   help="checkpoint variant (clean or sig<sigma>)")
    p.add_argument("--aug-seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="objective evaluation (MCD and tables)")
    _add_config_args(p)
    p.add_argument("--responses", default=None,
                   help="NDJSON responses export for MOS/confusion tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="statistical tests")
    _add_config_args(p)
    p.add_argument("--responses", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export-world", help="write WORLD-style f64 arrays")
    _add_config_args(p)
    p.add_argument("--source", choices=["corpus", "predicted"],
                   default="corpus")
    p.set_defaults(func=cmd_export_world)

    p = sub.add_parser("serve", help="start the listening-test service")
    p.add_argument("--config", help="run config JSON (to build the registry)")
    p.add_argument("--run-dir")
    p.add_argument("--corpus-root")
    p.add_argument("--registry", help="prebuilt stimuli.json")
    p.add_argument("--save-registry", help="write the built registry here")
    p.add_argument("--log", required=True, help="JSONL response log path")
    p.add_argument("--ui-dir", default=None, help="static UI directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except EmasynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - unexpected faults
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
