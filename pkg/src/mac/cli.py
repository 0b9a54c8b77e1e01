"""The ``mac`` command line tool.

Subcommands: train, infer, diagnose, bench, make-data, dump-config.
Exit codes: 0 success, 1 usage error, 2 config validation error,
3 runtime failure. All errors go to stderr with an ``error_code=`` prefix.
``MAC_NUM_THREADS`` caps worker threads (applied before numpy loads).
"""

from __future__ import annotations

import argparse
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_thread_cap() -> None:
    cap = os.environ.get("MAC_NUM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser() -> _Parser:
    parser = _Parser(prog="mac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training schedule from a config")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--out", default="mac_run", help="output directory")

    p = sub.add_parser("infer", help="caption one clip with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", help="input WAV file")
    src.add_argument("--features", help="precomputed feature grid file")
    p.add_argument("--prompt", help="defaults to the checkpoint's caption prompt")
    p.add_argument("--max-len", type=int, default=24)

    p = sub.add_parser("diagnose", help="representation diagnostics CSVs")
    p.add_argument("metric", choices=["erank", "cosine", "state-dist"])
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint(s); each contributes one table cell")
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or a manifest.jsonl path")
    p.add_argument("--n", type=int, default=8, help="number of clips to analyze")
    p.add_argument("--out", default="diagnostics.csv")

    p = sub.add_parser("bench", help="scaling benchmark of the scan kernels")
    p.add_argument("--mode", default="recurrent",
                   choices=["recurrent", "chunked", "convolutional"])
    p.add_argument("--lengths", default="256,512,1024,2048,4096,8192")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")

    p = sub.add_parser("make-data", help="generate the synthetic captioned corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("dump-config", help="print the validated default config")
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error_code=usage {exc}", file=sys.stderr)
        return 1

    from . import config as configmod

    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"error_code=usage {exc}", file=sys.stderr)
        return 1
    except configmod.ConfigError as exc:
        print(f"error_code=config {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error_code=interrupted training stopped; checkpoint flushed", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failures map to exit 3
        from .pipeline import TrainingDiverged

        if isinstance(exc, TrainingDiverged) and exc.dump_path:
            print(f"error_code=runtime {exc}; diagnostics dump: {exc.dump_path}",
                  file=sys.stderr)
        else:
            print(f"error_code=runtime {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def _dispatch(args) -> int:
    from . import config as configmod

    if args.command == "dump-config":
        print(configmod.dump(configmod.Config()), end="")
        return 0

    if args.command == "make-data":
        from . import synth

        manifest = synth.write_corpus(args.out, args.n, args.seed)
        print(manifest)
        return 0

    if args.command == "bench":
        from . import diagnostics

        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
        if lengths != sorted(lengths) or not lengths:
            raise UsageError("--lengths must be a sorted, non-empty list")
        rows, slope = diagnostics.scaling_bench(lengths, mode=args.mode, seed=args.seed)
        diagnostics.write_bench_csv(args.out, rows, slope)
        for t, wall, flops in rows:
            print(f"T={t:<6d} time={wall:.6f}s flops={flops}")
        print(f"fitted log-log slope: {slope:.4f}")
        return 0

    if args.command == "train":
        return _cmd_train(args)
    if args.command == "infer":
        return _cmd_infer(args)
    if args.command == "diagnose":
        return _cmd_diagnose(args)
    raise UsageError(f"unknown command {args.command!r}")


def _cmd_train(args) -> int:
    from . import config as configmod
    from . import pipeline

    cfg = configmod.parse_file(args.config) if args.config else configmod.Config()
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if overrides:
        cfg = configmod.apply_overrides(cfg, overrides)

    try:
        rows = pipeline.run_experiment(cfg, args.out)
    except KeyboardInterrupt:
        # flush whatever exists so the run can be resumed/inspected
        print(f"interrupted; partial outputs in {args.out}", file=sys.stderr)
        raise
    last = rows[-1]
    print(f"done: {len(rows)} epochs, final loss {last['loss']:.4f}, "
          f"caption F1 {last['caption_f1']:.3f} -> {os.path.join(args.out, 'metrics.csv')}")
    return 0


def _cmd_infer(args) -> int:
    from . import pipeline

    cap = pipeline.load_captioner(args.checkpoint)
    prompt = args.prompt if args.prompt is not None else cap.cfg["data.prompt"]
    audio = {"wav": args.wav} if args.wav else {"features": args.features}
    sample = pipeline.Sample(audio=audio, prompt=prompt)
    print(pipeline.generate_greedy(cap, sample, max_len=args.max_len))
    return 0


def _cmd_diagnose(args) -> int:
    import numpy as np

    from . import diagnostics, pipeline, synth

    def dataset_samples(cap):
        if args.dataset == "synthetic":
            records = synth.make_corpus(args.n, seed=cap.cfg["train.seed"])
            return [pipeline.Sample(audio={"synthetic": r["spec"]},
                                    prompt=cap.cfg["data.prompt"], caption=r["caption"])
                    for r in records]
        records = synth.read_manifest(args.dataset)[: args.n]
        return [pipeline.Sample(audio={"wav": r["wav"]}, prompt=cap.cfg["data.prompt"],
                                caption=r.get("caption")) for r in records]

    if args.metric == "state-dist":
        cap = pipeline.load_captioner(args.checkpoint[0])
        samples = dataset_samples(cap)
        import csv as csvmod

        with open(args.out, "w", newline="") as fh:
            writer = csvmod.writer(fh)
            writer.writerow(["sample", "position", "distance"])
            for i, s in enumerate(samples):
                mean_d, _ = diagnostics.state_update_distances(cap, s)
                for t, d in enumerate(mean_d):
                    writer.writerow([i, t + 1, f"{d:.6f}"])
        print(args.out)
        return 0

    cells: dict[tuple[str, str], float] = {}
    for ck in args.checkpoint:
        cap = pipeline.load_captioner(ck)
        samples = dataset_samples(cap)
        import mac.tensor as tz

        with tz.no_grad():
            token_rows = np.concatenate(
                [cap.audio_grid(s).flat().data for s in samples], axis=0
            )
        feats = diagnostics.FeatureMatrix(token_rows, source=ck)
        model = cap.cfg["model.preset"]
        variant = cap.cfg["connector.variant"]
        if args.metric == "erank":
            cells[(model, variant)] = diagnostics.erank_of_tokens(
                feats, on=cap.cfg["diag.erank_on"])
        else:
            cells[(model, variant)] = diagnostics.mean_pairwise_cosine(feats)
    diagnostics.write_grid_csv(args.out, args.metric, cells)
    print(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
