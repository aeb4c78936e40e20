"""Command-line entry point: ``stresnet {extract,train,filter,eval,demo}``.

Every command writes ``<primary output>.manifest.json`` recording the resolved
configuration.  Reports go to stdout as comma-separated lines; ``--report-dir``
additionally writes CSV files and PNG figures.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dataset, metrics, model, pipeline, trainer
from .errors import ConfigurationError, StresnetError

log = logging.getLogger("stresnet")

THREADS_ENV = "STRESNET_THREADS"


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _existing_file(text):
    if not os.path.isfile(text):
        raise ConfigurationError(f"no such file: {text}")
    return text


def write_manifest(output, args, extra=None):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func", "argv")}
    manifest = {
        "tool": "stresnet",
        "version": __version__,
        "command": args.command,
        "argv": getattr(args, "argv", sys.argv[1:]),
        "config": config,
    }
    if extra:
        manifest.update(extra)
    path = Path(str(output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _add_dims(p):
    p.add_argument("--width", type=_positive_int, required=True)
    p.add_argument("--height", type=_positive_int, required=True)
    p.add_argument("--frames", type=_positive_int, required=True, help="frames to read")
    p.add_argument("--start-frame", type=int, default=0, help="frames to skip at the file start")
    p.add_argument("--refs", help="reference-index file: one integer per frame, -1 for none")


def _load(path, args, keep_chroma=False):
    seq = dataset.load_yuv(_existing_file(path), args.width, args.height, args.frames,
                           keep_chroma=keep_chroma, start=args.start_frame)
    if args.refs:
        seq.reference_index = dataset.read_reference_index(_existing_file(args.refs), len(seq))
        seq.__post_init__()
    return seq


def cmd_extract(args):
    pristine = _load(args.pristine, args)
    if args.degraded:
        degraded = _load(args.degraded, args)
    else:
        spec = (dataset.DegradeSpec(args.degrade_step) if args.degrade_step
                else dataset.DegradeSpec.from_qp(args.degrade_qp))
        degraded = dataset.degrade(pristine, spec)
        if args.degraded_out:
            dataset.write_yuv(args.degraded_out, degraded)
    samples = dataset.extract_samples(pristine, degraded, stride=args.stride)
    if not samples:
        raise ConfigurationError("no training samples could be extracted")
    store = dataset.shuffle_store(samples, args.seed, qp=args.qp)
    dataset.write_store(store, args.out)
    write_manifest(args.out, args, {"samples": store.count})
    print(f"samples,{store.count}")
    return 0


def cmd_train(args):
    store = dataset.read_store(_existing_file(args.store))
    qp = args.qp if args.qp is not None else store.qp
    hp = trainer.HyperParams.for_qp(
        qp,
        base_learning_rate=args.lr,
        momentum=args.momentum,
        momentum2=args.momentum2,
        iterations=args.iterations,
        batch_size=args.batch_size,
        adam_epsilon=args.epsilon,
        seed=args.seed,
    )
    holdout = int(store.count * args.holdout)
    if store.count - holdout < hp.batch_size:
        holdout = 0

    sink = None
    if args.checkpoint_dir:
        ckpt_dir = Path(args.checkpoint_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)

        def sink(iteration, weights):
            model.save(weights, ckpt_dir / f"checkpoint_{iteration:07d}.strn")

    started = time.perf_counter()
    weights, report = trainer.train(store, hp, checkpoint_sink=sink, holdout=holdout,
                                    log_every=args.log_every, checkpoint_every=args.checkpoint_every)
    elapsed = time.perf_counter() - started
    model.save(weights, args.out)
    loss_log = args.loss_log or str(args.out) + ".loss.tsv"
    trainer.write_loss_log(report, loss_log)
    if args.report_dir:
        from .plotting import plot_loss
        Path(args.report_dir).mkdir(parents=True, exist_ok=True)
        plot_loss(report.log, Path(args.report_dir) / "loss.png")
    write_manifest(args.out, args, {
        "resolved_hyperparams": {k: getattr(hp, k) for k in hp.__dataclass_fields__},
        "holdout_samples": holdout,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "seconds": elapsed,
    })
    print(f"initial_loss,{report.initial_loss:.9g}")
    print(f"final_loss,{report.final_loss:.9g}")
    print(f"evaluated_on,{report.evaluated_on}")
    return 0


def frame_report(original, degraded, filtered, flags):
    rows = []
    for i, (o, d, f) in enumerate(zip(original.frames, degraded.frames, filtered.frames)):
        rows.append((i, metrics.psnr(o, d), metrics.psnr(o, f), sum(flags[i])))
    return rows


def _mean(values):
    values = list(values)
    return sum(values) / len(values)


def cmd_filter(args):
    weights = model.load(_existing_file(args.model))
    degraded = _load(args.degraded, args, keep_chroma=True)
    original = _load(args.original, args)
    started = time.perf_counter()
    result = pipeline.filter_sequence(weights, degraded, original, mode=args.mode, threads=args.threads)
    elapsed = time.perf_counter() - started
    dataset.write_yuv(args.out, result.sequence)
    flags_path = args.flags or str(args.out) + ".flags"
    trace_path = args.trace or str(args.out) + ".trace.csv"
    pipeline.write_flags(flags_path, result.flags)
    pipeline.write_trace(trace_path, result.trace)

    rows = frame_report(original, degraded, result.sequence, result.flags)
    mean_before = _mean(r[1] for r in rows)
    mean_after = _mean(r[2] for r in rows)
    # a frame identical to its original can never be flagged, so inf - inf counts as no gain
    gain = _mean(0.0 if r[1] == r[2] else r[2] - r[1] for r in rows)
    print("frame,psnr_degraded,psnr_filtered,ctus_on")
    for r in rows:
        print(f"{r[0]},{r[1]:.6f},{r[2]:.6f},{r[3]}")
    print(f"mean_psnr_degraded,{mean_before:.6f}")
    print(f"mean_psnr_filtered,{mean_after:.6f}")
    print(f"mean_psnr_gain,{gain:.6f}")
    print(f"ctus_on,{sum(map(sum, result.flags))}/{len(result.grid) * len(result.flags)}")

    if args.report_dir:
        from .plotting import plot_flag_map, plot_frame_psnr
        out_dir = Path(args.report_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "frame_psnr.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "psnr_degraded", "psnr_filtered", "ctus_on"])
            writer.writerows(rows)
        plot_frame_psnr(rows, out_dir / "frame_psnr.png", f"mean gain {gain:+.3f} dB")
        plot_flag_map(result.flags, result.grid, out_dir / "ctu_flags.png")
    write_manifest(args.out, args, {"mean_psnr_gain": gain, "seconds": elapsed,
                                    "flags": flags_path, "trace": trace_path})
    return 0


def _fmt(value):
    return "inf" if value == math.inf else f"{value:.6f}"


def cmd_eval(args):
    report_dir = Path(args.report_dir) if args.report_dir else None
    if report_dir:
        report_dir.mkdir(parents=True, exist_ok=True)
    if args.psnr:
        for flag in ("width", "height", "frames"):
            if getattr(args, flag) is None:
                raise ConfigurationError(f"--psnr needs --{flag}")
        a = _load(args.psnr[0], args)
        b = _load(args.psnr[1], args)
        values = [metrics.psnr(x, y) for x, y in zip(a.frames, b.frames)]
        print("frame,psnr")
        for i, v in enumerate(values):
            print(f"{i},{_fmt(v)}")
        print(f"mean,{_fmt(_mean(values))}")
        if report_dir:
            with open(report_dir / "psnr.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["frame", "psnr"])
                writer.writerows(enumerate(values))
    if args.bdrate:
        anchor = metrics.read_rd_csv(_existing_file(args.bdrate[0]))
        test = metrics.read_rd_csv(_existing_file(args.bdrate[1]))
        value = metrics.bd_rate(anchor, test)
        shown = round(value, 2) + 0.0
        print(f"bd_rate,{shown:.2f}%")
        if report_dir:
            from .plotting import plot_rd_curves
            (report_dir / "bdrate.csv").write_text(f"bd_rate_percent\n{value!r}\n")
            plot_rd_curves(anchor, test, report_dir / "rd_curves.png", bd=value)
    if args.dt:
        pair = metrics.TimingPair(*args.dt)
        increment = metrics.timing_ratio(pair)
        fraction = metrics.time_fraction(pair)
        print(f"delta_t,{increment!r}")
        print(f"increment,{100 * increment:.1f}%")
        print(f"ratio,{100 * fraction:.1f}%")
        if report_dir:
            from .plotting import plot_timing
            (report_dir / "timing.csv").write_text(
                f"baseline_seconds,modified_seconds,delta_t,ratio\n"
                f"{pair.baseline_seconds!r},{pair.modified_seconds!r},{increment!r},{fraction!r}\n"
            )
            plot_timing(pair.baseline_seconds, pair.modified_seconds, report_dir / "timing.png")
    if not (args.psnr or args.bdrate or args.dt):
        raise ConfigurationError("eval needs --psnr, --bdrate or --dt")
    if report_dir:
        write_manifest(report_dir / "eval", args)
    return 0


def cmd_demo(args):
    """degrade -> extract -> short train -> filter -> eval on a generated clip."""
    from .synthetic import panning_sequence

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w, h, n, split = 128, 96, 8, 4
    pristine = panning_sequence(h, w, n, seed=args.seed)
    dataset.write_yuv(out / "pristine.yuv", pristine)
    dataset.write_yuv(out / "degraded.yuv", dataset.degrade(pristine, dataset.DegradeSpec(16)))
    # frames [split, n) are filtered; their pristine copy is what eval compares against
    dataset.write_yuv(out / "pristine_tail.yuv", pristine.with_frames(pristine.frames[split:]))
    dims = ["--width", str(w), "--height", str(h)]
    report = str(out / "report")
    steps = [
        ["extract", "--pristine", str(out / "pristine.yuv"), "--degraded", str(out / "degraded.yuv"),
         "--frames", str(split + 1), "--stride", "14",
         "--seed", str(args.seed), "--qp", "32", "--out", str(out / "train.stds")] + dims,
        # a tiny epsilon so Adam still moves the deep layers from the 0.001-std init
        ["train", "--store", str(out / "train.stds"), "--lr", "1e-5", "--epsilon", "1e-14", "--momentum2", "0.999",
         "--iterations", str(args.iterations), "--batch-size", "8", "--log-every", "50",
         "--seed", str(args.seed), "--out", str(out / "model.strn"), "--report-dir", report],
        ["filter", "--model", str(out / "model.strn"), "--degraded", str(out / "degraded.yuv"),
         "--original", str(out / "pristine.yuv"), "--start-frame", str(split),
         "--frames", str(n - split), "--out", str(out / "filtered.yuv"), "--report-dir", report] + dims,
        ["eval", "--psnr", str(out / "pristine_tail.yuv"), str(out / "filtered.yuv"),
         "--frames", str(n - split), "--report-dir", report] + dims,
    ]
    for argv in steps:
        print(f"# stresnet {argv[0]}")
        status = main(argv)
        if status:
            return status
    write_manifest(out / "demo", args)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="stresnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=_default_threads(),
                        help=f"worker cap (default from ${THREADS_ENV}, else 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="cut shuffled training triplets into a sample store")
    p.add_argument("--pristine", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--degraded", help="decoded counterpart of --pristine")
    src.add_argument("--degrade-step", type=float, help="simulate degradation with this DCT step")
    src.add_argument("--degrade-qp", type=int, help="simulate degradation at this QP")
    p.add_argument("--degraded-out", help="also write the simulated degraded YUV here")
    _add_dims(p)
    p.add_argument("--stride", type=_positive_int, default=dataset.DEFAULT_STRIDE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qp", type=int, default=0, help="QP tag stored in the header")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model on a sample store")
    p.add_argument("--store", required=True)
    p.add_argument("--qp", type=int, help="defaults to the store's QP tag")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--momentum2", type=float)
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.1, help="fraction held out for the final loss")
    p.add_argument("--log-every", type=_positive_int, default=trainer.LOG_EVERY)
    p.add_argument("--checkpoint-every", type=_positive_int, default=trainer.CHECKPOINT_EVERY)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--loss-log")
    p.add_argument("--report-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("filter", help="CTU-gated filtering of a degraded sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--degraded", required=True)
    p.add_argument("--original", required=True)
    _add_dims(p)
    p.add_argument("--mode", choices=pipeline.MODES, default=pipeline.IN_LOOP)
    p.add_argument("--out", required=True)
    p.add_argument("--flags")
    p.add_argument("--trace")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="PSNR, BD-rate and timing ratios")
    p.add_argument("--psnr", nargs=2, metavar=("A.yuv", "B.yuv"))
    p.add_argument("--bdrate", nargs=2, metavar=("ANCHOR.csv", "TEST.csv"))
    p.add_argument("--dt", nargs=2, type=float, metavar=("T", "T_PRIME"))
    p.add_argument("--width", type=_positive_int)
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--frames", type=_positive_int)
    p.add_argument("--start-frame", type=int, default=0)
    p.add_argument("--refs")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="run the whole chain on a generated clip")
    p.add_argument("--out-dir", default="stresnet-demo")
    p.add_argument("--iterations", type=_positive_int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StresnetError, OSError) as exc:
        print(f"stresnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
