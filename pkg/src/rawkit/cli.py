"""Command-line front end.

One binary, subcommand per workflow; manifests are the batch interface.
Progress goes to stdout as JSON lines (silenced by --quiet), errors to
stderr.  Exit codes: 0 success, 1 completed with per-item or quality
failures, 2 usage/configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import bench, dataio, forward, reverse
from .fit import FitConfig, FitError, LossKind, fit_full, load_pair_batch
from .model import BayerPattern, IspParams, ParamError, PipelineError, pack_bayer


class UsageError(Exception):
    """Bad flag combination or value, detected before real work starts."""


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError("size must look like WxH, e.g. 4032x3024")


def _global_flags(parser, suppress: bool):
    # registered on the root parser with real defaults, and on every
    # subcommand with SUPPRESS so either position works and an explicit
    # post-command flag wins
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--threads", type=int, default=d(1), metavar="N",
                        help="worker threads for the reverse path (0 = auto)")
    parser.add_argument("--seed", type=int, default=d(0), metavar="U64",
                        help="seed for synthetic data and benchmarks")
    parser.add_argument("--quiet", action="store_true",
                        default=d(False), help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(
        prog="rawkit",
        description="Invertible camera pipeline: render, reconstruct, fit, score.")
    _global_flags(root, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", parents=[common],
                       help="pack mosaic frames into cropped 4-channel NPY")
    p.add_argument("--input", required=True, metavar="DIR")
    p.add_argument("--pattern", required=True,
                   choices=[b.value for b in BayerPattern])
    p.add_argument("--crop", type=int, default=504, metavar="N")
    p.add_argument("--bit-depth", type=int, default=10, choices=(10, 12, 14))
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("unprocess", parents=[common], help="reconstruct RAW from rendered RGB")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--rgb", metavar="PATH")
    src.add_argument("--manifest", metavar="PATH")
    p.add_argument("--params", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--ensemble", action="store_true",
                   help="average the 8 dihedral reconstructions")
    p.set_defaults(func=cmd_unprocess)

    p = sub.add_parser("process", parents=[common], help="render packed RAW to an 8-bit PNG")
    p.add_argument("--raw", required=True, metavar="PATH")
    p.add_argument("--params", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH.png")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("fit", parents=[common], help="estimate pipeline parameters from pairs")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="params.json")
    p.add_argument("--loss", default="l2", metavar="{l1|l2|soft:DELTA}")
    p.add_argument("--tau", type=float, default=0.98, metavar="T")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", parents=[common], help="score predicted RAW against ground truth")
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--report", required=True, metavar="PATH")
    p.add_argument("--format", default="csv", choices=("csv", "markdown", "json"))
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", parents=[common], help="generate paired synthetic scenes")
    p.add_argument("--kind", default="mixed", choices=dataio.SCENE_KINDS)
    p.add_argument("--size", type=int, default=504, metavar="N")
    p.add_argument("--params", metavar="PATH",
                   help="generator params JSON (default: built-in preset)")
    p.add_argument("--count", type=int, default=1, metavar="M")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", parents=[common], help="quick-look preview of a packed RAW")
    p.add_argument("--raw", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH.png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", parents=[common], help="time the reverse pipeline")
    p.add_argument("--size", type=_parse_size, default=(3024, 4032),
                   metavar="WxH")
    p.add_argument("--repeats", type=int, default=5, metavar="R")
    p.set_defaults(func=cmd_bench)

    return root


class Emitter:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, event: str, **fields):
        if not self.quiet:
            print(json.dumps({"event": event, **fields}))

    @staticmethod
    def error(message: str):
        print(message, file=sys.stderr)


# --- subcommands -------------------------------------------------------------

def _load_mosaic(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        arr = np.load(path, allow_pickle=False)
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
            raise dataio.FormatError("%s: mosaic NPY must be 2-D integer" % path)
        return arr
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16"):
            raise dataio.FormatError("%s: mosaic image must be single-channel"
                                     % path)
        return np.asarray(im)


def cmd_pack(args, emit) -> int:
    pattern = BayerPattern(args.pattern)
    black = 64 << (args.bit_depth - 10)
    white = 2 ** args.bit_depth - 1
    names = sorted(n for n in os.listdir(args.input)
                   if n.endswith((".npy", ".png")))
    if not names:
        Emitter.error("pack: no mosaic files in %s" % args.input)
        return 0
    os.makedirs(args.out, exist_ok=True)
    entries = []
    count = 0
    for name in names:
        mosaic = _load_mosaic(os.path.join(args.input, name))
        packed = pack_bayer(mosaic, pattern, bit_depth=args.bit_depth,
                            black_level=black, white_level=white)
        stem = os.path.splitext(name)[0]
        for tile, (x, y) in dataio.extract_crops(packed, args.crop):
            out_name = "%s_%04d_%04d.npy" % (stem, x, y)
            dataio.write_array(os.path.join(args.out, out_name), tile.data)
            entries.append(dataio.ManifestEntry(
                split="train", pattern=pattern, raw_path=out_name,
                frame_offset=(x, y)))
            count += 1
            emit("packed", file=out_name, offset=[x, y])
    manifest = dataio.DatasetManifest(entries=tuple(entries), root=".")
    dataio.save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    emit("done", files=count)
    if not args.quiet:
        print("packed %d crops" % count)
    return 0


def _reverse_options(p: IspParams) -> reverse.ReverseOptions:
    return reverse.ReverseOptions(output_bit_depth=p.bit_depth)


def cmd_unprocess(args, emit) -> int:
    params = dataio.load_params(args.params)
    opts = _reverse_options(params)

    def one(rgb):
        if args.ensemble:
            return bench.self_ensemble(rgb, params, opts, threads=args.threads)
        out, _ = reverse.run_reverse(rgb, params, opts, threads=args.threads)
        return out

    if args.rgb is not None:
        rgb = dataio.read_rgb_png(args.rgb)
        raw = one(rgb)
        os.makedirs(args.out, exist_ok=True)
        stem = os.path.splitext(os.path.basename(args.rgb))[0]
        out_path = os.path.join(args.out, stem + ".npy")
        dataio.write_array(out_path, raw.data)
        emit("unprocessed", file=args.rgb, out=out_path)
        return 0

    manifest = dataio.load_manifest(args.manifest)
    records = reverse.unprocess_batch(
        manifest, params, args.out, opts, threads=args.threads,
        reverse_fn=one if args.ensemble else None)
    failures = 0
    for rec in records:
        emit("unprocessed", **rec)
        if rec["status"] != "ok":
            failures += 1
            Emitter.error("unprocess: %s: %s" % (rec["path"], rec["error"]))
    return 1 if failures else 0


def cmd_process(args, emit) -> int:
    params = dataio.load_params(args.params)
    raw = dataio.load_raw(args.raw, bit_depth=params.bit_depth,
                          black_level=params.black_level,
                          white_level=params.white_level)
    rgb, _mask = forward.run_forward(raw, params)
    dataio.write_rgb_png(args.out, rgb)
    emit("processed", file=args.raw, out=args.out)
    return 0


def cmd_fit(args, emit) -> int:
    try:
        loss = LossKind.parse(args.loss)
        if not 0.0 < args.tau <= 1.0:
            raise ParamError("tau must lie in (0, 1]")
    except ParamError as exc:
        raise UsageError(str(exc)) from None
    manifest = dataio.load_manifest(args.manifest)
    batch = load_pair_batch(manifest)
    report = fit_full(batch, FitConfig(tau=args.tau, loss=loss))
    dataio.save_params(report.params, args.out)
    report_path = os.path.splitext(args.out)[0] + ".report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    emit("fitted", params=args.out, report=report_path,
         residuals=report.to_dict()["residuals"],
         iterations=report.iterations,
         excluded_fraction=report.excluded_fraction)
    return 0


def cmd_score(args, emit) -> int:
    manifest = dataio.load_manifest(args.manifest)
    report = bench.score_run(str(args.pred), manifest)
    doc = bench.emit_report(report, args.format)
    with open(args.report, "w") as fh:
        fh.write(doc)
    emit("scored", report=args.report, ok=report.ok)
    if not args.quiet:
        print(bench.emit_report(report, "markdown"), end="")
    for rec in report.records:
        if rec.status != "ok":
            Emitter.error("score: %s: %s" % (rec.id, rec.error))
    return 0 if report.ok else 1


def cmd_synth(args, emit) -> int:
    if args.params is not None:
        params = dataio.load_params(args.params)
    else:
        params = dataio.default_params()
    os.makedirs(args.out, exist_ok=True)
    dataio.save_params(params, os.path.join(args.out, "params.json"))
    entries = []
    for i in range(args.count):
        spec = dataio.SceneSpec(kind=args.kind, size=args.size,
                                bit_depth=params.bit_depth,
                                seed=args.seed + i)
        raw, rgb = dataio.generate_scene(spec, params)
        stem = "scene_%03d" % i
        dataio.write_array(os.path.join(args.out, stem + ".npy"), raw.data)
        dataio.write_rgb_png(os.path.join(args.out, stem + ".png"), rgb)
        entries.append(dataio.ManifestEntry(
            split="train", pattern=BayerPattern.RGGB,
            rgb_path=stem + ".png", raw_path=stem + ".npy",
            frame_offset=(0, 0)))
        emit("synthesized", scene=stem, kind=args.kind, seed=args.seed + i)
    manifest = dataio.DatasetManifest(entries=tuple(entries), root=".")
    dataio.save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    emit("done", scenes=args.count)
    return 0


def cmd_render(args, emit) -> int:
    raw = dataio.load_raw(args.raw)
    rgb = forward.render_quicklook(raw)
    dataio.write_rgb_png(args.out, rgb)
    emit("rendered", file=args.raw, out=args.out)
    return 0


def cmd_bench(args, emit) -> int:
    if args.repeats < 3:
        raise UsageError("bench needs --repeats >= 3")
    result = bench.time_pipeline(args.size, dataio.default_params(),
                                 args.repeats, threads=args.threads,
                                 seed=args.seed)
    emit("bench", size=list(args.size), median_ms=result["median_ms"],
         ms_per_megapixel=result["ms_per_megapixel"])
    if not args.quiet:
        print("median %.1f ms  (%.1f ms/MP)"
              % (result["median_ms"], result["ms_per_megapixel"]))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    emit = Emitter(args.quiet)
    try:
        return args.func(args, emit)
    except UsageError as exc:
        Emitter.error("usage error: %s" % exc)
        return 2
    except (FileNotFoundError, NotADirectoryError) as exc:
        Emitter.error("not found: %s" % exc)
        return 2
    except dataio.SchemaError as exc:
        Emitter.error("invalid document: %s" % exc)
        return 2
    except (PipelineError, dataio.FormatError, OSError) as exc:
        Emitter.error("error: %s" % exc)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
