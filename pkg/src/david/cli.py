"""``david`` command line: synth, train, eval, infer, attmap.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-finite loss.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .architecture import BackboneBranch, DavidModel, InternalAttentionModule
from .checkpoint import CheckpointError, load_checkpoint
from .dataset import StackDataset
from .engine import no_grad
from .evaluate import (
    GroundTruthOracle,
    PassThrough,
    attention_dump,
    comparison_table,
    evaluate_dataset,
    export_attention_heatmaps,
    model_width,
)
from .synth import (
    ClipError,
    DatasetManifest,
    generate_cdvd,
    list_frame_files,
    load_clip_tree,
    load_png,
    make_synthetic_corpus,
    save_png,
    summarize,
)
from .trainer import NonFiniteLossError, phase1_pretrain, phase2_train_internal, phase3_train_david

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_DIR_ENV = "DAVID_RUN_DIR"
log = logging.getLogger("david")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_run_dir():
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def float_pair(text):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return lo, hi


@contextmanager
def run_lock(run_dir):
    """Exclusive lock file so two processes never write one run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{run_dir} is locked by another run (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- synth ------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out) if args.out else default_run_dir() / "data"
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists() and not args.force:
        raise UsageError(f"{manifest_path} exists; pass --force to overwrite")
    if args.synthetic:
        clips = make_synthetic_corpus(args.clips, args.synthetic, size=args.size, speed=args.speed,
                                      seed=args.seed, gt_frames=args.gt_frames, max_window=max(args.windows))
        rejected = []
    else:
        if not args.input or not Path(args.input).is_dir():
            raise DataError(f"input directory {args.input!r} does not exist (or pass --synthetic)")
        clips, rejected = load_clip_tree(args.input)
        for name, why in rejected:
            print(f"rejected clip {name}: {why}", file=sys.stderr)
        if rejected and args.strict:
            raise DataError(f"{len(rejected)} clip(s) rejected")
        if not clips:
            raise DataError(f"no usable clips under {args.input}")
    with run_lock(out):
        manifest = generate_cdvd(clips, out, windows=args.windows, seed=args.seed, step=args.step,
                                 val_fraction=args.val_fraction, test_fraction=args.test_fraction)
    summary = summarize(manifest)
    summary["rejected"] = len(rejected)
    summary["manifest"] = str(manifest_path)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- train ------------------------------------------------------------------------

def phase1_tag(frames, level):
    return f"phase1_f{frames}_w{level}"


def phase2_tag(level):
    return f"phase2_w{level}"


def _dataset(manifest, width, split, windows):
    ds = StackDataset.from_manifest(manifest, width, split=split, windows=windows)
    return ds


def _require(path):
    if not Path(path).exists():
        raise DataError(f"missing prerequisite checkpoint: expected {path}")
    return path


def cmd_train(args):
    explicit = {"phase": args.phase, "frames": args.frames, "blur_level": args.blur_level, "seed": args.seed}
    cfg = cfgmod.load_config(args.config, args.set, **explicit)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir()
    manifest_path = Path(args.manifest) if args.manifest else run_dir / "data" / "manifest.jsonl"
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = DatasetManifest.read(manifest_path)
    dtype = np.dtype(cfg.dtype)
    level_filter = (cfg.blur_level,) if cfg.blur_level else None
    if cfg.phase == 1:
        tag = phase1_tag(cfg.frames, cfg.blur_level)
        model = BackboneBranch(cfg.frames, cfg.scale, cfg.seed, dtype)
        windows = level_filter
    elif cfg.phase == 2:
        tag = phase2_tag(cfg.blur_level)
        model = InternalAttentionModule(cfg.n_branches, cfg.scale, cfg.blur_level, cfg.seed, dtype,
                                        attention_scale=cfg.att_scale)
        windows = level_filter
        pre = args.pretrained or [run_dir / f"{phase1_tag(2 * i + 1, cfg.blur_level)}.ckpt"
                                  for i in range(cfg.n_branches)]
    else:
        tag = "phase3"
        model = DavidModel(cfg.blur_levels, cfg.n_branches, cfg.scale, cfg.seed, dtype,
                           attention_scale=cfg.att_scale)
        windows = cfg.train_windows or None
        pre = args.pretrained or [run_dir / f"{phase2_tag(w)}.ckpt" for w in cfg.blur_levels]
    final = run_dir / f"{tag}.ckpt"
    if final.exists() and not (args.force or args.resume):
        raise UsageError(f"{final} exists; pass --force to retrain or --resume to continue")
    if cfg.phase > 1 and not args.resume:
        for p in pre:
            _require(p)
    width = model_width(model)
    train = _dataset(manifest, width, "train", windows)
    val = _dataset(manifest, width, "val", windows)
    if len(train) == 0:
        raise DataError(f"no training samples for windows={windows} at temporal width {width}")
    with run_lock(run_dir):
        handler = logging.FileHandler(run_dir / f"{tag}.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        logging.getLogger("david").addHandler(handler)
        try:
            (run_dir / f"{tag}.yaml").write_text(cfgmod.dump_config(cfg))
            kw = dict(run_dir=run_dir, tag=tag, resume=args.resume, stop_after=args.stop_after)
            if cfg.phase == 1:
                res = phase1_pretrain(model, train, val, cfg, **kw)
            elif cfg.phase == 2:
                res = phase2_train_internal(model, pre, train, val, cfg, **kw)
            else:
                res = phase3_train_david(model, pre, train, val, cfg, **kw)
        finally:
            logging.getLogger("david").removeHandler(handler)
            handler.close()
    out = {"tag": tag, "epochs": len(res.history), "best_epoch": res.best_epoch,
           "best_val_psnr": res.best_psnr, "interrupted": res.interrupted, "stopped_early": res.stopped_early,
           "checkpoint": str(res.checkpoint) if res.checkpoint else None,
           "in_channels": getattr(model, "in_channels", None)}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# -- eval / infer / attmap --------------------------------------------------------

def _load_model(path):
    try:
        return load_checkpoint(path).build_model()
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def cmd_eval(args):
    if args.oracle:
        model = GroundTruthOracle() if args.oracle == "identity" else PassThrough()
        name = args.oracle
    elif args.checkpoint:
        model = _load_model(args.checkpoint)
        name = Path(args.checkpoint).stem
    else:
        raise UsageError("eval needs --checkpoint or --oracle")
    manifest_path = Path(args.manifest) if args.manifest else default_run_dir() / "data" / "manifest.jsonl"
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    split = None if args.split == "all" else args.split
    width = args.context or None
    table = evaluate_dataset(model, manifest_path, windows=args.windows or None, split=split, width=width,
                             name=name)
    text = table.to_text()
    subsets = table.by_subset()
    if len(subsets) > 1:
        text += "\n" + "".join(f"C-DVD-{w}: {t.average:.2f} dB over {len(t.per_video())} videos\n"
                               for w, t in subsets.items())
    text += "\n" + comparison_table([table])
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}_eval.txt").write_text(text)
        (out / f"{name}_eval.jsonl").write_text(table.to_jsonl())
    return EXIT_OK


def _read_frames(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"input directory not found: {directory}")
    files = list_frame_files(directory)
    try:
        frames = [load_png(f).transpose(2, 0, 1).astype(np.float32) for f in files]
    except ClipError as exc:
        raise DataError(str(exc)) from None
    if frames and any(f.shape != frames[0].shape for f in frames):
        raise DataError("input frames differ in size")
    return files, frames


def _pad16(stack):
    h, w = stack.shape[-2:]
    ph, pw = (-h) % 16, (-w) % 16
    if ph == 0 and pw == 0:
        return stack, (h, w)
    pad = [(0, 0)] * (stack.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(stack, pad, mode="reflect" if min(h, w) > max(ph, pw) else "edge"), (h, w)


def cmd_infer(args):
    model = _load_model(args.checkpoint)
    width = model_width(model)
    files, frames = _read_frames(args.input)
    if len(frames) < width:
        raise DataError(f"{len(frames)} input frames; the model needs at least {width}")
    out = Path(args.out)
    half = width // 2
    written = []
    with no_grad():
        for c in range(half, len(frames) - half):
            stack, (h, w) = _pad16(np.stack(frames[c - half:c + half + 1]))
            pred = model.predict_stack(stack).data[..., :h, :w]
            path = out / files[c].name
            if path.exists() and not args.force:
                raise UsageError(f"{path} exists; pass --force to overwrite")
            written.append(save_png(path, np.clip(pred, 0, 1).transpose(1, 2, 0)))
    print(json.dumps({"frames_in": len(frames), "frames_out": len(written), "out": str(out)}))
    return EXIT_OK


def cmd_attmap(args):
    model = _load_model(args.checkpoint)
    if not isinstance(model, DavidModel):
        raise DataError("attmap needs a full model checkpoint (phase 3)")
    width = model_width(model)
    files, frames = _read_frames(args.input)
    if len(frames) < width:
        raise DataError(f"{len(frames)} input frames; the model needs at least {width}")
    c = len(frames) // 2 if args.center is None else args.center
    half = width // 2
    if not half <= c < len(frames) - half:
        raise DataError(f"centre frame {c} lacks {half} neighbours on each side")
    stack, (h, w) = _pad16(np.stack(frames[c - half:c + half + 1]))
    dump = attention_dump(model, stack)
    dump.external_maps = dump.external_maps[..., :h, :w]
    dump.internal_maps = dump.internal_maps[..., :h, :w]
    dump.deblurred = dump.deblurred[..., :h, :w]
    dump.input_center = dump.input_center[..., :h, :w]
    paths = export_attention_heatmaps(dump, args.out, colorbar=args.colorbar)
    print(json.dumps({"images": len(paths), "out": str(args.out)}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = Parser(prog="david", description="Dual-attention video deblurring pipeline.",
               epilog=f"Run directory defaults to ${RUN_DIR_ENV} (or ./runs). "
                      "Exit codes: 0 ok, 1 usage, 2 data, 3 non-finite loss.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="synthesize a blurry/sharp dataset and its manifest")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--input", help="directory of per-clip subdirectories of numbered PNG frames")
    src.add_argument("--synthetic", choices=("dots", "texture", "stripes", "mixed"),
                     help="generate moving-pattern clips instead of reading frames")
    s.add_argument("--clips", type=int, default=8, help="number of synthetic clips")
    s.add_argument("--size", type=int, default=64, help="synthetic frame size in pixels")
    s.add_argument("--gt-frames", type=int, default=10, help="ground-truth frames per synthetic clip")
    s.add_argument("--speed", type=float_pair, default=(0.25, 2.0), help="synthetic speed range lo,hi (px/frame)")
    s.add_argument("--windows", type=int_list, default=(3, 7, 11, 15), help="averaging windows, e.g. 3,7,11,15")
    s.add_argument("--step", type=int, default=8, help="ground-truth subsampling step")
    s.add_argument("--val-fraction", type=float, default=0.1, help="fraction of clips held out for validation")
    s.add_argument("--test-fraction", type=float, default=0.0, help="fraction of clips held out for testing")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output directory (default: $RUN_DIR/data)")
    s.add_argument("--strict", action="store_true", help="fail if any clip is rejected")
    s.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one training phase", epilog=cfgmod.help_text(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--phase", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--config", help="YAML file with config keys")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--frames", type=int, help="phase 1: stacked frames (config key frames)")
    t.add_argument("--blur-level", type=int, help="phase 1/2: training subset C-DVD-w (config key blur_level)")
    t.add_argument("--seed", type=int, help="config key seed")
    t.add_argument("--manifest", help="dataset manifest (default: $RUN_DIR/data/manifest.jsonl)")
    t.add_argument("--run-dir", help="checkpoint directory (default: $DAVID_RUN_DIR or ./runs)")
    t.add_argument("--pretrained", nargs="+", help="explicit prerequisite checkpoints for phases 2 and 3")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs (resumable)")
    t.add_argument("--force", action="store_true", help="retrain even if the phase checkpoint exists")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR tables over a manifest")
    who = e.add_mutually_exclusive_group()
    who.add_argument("--checkpoint")
    who.add_argument("--oracle", choices=("identity", "passthrough"), help="score a reference predictor")
    e.add_argument("--manifest")
    e.add_argument("--split", default="val", choices=("train", "val", "test", "all"))
    e.add_argument("--windows", type=int_list, help="restrict to these blur windows")
    e.add_argument("--context", type=int, default=0, help="temporal context deciding skipped edge frames")
    e.add_argument("--out", help="directory for .txt and .jsonl tables")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="deblur every valid window of a frame directory")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="directory of numbered PNG frames")
    i.add_argument("--out", required=True)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("attmap", help="export attention heatmaps of a full model")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--input", required=True, help="directory of numbered PNG frames")
    a.add_argument("--center", type=int, help="centre frame index (default: middle)")
    a.add_argument("--out", required=True)
    a.add_argument("--colorbar", action="store_true", help="also write the shared colour bar")
    a.set_defaults(func=cmd_attmap)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    log.setLevel(logging.INFO)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"david {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        where = f" (post-mortem checkpoint {exc.checkpoint})" if exc.checkpoint else ""
        print(f"david {args.command}: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ClipError, CheckpointError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"david {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
