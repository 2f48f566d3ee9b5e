"""``kinet`` command line: synthdata, pseudolabel, train, eval, gradcheck, actmap.

Failures print one line ``error[<category>]: <message>`` to stderr and exit
with the category's code (2 config, 3 data, 4 numeric, 5 io).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .actmap import activation_maps, video_from_dir, write_activation_maps
from .checkpoint import Checkpoint
from .config import PROTOCOLS, RunConfig, dotted_fields
from .distill import FileTeacher, SyntheticTeacher, precompute_labels
from .errors import ConfigError, KinetError, NumericError, StorageError
from .gradcheck import TARGETS, run_targets
from .pipeline import read_manifest, synth_dataset
from .trainer import evaluate, train, write_summary

log = logging.getLogger("kinet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="INI config file; flags below override its values")
    group = parser.add_argument_group("config overrides (section.key, flags win over the file)")
    for dotted, typ, default in dotted_fields():
        shown = ", ".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument(
            f"--{dotted}",
            dest=dotted,
            default=argparse.SUPPRESS,
            metavar="VALUE",
            help=f"default: {shown if shown != '' else '(empty)'}",
        )


def _load_config(args):
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    return config.with_overrides(overrides) if overrides else config.validate()


def build_parser():
    parser = _Parser(prog="kinet", description="Knowledge-integrated video action recognition at desk scale.")
    parser.add_argument("--version", action="version", version=f"kinet {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthdata", help="write the procedural video dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--classes", type=int, default=4, help="number of action classes (default 4)")
    p.add_argument("--videos-per-class", type=int, default=8, help="videos per class (default 8)")
    p.add_argument("--frames", type=int, default=16, help="frames per video (default 16)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    p = sub.add_parser("pseudolabel", help="precompute the scene/human pseudo-label cache")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.jsonl")
    p.add_argument(
        "--teacher",
        default=None,
        help="'synthetic' or 'file:PATH' to a label manifest (default: teacher section of the config)",
    )
    p.add_argument("--out", type=Path, required=True, help="label cache directory")
    p.add_argument("--seed", type=int, default=None, help="synthetic teacher seed (default: teacher.seed)")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a model and write metrics, checkpoint and summary")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--labels", type=Path, default=None, help="pseudo-label cache directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed (default 0)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint; prints and writes a JSON summary")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint.kinet file")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--protocol", choices=PROTOCOLS, default=None, help="full250 (25 x 10 views) or fast")
    p.add_argument("--out", type=Path, default=None, help="summary path (default: eval_<protocol>.json by the checkpoint)")

    p = sub.add_parser("gradcheck", help="compare autograd with central differences")
    p.add_argument(
        "--target", action="append", choices=(*TARGETS, "all"), default=None, help="repeatable; default all"
    )
    p.add_argument("--seed", type=int, default=0, help="probe-point seed (default 0)")

    p = sub.add_parser("actmap", help="export per-branch activation heatmaps")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint.kinet file")
    p.add_argument("--video", type=Path, required=True, help="directory of PNG frames")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def cmd_synthdata(args):
    manifest = synth_dataset(args.out, args.classes, args.videos_per_class, args.frames, args.seed)
    n = args.classes * args.videos_per_class
    print(f"wrote {n} videos to {args.out} ({manifest.name})")


def _teacher(args, config):
    choice = args.teacher
    if choice is None:
        choice = "synthetic" if config.teacher.kind == "synthetic" else f"file:{config.teacher.manifest}"
    if choice == "synthetic":
        seed = config.teacher.seed if args.seed is None else args.seed
        return SyntheticTeacher(seed, config.model.k_scene)
    if choice.startswith("file:") and len(choice) > 5:
        return FileTeacher(choice[5:], config.model.k_scene)
    raise ConfigError(f"--teacher must be 'synthetic' or 'file:PATH', got {choice!r}")


def cmd_pseudolabel(args):
    config = _load_config(args)
    videos = read_manifest(args.data)
    teacher = _teacher(args, config)
    n_seg = config.model.n_seg
    writes = precompute_labels(videos, teacher, args.out, n_seg)
    print(f"{len(videos) * n_seg} records in {args.out} ({writes} written)")


def cmd_train(args):
    config = _load_config(args)
    result = train(config, args.data, labels=args.labels, seed=args.seed, out_dir=args.out)
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs: loss {last['loss_total']:.4f}, "
        f"train top-1 {last['train_top1']:.3f}; outputs in {args.out}"
    )


def cmd_eval(args):
    checkpoint = Checkpoint.load(args.checkpoint)
    protocol = args.protocol or checkpoint.config.eval.protocol
    result = evaluate(checkpoint, args.data, protocol)
    summary = {
        "top1": result.top1,
        "top5": result.top5,
        "protocol": protocol,
        "n_videos": len(result.views_per_video),
        "views_per_video": max(result.views_per_video, default=0),
        "config_hash": checkpoint.config.digest(),
        "seed": checkpoint.meta.get("seed", 0),
        "split": "eval",
    }
    out = args.out or args.checkpoint.parent / f"eval_{protocol}.json"
    write_summary(out, summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_gradcheck(args):
    targets = args.target or ["all"]
    results = run_targets(targets, args.seed)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")


def cmd_actmap(args):
    checkpoint = Checkpoint.load(args.checkpoint)
    model = checkpoint.build_model()
    maps = activation_maps(model, video_from_dir(args.video), checkpoint.config.data)
    paths = write_activation_maps(maps, args.out)
    print(f"wrote {len(paths)} heatmaps to {args.out}")


COMMANDS = {
    "synthdata": cmd_synthdata,
    "pseudolabel": cmd_pseudolabel,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "actmap": cmd_actmap,
}


def _one_line(message):
    return " ".join(str(message).split())


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
        COMMANDS[args.command](args)
    except KinetError as exc:
        print(f"error[{exc.category}]: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[{StorageError.category}]: {_one_line(exc)}", file=sys.stderr)
        return StorageError.exit_code
    except KeyboardInterrupt:
        print("error[interrupted]: stopped by user", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
