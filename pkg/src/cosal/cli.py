"""Command-line front end: dataset synthesis, training, inference,
evaluation, and the property suites, all sharing one sectioned key=value
config format (see runconfig).

Exit codes are part of the contract: 0 success, 1 usage or configuration
error, 2 missing or malformed files, 3 violated property. argparse's own
usage failures are remapped onto 1.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import metrics, pnm, runconfig, selfcheck, training
from .checkpoint import read_checkpoint
from .config import SynthSpec, TrainConfig
from .data import ImageGroup
from .errors import CosalError, IOParseError, PropertyFailure, UsageError
from .network import model_from_arrays
from .synth import write_dataset


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; our contract says 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(sp) -> None:
    sp.add_argument("--config", metavar="PATH", help="sectioned key=value config file")
    sp.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override any config key (repeatable); dedicated flags win over --set",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="cosal",
        description="Co-salient object detection: synthesize data, train, infer, evaluate, self-check.",
        epilog="The COSF_SEED environment variable seeds [train] and [synth] at the lowest precedence.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a synthetic dataset tree")
    sp.add_argument("--out", required=True, metavar="DIR", help="dataset root to create")
    _add_config_flags(sp)
    sp.add_argument("--seed", metavar="N", help=f"dataset seed (default: {SynthSpec.seed})")
    sp.add_argument("--n-groups", metavar="N", help=f"training groups (default: {SynthSpec.n_groups})")
    sp.add_argument("--group-size", metavar="N", help=f"images per group (default: {SynthSpec.group_size})")
    sp.add_argument("--val-groups", metavar="N", help=f"held-out groups (default: {SynthSpec.val_groups})")
    sp.add_argument("--aux-count", metavar="N", help=f"single-image pool size (default: {SynthSpec.aux_count})")
    sp.add_argument("--noise-level", metavar="F", help=f"pixel noise amplitude (default: {SynthSpec.noise_level})")
    sp.add_argument("--image-size", metavar="H,W", help="image size (default: 64,64)")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train on a dataset tree")
    tp.add_argument("--data", required=True, metavar="DIR", help="dataset root from 'cosal synth' (or a split dir)")
    tp.add_argument("--out", required=True, metavar="DIR", help="output directory for checkpoint and logs")
    _add_config_flags(tp)
    tp.add_argument("--lr", metavar="F", help=f"learning rate (default: {TrainConfig.lr})")
    tp.add_argument("--beta1", metavar="F", help=f"Adam first-moment decay (default: {TrainConfig.beta1})")
    tp.add_argument("--beta2", metavar="F", help=f"Adam second-moment decay (default: {TrainConfig.beta2})")
    tp.add_argument("--epochs", metavar="N", help=f"passes over the group list (default: {TrainConfig.epochs})")
    tp.add_argument("--seed", metavar="N", help=f"training seed (default: {TrainConfig.seed})")
    tp.add_argument("--group-size", metavar="N", help=f"images per group (default: {TrainConfig.group_size})")
    tp.add_argument("--aux-size", metavar="N", help=f"single images per step (default: {TrainConfig.aux_size})")
    tp.add_argument("--eval-every", metavar="N", help=f"checkpoint cadence in steps, 0 disables (default: {TrainConfig.eval_every})")
    tp.add_argument("--resume", metavar="CKPT", help="continue from an earlier checkpoint")
    tp.set_defaults(fn=cmd_train)

    ip = sub.add_parser("infer", help="predict co-saliency maps for one image group")
    ip.add_argument("--checkpoint", required=True, metavar="CKPT", help="trained checkpoint file")
    ip.add_argument(
        "--images", required=True, metavar="DIR", help="directory of .ppm images forming one group (a dataset group dir works too)"
    )
    ip.add_argument("--out", required=True, metavar="DIR", help="directory for predicted .pgm maps")
    ip.set_defaults(fn=cmd_infer)

    ep = sub.add_parser("eval", help="score predictions against ground truth")
    ep.add_argument("--pred", required=True, metavar="DIR", help="predicted .pgm maps")
    ep.add_argument("--gt", required=True, metavar="DIR", help="ground-truth .pgm masks (a dataset group dir works too)")
    ep.add_argument("--out", required=True, metavar="DIR", help="directory for report.json and pr_curve.csv")
    ep.set_defaults(fn=cmd_eval)

    cp = sub.add_parser("selfcheck", help="run the build-gating property suites")
    _add_config_flags(cp)
    cp.add_argument("--seed", metavar="N", help=f"suite seed (default: {TrainConfig.seed})")
    cp.add_argument(
        "--grad-instances",
        type=int,
        default=20,
        metavar="N",
        help="random cases per gradient property (default: 20)",
    )
    cp.add_argument(
        "--mutate",
        metavar="NAME",
        help="run the targeted suite against a deliberately broken variant; "
        f"a healthy suite then fails (choices: {', '.join(sorted(selfcheck.MUTATIONS))})",
    )
    cp.set_defaults(fn=cmd_selfcheck)
    return parser


def _overrides(args, flag_to_key: dict[str, str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        dotted, sep, value = item.partition("=")
        if not sep or not dotted.strip():
            raise UsageError(f"--set needs SECTION.KEY=VALUE, got {item!r}")
        out[dotted.strip()] = value.strip()
    for attr, key in flag_to_key.items():
        value = getattr(args, attr)
        if value is not None:
            out[key] = value
    return out


_SYNTH_FLAGS = {
    "seed": "synth.seed",
    "n_groups": "synth.n_groups",
    "group_size": "train.group_size",  # authoritative key; mirrors reach [synth]
    "val_groups": "synth.val_groups",
    "aux_count": "synth.aux_count",
    "noise_level": "synth.noise_level",
    "image_size": "synth.image_size",
}

_TRAIN_FLAGS = {
    "lr": "train.lr",
    "beta1": "train.beta1",
    "beta2": "train.beta2",
    "epochs": "train.epochs",
    "seed": "train.seed",
    "group_size": "train.group_size",
    "aux_size": "train.aux_size",
    "eval_every": "train.eval_every",
}


def cmd_synth(args) -> int:
    cfg = runconfig.load_run_config(args.config, overrides=_overrides(args, _SYNTH_FLAGS))
    out = Path(args.out)
    echoed = runconfig.write_effective_config(cfg, out)
    counts = write_dataset(cfg.synth, out)
    print(
        f"wrote {counts['train_groups']} train groups ({counts['train_images']} images), "
        f"{counts['val_groups']} val groups ({counts['val_images']} images), "
        f"{counts['aux_images']} aux images under {out}"
    )
    print(f"effective config: {echoed}")
    return 0


def _training_split(data: Path) -> Path:
    return data / "train" if (data / "train").is_dir() else data


def cmd_train(args) -> int:
    cfg = runconfig.load_run_config(args.config, overrides=_overrides(args, _TRAIN_FLAGS))
    out = Path(args.out)
    echoed = runconfig.write_effective_config(cfg, out)
    result = training.train(
        _training_split(Path(args.data)), cfg.model, cfg.train, cfg.loss, out, resume=args.resume
    )
    print(f"ran {result.steps_run} of {result.steps_total} steps; total loss {result.first_total:.4f} -> {result.final_total:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log: {result.csv_path}")
    print(f"effective config: {echoed}")
    return 0


def _resolve_subdir(path: Path, pattern: str, nested: str) -> Path:
    """Dataset group dirs keep their files one level down (img/ and gt/);
    accept either the group dir or the leaf dir."""
    if not list(path.glob(pattern)) and (path / nested).is_dir():
        return path / nested
    return path


def cmd_infer(args) -> int:
    model = model_from_arrays(read_checkpoint(args.checkpoint))
    img_dir = Path(args.images)
    if not img_dir.is_dir():
        raise UsageError(f"{img_dir} is not a directory")
    img_dir = _resolve_subdir(img_dir, "*.ppm", "img")
    paths = sorted(img_dir.glob("*.ppm"))
    if len(paths) < 2:
        raise UsageError(
            f"found {len(paths)} image(s) in {img_dir}; co-saliency is defined on a group "
            "of images sharing an object, so inference needs at least two"
        )
    h, w = model.cfg.input_size
    images = []
    for p in paths:
        img = pnm.read_image(p)
        if img.ndim != 3:
            raise UsageError(f"{p.name} is grayscale; inference expects color images")
        if img.shape[1:] != (h, w):
            raise UsageError(f"{p.name} is {img.shape[1]}x{img.shape[2]} but the checkpoint expects {h}x{w}")
        images.append(img)
    if not model.cfg.use_group and len(paths) != model.cfg.group_size:
        raise UsageError(
            f"this checkpoint's consensus stage is fixed to groups of exactly "
            f"{model.cfg.group_size} images, got {len(paths)}"
        )
    blank = np.zeros((h, w), dtype=np.float32)
    group = ImageGroup(images=images, gt=[blank] * len(images), group_id=img_dir.name)
    output = model.forward_group(group)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, m in zip(paths, output.maps):
        pnm.write_image(out / f"{p.stem}.pgm", m.data)
    print(f"wrote {len(paths)} maps to {out}")
    return 0


def cmd_eval(args) -> int:
    gt_dir = Path(args.gt)
    if gt_dir.is_dir():
        gt_dir = _resolve_subdir(gt_dir, "*.pgm", "gt")
    report = metrics.evaluate_dataset(args.pred, gt_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report_json(report, out / "report.json")
    metrics.write_pr_csv(report, out / "pr_curve.csv")
    d = report.to_json_dict()
    print(
        f"mae {d['mae']:.6f}  f_max {d['f_max']:.6f}  s_alpha {d['s_alpha']:.6f}  "
        f"e_max {d['e_max']:.6f}  ({d['n_images']} images)"
    )
    if report.warnings:
        print(f"{len(report.warnings)} warnings:")
        for message in report.warnings:
            print(f"  {message}")
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_selfcheck(args) -> int:
    cfg = runconfig.load_run_config(args.config, overrides=_overrides(args, {"seed": "train.seed"}))
    if args.grad_instances < 1:
        raise UsageError("--grad-instances must be >= 1")
    if args.mutate is not None:
        results = selfcheck.run_mutation(args.mutate, seed=cfg.train.seed)
    else:
        results = selfcheck.run_all(seed=cfg.train.seed, grad_instances=args.grad_instances)
    print(selfcheck.format_report(results))
    selfcheck.raise_on_failure(results)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except PropertyFailure as e:
        print(f"property failure: {e}", file=sys.stderr)
        return 3
    except IOParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CosalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
