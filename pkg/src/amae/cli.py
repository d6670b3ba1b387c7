"""Command-line entry point: ``amae <command> [options]``."""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import metrics
from .anatpaste import augment
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, coerce
from .exceptions import AMAEError, InsufficientPseudoAbnormal
from .pgm import write_pgm
from .pipeline import SWEEP_AXES, run_sweep, stage2_streams, write_sweep
from .rng import stream
from .stage1 import PretrainedState, Stage1Result, pretrain_mae, score_stage1, train_stage1
from .stage2 import run_stage2
from .synth import SIDECAR, build_split, load_split, read_sidecar, save_split

logger = logging.getLogger("amae")


class UsageError(Exception):
    pass


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        try:
            out[key.strip()] = coerce(key.strip(), raw)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"--set {pair}: {exc}") from None
    return out


def base_config(args):
    """Defaults < --config file < --set flags (stage-specific flags are applied later)."""
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    return config.replace(**_parse_overrides(args.set))


def _check_output(path, force):
    if os.path.exists(path) and not force:
        raise UsageError(f"--out {path} already exists (pass --force to overwrite)")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _summary(command, seed, config, outputs):
    lines = [f"{command}: seed={seed} config={config.fingerprint()[:16]}"]
    lines += [f"  wrote {p}" for p in outputs]
    print("\n".join(lines))


def _tensors(arrays):
    return {k: Tensor(v) for k, v in arrays.items()}


# commands

def cmd_gen_data(args):
    config = base_config(args)
    _check_output(args.out, args.force)
    split = build_split(args.n, args.m, args.s, args.ar, args.seed, size=config.image_size)
    save_split(split, args.out)
    _summary("gen-data", args.seed, config, [args.out])


def cmd_augment(args):
    config = base_config(args)
    split = load_split(args.data)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for i, (name, image) in enumerate(zip(split.names["normal"], split.normal_train)):
        out = augment(image, stream(args.seed, "anatpaste", "cli", i))
        path = os.path.join(args.out, os.path.basename(name))
        write_pgm(path, out)
        written.append(path)
    _summary("augment", args.seed, config, [f"{args.out} ({len(written)} images)"])


def cmd_pretrain(args):
    config = base_config(args)
    _check_output(args.out, args.force)
    split = load_split(args.data)
    state = pretrain_mae(split.train, config, stream(args.seed, "pretrain"))
    save_checkpoint(args.out, state.params, config, "mae")
    print(f"pretrain loss {state.loss_curve[0]:.6f} -> {state.loss_curve[-1]:.6f}")
    _summary("pretrain", args.seed, config, [args.out])


def _load_pretrained(path, config, force):
    ckpt = load_checkpoint(path, config, force, stage="mae")
    return PretrainedState(_tensors(ckpt.params))


def cmd_stage1(args):
    config = base_config(args)
    _check_output(args.out, args.force)
    split = load_split(args.data)
    pretrained = _load_pretrained(args.ckpt_mae, config, args.force)
    result = train_stage1(pretrained.encoder, split.normal_train, config, stream(args.seed, "stage1"))
    save_checkpoint(args.out, result.head, config, "stage1")
    auc = "n/a" if result.val_auc is None else f"{result.val_auc:.4f}"
    print(f"stage1 train accuracy {result.train_accuracy:.4f} held-out AUC {auc}")
    _summary("stage1", args.seed, config, [args.out])


def _stage2_config(args, config):
    changes = {}
    if args.k is not None:
        changes["k"] = args.k
    if args.l_train is not None:
        changes["l_train"] = args.l_train
    if args.l_test is not None:
        changes["l_test"] = args.l_test
    return config.replace(**changes)


def write_scores(path, names, scores):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image_path\timage_score\n")
        for name, score in zip(names, scores):
            fh.write(f"{name}\t{float(score)!r}\n")


def read_scores(path):
    names, scores = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line == "image_path\timage_score":
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'image_path<TAB>image_score'")
            names.append(parts[0])
            scores.append(float(parts[1]))
    return names, np.array(scores)


def write_heatmaps(directory, names, pixel_scores):
    """One PGM per map, scaled so the map maximum becomes 255."""
    os.makedirs(directory, exist_ok=True)
    for name, pmap in zip(names, pixel_scores):
        peak = float(pmap.max())
        scaled = pmap / peak if peak > 0 else np.zeros_like(pmap)
        path = os.path.join(directory, os.path.basename(name))
        write_pgm(path, scaled, comments=(f"amae heatmap scale={peak!r} (score = value / 255 * scale)",))


def cmd_stage2(args):
    base = base_config(args)
    _check_output(args.out, args.force)
    split = load_split(args.data)
    pretrained = _load_pretrained(args.ckpt_mae, base, args.force)
    head_ckpt = load_checkpoint(args.ckpt_stage1, base, args.force, stage="stage1")
    stage1 = Stage1Result(_tensors(head_ckpt.params), [], float("nan"), float("nan"))
    config = _stage2_config(args, base)
    outputs = [args.out]
    try:
        result = run_stage2(split, pretrained, stage1, config, stage2_streams(args.seed))
    except InsufficientPseudoAbnormal as exc:
        if args.fallback != "stage1":
            raise InsufficientPseudoAbnormal(f"{exc}; rerun with --fallback stage1 to score with the stage-1 head") from None
        print(f"warning: {exc}; writing stage-1 scores instead", file=sys.stderr)
        scores = score_stage1(pretrained.encoder, stage1.head, split.test, config)
        write_scores(args.out, split.names["test"], scores)
        _summary("stage2 (stage-1 fallback)", args.seed, config, outputs)
        return
    write_scores(args.out, split.names["test"], result.scores.image_scores)
    if args.pseudo_out:
        unl = split.names["unlabeled"]
        with open(args.pseudo_out, "w", encoding="utf-8", newline="\n") as fh:
            for group, idx in (("normal", result.pseudo.normal), ("abnormal", result.pseudo.abnormal)):
                for i in idx:
                    fh.write(f"{unl[i]}\t{group}\t{result.pseudo.confidence[i]!r}\n")
        outputs.append(args.pseudo_out)
    if args.heatmaps:
        write_heatmaps(args.heatmaps, split.names["test"], result.scores.pixel_scores)
        outputs.append(args.heatmaps)
    if args.save_modules:
        os.makedirs(args.save_modules, exist_ok=True)
        for tag, module in (("moduleA", result.module_a), ("moduleB", result.module_b)):
            path = os.path.join(args.save_modules, f"{tag}.ckpt")
            save_checkpoint(path, module.params, config, tag)
            outputs.append(path)
    print(f"stage2 |T_un|={len(result.pseudo.normal)} |T_ua|={len(result.pseudo.abnormal)}")
    _summary("stage2", args.seed, config, outputs)


def _split_dir(path):
    # --labels may name the manifest itself or the directory holding it
    return os.path.dirname(path) or "." if os.path.isfile(path) else path


def cmd_eval(args):
    config = base_config(args)
    _check_output(args.out, args.force)
    data = _split_dir(args.data or args.labels)
    split = load_split(data)
    names, scores = read_scores(args.scores)
    label_of = dict(zip(split.names["test"], split.test_labels))
    missing = [n for n in names if n not in label_of]
    if missing:
        raise UsageError(f"--scores lists images that are not in the test split, e.g. {missing[0]}")
    labels = np.array([label_of[n] for n in names])
    report = metrics.evaluate(scores, labels).to_dict()
    if args.pseudo:
        sidecar = os.path.join(data, SIDECAR)
        if not os.path.exists(sidecar):
            raise metrics.MissingSidecar(f"{sidecar} not found; pseudo-label purity needs the hidden labels")
        hidden = read_sidecar(sidecar)
        with open(args.pseudo, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        for group, target in (("abnormal", 1), ("normal", 0)):
            picked = [name for name, g, _ in rows if g == group]
            if picked:
                report[f"purity_{group}"] = float(np.mean([hidden[n] == target for n in picked]))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [args.out]
    if args.roc:
        fpr, tpr, thr = metrics.roc_points(scores, labels)
        with open(args.roc, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, h in zip(fpr, tpr, thr):
                fh.write(f"{f!r},{t!r},{h!r}\n")
        outputs.append(args.roc)
    print(f"eval AUC {report['auc']:.4f} AP {report['ap']:.4f}")
    _summary("eval", args.seed, config, outputs)


def cmd_sweep(args):
    config = base_config(args)
    if os.path.exists(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"--out {args.out} is not empty (pass --force to overwrite)")
    axis_type = int if args.axis == "l_masks" else float
    try:
        values = [axis_type(v) for v in args.values.split(",") if v.strip()]
        seeds = [int(v) for v in args.seeds.split(",") if v.strip()] if args.seeds else list(config.seeds)
    except ValueError as exc:
        raise UsageError(f"--values/--seeds: {exc}") from None
    result = run_sweep(args.axis, values, seeds, config)
    paths = write_sweep(result, args.out)
    for v, mean, half in result.aggregate:
        print(f"{args.axis}={v}: AUC {mean:.4f} +/- {half:.4f}")
    _summary("sweep", ",".join(map(str, seeds)), config, list(paths.values()))


# argument parsing

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common.add_argument("--force", action="store_true", help="overwrite outputs; accept config mismatches")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="amae", description="dual-distribution anomaly detection on grayscale images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--m", type=int, default=200)
    p.add_argument("--s", type=int, default=200)
    p.add_argument("--ar", type=float, default=0.6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("augment", parents=[common], help="write AnatPaste versions of the normal images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("stage1", parents=[common], help="train the proxy head on frozen features")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-mae", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", parents=[common], help="pseudo-label, adapt both modules, score the test set")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-mae", required=True)
    p.add_argument("--ckpt-stage1", required=True)
    p.add_argument("--k", type=float)
    p.add_argument("--l-train", type=int)
    p.add_argument("--l-test", type=int)
    p.add_argument("--out", required=True, help="scores.tsv")
    p.add_argument("--heatmaps", metavar="DIR", help="also write pixel maps as PGM")
    p.add_argument("--pseudo-out", metavar="FILE", help="write the pseudo-labeled subsets")
    p.add_argument("--save-modules", metavar="DIR", help="write moduleA/moduleB checkpoints")
    p.add_argument("--fallback", choices=("none", "stage1"), default="none")
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("eval", parents=[common], help="AUROC, AP and chi-square of a scores file")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="split directory")
    source.add_argument("--labels", metavar="MANIFEST", help="manifest.tsv of the split (alternative to --data)")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="report.json")
    p.add_argument("--roc", metavar="CSV", help="write ROC points")
    p.add_argument("--pseudo", metavar="FILE", help="pseudo-label file from stage2 --pseudo-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="replicated runs along one axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config's seeds)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (AMAEError, OSError, ValueError) as exc:
        print(f"amae {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
