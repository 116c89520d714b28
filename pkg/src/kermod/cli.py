"""Command-line entry point.

Subcommands: ``train`` (one run: metrics stream, report file, checkpoint,
task delta, figures), ``ablate`` (sweep one modulator axis over seeds into a
delimited table plus chart), ``delta`` (export / apply / verify / report),
and ``eval`` (score a checkpoint on a dataset).

Exit codes are stable: 0 success, 1 runtime or I/O failure, 2 usage or
config error, 3 integrity (fingerprint / payload mismatch) failure.

Every flag can come from a flat key=value config file (``--config``); flags
given explicitly override file values, and the effective configuration is
echoed into the run manifest. Metrics stream as
``epoch=<n> split=<train|test> loss=<f> acc=<f>`` lines on stdout and into
``metrics.log``. Setting ``KM_DETERMINISTIC=1`` (the default; see
autodiff) keeps every op on its fixed-reduction-order path.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import __version__
from .data import DataError, load_cifar10_binary, synth_task
from .delta import (DeltaError, apply_delta, check_delta, export_delta,
                    load_checkpoint, memory_report, read_delta,
                    save_checkpoint, write_delta)
from .modulator import ModulatorError
from .net import NetError, NetworkSpec, ParamGroupMask, build_network
from .norm import NormError
from .train import (TrainConfig, TrainError, TrainingDiverged, evaluate,
                    recovered_accuracy_ratio, run_ablation, train)

CONFIG_ERRORS = (DataError, NetError, TrainError, ModulatorError, NormError,
                 ValueError)


class UsageError(Exception):
    pass


# -- config / manifest plumbing ---------------------------------------------------


def read_config_file(path: str) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def effective_config_text(args, keys) -> str:
    lines = []
    for k in sorted(keys):
        v = getattr(args, k)
        if isinstance(v, (list, tuple)):
            v = ",".join(str(i) for i in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(out_dir: str, argv, cfg_text: str, seeds, started: float):
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"command={' '.join(argv)}\n")
        fh.write(f"version={__version__}\n")
        fh.write(f"config_digest={config_digest(cfg_text)}\n")
        fh.write(f"seeds={','.join(str(s) for s in seeds)}\n")
        fh.write(f"started_unix={started:.3f}\n")
        fh.write(f"finished_unix={time.time():.3f}\n")
        fh.write("--- effective config ---\n")
        fh.write(cfg_text)


# -- dataset / spec construction ----------------------------------------------------


def load_dataset(args):
    if args.data == "cifar10":
        if not args.data_dir:
            raise UsageError("--data cifar10 requires --data-dir")
        train_split = load_cifar10_binary(args.data_dir, "train", args.subset)
        test_subset = args.test_subset
        test_split = load_cifar10_binary(args.data_dir, "test", test_subset)
        return train_split, test_split
    kind = {"blobs": "separable_blobs", "stripes": "striped_textures"}[args.data]
    return synth_task(kind, classes=args.classes, n_per_class=args.samples_per_class,
                      image_size=args.image_size, seed=args.data_seed)


def parse_mask(args) -> ParamGroupMask:
    names = []
    if args.mask:
        if args.mask.lower() == "none":
            raise UsageError("--mask none selects no trainable group")
        names += args.mask.split(",")
    if args.train_conv:
        names.append("convolution")
    if args.train_implicit:
        names.append("implicit")
    if args.train_explicit:
        names.append("explicit")
    if args.train_classifier:
        names.append("classifier")
    if not names:
        raise UsageError("no trainable groups: pass --mask or --train-* flags")
    return ParamGroupMask.from_names(names)


def spec_from_args(args, data) -> NetworkSpec:
    train_split, _ = data
    return NetworkSpec(
        arch=args.arch,
        n_blocks=args.blocks,
        base_width=args.width,
        input_shape=tuple(train_split.images.shape[1:]),
        class_count=train_split.class_count,
        norm_kind=args.norm,
        groups=args.groups,
        modulator_depth=args.mod_depth,
        modulator_activation=args.mod_activation,
        modulator_init=args.mod_init,
        modulator_sigma=args.mod_sigma,
    )


def train_config_from_args(args) -> TrainConfig:
    milestones = tuple(int(m) for m in args.milestones.split(",")) \
        if args.milestones else ()
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lr_schedule=args.schedule,
        lr_milestones=milestones,
        lr_factor=args.lr_factor,
        seed=args.seed,
        decay_norm_and_modulators=args.decay_all,
        augment=args.augment,
    )


TRAIN_CONFIG_KEYS = (
    "data", "data_dir", "subset", "test_subset", "classes", "samples_per_class",
    "image_size", "data_seed", "mask", "arch", "blocks", "width", "norm",
    "groups", "mod_depth", "mod_activation", "mod_init", "mod_sigma", "epochs",
    "batch_size", "lr", "momentum", "weight_decay", "schedule", "milestones",
    "lr_factor", "seed", "decay_all", "augment", "task", "full_accuracy",
)


# -- subcommands ----------------------------------------------------------------------


def cmd_train(args, argv) -> int:
    started = time.time()
    data = load_dataset(args)
    mask = parse_mask(args)
    spec = spec_from_args(args, data)
    cfg = train_config_from_args(args)
    net = build_network(spec, mask, init_seed=args.seed)

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.log")
    metrics_fh = open(metrics_path, "w")

    def emit(rec):
        line = (f"epoch={rec['epoch']} split={rec['split']} "
                f"loss={rec['loss']:.6f} acc={rec['acc']:.6f}")
        print(line)
        metrics_fh.write(line + "\n")

    try:
        result = train(net, data[0], data[1], cfg, on_epoch=emit)
    finally:
        metrics_fh.close()

    # wall time stays out of the report so identical runs produce identical
    # files; the manifest carries timestamps
    report_lines = [
        f"final_test_accuracy={result.final_test_accuracy:.6f}",
        f"final_train_accuracy={result.final_train_accuracy:.6f}",
        f"trainable_params={result.trainable_params}",
        f"total_params={result.total_params}",
        f"trainable_fraction={result.trainable_params / result.total_params:.6f}",
        f"mask={','.join(mask.enabled())}",
        f"task={args.task}",
    ]
    if args.full_accuracy is not None:
        ratio = recovered_accuracy_ratio(result.final_test_accuracy, args.full_accuracy)
        report_lines.append(f"recovered_accuracy_ratio={ratio:.4f}")
    report_path = os.path.join(args.out, "report.txt")
    with open(report_path, "w") as fh:
        fh.write("\n".join(report_lines) + "\n")
    print(f"report written to {report_path}")

    save_checkpoint(net, os.path.join(args.out, "checkpoint.kmc"))
    if not mask.convolution:
        cfg_text = effective_config_text(args, TRAIN_CONFIG_KEYS)
        delta = export_delta(net, task_name=args.task,
                             config_digest=config_digest(cfg_text))
        write_delta(delta, os.path.join(args.out, "task.kmd"))
        print(f"task delta written to {os.path.join(args.out, 'task.kmd')} "
              f"({delta.file_bytes()} bytes)")

    if not args.no_figures:
        from . import figures
        figures.save_training_curves(result, os.path.join(args.out, "curves.png"),
                                     title=f"mask={','.join(mask.enabled())}")
        if any(c.modulator is not None for c in net.conv_layers):
            figures.save_weight_histogram(net, os.path.join(args.out, "weights.png"))

    write_manifest(args.out, argv, effective_config_text(args, TRAIN_CONFIG_KEYS),
                   [args.seed], started)
    return 0


ABLATE_CONFIG_KEYS = tuple(k for k in TRAIN_CONFIG_KEYS
                           if k not in ("task", "full_accuracy")) + \
    ("axis", "values", "seeds")


def cmd_ablate(args, argv) -> int:
    started = time.time()
    data = load_dataset(args)
    mask = parse_mask(args)
    spec = spec_from_args(args, data)
    cfg = train_config_from_args(args)
    values = args.values.split(",")
    if args.axis == "depth":
        try:
            values = [int(v) for v in values]
        except ValueError as exc:
            raise UsageError(f"depth values must be integers: {exc}")
    seeds = list(range(args.seeds))

    os.makedirs(args.out, exist_ok=True)

    def progress(axis, value, seed, result):
        print(f"axis={axis} value={value} seed={seed} "
              f"acc={result.final_test_accuracy:.4f}")

    rows = run_ablation(args.axis, values, data, spec, cfg, seeds, mask=mask,
                        on_run=progress)

    table_path = os.path.join(args.out, "ablation.tsv")
    with open(table_path, "w") as fh:
        fh.write("value\tmean\tstd\t" +
                 "\t".join(f"seed{s}" for s in seeds) + "\n")
        for row in rows:
            accs = "\t".join(f"{a:.6f}" for a in row.accuracies)
            fh.write(f"{row.value}\t{row.mean:.6f}\t{row.std:.6f}\t{accs}\n")
    print(f"ablation table written to {table_path}")

    if not args.no_figures:
        from . import figures
        figures.save_ablation_chart(rows, args.axis,
                                    os.path.join(args.out, "ablation.png"))

    write_manifest(args.out, argv, effective_config_text(args, ABLATE_CONFIG_KEYS),
                   seeds, started)
    return 0


def cmd_delta(args, argv) -> int:
    if args.delta_cmd == "export":
        net = load_checkpoint(args.checkpoint)
        delta = export_delta(net, task_name=args.task)
        write_delta(delta, args.out)
        print(f"delta written to {args.out} ({delta.file_bytes()} bytes, "
              f"{len(delta.entries)} entries)")
        return 0

    if args.delta_cmd == "apply":
        base = load_checkpoint(args.base)
        delta = read_delta(args.delta)
        merged = apply_delta(base, delta)
        save_checkpoint(merged, args.out)
        print(f"merged checkpoint written to {args.out}")
        return 0

    if args.delta_cmd == "verify":
        base = load_checkpoint(args.base)
        delta = read_delta(args.delta)
        summary = check_delta(base, delta)
        print(f"ok: {summary['entries']} entries, "
              f"{summary['payload_bytes']} payload bytes, "
              f"fingerprint {summary['fingerprint'][:16]}...")
        return 0

    # report
    base_mb = args.base_mb
    if args.per_task_mb is not None:
        per_task_mb = args.per_task_mb
    elif args.fraction is not None:
        per_task_mb = base_mb * args.fraction
    else:
        raise UsageError("delta report needs --per-task-mb or --fraction")
    rep = memory_report(base_mb * 1e6, per_task_mb * 1e6, args.tasks)
    lines = [
        f"base_mb={rep.base_bytes / 1e6:.3f}",
        f"per_task_mb={rep.per_task_bytes / 1e6:.3f}",
        f"task_count={rep.task_count}",
        f"naive_total_mb={rep.naive_total_bytes / 1e6:.1f}",
        f"km_total_mb={rep.km_total_bytes / 1e6:.1f}",
        f"reduction_factor={rep.reduction_factor:.1f}",
        f"per_task_reduction_factor={rep.per_task_reduction_factor:.1f}",
    ]
    print("\n".join(lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "memory_report.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        from . import figures
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(4, 3.2))
        ax.bar(["per-network copies", "base + deltas"],
               [rep.naive_total_bytes / 1e6, rep.km_total_bytes / 1e6],
               color=["tab:gray", "tab:blue"])
        ax.set_ylabel("storage (MB)")
        fig.tight_layout()
        fig.savefig(os.path.join(args.out, "memory_report.png"))
        plt.close(fig)
        write_manifest(args.out, argv,
                       effective_config_text(args, ("base_mb", "per_task_mb",
                                                    "fraction", "tasks")),
                       [], time.time())
    return 0


def cmd_eval(args, argv) -> int:
    net = load_checkpoint(args.checkpoint)
    data = load_dataset(args)
    split = data[1] if args.split == "test" else data[0]
    loss, acc = evaluate(net, split)
    print(f"split={args.split} loss={loss:.6f} acc={acc:.6f}")
    return 0


# -- argument parsing -------------------------------------------------------------------


def add_data_flags(p):
    p.add_argument("--data", choices=("cifar10", "blobs", "stripes"),
                   default="stripes")
    p.add_argument("--data-dir", default="")
    p.add_argument("--subset", type=int, default=None,
                   help="class-balanced training subset size (cifar10)")
    p.add_argument("--test-subset", type=int, default=None)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples-per-class", type=int, default=200)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--data-seed", type=int, default=0)


def add_net_flags(p):
    p.add_argument("--arch", choices=("resnet_micro", "linear_probe"),
                   default="resnet_micro")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--norm", choices=("batch", "group"), default="batch")
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--mod-depth", type=int, default=2)
    p.add_argument("--mod-activation", default="tanh",
                   choices=("tanh", "sin", "relu", "leaky_relu"))
    p.add_argument("--mod-init", default="identity_noise",
                   choices=("identity_noise", "orthogonal", "diagonal"))
    p.add_argument("--mod-sigma", type=float, default=1e-3)


def add_mask_flags(p):
    p.add_argument("--mask", default="",
                   help="comma-separated groups: convolution,implicit,explicit,classifier")
    p.add_argument("--train-conv", action="store_true")
    p.add_argument("--train-implicit", action="store_true")
    p.add_argument("--train-explicit", action="store_true")
    p.add_argument("--train-classifier", action="store_true")


def add_train_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--schedule", choices=("constant", "step"), default="step")
    p.add_argument("--milestones", default="12,16")
    p.add_argument("--lr-factor", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decay-all", action="store_true",
                   help="apply weight decay to norm affine and modulators too")
    p.add_argument("--augment", choices=("none", "crop_flip"), default="none")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kermod",
        description="kernel-modulated ConvNet training and task-delta tooling")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one network")
    p_train.add_argument("--config", default="", help="key=value config file")
    add_data_flags(p_train)
    add_net_flags(p_train)
    add_mask_flags(p_train)
    add_train_flags(p_train)
    p_train.add_argument("--out", default="runs/train")
    p_train.add_argument("--task", default="task0")
    p_train.add_argument("--full-accuracy", type=float, default=None,
                         help="reference accuracy for the recovered ratio")
    p_train.add_argument("--no-figures", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_abl = sub.add_parser("ablate", help="sweep one modulator design axis")
    p_abl.add_argument("--config", default="")
    p_abl.add_argument("--axis", required=True,
                       choices=("activation", "initialization", "depth"))
    p_abl.add_argument("--values", required=True,
                       help="comma-separated axis values")
    p_abl.add_argument("--seeds", type=int, default=5,
                       help="number of seeds (0..N-1) per value")
    add_data_flags(p_abl)
    add_net_flags(p_abl)
    add_mask_flags(p_abl)
    add_train_flags(p_abl)
    p_abl.add_argument("--out", default="runs/ablate")
    p_abl.add_argument("--no-figures", action="store_true")
    p_abl.set_defaults(func=cmd_ablate)

    p_delta = sub.add_parser("delta", help="task-delta workflows")
    dsub = p_delta.add_subparsers(dest="delta_cmd", required=True)

    d_exp = dsub.add_parser("export")
    d_exp.add_argument("--checkpoint", required=True)
    d_exp.add_argument("--out", required=True)
    d_exp.add_argument("--task", default="task0")

    d_app = dsub.add_parser("apply")
    d_app.add_argument("--base", required=True)
    d_app.add_argument("--delta", required=True)
    d_app.add_argument("--out", required=True)

    d_ver = dsub.add_parser("verify")
    d_ver.add_argument("--base", required=True)
    d_ver.add_argument("--delta", required=True)

    d_rep = dsub.add_parser("report")
    d_rep.add_argument("--base-mb", type=float, required=True)
    d_rep.add_argument("--per-task-mb", type=float, default=None)
    d_rep.add_argument("--fraction", type=float, default=None)
    d_rep.add_argument("--tasks", type=int, required=True)
    d_rep.add_argument("--out", default="")

    p_delta.set_defaults(func=cmd_delta)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--config", default="")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    add_data_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    return parser


def _subparsers(parser):
    for group_action in parser._subparsers._group_actions:
        yield from getattr(group_action, "choices", {}).values()


def apply_config_file(parser, argv):
    """Pre-scan for --config and install its values as parser defaults.

    Values go through each option's declared type, so a config line behaves
    exactly like the matching flag; flags given on the command line still
    win because they are parsed after defaults.
    """
    if "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return  # argparse reports the missing value
    values = read_config_file(argv[idx + 1])
    known = {action.dest for sub in _subparsers(parser) for action in sub._actions}
    for key in values:
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
    for sub in _subparsers(parser):
        for action in sub._actions:
            if action.dest not in values:
                continue
            raw = values[action.dest]
            if action.type is not None:
                raw = action.type(raw)
            elif isinstance(action.default, bool):
                raw = raw.lower() in ("1", "true", "yes")
            sub.set_defaults(**{action.dest: raw})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args, ["kermod"] + argv)
    except TrainingDiverged as exc:  # before TrainError: diverging is a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DeltaError as exc:  # covers FingerprintMismatch
        print(f"integrity error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
