"""``cicnet`` command-line entry point.

Exit codes: 0 ok, 1 configuration error, 2 training divergence, 3 I/O or
data error, 64 usage error.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck, netbuilder as nb, trainer
from .errors import (CompatibilityError, ConfigError, DegenerateStatisticsError,
                     DivergenceError, FormatError, ShapeError)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_USAGE = 0, 1, 2, 3, 64

AUGMENT_MODES = {"none": "none", "flip": "flip", "padcrop": "padcropflip"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_net_source(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--preset", help="named architecture (see `cicnet presets`)")
    g.add_argument("--config", type=Path, help="network config file")
    p.add_argument("--scale", type=int, default=1, metavar="DIV",
                   help="divide every dense width by DIV (sparse widths follow)")
    p.add_argument("--classes", type=int, default=None, help="class count for presets")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cicnet", description="Convolution-in-Convolution networks in numpy")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on CIFAR binaries")
    _add_net_source(p)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--augment", choices=tuple(AUGMENT_MODES), default="none")
    p.add_argument("--epochs", type=int, default=None, help="default: full schedule (230)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("run"))
    p.add_argument("--paper-lr", action="store_true", help="use the unscaled 0.5-peak schedule")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--subset", type=int, default=None, metavar="N", help="train on the first N images")
    p.add_argument("--test-subset", type=int, default=None, metavar="N", help="evaluate on the first N test images")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--resume", type=Path, default=None, metavar="CHECKPOINT")

    p = sub.add_parser("eval", help="test error of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--no-normalize", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of a whole network")
    p.add_argument("--preset", default="table2-L3")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--scale", type=int, default=16, metavar="DIV")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", default="1,3,8,8", help="input shape B,C,H,W")

    p = sub.add_parser("params", help="per-layer weight and bias counts")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset")
    g.add_argument("--config", type=Path)
    g.add_argument("--mlp", help="per-pixel MLP widths, e.g. 8,6,4,2")
    p.add_argument("--pattern", help="sparsity pattern for --mlp, e.g. 010")
    p.add_argument("--L", type=int, default=3, dest="window_len", help="window length of sparse layers")
    p.add_argument("--shared", action="store_true", help="share one stencil across windows")
    p.add_argument("--scale", type=int, default=1, metavar="DIV")
    p.add_argument("--classes", type=int, default=None)

    p = sub.add_parser("shapes", help="layer-by-layer shape trace")
    _add_net_source(p)

    p = sub.add_parser("presets", help="list preset names")
    p.add_argument("action", nargs="?", choices=("list", "show"), default="list")
    p.add_argument("name", nargs="?")

    p = sub.add_parser("data-verify", help="check CIFAR binary files")
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default=None)
    return parser


def _resolve_config(args) -> nb.NetworkConfig:
    if getattr(args, "config", None) is not None:
        cfg = nb.load_config(args.config)
    else:
        classes = args.classes if args.classes is not None else 10
        try:
            cfg = nb.preset(args.preset, classes)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    if args.scale != 1:
        cfg = nb.scale_widths(cfg, args.scale)
    nb.infer_shapes(cfg)
    return cfg


def _print_resolved(**items) -> None:
    for k, v in items.items():
        print(f"# {k} = {v}")


def _kernel_label(spec, c_in) -> str:
    kh, kw = spec.kernel
    return f"{kh}x{kw}x{spec.window_len}x{spec.out_channels(c_in)}"


def cmd_params(args) -> int:
    if args.mlp:
        widths = [int(t) for t in args.mlp.split(",")]
        pattern = args.pattern or "0" * (len(widths) - 1)
        _print_resolved(mlp=args.mlp, pattern=pattern, L=args.window_len, shared=args.shared)
        layers = nb.mlp_chain(widths, pattern, args.window_len, args.shared)
        names = [f"layer{i + 1}" for i in range(len(layers))]
    else:
        cfg = _resolve_config(args)
        _print_resolved(source=args.preset or args.config, scale=args.scale, classes=cfg.class_count)
        layers, names, c = [], [], cfg.input_shape[0]
        for spec in nb.layer_specs(cfg):
            if spec.kind == "clc":
                layers.append((spec.clc, c))
                names.append(spec.name)
                c = spec.clc.out_channels(c)
    tw = tb = 0
    print(f"{'layer':<8} {'kernel':<16} {'weights':>10} {'biases':>8}")
    for name, (spec, c_in) in zip(names, layers):
        w, b = nb.param_count(spec, c_in)
        tw, tb = tw + w, tb + b
        mode = "shared" if spec.shared else "unshared"
        print(f"{name:<8} {_kernel_label(spec, c_in):<16} {w:>10} {b:>8}  {mode if spec.window_len < c_in else 'dense'}")
    print(f"total weights: {tw}  biases: {tb}")
    return EXIT_OK


def cmd_shapes(args) -> int:
    cfg = _resolve_config(args)
    _print_resolved(source=args.preset or args.config, scale=args.scale, classes=cfg.class_count)
    specs = nb.layer_specs(cfg)
    shapes = nb.infer_shapes(cfg)
    print(f"{'input':<10} {'':<16} {str((1,) + tuple(cfg.input_shape))}")
    c = cfg.input_shape[0]
    for spec, shape in zip(specs, shapes):
        detail = ""
        if spec.kind == "clc":
            detail = _kernel_label(spec.clc, c)
        elif spec.kind == "maxpool":
            detail = "global" if spec.pool.global_pool else f"{spec.pool.window[0]}x{spec.pool.window[1]}/{spec.pool.stride[0]}"
        elif spec.kind == "dropout":
            detail = f"p={spec.rate}"
        print(f"{spec.name:<10} {detail:<16} {shape}")
        c = shape[1]
    print(f"total layers: {len(specs)}")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.action == "show":
        if not args.name:
            raise ConfigError("presets show needs a preset name")
        try:
            print(nb.config_to_text(nb.preset(args.name)), end="")
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
        return EXIT_OK
    for name in nb.preset_names():
        print(name)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    shape = tuple(int(t) for t in args.input.split(","))
    cfg = replace(cfg, input_shape=shape[1:])
    nb.infer_shapes(cfg)
    _print_resolved(source=args.config or args.preset, scale=args.scale, tol=args.tol,
                    seed=args.seed, input=shape)
    net = nb.build_network(cfg, args.seed)
    report = gradcheck.check_network(net, shape, tol=args.tol, seed=args.seed)
    print(report.format_table())
    return EXIT_OK if report.passed else EXIT_CONFIG


def _load_data(args):
    train_ds, test_ds = D.load_dataset(args.dataset, args.data_dir)
    if not args.no_normalize:
        stats = D.compute_stats(train_ds)
        train_ds, test_ds = D.normalize(train_ds, stats), D.normalize(test_ds, stats)
    return train_ds, test_ds


def cmd_train(args) -> int:
    if args.classes is None and args.dataset == "cifar100":
        args.classes = 100
    cfg = _resolve_config(args)
    make = trainer.paper_schedule if args.paper_lr else trainer.desk_schedule
    sched = make(batch_size=args.batch_size, momentum=args.momentum, weight_decay=args.weight_decay)
    epochs = sched.total_epochs if args.epochs is None else args.epochs
    policy = D.AugmentPolicy(AUGMENT_MODES[args.augment], seed=args.seed)
    _print_resolved(source=args.preset or args.config, scale=args.scale, dataset=args.dataset,
                    augment=policy.mode, epochs=epochs, seed=args.seed, batch_size=sched.batch_size,
                    lr_peak=trainer.lr_at_epoch(sched, 1), momentum=sched.momentum,
                    weight_decay=sched.weight_decay, normalize=not args.no_normalize, out=args.out)
    print(nb.config_to_text(cfg), end="")
    try:
        train_ds, test_ds = _load_data(args)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.subset is not None:
        train_ds = train_ds.subset(np.arange(min(args.subset, len(train_ds))))
    if args.test_subset is not None:
        test_ds = test_ds.subset(np.arange(min(args.test_subset, len(test_ds))))
    net = nb.build_network(cfg, args.seed)
    start, velocity = 1, None
    if args.resume is not None:
        ck = trainer.checkpoint_load(args.resume, expect_config=cfg)
        velocity = ck.restore(net)
        start = ck.epoch + 1
    history = trainer.train(net, train_ds, sched, policy, args.seed, epochs=epochs, test_ds=test_ds,
                            out_dir=args.out, start_epoch=start, velocity=velocity)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.4f} test_err {last.test_err:.4f}")
    print(f"history: {args.out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ck = trainer.checkpoint_load(args.checkpoint)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    cfg = nb.config_from_text(ck.config_text)
    _print_resolved(checkpoint=args.checkpoint, epoch=ck.epoch, dataset=args.dataset,
                    classes=cfg.class_count, normalize=not args.no_normalize)
    try:
        _, test_ds = _load_data(args)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    net = nb.build_network(cfg)
    ck.restore(net)
    err = trainer.evaluate(net, test_ds)
    print(f"test error: {err:.4f}")
    return EXIT_OK


def cmd_data_verify(args) -> int:
    try:
        name, checks, counts = D.verify_directory(args.data_dir, args.dataset)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    exp_train, exp_test = D.EXPECTED_COUNTS[name]
    _print_resolved(data_dir=args.data_dir, dataset=name)
    print(f"expected train: {exp_train}, test: {exp_test}")
    for c in checks:
        status = "ok" if c.ok else f"INVALID ({c.message})"
        print(f"{c.name}: {c.records} records {status}")
    print(f"train: {counts['train']}, test: {counts['test']}")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_IO


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "params": cmd_params,
    "shapes": cmd_shapes, "presets": cmd_presets, "data-verify": cmd_data_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CompatibilityError, ShapeError, DegenerateStatisticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
