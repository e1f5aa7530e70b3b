"""Command-line entry point: ``rtn <subcommand> ...``.

Exit codes: 0 on success, 2 for usage errors (unknown flag or subcommand),
1 for any other failure, always with a one-line ``error:`` diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from rtn import bench, datasets, modelio
from rtn.infer import QuantizedNetwork, measure_sparsity, quantize_network
from rtn.kernel import Scheme, count_ops
from rtn.nn.cnn import CNN_CONFIG, MODES, accuracy, build_small_cnn, load_digits_dataset, split_dataset
from rtn.nn.cnn import train_classifier
from rtn.nn.layers import ACTIVATION_KINDS
from rtn.nn.network import Network
from rtn.nn.toy import TOY_CONFIG, run_toy_experiment, write_curve_csv


class CliError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return values


def _scheme_list(text: str) -> list[Scheme]:
    try:
        return [Scheme(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        names = ",".join(s.value for s in Scheme)
        raise argparse.ArgumentTypeError(f"unknown scheme in {text!r}; choose from {names}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _load_dataset(spec: str, test_fraction: float, seed: int):
    if spec == "digits":
        return load_digits_dataset(test_fraction, seed)
    tf = datasets.load_tensor(spec)
    if tf.labels is None:
        raise CliError(f"dataset {spec} has no labels in its sidecar")
    return split_dataset(tf.values, tf.labels, test_fraction, seed)


def cmd_toy(args) -> int:
    cfg = replace(TOY_CONFIG, seed=args.seed, epochs=args.epochs, learning_rate=args.lr,
                  quant_param_lr=args.lr if args.quant_lr is None else args.quant_lr)
    curve = run_toy_experiment(args.activation, cfg)
    out = args.out or f"toy_{args.activation}_seed{args.seed}.csv"
    write_curve_csv(curve, out)
    print(f"{args.activation} seed {args.seed}: final mse {curve[-1]:.6f} -> {out}")
    return 0


def cmd_train_small(args) -> int:
    data = _load_dataset(args.dataset, args.test_fraction, args.split_seed)
    if len(data.input_shape) != 3:
        raise CliError(f"train-small needs NCHW images, got sample shape {data.input_shape}")
    net = build_small_cnn(args.mode, seed=args.seed, channels=tuple(args.arch),
                          input_shape=data.input_shape, num_classes=data.num_classes)
    cfg = replace(CNN_CONFIG, seed=args.seed, epochs=args.epochs)
    losses = train_classifier(net, data, cfg)
    modelio.to_float32(net)
    modelio.save_file(net, args.out)
    acc = accuracy(net, data.x_test, data.y_test)
    print(f"{args.mode} seed {args.seed}: final loss {losses[-1]:.4f}, test accuracy {acc:.4f} "
          f"-> {args.out}")
    return 0


def cmd_quantize(args) -> int:
    net = modelio.load_file(args.in_path, lenient=args.lenient)
    if not isinstance(net, Network):
        raise CliError(f"{args.in_path} is already a quantized model")
    qnet = quantize_network(net)
    modelio.save_file(qnet, args.out)
    print(f"{len(qnet.quantized_layers())} ternary layers -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    model = modelio.load_file(args.model, lenient=args.lenient)
    if args.sparsity_report and not isinstance(model, QuantizedNetwork):
        raise CliError("--sparsity-report needs a quantized model")
    tf = datasets.load_tensor(args.input)
    logits = model(tf.values)
    pred = logits.argmax(axis=1) if logits.ndim == 2 and logits.shape[1] > 1 else None
    if args.out:
        datasets.save_tensor(args.out, logits, labels=pred)
    if pred is not None:
        print("index,prediction")
        for i, p in enumerate(pred):
            print(f"{i},{p}")
        if tf.labels is not None:
            print(f"# accuracy {np.mean(pred == tf.labels):.4f}", file=sys.stderr)
    if args.sparsity_report:
        report = measure_sparsity(model, tf.values)
        print("layer,activation_zero_fraction,output_zero_fraction", file=sys.stderr)
        for i, a in enumerate(report.activation_zero_fraction):
            o = report.output_zero_fraction[i] if i < len(report.output_zero_fraction) else ""
            print(f"{i},{a:.6f},{o if o == '' else f'{o:.6f}'}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    rows = bench.run_bench(args.lengths, args.schemes, repeats=args.repeats)
    text = bench.rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if Scheme.TERNARY in args.schemes and Scheme.FLOAT32 in args.schemes:
        for n in args.lengths:
            print(f"# ternary vs float at {n}: {bench.speedup(rows, n):.2f}x", file=sys.stderr)
    return 0


def cmd_cost(args) -> int:
    cols = ("and_ops", "xor_ops", "popcount_ops", "shift_ops", "add_ops", "mul_ops")
    head = ["scheme", "length"] + [c[:-4] for c in cols] + ["bitwise", "total"]
    print(" ".join(f"{h:>10}" for h in head))
    for scheme in Scheme:
        r = count_ops(scheme, args.length)
        cells = [scheme.value, r.length] + [getattr(r, c) for c in cols] + [r.bitwise_ops, r.total]
        print(" ".join(f"{c:>10}" for c in cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtn", description="Ternary network toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="train the XOR/XNOR toy network, write its MSE curve")
    p.add_argument("--activation", choices=ACTIVATION_KINDS, default="rta")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=_positive, default=TOY_CONFIG.epochs)
    p.add_argument("--lr", type=float, default=TOY_CONFIG.learning_rate)
    p.add_argument("--quant-lr", type=float, default=None,
                   help="learning rate for gamma/beta (default: --lr)")
    p.add_argument("--out", default=None, help="CSV path (default toy_<activation>_seed<N>.csv)")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("train-small", help="train the small quantized CNN")
    p.add_argument("--dataset", required=True,
                   help="tensor file with labels in its sidecar, or 'digits' for the bundled set")
    p.add_argument("--arch", type=_int_list, default=[16, 32, 32],
                   help="channel widths of the three conv blocks, e.g. 16,32,32")
    p.add_argument("--mode", choices=MODES, default="rtn-r")
    p.add_argument("--epochs", type=_positive, default=CNN_CONFIG.epochs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_small)

    p = sub.add_parser("quantize", help="pack a trained model for ternary inference")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lenient", action="store_true", help="normalize non-canonical zeros on load")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="run a model on a tensor file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--sparsity-report", action="store_true")
    p.add_argument("--out", default=None, help="also write the logits as a tensor file")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time the dot-product schemes, CSV to stdout")
    p.add_argument("--lengths", type=_int_list, default=list(bench.DEFAULT_LENGTHS))
    p.add_argument("--schemes", type=_scheme_list, default=list(Scheme))
    p.add_argument("--repeats", type=_positive, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cost", help="print the Boolean-op count table")
    p.add_argument("--length", type=int, required=True)
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "cost" and args.length < 0:
            raise CliError("--length must be non-negative")
        return args.func(args)
    except (CliError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
