"""Command-line entry point: ``sigquant <command> ...``.

Exit codes: 0 success, 1 check failure or runtime error, 2 usage/config/data
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .core import QuantLevels, QuantParams, ideal_quantize, relaxation_gap, soft_quantize
from .datasets import load_dataset
from .exceptions import ContractError, DivergenceError, SigquantError
from .gradcheck import network_gradcheck, operator_gradcheck
from .inference import _PACKABLE, benchmark, load_packed, save_packed, weight_payload
from .nn import SGD, Network
from .training import (
    AblationConfig,
    PhasePlan,
    StepLR,
    TemperatureSchedule,
    ablation_suite,
    build_quantized_network,
    evaluate,
    finalize,
    train,
    train_float,
)

log = logging.getLogger("sigquant")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(SigquantError):
    pass


def _dataset(cfg: RunConfig):
    ds = load_dataset(cfg.dataset_path, cfg.dataset_format, labels_path=cfg.labels_path, seed=cfg.seed,
                      classes=cfg.synthetic_classes, n=cfg.synthetic_samples, features=cfg.synthetic_features)
    return ds, *ds.split(cfg.val_fraction, cfg.seed)


def _opt(cfg: RunConfig, lr: float) -> SGD:
    return SGD(lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm, max_scale_step=cfg.max_scale_step)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds, tr, va = _dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.output_dir, "checkpoint.npz")
    plan_kw = dict(split=cfg.phase_split, with_activations=cfg.activation_levels is not None)

    if args.resume:
        ck = load_checkpoint(args.resume)
        net, opt, start, metrics = ck.network, ck.opt, ck.epoch + 1, ck.metrics
        print(f"resuming from epoch {ck.epoch}")
    else:
        net = Network.from_arch(cfg.arch_for(ds.n_classes), ds.input_shape, cfg.seed)
        if cfg.pretrain_epochs:
            net, base_metrics = train_float(
                net, tr, va, cfg.pretrain_epochs, cfg.seed, lr=cfg.pretrain_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm, batch_size=cfg.batch_size,
                milestones=cfg.pretrain_lr_decay_epochs)
            base_metrics.to_csv(os.path.join(cfg.output_dir, "baseline_metrics.csv"))
            save_checkpoint(os.path.join(cfg.output_dir, "baseline.npz"), net, epoch=cfg.pretrain_epochs,
                            metrics=base_metrics, extra={"config": cfg.to_dict(), "stage": "pretrain"})
            print(f"full-precision baseline: val acc {base_metrics.last.val_acc_hard:.2f}%")
        net = build_quantized_network(
            net, cfg.weight_levels, cfg.activation_levels, tr.X, cfg.seed, method=cfg.bias_init,
            shared=cfg.shared_quantizers, calib_samples=cfg.calib_samples)
        opt, start, metrics = _opt(cfg, cfg.lr), 1, None

    def on_epoch_end(epoch, network, opt_, metrics_):
        save_checkpoint(ckpt_path, network, opt_, epoch, metrics_, {"config": cfg.to_dict(), "stage": "qat"})
        r = metrics_.last
        print(f"epoch {epoch:3d}  T={r.T:g}  phase={r.phase:<11s} loss={r.train_loss:.4f}  "
              f"train={r.train_acc:.2f}%  soft={r.val_acc_soft:.2f}%  hard={r.val_acc_hard:.2f}%")

    try:
        net, metrics = train(
            net, tr, va, PhasePlan.default(cfg.epochs, **plan_kw), TemperatureSchedule(cfg.temperature_rate),
            opt, cfg.epochs, cfg.seed, batch_size=cfg.batch_size,
            lr_schedule=StepLR(cfg.lr, cfg.lr_decay_epochs, cfg.lr_decay), start_epoch=start,
            metrics=metrics, on_epoch_end=on_epoch_end)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    metrics.to_csv(os.path.join(cfg.output_dir, "metrics.csv"))
    model = finalize(net)
    size = save_packed(model, os.path.join(cfg.output_dir, "model.sqnt"))
    print(f"final hard-mode val acc {metrics.last.val_acc_hard:.2f}%  (soft {metrics.last.val_acc_soft:.2f}%)")
    print(f"wrote {ckpt_path}, {os.path.join(cfg.output_dir, 'model.sqnt')} ({size} bytes), metrics.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.dataset or args.format:
        cfg.dataset_path = args.dataset or cfg.dataset_path
        cfg.dataset_format = args.format or cfg.dataset_format
        cfg.labels_path = args.labels or cfg.labels_path
        cfg.validate()
    ds, tr, va = _dataset(cfg)
    data = {"val": va, "train": tr, "all": ds}[args.split]
    results = {}
    if args.model.endswith(".sqnt"):
        model = load_packed(args.model)
        if tuple(model.input_shape) != tuple(data.input_shape):
            raise ContractError(f"model expects input {model.input_shape}, dataset has {data.input_shape}")
        if args.mode in ("soft", "float"):
            raise UsageError(f"a packed model supports only hard and packed evaluation, not {args.mode}")
        modes = ["hard", "packed"] if args.mode == "all" else [args.mode]
        for m in modes:
            results[m] = model.accuracy(data.X, data.y, use_packed=m == "packed")
    else:
        net = load_checkpoint(args.model).network
        if tuple(net.input_shape) != tuple(data.input_shape):
            raise ContractError(f"model expects input {net.input_shape}, dataset has {data.input_shape}")
        if args.mode != "float" and not net.has_quantizers():
            raise UsageError("model has no quantizers")
        modes = ["soft", "hard", "packed"] if args.mode == "all" else [args.mode]
        for m in modes:
            if m == "packed":
                results[m] = finalize(net).packed().accuracy(data.X, data.y, use_packed=True)
            else:
                results[m] = evaluate(net, data.X, data.y, m)
    for m, acc in results.items():
        print(f"{m:7s} top-1 {acc:.2f}%")
    if "soft" in results and "hard" in results:
        print(f"soft-hard delta {results['soft'] - results['hard']:+.2f} pp")
    if "hard" in results and "packed" in results:
        print(f"hard-packed delta {results['hard'] - results['packed']:+.2f} pp")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    ok = True
    op = operator_gradcheck(args.trials, args.seed)
    print(f"operator blocks over {args.trials} random configurations (tolerance {args.tolerance:g}):")
    for block, err in op.items():
        passed = err < args.tolerance
        ok &= passed
        print(f"  {block:10s} max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    for case in ("mlp", "conv"):
        e2e = network_gradcheck(args.seed, case)
        print(f"end-to-end {case} network (tolerance {args.e2e_tolerance:g}):")
        for name, err in e2e.items():
            passed = err < args.e2e_tolerance
            ok &= passed
            print(f"  {name:18s} max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    print("gradcheck", "PASSED" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def relax_curves(levels, params, temperatures, domain=(-5.0, 5.0), points=1001):
    """Columns ``x``, ``soft_T=<t>`` for each temperature, and ``ideal``."""
    x = np.linspace(domain[0], domain[1], points)
    cols = {"x": x}
    for t in temperatures:
        cols[f"soft_T={t:g}"] = soft_quantize(x, levels, params.replace(temperature=t))
    cols["ideal"] = ideal_quantize(x, levels, params)
    return cols


def _parse_floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def cmd_relax_plot(args) -> int:
    levels = QuantLevels.from_spec(args.levels)
    if args.biases is not None:
        biases = _parse_floats(args.biases)
    else:
        lv = levels.levels
        biases = [(a + b) / 2 for a, b in zip(lv, lv[1:])]
    params = QuantParams(args.alpha, args.beta, biases, 1.0)
    temps = _parse_floats(args.T)
    domain = tuple(_parse_floats(args.domain))
    cols = relax_curves(levels, params, temps, domain, args.points)
    with (open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)) as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        for row in zip(*cols.values()):
            w.writerow([f"{v:.10g}" for v in row])
    for t in temps:
        gap = relaxation_gap(levels, params.replace(temperature=t), domain, args.points, args.exclusion / args.beta)
        print(f"T={t:g} relaxation gap {gap:.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ds, tr, va = _dataset(cfg)
    acfg = AblationConfig(
        arch=cfg.arch_for(ds.n_classes), levels_w=cfg.weight_levels, levels_a=cfg.activation_levels,
        pretrain_epochs=cfg.pretrain_epochs, epochs=cfg.epochs, temperature_rate=cfg.temperature_rate,
        lr=cfg.pretrain_lr, qat_lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm, batch_size=cfg.batch_size, seed=cfg.seed,
        pretrain_milestones=cfg.pretrain_lr_decay_epochs, milestones=cfg.lr_decay_epochs,
        max_scale_step=cfg.max_scale_step)
    rows = ablation_suite(acfg, tr, va)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "ablation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{'ablation':22s} {'variant a':>12s} {'acc':>7s} {'variant b':>10s} {'acc':>7s} {'diff':>7s}  expected")
    for r in rows:
        print(f"{r['ablation']:22s} {r['variant_a']:>12s} {r['acc_a']:7.2f} {r['variant_b']:>10s} "
              f"{r['acc_b']:7.2f} {r['difference']:+7.2f}  {r['expected']} ({'holds' if r['holds'] else 'violated'})")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    net = load_checkpoint(args.checkpoint).network
    model = finalize(net)
    size = save_packed(model, args.out)
    quant = [op for op in model.dense_ops() if op.quantized]
    float_bytes = sum(4 * op.out_features * op.in_features for op in quant)
    packed_bytes = sum(len(weight_payload(op.codes, _PACKABLE.get(op.levels.levels, 3))) for op in quant)
    print(f"wrote {args.out}: {size} bytes")
    if quant:
        print(f"quantized layer weights: {packed_bytes} bytes packed vs {float_bytes} bytes as float32 "
              f"({float_bytes / packed_bytes:.1f}x)")
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = benchmark(tuple(int(s) for s in args.sizes.split(",")), args.repeats)
    print(f"{'codebook':8s} {'size':>6s} {'mem ratio':>9s} {'float s':>10s} {'packed s':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['codebook']:8s} {r['size']:6d} {r['memory_ratio']:9.1f} {r['float_seconds']:10.2e} "
              f"{r['packed_seconds']:10.2e} {r['speedup']:8.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sigquant", description="Sigmoid-relaxed quantization-aware training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="pre-train, quantize, train and export a network")
    s.add_argument("config")
    s.add_argument("--resume", metavar="CHECKPOINT")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or packed model")
    s.add_argument("model")
    s.add_argument("--config", help="run config naming the dataset and split")
    s.add_argument("--dataset", help="dataset path (overrides the config)")
    s.add_argument("--format", choices=["idx", "csv", "synthetic", "digits"])
    s.add_argument("--labels", help="IDX labels path when it cannot be inferred")
    s.add_argument("--mode", choices=["soft", "hard", "packed", "float", "all"], default="hard")
    s.add_argument("--split", choices=["val", "train", "all"], default="val")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--e2e-tolerance", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("relax-plot", help="CSV of soft quantizer curves at several temperatures")
    s.add_argument("--levels", default="3bit±4")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--biases", help="comma-separated; default: midpoints between levels")
    s.add_argument("--T", default="1,11,121", help="comma-separated temperatures (may be empty)")
    s.add_argument("--domain", default="-5,5")
    s.add_argument("--points", type=int, default=1001)
    s.add_argument("--exclusion", type=float, default=0.05, help="excluded radius around b_i, in scaled units")
    s.add_argument("--out")
    s.set_defaults(func=cmd_relax_plot)

    s = sub.add_parser("ablate", help="paired ablation runs")
    s.add_argument("config")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export", help="write the finalized packed model of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("out")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("bench", help="packed vs float matrix-vector benchmark")
    s.add_argument("--sizes", default="256,1024,2048")
    s.add_argument("--repeats", type=int, default=5)
    s.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    limit = os.environ.get("SIGQUANT_THREADS")
    if not limit:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(limit)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SigquantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
