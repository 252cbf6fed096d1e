"""qdeploy command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 bit-exactness divergence between the engine and the trainable model.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import TrainMode
from .bench import DEFAULT_SIZES, bench_matmul, bench_requant, write_bench_csv
from .blob import export_params
from .data import (
    SynthSpec,
    compute_preproc_stats,
    load_cifar10,
    stored_bytes,
    synth_dataset,
)
from .errors import DataFormatError, QDeployError, TrainingDiverged
from .manifest import PREPROCESS_ALIASES, SCHEME_ALIASES, builtin_manifest, load_manifest
from .plan import build_plan, deploy_plan
from .pretrained import import_pretrained, load_weights
from .train import accuracy, make_optimizer, train_loop, write_trace_csv
from .trainable import gen_trainable
from .validate import random_inputs, validate_bitexact

log = logging.getLogger("qdeploy")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _manifest(args):
    src = args.manifest
    if Path(src).exists():
        m = load_manifest(src)
    else:
        try:
            m = builtin_manifest(src)
        except FileNotFoundError:
            raise UsageError(f"{src}: no such manifest file or builtin manifest") from None
    if getattr(args, "scheme", None) or getattr(args, "preproc", None):
        m = m.with_options(args.scheme, args.preproc)
    return m


def _parse_synth(text: str, manifest) -> SynthSpec:
    h, w, c = manifest.input.shape
    classes = manifest.shapes()[-1][-1]
    fields = {"height": h, "width": w, "channels": c, "classes": classes}
    keys = {"n": "n", "h": "height", "w": "width", "c": "channels", "classes": "classes",
            "noise": "noise", "separation": "separation", "template_seed": "template_seed"}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            fields["n"] = int(part)
            continue
        k, v = part.split("=", 1)
        if k not in keys:
            raise UsageError(f"unknown --synth key {k!r}")
        fields[keys[k]] = float(v) if k in ("noise", "separation") else int(v)
    spec = SynthSpec(**fields)
    if (spec.height, spec.width, spec.channels) != (h, w, c):
        raise UsageError(f"synthetic images {spec.height}x{spec.width}x{spec.channels} do not match the manifest input {manifest.input.shape}")
    return spec


def _datasets(args, manifest):
    if bool(args.data) == bool(args.synth):
        raise UsageError("give exactly one of --data or --synth")
    if args.synth:
        spec = _parse_synth(args.synth, manifest)
        train = synth_dataset(spec, args.seed, "train")
        test_spec = SynthSpec(**{**spec.__dict__, "n": args.test_n or max(spec.n // 4, 1)})
        test = synth_dataset(test_spec, args.seed + 1, "test")
    else:
        path = Path(args.data)
        if not path.exists():
            raise DataFormatError(f"{path}: no such file or directory")
        if path.is_dir():
            train = load_cifar10(path, "train")
            test = load_cifar10(path, "test")
        else:
            full = load_cifar10(path)
            n_test = args.test_n or len(full) // 5
            train = full.subset(len(full) - n_test)
            test = type(full)(full.images[len(full) - n_test :], full.labels[len(full) - n_test :], "test")
        if args.train_n:
            train = train.subset(args.train_n)
        if args.test_n:
            test = test.subset(args.test_n, "test")
    if train.images.shape[1:] != tuple(manifest.input.shape):
        raise DataFormatError(f"dataset images {train.images.shape[1:]} do not match the manifest input {manifest.input.shape}")
    return train, test


def _preproc_for(manifest, train):
    stats = compute_preproc_stats(train)
    if manifest.preprocess == "batch_norm_like":
        return stats, stats.params()
    if manifest.preprocess == "mean_image":
        return stats, stats.mean_image_params()
    return stats, None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _eval_mode(scheme):
    return TrainMode.FP32 if scheme == "fp32" else TrainMode.QAT_EVAL


def _train_mode(scheme):
    return TrainMode.FP32 if scheme == "fp32" else TrainMode.QAT_TRAIN


def _optimizer(args, steps_per_epoch):
    every = args.decay_epochs * steps_per_epoch if args.decay_epochs else 0
    return make_optimizer(args.optimizer, args.lr, decay_every=every)


# ---------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    m = _manifest(args)
    plan = build_plan(m, requant=args.requant, allow_wide_accumulator=args.allow_wide_accumulator)
    text = plan.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.json").write_text(text)
    report = plan.report()
    print(f"{m.name}: {len(plan.ops)} ops, arena {plan.arena_size} B (peak live {plan.peak_live} B), "
          f"{report['total_macs']} MACs, requant={plan.requant}")
    for op in report["ops"]:
        extra = "".join(f" {k}={op[k]}" for k in ("bias_shift", "out_shift") if k in op)
        print(f"  {op['name']:<12} {op['kind']:<16} macs={op['macs']}{extra}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    m = _manifest(args)
    train, test = _datasets(args, m)
    stats, pp = _preproc_for(m, train)
    plan0 = build_plan(m, preproc=pp)
    graph = gen_trainable(plan0, args.seed)
    steps = -(-len(train) // args.batch_size)
    opt = _optimizer(args, steps)
    progress = None
    if args.verbose:
        progress = lambda r: r.step % 50 == 0 and log.info("step %d loss %.4f", r.step, r.loss)
    result = train_loop(graph, train, opt, args.epochs, args.seed, args.batch_size, _train_mode(m.scheme),
                        flip=args.flip, crop_pad=args.crop_pad, max_steps=args.max_steps, progress=progress)
    graph.freeze()
    acc = accuracy(graph, test, _eval_mode(m.scheme))

    artifacts = {}
    status = EXIT_OK
    report = None
    if m.scheme == "symmetric_pow2":
        plan = deploy_plan(graph)
        blob = export_params(graph, plan)
        report = validate_bitexact(plan, graph, args.samples, args.seed, inputs=_validation_inputs(args, plan, test))
        if not report.identical:
            status = EXIT_DIVERGED
    else:
        plan = build_plan(m, preproc=pp)
        blob = None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json())
    write_trace_csv(result.trace, out / "loss.csv")
    artifacts.update(plan="plan.json", loss="loss.csv")
    if blob is not None:
        (out / "params.bin").write_bytes(blob.to_bytes())
        _write_json(out / "validation.json", report.to_dict())
        artifacts.update(params="params.bin", validation="validation.json")
    _write_json(out / "accuracy.json", {
        "model": m.name, "scheme": m.scheme, "preprocess": m.preprocess, "seed": args.seed,
        "epochs": args.epochs, "optimizer": args.optimizer, "lr": args.lr,
        "train_samples": len(train), "test_samples": len(test), "steps": len(result.trace),
        "test_accuracy": acc, "final_loss": result.trace[-1].loss if result.trace else None,
        "preprocess_stored_bytes": stored_bytes(m.preprocess, stats) if m.preprocess != "none" else 0,
    })
    artifacts["accuracy"] = "accuracy.json"
    print(f"{m.name} [{m.scheme}, {m.preprocess}] test accuracy {acc:.4f} after {len(result.trace)} steps")
    if report is not None:
        print(f"bit-exactness: {report.summary()}")
    print("artifacts: " + ", ".join(str(out / a) for a in artifacts.values()))
    return status


def _validation_inputs(args, plan, test):
    rng = np.random.default_rng(args.seed)
    if args.samples <= len(test) and plan.manifest.input.dtype == "uint8":
        return test.images[: args.samples]
    return random_inputs(plan, args.samples, rng)


def cmd_validate(args) -> int:
    m = _manifest(args)
    if m.scheme != "symmetric_pow2":
        print(f"refused: {m.scheme} plans have no integer tensors to compare")
        return EXIT_CONFIG
    if args.weights:
        graph = import_pretrained(load_weights(args.weights), m, seed=args.seed)
    else:
        graph = gen_trainable(build_plan(m), args.seed)
    # one range-tracking pass on random inputs so activation formats are realistic
    from .autodiff import forward

    plan0 = build_plan(m)
    calib = random_inputs(plan0, min(args.samples, 64), np.random.default_rng(args.seed + 1))
    forward(graph, {"image": calib}, TrainMode.QAT_TRAIN, upto=graph.outputs["logits"])
    graph.freeze()
    plan = deploy_plan(graph)
    report = validate_bitexact(plan, graph, args.samples, args.seed)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "validation.json", report.to_dict())
    return EXIT_OK if report.identical else EXIT_DIVERGED


def cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(",")) if args.sizes else DEFAULT_SIZES
    rows = bench_matmul(sizes, args.repeats, args.seed) + bench_requant(sizes, args.repeats, args.seed)
    print(f"{'bench':<8} {'size':>5} {'base ms':>10} {'variant ms':>11} {'ratio':>7} {'mem ratio':>9}")
    for r in rows:
        mem = f"{r.memory_ratio:.2f}" if r.bench == "requant" else "-"
        print(f"{r.bench:<8} {r.size:>5} {r.baseline_ms:>10.4f} {r.variant_ms:>11.4f} {r.ratio:>7.3f} {mem:>9}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_bench_csv(rows, out / "bench.csv")
    return EXIT_OK


def _pairs(text: str):
    pairs = []
    for part in filter(None, text.split(",")):
        kind, _, lr = part.partition(":")
        if kind not in ("sgd", "adam") or not lr:
            raise UsageError(f"bad optimizer pair {part!r}; use e.g. sgd:0.1,adam:0.001")
        pairs.append((kind, float(lr)))
    return pairs


def cmd_lr_sweep(args) -> int:
    m = _manifest(args)
    train, _ = _datasets(args, m)
    _, pp = _preproc_for(m, train)
    modes = [s.strip() for s in args.modes.split(",")]
    for mode in modes:
        if mode not in ("fp32", "qat"):
            raise UsageError(f"unknown mode {mode!r}; use fp32 and/or qat")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for kind, lr in _pairs(args.pairs):
        for mode in modes:
            scheme = "fp32" if mode == "fp32" else m.scheme
            mm = m.with_options(scheme=scheme)
            graph = gen_trainable(build_plan(mm, preproc=pp), args.seed)
            args.optimizer, args.lr = kind, lr
            opt = _optimizer(args, -(-len(train) // args.batch_size))
            tmode = TrainMode.FP32 if mode == "fp32" else TrainMode.QAT_TRAIN
            result = train_loop(graph, train, opt, args.epochs, args.seed, args.batch_size, tmode,
                                max_steps=args.max_steps)
            name = f"loss_{kind}_{lr:g}_{mode}.csv"
            write_trace_csv(result.trace, out / name)
            summary.append((kind, lr, mode, len(result.trace), result.trace[-1].loss, result.mean_step_ms(), name))
            print(f"{kind:<5} lr={lr:<8g} {mode:<5} steps={len(result.trace)} final loss {result.trace[-1].loss:.4f} "
                  f"median step {result.mean_step_ms():.2f} ms -> {name}")
    with open(out / "sweep.csv", "w") as fh:
        fh.write("optimizer,lr,mode,steps,final_loss,median_step_ms,trace\n")
        for kind, lr, mode, steps, loss, ms, name in summary:
            fh.write(f"{kind},{lr!r},{mode},{steps},{loss!r},{ms:.3f},{name}\n")
    return EXIT_OK


def cmd_import(args) -> int:
    m = _manifest(args)
    weights = load_weights(args.weights)
    train, test = _datasets(args, m)
    _, pp = _preproc_for(m, train)
    calib = train.images[: args.calib_n]
    graph = import_pretrained(weights, m, calibration=calib, preproc=pp, seed=args.seed)
    graph.freeze()
    ptq_acc = accuracy(graph, test)
    if args.epochs:
        graph.unfreeze()
        opt = _optimizer(args, -(-len(train) // args.batch_size))
        train_loop(graph, train, opt, args.epochs, args.seed, args.batch_size, TrainMode.QAT_TRAIN)
        graph.freeze()
    acc = accuracy(graph, test)
    plan = deploy_plan(graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json())
    (out / "params.bin").write_bytes(export_params(graph, plan).to_bytes())
    _write_json(out / "accuracy.json", {"post_training_accuracy": ptq_acc, "fine_tuned_accuracy": acc,
                                        "fine_tune_epochs": args.epochs})
    print(f"post-training quantized accuracy {ptq_acc:.4f}; after {args.epochs} fine-tune epochs {acc:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, data=False, train=False):
    p.add_argument("--manifest", default="cmsis_cifar10", help="manifest file or builtin name (default: %(default)s)")
    p.add_argument("--scheme", choices=sorted(set(SCHEME_ALIASES) | set(SCHEME_ALIASES.values())),
                   help="quantization scheme override")
    p.add_argument("--preproc", choices=sorted(set(PREPROCESS_ALIASES) | set(PREPROCESS_ALIASES.values())),
                   help="preprocessing override")
    p.add_argument("--seed", type=int, required=train)
    p.add_argument("--out", help="output directory")
    if data:
        p.add_argument("--data", help="CIFAR-10 binary batch directory or record file")
        p.add_argument("--synth", help="synthetic data: N or n=..,classes=..,noise=..,separation=..")
        p.add_argument("--train-n", type=int, default=0, help="use only the first N training images")
        p.add_argument("--test-n", type=int, default=0, help="use only the first N test images")
    if train:
        p.add_argument("--epochs", type=int, default=1)
        p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
        p.add_argument("--lr", type=float, default=0.1)
        p.add_argument("--decay-epochs", type=int, default=0, help="multiply lr by 0.1 every N epochs")
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--max-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qdeploy", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build an untrained deployable plan and report memory/MACs")
    _common(p)
    p.add_argument("--requant", choices=("shift", "dynamic"), default="shift")
    p.add_argument("--allow-wide-accumulator", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("pipeline", help="plan, train, export and validate end to end")
    _common(p, data=True, train=True)
    p.add_argument("--samples", type=int, default=1000, help="validation samples")
    p.add_argument("--flip", action="store_true", help="random horizontal flips")
    p.add_argument("--crop-pad", type=int, default=0, help="pad-and-random-crop margin")
    p.set_defaults(func=cmd_pipeline, out="out")

    p = sub.add_parser("validate", help="bit-exactness check of engine vs qat-eval graph")
    _common(p, train=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--weights", help=".npz of fp32 parameters (default: fresh initialization)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="symmetric vs asymmetric matmul and requantization benchmark")
    p.add_argument("--sizes", help="comma-separated square sizes (default: 32,48,64)")
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lr-sweep", help="loss traces for several optimizer/lr pairs")
    _common(p, data=True, train=True)
    p.add_argument("--pairs", default="sgd:0.1,sgd:0.15,adam:0.001")
    p.add_argument("--modes", default="qat", help="fp32, qat or fp32,qat")
    p.set_defaults(func=cmd_lr_sweep, out="sweep")

    p = sub.add_parser("import", help="import fp32 weights, calibrate, optionally fine-tune, export")
    _common(p, data=True, train=True)
    p.add_argument("--weights", required=True, help=".npz of fp32 parameters")
    p.add_argument("--calib-n", type=int, default=256)
    p.set_defaults(func=cmd_import, out="imported", epochs=0)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("QF_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QDeployError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
