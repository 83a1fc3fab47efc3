"""Command-line entry point.

Commands: gradcheck, invert, estimate-memory, train, eval, bench.
Reports go to stdout as JSON (estimate-memory adds an aligned table), logs to
stderr. Exit codes: 0 success, 1 verification failure, 2 usage error.

REVVOLNET_THREADS caps BLAS parallelism; unset means single-threaded
deterministic mode. This must happen before numpy loads.
"""

import os

_threads = os.environ.get("REVVOLNET_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import sys
import time

import numpy as np

log = logging.getLogger("revvolnet")

USAGE_ERROR = 2
VERIFY_ERROR = 1


def _parse_shape(text):
    parts = [int(p) for p in text.split(",") if p.strip()]
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError(
            f"--input-shape wants three positive ints 'd,h,w', got {text!r}")
    return tuple(parts)


def _emit(doc):
    print(json.dumps(doc, indent=2))


def cmd_gradcheck(args):
    from . import ops, verification

    width = args.width
    if args.spec:
        spec = _load_spec(args.spec)
        width = spec.levels[0] if spec.reversible else 2 * spec.levels[0]
    if args.inject_fault:
        name, _, scale = args.inject_fault.partition("=")
        ops.FAULTS[name] = float(scale) if scale else 0.02
        log.warning("fault injection active on op %r", name)
    try:
        results = verification.run_op_gradchecks(seed=args.seed)
        seq = verification.sequence_equivalence(seed=args.seed, depth=args.depth,
                                                width=width)
    finally:
        ops.FAULTS.clear()
    seq_pass = args.depth == 0 or seq["worst"] <= 1e-4
    doc = {
        "seed": args.seed,
        "ops": {r.name: {"worst_rel_error": r.worst_rel_error, "pass": r.passed}
                for r in results},
        "sequence": {"depth": args.depth, "worst_rel_error": seq["worst"],
                     "pass": seq_pass},
        "pass": all(r.passed for r in results) and seq_pass,
    }
    _emit(doc)
    if not doc["pass"]:
        failing = [r.name for r in results if not r.passed]
        if not seq_pass:
            failing.append("reversible_sequence")
        log.error("gradient check failed for: %s", ", ".join(failing))
        return VERIFY_ERROR
    return 0


def cmd_invert(args):
    from . import verification

    worst = verification.inversion_trials(seed=args.seed, trials=args.trials,
                                          width=args.width, spatial=args.spatial)
    doc = {"seed": args.seed, "trials": args.trials, "width": args.width,
           "spatial": args.spatial, "max_abs_error": worst,
           "tolerance": 1e-4, "pass": worst <= 1e-4}
    _emit(doc)
    return 0 if doc["pass"] else VERIFY_ERROR


def _load_spec(path):
    from .unet import load_spec

    return load_spec(path)


def _measured_step_peak(network, input_shape, seed):
    from . import memory_model
    from .tape import Tape, backprop
    from .tensor import Tensor
    from .training import AdamState, adam_step, dice_loss

    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(input_shape, dtype=np.float32) * 0.1)
    target = (rng.random((input_shape[0], network.spec.out_regions)
                         + input_shape[2:]) < 0.3).astype(np.float32)
    params = list(network.parameters())
    state = AdamState()

    def step():
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            pred = network.forward(x)
            loss = dice_loss(pred, target)
            backprop(tape, loss)
        adam_step(params, state, 1e-4, 1e-5)

    step()  # warm-up allocates optimizer state outside the measured region
    return memory_model.measure_peak(step)


def cmd_estimate_memory(args):
    from . import memory_model
    from .unet import build

    spec = _load_spec(args.spec)
    network = build(spec, seed=args.seed)
    input_shape = (args.batch, spec.in_channels) + args.input_shape
    if spec.reversible:
        report = memory_model.estimate_partially_reversible(
            network, input_shape, args.optimizer_multiplier)
    else:
        report = memory_model.estimate_nonreversible(
            network, input_shape, args.optimizer_multiplier)
    if args.measure:
        report.measured_peak_bytes = _measured_step_peak(network, input_shape,
                                                         args.seed)

    doc = json.loads(report.to_json())
    doc["input_shape"] = list(input_shape)
    doc["reversible"] = spec.reversible
    if args.compare:
        twin = build(spec.paired(), seed=args.seed)
        twin_report = (memory_model.estimate_nonreversible
                       if spec.reversible else
                       memory_model.estimate_partially_reversible)(
            twin, input_shape, args.optimizer_multiplier)
        if spec.reversible:
            rev_total = report.total_prev_bytes
            base_total = twin_report.total_nonrev_bytes
        else:
            rev_total = twin_report.total_prev_bytes
            base_total = report.total_nonrev_bytes
        doc["compare"] = {
            "reversible_total_bytes": rev_total,
            "baseline_total_bytes": base_total,
            "ratio": rev_total / base_total if base_total else None,
            "reduction_percent": (100.0 * (1.0 - rev_total / base_total)
                                  if base_total else None),
        }
    _emit(doc)
    print()
    print(report.to_table())
    return 0


def _make_dataset(args, spec):
    from .training import generate_synthetic, load_dataset

    if args.synthetic:
        rng = np.random.default_rng(args.seed)
        return [generate_synthetic(rng, size=args.size,
                                   modalities=spec.in_channels)
                for _ in range(args.synthetic)]
    return load_dataset(args.data)


def cmd_train(args):
    from .training import (TrainingConfig, load_config, restore_params,
                           train, write_metrics_csv)
    from .unet import build, save_checkpoint

    spec = _load_spec(args.spec)
    config = load_config(args.config) if args.config else TrainingConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.max_epochs = args.epochs
    dataset = _make_dataset(args, spec)
    network = build(spec, seed=config.seed)

    os.makedirs(args.out, exist_ok=True)
    log.info("training on %d volumes for up to %d epochs",
             len(dataset), config.max_epochs)

    def progress(row):
        log.info("epoch %d: loss=%.4f val=(%.3f %.3f %.3f)", row.epoch,
                 row.train_loss, row.val_dice_wt, row.val_dice_tc, row.val_dice_et)

    result = train(network, config, dataset, epoch_callback=progress)
    write_metrics_csv(result.history, os.path.join(args.out, "metrics.csv"))
    save_checkpoint(network, os.path.join(args.out, "checkpoint_final"))
    restore_params(network, result.best_params)
    save_checkpoint(network, os.path.join(args.out, "checkpoint_best"))
    doc = {
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "best_epoch": result.best_epoch,
        "best_val_dice": result.best_val_dice,
        "out_dir": args.out,
    }
    _emit(doc)
    return 0


def cmd_eval(args):
    from .training import evaluate, generate_synthetic, load_dataset
    from .unet import load_checkpoint

    network = load_checkpoint(args.checkpoint)
    if args.synthetic:
        rng = np.random.default_rng(args.seed)
        dataset = [generate_synthetic(rng, size=args.size,
                                      modalities=network.spec.in_channels)
                   for _ in range(args.synthetic)]
    else:
        dataset = load_dataset(args.data)
    scores = evaluate(network, dataset)
    _emit({"volumes": len(dataset), "mean_dice": scores})
    return 0


def cmd_bench(args):
    from . import memory_model
    from .tape import Tape, backprop
    from .tensor import Tensor
    from .training import AdamState, adam_step, dice_loss
    from .unet import build

    spec = _load_spec(args.spec)
    network = build(spec, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    shape = (1, spec.in_channels) + args.input_shape
    x = Tensor(rng.standard_normal(shape, dtype=np.float32) * 0.1)
    target = (rng.random((1, spec.out_regions) + args.input_shape) < 0.3
              ).astype(np.float32)
    params = list(network.parameters())

    def step(stored):
        state = AdamState()

        def run():
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                pred = network.forward(x, stored_activations=stored)
                loss = dice_loss(pred, target)
                backprop(tape, loss)
            adam_step(params, state, 1e-4, 1e-5)

        run()  # warm-up
        times = []
        for _ in range(args.steps):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        peak = memory_model.measure_peak(run)
        return float(np.mean(times)), peak

    rev_time, rev_peak = step(stored=False)
    ref_time, ref_peak = step(stored=True)
    doc = {
        "steps": args.steps,
        "input_shape": list(shape),
        "reversible": {"mean_step_seconds": rev_time, "peak_bytes": rev_peak},
        "reference": {"mean_step_seconds": ref_time, "peak_bytes": ref_peak},
        "time_ratio": rev_time / ref_time,
        "peak_ratio": rev_peak / ref_peak if ref_peak else None,
    }
    _emit(doc)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="revvolnet",
        description="Reversible volumetric segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference and reversible "
                                         "gradient verification")
    p.add_argument("--spec", help="take the sequence width from this "
                                  "architecture spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--inject-fault", metavar="OP[=SCALE]",
                   help="corrupt one op's backward (test hook)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("invert", help="reversible block round-trip trials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--spatial", type=int, default=8)
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("estimate-memory", help="analytic training-memory report")
    p.add_argument("--spec", required=True)
    p.add_argument("--input-shape", type=_parse_shape, default=(32, 32, 32))
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--optimizer-multiplier", type=int, default=4)
    p.add_argument("--compare", action="store_true",
                   help="also estimate the flipped-reversibility twin")
    p.add_argument("--measure", action="store_true",
                   help="run one real training step and report its peak")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_estimate_memory)

    p = sub.add_parser("train", help="train on a dataset directory or "
                                     "synthetic volumes")
    p.add_argument("--spec", required=True)
    p.add_argument("--config")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data", help="dataset directory with manifest.txt")
    group.add_argument("--synthetic", type=int, metavar="N",
                       help="train on N generated volumes")
    p.add_argument("--size", type=int, default=32,
                   help="edge length of synthetic volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None,
                   help="override max_epochs from the config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint prefix (expects .rvt/.manifest/.arch)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data")
    group.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="reversible vs stored-activation step "
                                     "time and peak memory")
    p.add_argument("--spec", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--input-shape", type=_parse_shape, default=(16, 16, 16))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return USAGE_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
