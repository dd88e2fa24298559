"""Command-line pipeline: train, extract, verify, macs, trace-plot, sweep.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
input error. HIAP_THREADS caps BLAS parallelism for the whole process.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .cost import cost_constants, oracle_count
from .data import DataFormatError
from .extract import (
    PrunedModel,
    benchmark_latency,
    extract,
    export_descriptor,
    load_descriptor,
    load_pruned,
    verify_equivalence,
)
from .gates import ArchitectureMask
from .io import CheckpointError, atomic_write_text, file_sha256
from .model import ModelConfig
from .trace_svg import TraceFormatError, read_trace, render_trace_svg
from .training import (
    ConfigError,
    TrainConfig,
    TrainingAborted,
    load_gated_checkpoint,
    train,
)

USAGE_ERROR = 2
CHECK_FAILED = 1


class UsageError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitprune",
        description="Train, prune, and verify gated Vision Transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the anneal-and-harden training loop")
    p.add_argument("--config", required=True, help="TrainConfig JSON file")
    p.add_argument("--out", help="override out_dir from the config")

    p = sub.add_parser("extract", help="harden a gated checkpoint into a pruned model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="descriptor path (weights written next to it)")

    p = sub.add_parser("verify", help="check masked vs extracted forward agreement")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", required=True, help="architecture descriptor path")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("macs", help="report prunable-compute accounting")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--arch", help="architecture descriptor path")
    g.add_argument("--model-config", help="ModelConfig JSON (counts the dense network)")
    p.add_argument("--json-out", help="also write the summary JSON here")

    p = sub.add_parser("trace-plot", help="render a gate trace CSV as an SVG heatmap")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="output .svg path")

    p = sub.add_parser("sweep", help="train one run per macro:micro penalty ratio")
    p.add_argument("--base-config", required=True)
    p.add_argument("--ratios", required=True,
                   help="comma list like '2:1@0.9,macro@1.5,micro@1.5' "
                        "(name@lambda_macro; micro entries give lambda_micro)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel", type=int, default=1,
                   help="independent runs to execute concurrently")

    p = sub.add_parser("bench", help="time dense vs pruned forward latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--runs", type=int, default=50)
    return parser


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config)
    if args.out:
        config.out_dir = args.out
    if not config.train_path:
        raise UsageError("config field 'train_path' is required for training")
    if not config.out_dir:
        raise UsageError("config field 'out_dir' (or --out) is required")
    result = train(config)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    print(f"trace:      {result.trace_path}")
    print(f"hardened prunable cost: {result.hardened_cost} formula units "
          f"({result.hardened_cost_fraction:.1%} of dense)")
    if result.val_accuracy is not None:
        print(f"validation accuracy: {result.val_accuracy:.4f}")
    return 0


def cmd_extract(args) -> int:
    weights, bank, _ = load_gated_checkpoint(args.checkpoint)
    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must lie in (0,1), got {args.threshold}")
    pruned = extract(weights, bank, args.threshold,
                     source_sha256=file_sha256(args.checkpoint))
    desc_path, weights_path = export_descriptor(pruned, args.out)
    mask = pruned.mask()
    print(f"descriptor: {desc_path}")
    print(f"weights:    {weights_path}")
    print(f"kept {mask.counts()} of {pruned.config.to_dict()}")
    print(f"prunable cost: {pruned.cost_formula_units} formula units "
          f"({pruned.cost_formula_units / 2:.0f} halved)")
    return 0


def cmd_verify(args) -> int:
    weights, bank, _ = load_gated_checkpoint(args.checkpoint)
    pruned = load_pruned(args.arch)
    if pruned.source_sha256:
        actual = file_sha256(args.checkpoint)
        if actual != pruned.source_sha256:
            raise UsageError(
                f"provenance mismatch: descriptor was extracted from "
                f"{pruned.source_sha256[:12]}..., got {actual[:12]}...")
    rng = np.random.default_rng(args.seed)
    report = verify_equivalence(weights, bank, pruned, trials=args.trials,
                                rng=rng, tolerance=args.tolerance)
    print(report)
    return 0 if report.passed else CHECK_FAILED


def _mask_from_descriptor(desc: dict) -> tuple[ModelConfig, ArchitectureMask]:
    config = ModelConfig.from_dict(desc["config"])
    mask = ArchitectureMask(
        head=np.zeros((config.layers, config.heads), dtype=np.uint8),
        block=np.zeros((config.layers,), dtype=np.uint8),
        dim=np.zeros((config.layers, config.heads, config.head_dim), dtype=np.uint8),
        neuron=np.zeros((config.layers, config.ffn_dim), dtype=np.uint8),
    )
    for l, entry in enumerate(desc["per_layer"]):
        for hd in entry["heads"]:
            mask.head[l, hd["index"]] = 1
            for j in hd["dims"]:
                mask.dim[l, hd["index"], j] = 1
        if entry["ffn"]["present"]:
            mask.block[l] = 1
            for k in entry["ffn"]["neurons"]:
                mask.neuron[l, k] = 1
    return config, mask


def cmd_macs(args) -> int:
    if args.arch:
        desc = load_descriptor(args.arch)
        config, mask = _mask_from_descriptor(desc)
    else:
        try:
            with open(args.model_config) as f:
                config = ModelConfig.from_dict(json.load(f))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"bad model config: {exc}") from exc
        mask = ArchitectureMask.all_ones(config.layers, config.heads,
                                         config.head_dim, config.ffn_dim)
    constants = cost_constants(config)
    eff_dim = mask.effective_dim()
    eff_neuron = mask.effective_neuron()

    header = f"{'layer':>5} {'heads':>6} {'dims':>6} {'neurons':>8} {'formula units':>14}"
    print(header)
    print("-" * len(header))
    total = 0
    for l in range(config.layers):
        heads = int(mask.head[l].sum())
        dims = int(eff_dim[l].sum())
        neurons = int(eff_neuron[l].sum())
        layer_cost = heads * constants.c1 + dims * constants.c2 + neurons * constants.c3
        total += layer_cost
        print(f"{l:>5} {heads:>6} {dims:>6} {neurons:>8} {layer_cost:>14}")
    oracle = oracle_count(mask, constants)
    summary = {
        "formula_units": oracle,
        "formula_units_halved": oracle / 2,
        "dense_formula_units": constants.dense_prunable_total,
        "dense_formula_units_halved": constants.dense_prunable_total / 2,
        "static_overhead_units": constants.c_const,
        "fraction_of_dense": oracle / constants.dense_prunable_total,
    }
    assert total == oracle
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.json_out:
        atomic_write_text(args.json_out, json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_trace_plot(args) -> int:
    rows = read_trace(args.trace)
    render_trace_svg(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def parse_ratio_spec(spec: str) -> list[tuple[str, float, float]]:
    """'2:1@0.9,macro@1.5,micro@1.5' -> [(label, lambda_macro, lambda_micro)]."""
    runs = []
    for entry in spec.split(","):
        entry = entry.strip()
        if not entry or "@" not in entry:
            raise UsageError(f"malformed ratio entry {entry!r} (want name@value)")
        name, _, value = entry.partition("@")
        try:
            strength = float(value)
        except ValueError:
            raise UsageError(f"bad penalty value in {entry!r}") from None
        if name == "macro":
            runs.append((entry, strength, 0.0))
        elif name == "micro":
            runs.append((entry, 0.0, strength))
        else:
            try:
                macro_part, micro_part = name.split(":")
                ratio = float(macro_part) / float(micro_part)
            except (ValueError, ZeroDivisionError):
                raise UsageError(f"malformed ratio {name!r} (want a:b)") from None
            runs.append((entry, strength, strength / ratio))
    return runs


def _sweep_one(base: dict, label: str, lam_macro: float, lam_micro: float,
               out_dir: str) -> dict:
    config = TrainConfig.from_dict(base)
    config.penalty.lambda_macro = lam_macro
    config.penalty.lambda_micro = lam_micro
    safe = label.replace(":", "-").replace("@", "_")
    config.out_dir = os.path.join(out_dir, safe)
    result = train(config)
    return {
        "label": label,
        "lambda_macro": lam_macro,
        "lambda_micro": lam_micro,
        "val_acc": "" if result.val_accuracy is None else result.val_accuracy,
        "hardened_formula_units_halved": result.hardened_cost / 2,
        "cost_fraction": result.hardened_cost_fraction,
    }


def cmd_sweep(args) -> int:
    runs = parse_ratio_spec(args.ratios)
    base = TrainConfig.from_json(args.base_config).to_dict()
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(_sweep_one, base, label, lm, lmi, args.out_dir)
                       for label, lm, lmi in runs]
            rows = [f.result() for f in futures]
    else:
        for label, lm, lmi in runs:
            rows.append(_sweep_one(base, label, lm, lmi, args.out_dir))

    pareto = os.path.join(args.out_dir, "pareto.csv")
    fields = ["label", "lambda_macro", "lambda_micro", "val_acc",
              "hardened_formula_units_halved", "cost_fraction"]
    lines = [",".join(fields)]
    for row in rows:
        lines.append(",".join(str(row[k]) for k in fields))
    atomic_write_text(pareto, "\n".join(lines) + "\n")
    print(f"wrote {pareto} ({len(rows)} runs)")
    return 0


def cmd_bench(args) -> int:
    weights, bank, config = load_gated_checkpoint(args.checkpoint)
    from .extract import extract_dense_model
    dense = extract_dense_model(weights, config.model)
    pruned = PrunedModel(load_pruned(args.arch))
    shape = (config.model.channels, config.model.image_size, config.model.image_size)
    dense_stats = benchmark_latency(dense.forward, shape, args.batch, args.runs)
    pruned_stats = benchmark_latency(pruned.forward, shape, args.batch, args.runs)
    speedup = dense_stats["median_ms"] / pruned_stats["median_ms"]
    print(f"dense  median {dense_stats['median_ms']:.3f} ms  p90 {dense_stats['p90_ms']:.3f} ms")
    print(f"pruned median {pruned_stats['median_ms']:.3f} ms  p90 {pruned_stats['p90_ms']:.3f} ms")
    print(f"speedup (median): {speedup:.2f}x")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "extract": cmd_extract,
    "verify": cmd_verify,
    "macs": cmd_macs,
    "trace-plot": cmd_trace_plot,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    threads = os.environ.get("HIAP_THREADS")
    if threads:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(limits=int(threads))
        except (ImportError, ValueError):
            pass
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError, DataFormatError,
            TraceFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
