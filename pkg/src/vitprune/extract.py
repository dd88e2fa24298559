"""Physical sub-network extraction and masked-vs-truncated verification.

Hardening a trained gate bank yields a binary mask; extraction deletes
dead heads and FFN blocks outright and slices surviving value-path
dimensions (W^V columns with matching output-projection rows) and FFN
neurons (W1 columns, their biases, W2 rows). Queries/keys keep the full
head dimension and the softmax scaling is never rescaled, so the
truncated forward reproduces the masked forward up to float rounding.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .cost import cost_constants, oracle_count
from .gates import ArchitectureMask, GateBank, harden
from .io import (
    CheckpointError,
    atomic_write_text,
    load_tensors,
    save_tensors,
)
from .model import ModelConfig, ViTWeights, extract_patches, mask_gates, model_forward

PRUNED_WEIGHTS_FORMAT = "pruned-weights/v1"
LN_EPS = 1e-5


@dataclass
class PrunedHead:
    index: int
    dims: list[int]
    wq: np.ndarray  # (D, D_h) - full
    wk: np.ndarray
    wv: np.ndarray  # (D, len(dims))
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray  # (len(dims),)


@dataclass
class PrunedLayer:
    heads: list[PrunedHead]
    attn_proj: Optional[np.ndarray]   # (sum dims, D); None when no live head
    attn_bias: np.ndarray             # (D,) kept even with zero heads
    ln1_gain: Optional[np.ndarray]
    ln1_bias: Optional[np.ndarray]
    ffn_present: bool
    neurons: list[int]
    ln2_gain: Optional[np.ndarray] = None
    ln2_bias: Optional[np.ndarray] = None
    w1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None


@dataclass
class PrunedCheckpoint:
    config: ModelConfig
    threshold: float
    layers: list[PrunedLayer]
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    final_gain: np.ndarray
    final_bias: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    source_sha256: str = ""
    cost_formula_units: int = 0

    def descriptor(self) -> dict:
        per_layer = []
        for layer in self.layers:
            per_layer.append({
                "heads": [{"index": h.index, "dims": list(h.dims)}
                          for h in layer.heads],
                "ffn": {"present": layer.ffn_present,
                        "neurons": list(layer.neurons)},
            })
        return {
            "config": self.config.to_dict(),
            "threshold": self.threshold,
            "per_layer": per_layer,
            "cost": {"formula_units": self.cost_formula_units,
                     "formula_units_halved": self.cost_formula_units / 2},
            "provenance": {"source_sha256": self.source_sha256},
        }

    def mask(self) -> ArchitectureMask:
        c = self.config
        m = ArchitectureMask(
            head=np.zeros((c.layers, c.heads), dtype=np.uint8),
            block=np.zeros((c.layers,), dtype=np.uint8),
            dim=np.zeros((c.layers, c.heads, c.head_dim), dtype=np.uint8),
            neuron=np.zeros((c.layers, c.ffn_dim), dtype=np.uint8),
        )
        for l, layer in enumerate(self.layers):
            for h in layer.heads:
                m.head[l, h.index] = 1
                m.dim[l, h.index, h.dims] = 1
            if layer.ffn_present:
                m.block[l] = 1
                m.neuron[l, layer.neurons] = 1
        return m


def extract(weights: ViTWeights, bank: GateBank, threshold: float = 0.5,
            source_sha256: str = "") -> PrunedCheckpoint:
    """Harden the bank and physically truncate the weight set."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    config = weights.config
    mask = harden(bank, threshold)
    layers = []
    for l, blk in enumerate(weights.blocks):
        heads = []
        proj_rows = []
        dh = config.head_dim
        for h in range(config.heads):
            dims = [j for j in range(dh) if mask.dim[l, h, j]]
            # a live head with no surviving dims outputs exactly zero
            if not mask.head[l, h] or not dims:
                continue
            heads.append(PrunedHead(
                index=h, dims=dims,
                wq=blk.wq.data[h].copy(), wk=blk.wk.data[h].copy(),
                wv=blk.wv.data[h][:, dims].copy(),
                bq=blk.bq.data[h].copy(), bk=blk.bk.data[h].copy(),
                bv=blk.bv.data[h][dims].copy(),
            ))
            proj_rows.append(blk.wo.data[h * dh:(h + 1) * dh][dims])
        attn_proj = np.concatenate(proj_rows, axis=0) if proj_rows else None
        ffn_present = bool(mask.block[l])
        neurons = [k for k in range(config.ffn_dim) if mask.neuron[l, k]] \
            if ffn_present else []
        # a live block with every neuron dead degenerates to its output
        # bias; only b2 is kept then
        has_hidden = ffn_present and bool(neurons)
        layers.append(PrunedLayer(
            heads=heads,
            attn_proj=attn_proj,
            attn_bias=blk.bo.data.copy(),
            ln1_gain=blk.ln1_gain.data.copy() if heads else None,
            ln1_bias=blk.ln1_bias.data.copy() if heads else None,
            ffn_present=ffn_present,
            neurons=neurons,
            ln2_gain=blk.ln2_gain.data.copy() if has_hidden else None,
            ln2_bias=blk.ln2_bias.data.copy() if has_hidden else None,
            w1=blk.w1.data[:, neurons].copy() if has_hidden else None,
            b1=blk.b1.data[neurons].copy() if has_hidden else None,
            w2=blk.w2.data[neurons, :].copy() if has_hidden else None,
            b2=blk.b2.data.copy() if ffn_present else None,
        ))
    pruned = PrunedCheckpoint(
        config=config, threshold=threshold, layers=layers,
        patch_w=weights.patch_w.data.copy(), patch_b=weights.patch_b.data.copy(),
        cls_token=weights.cls_token.data.copy(), pos_embed=weights.pos_embed.data.copy(),
        final_gain=weights.final_gain.data.copy(), final_bias=weights.final_bias.data.copy(),
        head_w=weights.head_w.data.copy(), head_b=weights.head_b.data.copy(),
        source_sha256=source_sha256,
    )
    pruned.cost_formula_units = oracle_count(pruned.mask(), cost_constants(config))
    return pruned


def extract_dense_model(weights: ViTWeights, config: ModelConfig) -> "PrunedModel":
    """Plain (unpruned) inference model from gated weights; doubles as the
    ungated reference implementation."""
    bank = GateBank(config.layers, config.heads, config.head_dim,
                    config.ffn_dim, init=6.0)
    return PrunedModel(extract(weights, bank, 0.5))


def _layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + np.float32(LN_EPS)) * gain + bias


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * np.float32(1.0 / math.sqrt(2.0))))


class PrunedModel:
    """Inference-only forward over physically truncated weights."""

    def __init__(self, checkpoint: PrunedCheckpoint):
        self.checkpoint = checkpoint
        self.config = checkpoint.config

    def forward(self, images: np.ndarray,
                collect: Optional[list] = None) -> np.ndarray:
        cp = self.checkpoint
        c = self.config
        x = extract_patches(images.astype(np.float32, copy=False), c) @ cp.patch_w
        x = x + cp.patch_b
        cls = np.broadcast_to(cp.cls_token, (x.shape[0], 1, c.dim))
        x = np.concatenate([cls, x], axis=1) + cp.pos_embed[None]
        inv_sqrt = np.float32(1.0 / math.sqrt(c.head_dim))
        for layer in cp.layers:
            if layer.heads:
                h_in = _layer_norm_np(x, layer.ln1_gain, layer.ln1_bias)
                outs = []
                for head in layer.heads:
                    q = h_in @ head.wq + head.bq
                    k = h_in @ head.wk + head.bk
                    v = h_in @ head.wv + head.bv
                    attn = _softmax_np(q @ np.swapaxes(k, -1, -2) * inv_sqrt)
                    outs.append(attn @ v)
                cat = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=-1)
                x = x + (cat @ layer.attn_proj + layer.attn_bias)
            else:
                # all heads of this layer pruned; only the projection bias
                # survives as a constant shift
                x = x + layer.attn_bias
            if layer.ffn_present:
                if layer.w1 is not None:
                    f_in = _layer_norm_np(x, layer.ln2_gain, layer.ln2_bias)
                    hidden = _gelu_np(f_in @ layer.w1 + layer.b1)
                    x = x + (hidden @ layer.w2 + layer.b2)
                else:
                    x = x + layer.b2
            if collect is not None:
                collect.append(x.copy())
        x = _layer_norm_np(x, cp.final_gain, cp.final_bias)
        return x[:, 0, :] @ cp.head_w + cp.head_b


@dataclass
class EquivalenceReport:
    trials: int
    max_abs_diff: float
    tolerance: float
    passed: bool
    failing_layer: Optional[int] = None

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = "" if self.failing_layer is None \
            else f", first divergent layer {self.failing_layer}"
        return (f"{status}: max |logit diff| {self.max_abs_diff:.3e} over "
                f"{self.trials} trials (tolerance {self.tolerance:.1e}{extra})")


def verify_equivalence(weights: ViTWeights, bank: GateBank,
                       pruned: PrunedCheckpoint, trials: int,
                       rng: np.random.Generator,
                       tolerance: float = 1e-4,
                       batch: int = 2) -> EquivalenceReport:
    """Masked-gated forward vs truncated forward on random inputs."""
    config = weights.config
    mask = harden(bank, pruned.threshold)
    gates = mask_gates(mask)
    model = PrunedModel(pruned)
    worst = 0.0
    failing_layer = None
    for _ in range(trials):
        images = rng.normal(0.0, 1.0, (batch, config.channels,
                                       config.image_size, config.image_size))
        images = images.astype(np.float32)
        masked_acts: list = []
        masked = model_forward(images, weights, gates, collect=masked_acts)
        pruned_acts: list = []
        out = model.forward(images, collect=pruned_acts)
        diff = float(np.abs(masked.data - out).max())
        if diff > worst:
            worst = diff
        if diff > tolerance and failing_layer is None:
            for l, (a, b) in enumerate(zip(masked_acts, pruned_acts)):
                if float(np.abs(a - b).max()) > tolerance:
                    failing_layer = l
                    break
    return EquivalenceReport(trials=trials, max_abs_diff=worst,
                             tolerance=tolerance, passed=worst <= tolerance,
                             failing_layer=failing_layer)


def _weight_tensors(pruned: PrunedCheckpoint) -> dict[str, np.ndarray]:
    tensors = {
        "patch_w": pruned.patch_w, "patch_b": pruned.patch_b,
        "cls_token": pruned.cls_token, "pos_embed": pruned.pos_embed,
        "final_gain": pruned.final_gain, "final_bias": pruned.final_bias,
        "head_w": pruned.head_w, "head_b": pruned.head_b,
    }
    for l, layer in enumerate(pruned.layers):
        tensors[f"layers.{l}.attn_bias"] = layer.attn_bias
        if layer.heads:
            tensors[f"layers.{l}.ln1_gain"] = layer.ln1_gain
            tensors[f"layers.{l}.ln1_bias"] = layer.ln1_bias
            tensors[f"layers.{l}.attn_proj"] = layer.attn_proj
            for h in layer.heads:
                p = f"layers.{l}.heads.{h.index}"
                tensors[f"{p}.wq"] = h.wq
                tensors[f"{p}.wk"] = h.wk
                tensors[f"{p}.wv"] = h.wv
                tensors[f"{p}.bq"] = h.bq
                tensors[f"{p}.bk"] = h.bk
                tensors[f"{p}.bv"] = h.bv
        if layer.ffn_present:
            tensors[f"layers.{l}.b2"] = layer.b2
            if layer.w1 is not None:
                for name in ("ln2_gain", "ln2_bias", "w1", "b1", "w2"):
                    tensors[f"layers.{l}.{name}"] = getattr(layer, name)
    return tensors


def export_descriptor(pruned: PrunedCheckpoint, path: str) -> tuple[str, str]:
    """Write the architecture descriptor JSON and the weight binary.

    Returns (descriptor_path, weights_path); the weight file sits next to
    the descriptor and is referenced by name inside it.
    """
    weights_name = os.path.basename(path) + ".weights"
    desc = pruned.descriptor()
    desc["weights_file"] = weights_name
    try:
        atomic_write_text(path, json.dumps(desc, indent=2, sort_keys=True) + "\n")
        weights_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                                    weights_name)
        save_tensors(weights_path, _weight_tensors(pruned),
                     meta={"format": PRUNED_WEIGHTS_FORMAT})
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    return path, weights_path


def load_descriptor(path: str) -> dict:
    try:
        with open(path) as f:
            desc = json.load(f)
    except OSError as exc:
        raise CheckpointError(f"cannot read descriptor {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"descriptor {path} is not valid JSON: {exc}") from exc
    for key in ("config", "threshold", "per_layer", "cost"):
        if key not in desc:
            raise CheckpointError(f"descriptor {path} missing field {key!r}")
    return desc


def load_pruned(path: str) -> PrunedCheckpoint:
    """Rebuild a PrunedCheckpoint from descriptor + weight binary."""
    desc = load_descriptor(path)
    config = ModelConfig.from_dict(desc["config"])
    weights_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                                desc.get("weights_file", ""))
    tensors, meta = load_tensors(weights_path)
    if meta.get("format") != PRUNED_WEIGHTS_FORMAT:
        raise CheckpointError(f"{weights_path}: unexpected weight format")
    layers = []
    for l, entry in enumerate(desc["per_layer"]):
        heads = []
        for hd in entry["heads"]:
            p = f"layers.{l}.heads.{hd['index']}"
            heads.append(PrunedHead(
                index=int(hd["index"]), dims=[int(j) for j in hd["dims"]],
                wq=tensors[f"{p}.wq"], wk=tensors[f"{p}.wk"], wv=tensors[f"{p}.wv"],
                bq=tensors[f"{p}.bq"], bk=tensors[f"{p}.bk"], bv=tensors[f"{p}.bv"],
            ))
        ffn_present = bool(entry["ffn"]["present"])
        layers.append(PrunedLayer(
            heads=heads,
            attn_proj=tensors.get(f"layers.{l}.attn_proj"),
            attn_bias=tensors[f"layers.{l}.attn_bias"],
            ln1_gain=tensors.get(f"layers.{l}.ln1_gain"),
            ln1_bias=tensors.get(f"layers.{l}.ln1_bias"),
            ffn_present=ffn_present,
            neurons=[int(k) for k in entry["ffn"]["neurons"]],
            ln2_gain=tensors.get(f"layers.{l}.ln2_gain"),
            ln2_bias=tensors.get(f"layers.{l}.ln2_bias"),
            w1=tensors.get(f"layers.{l}.w1"),
            b1=tensors.get(f"layers.{l}.b1"),
            w2=tensors.get(f"layers.{l}.w2"),
            b2=tensors.get(f"layers.{l}.b2"),
        ))
    pruned = PrunedCheckpoint(
        config=config, threshold=float(desc["threshold"]), layers=layers,
        patch_w=tensors["patch_w"], patch_b=tensors["patch_b"],
        cls_token=tensors["cls_token"], pos_embed=tensors["pos_embed"],
        final_gain=tensors["final_gain"], final_bias=tensors["final_bias"],
        head_w=tensors["head_w"], head_b=tensors["head_b"],
        source_sha256=desc.get("provenance", {}).get("source_sha256", ""),
        cost_formula_units=int(desc["cost"]["formula_units"]),
    )
    return pruned


def benchmark_latency(forward: Callable[[np.ndarray], np.ndarray],
                      image_shape: tuple, batch: int = 1, runs: int = 50,
                      warmup: int = 10, seed: int = 0) -> dict:
    """Median/p90 wall-clock milliseconds per forward, single-threaded."""
    if runs < 10:
        raise ValueError("need at least 10 timed runs")
    rng = np.random.default_rng(seed)
    images = rng.normal(0.0, 1.0, (batch,) + tuple(image_shape)).astype(np.float32)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib
        threadpool_limits = lambda limits: contextlib.nullcontext()
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            forward(images)
        for _ in range(runs):
            t0 = time.perf_counter()
            forward(images)
            times.append((time.perf_counter() - t0) * 1000.0)
    times.sort()
    return {
        "runs": runs,
        "batch": batch,
        "median_ms": statistics.median(times),
        "p90_ms": times[min(runs - 1, int(math.ceil(0.9 * runs)) - 1)],
        "mean_ms": statistics.fmean(times),
    }
