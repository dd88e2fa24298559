"""Differentiable accounting of prunable compute, plus brute-force oracles.

Unit costs (formula units; each term carries the conventional factor 2,
so "halved" values correspond to plain multiply-accumulate counts):

  head overhead  c1 = 2*N*D*(3*D_h) + 2*N^2*D_h   (dense Q/K/V and QK^T)
  value dim      c2 = 2*N*D + 2*N^2               (per surviving dimension)
  ffn neuron     c3 = 4*N*D                       (per surviving neuron)

The FFN block gate is a pure enabler: with every neuron off its cost is
zero, there is no per-block overhead term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .gates import ArchitectureMask, GateBank, gate_probability, logistic_noise
from .model import ModelConfig


@dataclass(frozen=True)
class CostConstants:
    c1: int
    c2: int
    c3: int
    c_const: int
    dense_prunable_total: int
    layers: int
    heads: int
    head_dim: int
    ffn_dim: int


def cost_constants(config: ModelConfig) -> CostConstants:
    n = config.seq_len
    d = config.dim
    dh = config.head_dim
    c1 = 2 * n * d * (3 * dh) + 2 * n * n * dh
    c2 = 2 * n * d + 2 * n * n
    c3 = 4 * n * d
    dense = config.layers * config.heads * (c1 + dh * c2) \
        + config.layers * config.ffn_dim * c3
    # static, gate-independent work: patch embedding, layer norms (counted
    # as one fused multiply-add per element), classifier head
    c_const = (2 * config.num_patches * config.patch_dim * d
               + 2 * (2 * config.layers + 1) * n * d
               + 2 * d * config.num_classes)
    return CostConstants(c1=c1, c2=c2, c3=c3, c_const=c_const,
                         dense_prunable_total=dense,
                         layers=config.layers, heads=config.heads,
                         head_dim=dh, ffn_dim=config.ffn_dim)


def expected_cost(bank: GateBank, constants: CostConstants) -> Tensor:
    """Differentiable expected prunable cost at the bank's probabilities.

    sum_l sum_h (c1 p_g + c2 sum_j p_g p_d) + sum_l sum_k c3 p_b p_c.
    Gate noises are independent draws, so joint expectations factorize;
    the linearity oracle below covers correlated samplers.
    """
    p_head = gate_probability(bank.head_logits)            # (L, H)
    p_dim = gate_probability(bank.dim_logits)              # (L, H, Dh)
    p_block = gate_probability(bank.block_logits)          # (L,)
    p_neuron = gate_probability(bank.neuron_logits)        # (L, Dffn)

    l, h = bank.layers, bank.heads
    head_term = T.scale(T.reduce_sum(p_head), float(constants.c1))
    joint_dim = T.broadcast_mul(T.reshape(p_head, (l, h, 1)), p_dim)
    dim_term = T.scale(T.reduce_sum(joint_dim), float(constants.c2))
    joint_neuron = T.broadcast_mul(T.reshape(p_block, (l, 1)), p_neuron)
    neuron_term = T.scale(T.reduce_sum(joint_neuron), float(constants.c3))
    return T.add(T.add(head_term, dim_term), neuron_term)


def oracle_count(mask: ArchitectureMask, constants: CostConstants) -> int:
    """Loop-based exact count over active joint units; shares no code with
    expected_cost."""
    total = 0
    layers, heads = mask.head.shape
    head_dim = mask.dim.shape[2]
    ffn_dim = mask.neuron.shape[1]
    for l in range(layers):
        for h in range(heads):
            if mask.head[l, h]:
                total += constants.c1
                for j in range(head_dim):
                    if mask.dim[l, h, j]:
                        total += constants.c2
        if mask.block[l]:
            for k in range(ffn_dim):
                if mask.neuron[l, k]:
                    total += constants.c3
    return total


def sampled_cost(head: np.ndarray, block: np.ndarray, dim: np.ndarray,
                 neuron: np.ndarray, constants: CostConstants) -> float:
    """Cost of one relaxed (or binary) gate draw, plain numpy."""
    t1 = constants.c1 * float(np.sum(head, dtype=np.float64))
    t2 = constants.c2 * float(np.sum(head[:, :, None] * dim, dtype=np.float64))
    t3 = constants.c3 * float(np.sum(block[:, None] * neuron, dtype=np.float64))
    return t1 + t2 + t3


def draw_hard_masks(bank: GateBank, samples: int, rng: np.random.Generator,
                    correlated: bool = False):
    """Yield hard masks from threshold events of noisy logits.

    The threshold event sigmoid((a+eps)/tau) > 0.5 is equivalent to
    a + eps > 0 at any temperature. ``correlated`` reuses each macro
    gate's noise draw for all of its micro gates, breaking independence
    on purpose.
    """
    for _ in range(samples):
        eps_head = logistic_noise(bank.head_logits.shape, rng)
        eps_block = logistic_noise(bank.block_logits.shape, rng)
        if correlated:
            eps_dim = np.broadcast_to(eps_head[:, :, None],
                                      bank.dim_logits.shape).copy()
            eps_neuron = np.broadcast_to(eps_block[:, None],
                                         bank.neuron_logits.shape).copy()
        else:
            eps_dim = logistic_noise(bank.dim_logits.shape, rng)
            eps_neuron = logistic_noise(bank.neuron_logits.shape, rng)
        yield ArchitectureMask(
            head=(bank.head_logits.data + eps_head > 0).astype(np.uint8),
            block=(bank.block_logits.data + eps_block > 0).astype(np.uint8),
            dim=(bank.dim_logits.data + eps_dim > 0).astype(np.uint8),
            neuron=(bank.neuron_logits.data + eps_neuron > 0).astype(np.uint8),
        )


def uniform_cost_mask(config: ModelConfig, constants: CostConstants,
                      target_fraction: float) -> ArchitectureMask:
    """Uniform-ratio baseline: one keep ratio applied to heads, dims, and
    neurons alike (blocks stay), chosen so the cost lands as close to the
    target fraction of dense as the discrete widths allow. Kept indices
    are the leading ones; nothing is learned."""
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in (0, 1]")
    target = target_fraction * constants.dense_prunable_total
    best = None
    for r in [i / 200.0 for i in range(1, 201)]:
        k_h = max(1, round(r * config.heads))
        k_d = max(1, round(r * config.head_dim))
        k_n = max(1, round(r * config.ffn_dim))
        cost = config.layers * k_h * (constants.c1 + k_d * constants.c2) \
            + config.layers * k_n * constants.c3
        gap = abs(cost - target)
        if best is None or gap < best[0]:
            best = (gap, k_h, k_d, k_n)
    _, k_h, k_d, k_n = best
    mask = ArchitectureMask(
        head=np.zeros((config.layers, config.heads), dtype=np.uint8),
        block=np.ones((config.layers,), dtype=np.uint8),
        dim=np.zeros((config.layers, config.heads, config.head_dim), dtype=np.uint8),
        neuron=np.zeros((config.layers, config.ffn_dim), dtype=np.uint8),
    )
    mask.head[:, :k_h] = 1
    mask.dim[:, :, :k_d] = 1
    mask.neuron[:, :k_n] = 1
    return mask


def monte_carlo_linearity_check(bank: GateBank, constants: CostConstants,
                                samples: int, rng: np.random.Generator,
                                correlated: bool = False) -> dict:
    """Compare the sample mean of the loop oracle against the weighted
    per-unit activation frequencies sum_i w_i E[z_i] estimated from the
    same draws. Linearity of expectation makes the two agree regardless
    of correlations between gates.
    """
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    oracle_sum = 0
    freq_head = np.zeros(bank.head_logits.shape, dtype=np.int64)
    freq_joint_dim = np.zeros(bank.dim_logits.shape, dtype=np.int64)
    freq_joint_neuron = np.zeros(bank.neuron_logits.shape, dtype=np.int64)
    for mask in draw_hard_masks(bank, samples, rng, correlated=correlated):
        oracle_sum += oracle_count(mask, constants)
        freq_head += mask.head
        freq_joint_dim += mask.effective_dim()
        freq_joint_neuron += mask.effective_neuron()

    mean_oracle = oracle_sum / samples
    weighted = (constants.c1 * float(freq_head.sum())
                + constants.c2 * float(freq_joint_dim.sum())
                + constants.c3 * float(freq_joint_neuron.sum())) / samples
    abs_gap = abs(mean_oracle - weighted)
    denom = max(abs(mean_oracle), 1e-12)
    return {
        "samples": samples,
        "correlated": correlated,
        "mean_oracle_cost": mean_oracle,
        "weighted_expectation": weighted,
        "abs_gap": abs_gap,
        "rel_gap": abs_gap / denom,
    }
