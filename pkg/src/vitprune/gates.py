"""Stochastic binary gates over the four prunable structure families.

A GateBank owns one logit per attention head, FFN block, value-path
dimension, and FFN neuron. Training samples relaxed gate values with
Logistic noise and a temperature; hardening thresholds the noise-free
probabilities into an ArchitectureMask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    Tensor,
    add,
    constant_like,
    hard_threshold_ste,
    scale,
    sigmoid,
)

log = logging.getLogger(__name__)

LOGIT_CLIP = 12.0
NOISE_CLAMP = 1e-6
GATE_INIT = 3.0

MODE_SOFT = "soft"
MODE_HARD_STE = "hard_ste"
MODE_DETERMINISTIC = "deterministic"
_MODES = (MODE_SOFT, MODE_HARD_STE, MODE_DETERMINISTIC)

FAMILIES = ("head", "block", "dim", "neuron")


class GateBank:
    """Learnable logits for head/block/dim/neuron gates of one model."""

    def __init__(self, layers: int, heads: int, head_dim: int, ffn_dim: int,
                 init: float = GATE_INIT, dtype=np.float32):
        self.layers = layers
        self.heads = heads
        self.head_dim = head_dim
        self.ffn_dim = ffn_dim
        self.head_logits = Tensor(np.full((layers, heads), init), True, dtype)
        self.block_logits = Tensor(np.full((layers,), init), True, dtype)
        self.dim_logits = Tensor(np.full((layers, heads, head_dim), init), True, dtype)
        self.neuron_logits = Tensor(np.full((layers, ffn_dim), init), True, dtype)

    def logit_tensors(self):
        return {
            "head": self.head_logits,
            "block": self.block_logits,
            "dim": self.dim_logits,
            "neuron": self.neuron_logits,
        }

    def parameters(self):
        return [("gates.head_logits", self.head_logits),
                ("gates.block_logits", self.block_logits),
                ("gates.dim_logits", self.dim_logits),
                ("gates.neuron_logits", self.neuron_logits)]

    def clip_logits(self, bound: float = LOGIT_CLIP) -> None:
        for _, t in self.parameters():
            np.clip(t.data, -bound, bound, out=t.data)

    def probabilities(self) -> dict[str, np.ndarray]:
        """Noise-free survival probabilities sigmoid(logit) per family."""
        return {name: _sigmoid_np(t.data) for name, t in self.logit_tensors().items()}


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GateSample:
    """One draw of all four gate families.

    Values are graph-connected tensors: inside (0,1) in soft and
    deterministic modes (up to float32 rounding at saturation), binary
    with a soft gradient path in hard_ste mode.
    """

    head: Tensor
    block: Tensor
    dim: Tensor
    neuron: Tensor
    mode: str = MODE_SOFT
    temperature: float = 1.0

    def family(self, name: str) -> Tensor:
        return getattr(self, name)


def sample_gate(alpha: Tensor, tau: float, rng: Optional[np.random.Generator],
                mode: str = MODE_SOFT) -> Tensor:
    """Relaxed Bernoulli draw z = sigmoid((alpha + eps) / tau).

    eps is Logistic noise log(u) - log(1-u) with u clamped to
    [1e-6, 1-1e-6]; deterministic mode uses eps = 0. hard_ste thresholds
    the soft value at 0.5 in the forward pass and routes the gradient
    through the soft value.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode not in _MODES:
        raise ValueError(f"unknown gate mode {mode!r}")
    if mode == MODE_DETERMINISTIC:
        noisy = alpha
    else:
        if not isinstance(rng, np.random.Generator):
            raise ValueError("sample_gate requires a seeded numpy Generator "
                             "(reproducibility contract)")
        u = rng.random(alpha.shape).astype(alpha.data.dtype)
        np.clip(u, NOISE_CLAMP, 1.0 - NOISE_CLAMP, out=u)
        eps = np.log(u) - np.log1p(-u)
        noisy = add(alpha, constant_like(alpha, eps))
    soft = sigmoid(scale(noisy, 1.0 / tau))
    if mode == MODE_HARD_STE:
        return hard_threshold_ste(soft, 0.5)
    return soft


def sample_gates(bank: GateBank, tau: float, rng: Optional[np.random.Generator],
                 mode: str = MODE_SOFT) -> GateSample:
    """Draw one GateSample covering every family in the bank."""
    return GateSample(
        head=sample_gate(bank.head_logits, tau, rng, mode),
        block=sample_gate(bank.block_logits, tau, rng, mode),
        dim=sample_gate(bank.dim_logits, tau, rng, mode),
        neuron=sample_gate(bank.neuron_logits, tau, rng, mode),
        mode=mode,
        temperature=tau,
    )


def gate_probability(alpha: Tensor) -> Tensor:
    """sigmoid(alpha): exact probability that a sampled gate clears the 0.5
    threshold, independent of temperature."""
    return sigmoid(alpha)


@dataclass
class AnnealSchedule:
    """Exponential decay tau(step) = tau_start * (tau_min/tau_start)^(step/total)."""

    tau_start: float = 2.0
    tau_min: float = 0.5
    total_steps: Optional[int] = None
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind != "exponential":
            raise ValueError(f"unsupported decay kind {self.kind!r}")
        if self.tau_start <= 0 or self.tau_min <= 0 or self.tau_min > self.tau_start:
            raise ValueError("need tau_start >= tau_min > 0")

    def temperature(self, step: int) -> float:
        if self.total_steps is None:
            raise ValueError("total_steps not set on schedule")
        if step < 0 or step > self.total_steps:
            log.warning("anneal step %d outside [0, %d]; clamping", step, self.total_steps)
            step = min(max(step, 0), self.total_steps)
        if self.total_steps == 0:
            return self.tau_min
        frac = step / self.total_steps
        return self.tau_start * (self.tau_min / self.tau_start) ** frac


def anneal_temperature(schedule: AnnealSchedule, step: int) -> float:
    return schedule.temperature(step)


@dataclass
class ArchitectureMask:
    """Hardened binary keep/drop decision per prunable unit.

    The effective activity of a micro unit is the AND with its parent
    macro gate: a dimension under a dead head is inactive, a neuron under
    a dead block is inactive.
    """

    head: np.ndarray    # (L, H) uint8
    block: np.ndarray   # (L,) uint8
    dim: np.ndarray     # (L, H, D_h) uint8
    neuron: np.ndarray  # (L, D_ffn) uint8

    def effective_dim(self) -> np.ndarray:
        return self.dim * self.head[:, :, None]

    def effective_neuron(self) -> np.ndarray:
        return self.neuron * self.block[:, None]

    def counts(self) -> dict:
        return {
            "heads": int(self.head.sum()),
            "blocks": int(self.block.sum()),
            "dims": int(self.effective_dim().sum()),
            "neurons": int(self.effective_neuron().sum()),
        }

    @staticmethod
    def all_ones(layers: int, heads: int, head_dim: int, ffn_dim: int) -> "ArchitectureMask":
        return ArchitectureMask(
            head=np.ones((layers, heads), dtype=np.uint8),
            block=np.ones((layers,), dtype=np.uint8),
            dim=np.ones((layers, heads, head_dim), dtype=np.uint8),
            neuron=np.ones((layers, ffn_dim), dtype=np.uint8),
        )


def harden(bank: GateBank, threshold: float = 0.5) -> ArchitectureMask:
    """Noise-free binarization: keep a unit iff sigmoid(logit) > threshold.

    Ties prune (strict inequality). Deterministic and idempotent.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    probs = bank.probabilities()
    return ArchitectureMask(
        head=(probs["head"] > threshold).astype(np.uint8),
        block=(probs["block"] > threshold).astype(np.uint8),
        dim=(probs["dim"] > threshold).astype(np.uint8),
        neuron=(probs["neuron"] > threshold).astype(np.uint8),
    )


def logistic_noise(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Clamped Logistic noise, the same transform sample_gate applies."""
    u = rng.random(shape).astype(dtype)
    np.clip(u, NOISE_CLAMP, 1.0 - NOISE_CLAMP, out=u)
    return np.log(u) - np.log1p(-u)
