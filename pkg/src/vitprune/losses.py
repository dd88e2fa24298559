"""Training objective: task loss (optionally distilled), decoupled
macro/micro cost penalties, and squared-ReLU retention quotas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .cost import CostConstants
from .gates import GateBank, gate_probability


@dataclass
class PenaltyConfig:
    lambda_macro: float = 0.0
    lambda_micro: float = 0.0
    beta_head: float = 10.0
    beta_dim: float = 10.0
    beta_ffn: float = 10.0
    k_min: float = 1.0
    gamma_attn: float = 0.25
    gamma_ffn: float = 0.25
    alpha_kd: float = 0.7
    t_kd: float = 4.0

    def __post_init__(self):
        for name in ("lambda_macro", "lambda_micro", "beta_head", "beta_dim",
                     "beta_ffn", "k_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.gamma_attn <= 1.0 or not 0.0 <= self.gamma_ffn <= 1.0:
            raise ValueError("gamma ratios must lie in [0, 1]")
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ValueError("alpha_kd must lie in [0, 1]")
        if self.t_kd <= 0:
            raise ValueError("t_kd must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lambda_macro", "lambda_micro", "beta_head", "beta_dim", "beta_ffn",
            "k_min", "gamma_attn", "gamma_ffn", "alpha_kd", "t_kd")}

    @staticmethod
    def from_dict(d: dict) -> "PenaltyConfig":
        return PenaltyConfig(**d)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch from raw logits."""
    batch, classes = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes}): "
                         f"min={labels.min()}, max={labels.max()}")
    onehot = np.zeros((batch, classes), dtype=logits.data.dtype)
    onehot[np.arange(batch), labels] = 1.0
    picked = T.broadcast_mul(T.log_softmax_lastdim(logits), T.constant_like(logits, onehot))
    return T.scale(T.reduce_sum(picked), -1.0 / batch)


def task_loss(student_logits: Tensor, labels: np.ndarray,
              teacher_logits: np.ndarray | None = None,
              cfg: PenaltyConfig | None = None) -> Tensor:
    """(1-a)*CE + a*t^2*KL(teacher_t || student_t); plain CE with no teacher.

    Teacher logits are treated as constants; KL includes the teacher
    entropy term so the value is a true divergence (zero when the
    distributions match), though that term carries no gradient.
    """
    ce = cross_entropy(student_logits, labels)
    if teacher_logits is None:
        return ce
    cfg = cfg or PenaltyConfig()
    a, t = cfg.alpha_kd, cfg.t_kd
    batch = student_logits.shape[0]

    tl = np.asarray(teacher_logits, dtype=np.float64) / t
    tl -= tl.max(axis=-1, keepdims=True)
    p = np.exp(tl)
    p /= p.sum(axis=-1, keepdims=True)
    teacher_entropy_term = float((p * np.log(p)).sum() / batch)

    log_q = T.log_softmax_lastdim(T.scale(student_logits, 1.0 / t))
    cross = T.scale(T.reduce_sum(T.broadcast_mul(
        log_q, T.constant_like(student_logits, p))), -1.0 / batch)
    kl = T.add(cross, T.constant_like(student_logits, teacher_entropy_term))
    return T.add(T.scale(ce, 1.0 - a), T.scale(kl, a * t * t))


def cost_penalties(bank: GateBank, constants: CostConstants) -> tuple[Tensor, Tensor]:
    """(macro, micro) expected-cost fractions, normalized by the dense
    prunable total so the lambda weights are scale-free."""
    p_head = gate_probability(bank.head_logits)
    p_dim = gate_probability(bank.dim_logits)
    p_block = gate_probability(bank.block_logits)
    p_neuron = gate_probability(bank.neuron_logits)
    l, h = bank.layers, bank.heads
    norm = 1.0 / constants.dense_prunable_total

    macro = T.scale(T.reduce_sum(p_head), constants.c1 * norm)
    joint_dim = T.broadcast_mul(T.reshape(p_head, (l, h, 1)), p_dim)
    joint_neuron = T.broadcast_mul(T.reshape(p_block, (l, 1)), p_neuron)
    micro = T.add(T.scale(T.reduce_sum(joint_dim), constants.c2 * norm),
                  T.scale(T.reduce_sum(joint_neuron), constants.c3 * norm))
    return macro, micro


def feasibility_penalty(bank: GateBank, cfg: PenaltyConfig) -> Tensor:
    """Squared-ReLU shortfall of soft retention counts against quotas:
    k_min heads per layer, gamma fractions of dims per head and neurons
    per layer. Computed on noise-free probabilities."""
    p_head = gate_probability(bank.head_logits)     # (L, H)
    p_dim = gate_probability(bank.dim_logits)       # (L, H, Dh)
    p_neuron = gate_probability(bank.neuron_logits)  # (L, Dffn)

    def shortfall_sq(p: Tensor, axis: int, quota: float) -> Tensor:
        count = T.reduce_sum(p, axis=axis)
        gap = T.relu(T.add(T.scale(count, -1.0),
                           T.constant_like(count, np.full(count.shape, quota))))
        return T.reduce_sum(T.broadcast_mul(gap, gap))

    head_term = shortfall_sq(p_head, 1, cfg.k_min)
    dim_term = shortfall_sq(p_dim, 2, cfg.gamma_attn * bank.head_dim)
    ffn_term = shortfall_sq(p_neuron, 1, cfg.gamma_ffn * bank.ffn_dim)
    return T.add(T.add(T.scale(head_term, cfg.beta_head),
                       T.scale(dim_term, cfg.beta_dim)),
                 T.scale(ffn_term, cfg.beta_ffn))


def total_loss(task: Tensor, macro: Tensor, micro: Tensor, feasibility: Tensor,
               cfg: PenaltyConfig) -> Tensor:
    """task + lambda_macro*macro + lambda_micro*micro + feasibility."""
    for name, term in (("task", task), ("macro", macro),
                       ("micro", micro), ("feasibility", feasibility)):
        if not np.all(np.isfinite(term.data)):
            raise FloatingPointError(f"total_loss: non-finite {name} term")
    return T.add(T.add(task, T.scale(macro, cfg.lambda_macro)),
                 T.add(T.scale(micro, cfg.lambda_micro), feasibility))
