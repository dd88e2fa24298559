"""vitprune: differentiable structured pruning for Vision Transformers.

Hierarchical stochastic gates (heads, FFN blocks, value dimensions, FFN
neurons) are trained jointly with the network under an exact prunable-
compute penalty, annealed until decisions harden, then physically
extracted into a smaller dense model.
"""

from .tensor import Graph, Tensor, ShapeError, backward, finite_diff_check, forward_primitive
from .gates import (
    AnnealSchedule,
    ArchitectureMask,
    GateBank,
    GateSample,
    anneal_temperature,
    gate_probability,
    harden,
    sample_gate,
    sample_gates,
)
from .model import ModelConfig, ViTWeights, dense_gates, mask_gates, model_forward
from .cost import (
    CostConstants,
    cost_constants,
    expected_cost,
    monte_carlo_linearity_check,
    oracle_count,
)
from .losses import PenaltyConfig, cost_penalties, feasibility_penalty, task_loss, total_loss
from .data import ImageDataset, load_dataset, write_raw_tensor, write_cifar10_binary
from .training import (
    AdamW,
    TrainConfig,
    TrainResult,
    evaluate,
    load_gated_checkpoint,
    save_gated_checkpoint,
    train,
)
from .extract import (
    EquivalenceReport,
    PrunedCheckpoint,
    PrunedModel,
    benchmark_latency,
    export_descriptor,
    extract,
    extract_dense_model,
    load_pruned,
    verify_equivalence,
)
from .estimator import GatedViTClassifier

__version__ = "0.1.0"
