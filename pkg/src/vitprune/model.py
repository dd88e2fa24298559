"""Gated Vision Transformer forward pass.

Head gates scale each attention head's additive contribution, dim gates
zero value-path columns (queries and keys always keep the full head
dimension), block gates switch whole FFN blocks, neuron gates zero FFN
hidden units. With every gate at 1 the network is a plain pre-norm ViT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .gates import ArchitectureMask, GateSample


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 32
    head_dim: int = 16
    ffn_dim: int = 64
    image_size: int = 32
    patch_size: int = 4
    num_classes: int = 10
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for name in ("layers", "heads", "dim", "head_dim", "ffn_dim",
                     "image_size", "patch_size", "num_classes", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        # class token included
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "layers", "heads", "dim", "head_dim", "ffn_dim",
            "image_size", "patch_size", "num_classes", "channels")}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class BlockWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor  # (H, D, D_h)
    wk: Tensor
    wv: Tensor
    bq: Tensor  # (H, D_h)
    bk: Tensor
    bv: Tensor
    wo: Tensor  # (H*D_h, D)
    bo: Tensor  # (D,)
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor  # (D, D_ffn)
    b1: Tensor  # (D_ffn,)
    w2: Tensor  # (D_ffn, D)
    b2: Tensor  # (D,)


class ViTWeights:
    """All learnable tensors of the gated model, float32."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 init_std: float = 0.02, dtype=np.float32):
        self.config = config
        c = config

        def w(*shape):
            return Tensor(rng.normal(0.0, init_std, shape), True, dtype)

        def zeros(*shape):
            return Tensor(np.zeros(shape), True, dtype)

        def ones(*shape):
            return Tensor(np.ones(shape), True, dtype)

        self.patch_w = w(c.patch_dim, c.dim)
        self.patch_b = zeros(c.dim)
        self.cls_token = w(c.dim)
        self.pos_embed = w(c.seq_len, c.dim)
        self.blocks: list[BlockWeights] = []
        for _ in range(c.layers):
            self.blocks.append(BlockWeights(
                ln1_gain=ones(c.dim), ln1_bias=zeros(c.dim),
                wq=w(c.heads, c.dim, c.head_dim),
                wk=w(c.heads, c.dim, c.head_dim),
                wv=w(c.heads, c.dim, c.head_dim),
                bq=zeros(c.heads, c.head_dim),
                bk=zeros(c.heads, c.head_dim),
                bv=zeros(c.heads, c.head_dim),
                wo=w(c.heads * c.head_dim, c.dim),
                bo=zeros(c.dim),
                ln2_gain=ones(c.dim), ln2_bias=zeros(c.dim),
                w1=w(c.dim, c.ffn_dim), b1=zeros(c.ffn_dim),
                w2=w(c.ffn_dim, c.dim), b2=zeros(c.dim),
            ))
        self.final_gain = ones(c.dim)
        self.final_bias = zeros(c.dim)
        self.head_w = w(c.dim, c.num_classes)
        self.head_b = zeros(c.num_classes)

    _BLOCK_FIELDS = ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "bq", "bk", "bv",
                     "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2")

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = [("patch_w", self.patch_w), ("patch_b", self.patch_b),
                  ("cls_token", self.cls_token), ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            for name in self._BLOCK_FIELDS:
                params.append((f"blocks.{i}.{name}", getattr(blk, name)))
        params += [("final_gain", self.final_gain), ("final_bias", self.final_bias),
                   ("head_w", self.head_w), ("head_b", self.head_b)]
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.parameters():
            src = state[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{src.shape} vs {t.data.shape}")
            t.data[...] = src


def extract_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(B, C, S, S) -> (B, num_patches, C*p*p), raster order, channel-major
    within a patch."""
    b, c, s, _ = images.shape
    p = config.patch_size
    g = s // p
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * p * p))


def dense_gates(config: ModelConfig, dtype=np.float32) -> GateSample:
    """Constant all-open gates (the ungated network)."""
    c = config
    return GateSample(
        head=Tensor(np.ones((c.layers, c.heads)), False, dtype),
        block=Tensor(np.ones((c.layers,)), False, dtype),
        dim=Tensor(np.ones((c.layers, c.heads, c.head_dim)), False, dtype),
        neuron=Tensor(np.ones((c.layers, c.ffn_dim)), False, dtype),
        mode="deterministic",
    )


def mask_gates(mask: ArchitectureMask, dtype=np.float32) -> GateSample:
    """Constant binary gates from a hardened mask."""
    return GateSample(
        head=Tensor(mask.head, False, dtype),
        block=Tensor(mask.block, False, dtype),
        dim=Tensor(mask.dim, False, dtype),
        neuron=Tensor(mask.neuron, False, dtype),
        mode="deterministic",
    )


def gated_attention_forward(x: Tensor, blk: BlockWeights, g_layer: Tensor,
                            d_layer: Tensor, config: ModelConfig) -> Tensor:
    """Multi-head attention with head gates g (scalars per head) and value
    dimension gates d (one vector per head). Residual added by the caller.

    Queries and keys are never gated; the softmax scaling keeps the
    configured head dimension even when value dims are masked.
    """
    inv_sqrt = 1.0 / math.sqrt(config.head_dim)
    outs = []
    for h in range(config.heads):
        q = T.add(T.matmul(x, T.take(blk.wq, h, 0)), T.take(blk.bq, h, 0))
        k = T.add(T.matmul(x, T.take(blk.wk, h, 0)), T.take(blk.bk, h, 0))
        v = T.add(T.matmul(x, T.take(blk.wv, h, 0)), T.take(blk.bv, h, 0))
        scores = T.scale(T.matmul(q, T.transpose_last2(k)), inv_sqrt)
        attn = T.softmax_lastdim(scores)
        v = T.broadcast_mul(v, T.take(d_layer, h, 0))
        head_out = T.matmul(attn, v)
        head_out = T.broadcast_mul(head_out, T.take(g_layer, h, 0))
        outs.append(head_out)
    cat = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
    return T.add(T.matmul(cat, blk.wo), blk.bo)


def gated_ffn_forward(x: Tensor, blk: BlockWeights, b_gate: Tensor,
                      c_layer: Tensor) -> Tensor:
    """GELU MLP with neuron gates c and a whole-block gate b; b = 0 makes
    the output exactly zero so the residual path carries x unchanged."""
    hidden = T.gelu(T.add(T.matmul(x, blk.w1), blk.b1))
    hidden = T.broadcast_mul(hidden, c_layer)
    out = T.add(T.matmul(hidden, blk.w2), blk.b2)
    return T.broadcast_mul(out, b_gate)


def model_forward(images: np.ndarray, weights: ViTWeights, gates: GateSample,
                  collect: Optional[list] = None) -> Tensor:
    """Full forward: patch embed, gated pre-norm blocks, class-token head.

    ``collect``, when given, receives the post-residual activation of every
    block (used for localizing equivalence failures).
    """
    config = weights.config
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B,C,H,W) batch, got {images.shape}")
    dtype = weights.patch_w.data.dtype
    patches = Tensor(extract_patches(images.astype(dtype, copy=False), config),
                     False, dtype)
    x = T.add(T.matmul(patches, weights.patch_w), weights.patch_b)

    b = images.shape[0]
    anchor = Tensor(np.zeros((b, 1, config.dim)), False, dtype)
    cls = T.add(anchor, T.reshape(weights.cls_token, (1, 1, config.dim)))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, T.reshape(weights.pos_embed, (1, config.seq_len, config.dim)))

    for l, blk in enumerate(weights.blocks):
        g_layer = T.take(gates.head, l, 0)
        d_layer = T.take(gates.dim, l, 0)
        b_gate = T.take(gates.block, l, 0)
        c_layer = T.take(gates.neuron, l, 0)

        attn_in = T.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
        x = T.add(x, gated_attention_forward(attn_in, blk, g_layer, d_layer, config))
        ffn_in = T.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
        x = T.add(x, gated_ffn_forward(ffn_in, blk, b_gate, c_layer))
        if collect is not None:
            collect.append(x.data)

    x = T.layer_norm(x, weights.final_gain, weights.final_bias)
    tok = T.take(x, 0, axis=1)
    return T.add(T.matmul(tok, weights.head_w), weights.head_b)
