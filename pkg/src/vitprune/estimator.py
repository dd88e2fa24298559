"""Scikit-learn style front end: fit a gated ViT on labeled images, then
predict with the hardened architecture or physically prune it."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import ImageDataset
from .extract import PrunedCheckpoint, PrunedModel, extract
from .gates import AnnealSchedule, harden
from .losses import PenaltyConfig
from .model import ModelConfig, mask_gates, model_forward
from .training import TrainConfig, train
from .validation import as_image_batch, encode_labels


class GatedViTClassifier(ClassifierMixin, BaseEstimator):
    """Vision Transformer classifier that learns which heads, value
    dimensions, FFN blocks, and neurons to keep while it trains.

    ``fit`` runs the single-phase anneal-and-harden loop; ``predict`` uses
    the hardened architecture; ``prune`` returns the physically truncated
    network. X may be (n, C, S, S) images or flattened (n, C*S*S) rows.
    """

    def __init__(self, *, image_size=32, patch_size=4, channels=3,
                 layers=2, heads=2, dim=32, head_dim=16, ffn_dim=64,
                 epochs=5, batch_size=32, learning_rate=1e-3,
                 gate_lr_multiplier=10.0, weight_decay=0.05,
                 lambda_macro=0.0, lambda_micro=0.0,
                 beta_head=10.0, beta_dim=10.0, beta_ffn=10.0,
                 k_min=1.0, gamma_attn=0.25, gamma_ffn=0.25,
                 tau_start=2.0, tau_min=0.5, ste_switch_fraction=0.5,
                 prune_threshold=0.5, augment=False, random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.layers = layers
        self.heads = heads
        self.dim = dim
        self.head_dim = head_dim
        self.ffn_dim = ffn_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.gate_lr_multiplier = gate_lr_multiplier
        self.weight_decay = weight_decay
        self.lambda_macro = lambda_macro
        self.lambda_micro = lambda_micro
        self.beta_head = beta_head
        self.beta_dim = beta_dim
        self.beta_ffn = beta_ffn
        self.k_min = k_min
        self.gamma_attn = gamma_attn
        self.gamma_ffn = gamma_ffn
        self.tau_start = tau_start
        self.tau_min = tau_min
        self.ste_switch_fraction = ste_switch_fraction
        self.prune_threshold = prune_threshold
        self.augment = augment
        self.random_state = random_state

    def _train_config(self, num_classes: int) -> TrainConfig:
        model = ModelConfig(
            layers=self.layers, heads=self.heads, dim=self.dim,
            head_dim=self.head_dim, ffn_dim=self.ffn_dim,
            image_size=self.image_size, patch_size=self.patch_size,
            num_classes=num_classes, channels=self.channels)
        penalty = PenaltyConfig(
            lambda_macro=self.lambda_macro, lambda_micro=self.lambda_micro,
            beta_head=self.beta_head, beta_dim=self.beta_dim,
            beta_ffn=self.beta_ffn, k_min=self.k_min,
            gamma_attn=self.gamma_attn, gamma_ffn=self.gamma_ffn)
        return TrainConfig(
            model=model, penalty=penalty,
            anneal=AnnealSchedule(self.tau_start, self.tau_min),
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            gate_lr_multiplier=self.gate_lr_multiplier,
            weight_decay=self.weight_decay, seed=self.random_state,
            ste_switch_fraction=self.ste_switch_fraction,
            augment=self.augment, out_dir=None, trace_interval=10_000_000)

    def fit(self, X, y):
        X = as_image_batch(X, self.image_size, self.channels)
        self.classes_, encoded = encode_labels(y)
        if len(encoded) != len(X):
            raise ValueError("X and y length mismatch")
        self.n_features_in_ = self.channels * self.image_size ** 2

        config = self._train_config(len(self.classes_))
        dataset = ImageDataset(X, encoded, len(self.classes_))
        result = train(config, train_ds=dataset)
        self.weights_ = result.weights
        self.bank_ = result.bank
        self.train_config_ = config
        self.cost_fraction_ = result.hardened_cost_fraction
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise NotFittedError("fit must be called before inference")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = as_image_batch(X, self.image_size, self.channels)
        gates = mask_gates(harden(self.bank_, self.prune_threshold))
        out = []
        for start in range(0, len(X), 256):
            out.append(model_forward(X[start:start + 256], self.weights_, gates).data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def prune(self, threshold: float | None = None) -> PrunedCheckpoint:
        """Physically truncate the fitted network at the given threshold."""
        self._check_fitted()
        return extract(self.weights_, self.bank_,
                       self.prune_threshold if threshold is None else threshold)

    def pruned_model(self, threshold: float | None = None) -> PrunedModel:
        return PrunedModel(self.prune(threshold))
