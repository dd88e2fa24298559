# scratch calibration for the desk-scale end-to-end run (deleted before ship)
import sys, time
sys.path.insert(0, "tests")
import numpy as np
from conftest import textured_dataset
from vitprune.training import TrainConfig, train
from vitprune.losses import PenaltyConfig
from vitprune.gates import AnnealSchedule
from vitprune.model import ModelConfig
from vitprune.cost import cost_constants, uniform_cost_mask, oracle_count

MODEL = ModelConfig(layers=3, heads=2, dim=48, head_dim=24, ffn_dim=96,
                    image_size=32, patch_size=4, num_classes=2)

def run(lam_macro, lam_micro, glr, seed=0, fixed_mask=None, epochs=40):
    cfg = TrainConfig(
        model=MODEL,
        penalty=PenaltyConfig(lambda_macro=lam_macro, lambda_micro=lam_micro,
                              beta_head=10.0, beta_dim=10.0, beta_ffn=10.0,
                              k_min=1.0, gamma_attn=0.25, gamma_ffn=0.25),
        anneal=AnnealSchedule(2.0, 0.5), epochs=epochs, batch_size=64,
        learning_rate=1e-3, gate_lr_multiplier=glr, weight_decay=0.05,
        seed=seed, augment=True, trace_interval=200)
    t0 = time.time()
    r = train(cfg, train_ds=TRAIN, val_ds=VAL, fixed_mask=fixed_mask)
    print(f"  lam=({lam_macro},{lam_micro}) glr={glr} fixed={fixed_mask is not None}: "
          f"acc={r.val_accuracy:.4f} cost={r.hardened_cost_fraction:.3f} "
          f"[{time.time()-t0:.0f}s]")
    return r

TRAIN = textured_dataset(2000, seed=100)
VAL = textured_dataset(500, seed=101)
print("train class balance:", TRAIN.labels.mean())

dense = run(0.0, 0.0, 10.0)
hiap = run(0.9, 0.45, 25.0)
consts = cost_constants(MODEL)
um = uniform_cost_mask(MODEL, consts, hiap.hardened_cost_fraction)
print("uniform mask fraction:", oracle_count(um, consts) / consts.dense_prunable_total)
uni = run(0.0, 0.0, 10.0, fixed_mask=um)
print()
print(f"dense acc {dense.val_accuracy:.4f} | hiap acc {hiap.val_accuracy:.4f} "
      f"cost {hiap.hardened_cost_fraction:.3f} | uniform acc {uni.val_accuracy:.4f}")
print(f"gap dense-hiap: {dense.val_accuracy - hiap.val_accuracy:.4f} (need <= 0.08)")
print(f"hiap - uniform: {hiap.val_accuracy - uni.val_accuracy:.4f} (need > 0)")
