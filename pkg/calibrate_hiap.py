# scratch: gate-lr sweep for the budget run (deleted before ship)
import sys, time
sys.path.insert(0, "tests")
import numpy as np
from conftest import counting_dataset
from vitprune.training import TrainConfig, train
from vitprune.losses import PenaltyConfig
from vitprune.gates import AnnealSchedule
from vitprune.model import ModelConfig
from vitprune.cost import cost_constants, uniform_cost_mask, oracle_count

MODEL = ModelConfig(layers=3, heads=2, dim=48, head_dim=24, ffn_dim=96,
                    image_size=32, patch_size=4, num_classes=2)
TRAIN = counting_dataset(2000, seed=100)
VAL = counting_dataset(500, seed=101)

def run(lam=(0.9, 0.45), glr=10.0, fixed_mask=None, seed=0):
    cfg = TrainConfig(
        model=MODEL,
        penalty=PenaltyConfig(lambda_macro=lam[0], lambda_micro=lam[1],
                              beta_head=10.0, beta_dim=10.0, beta_ffn=10.0,
                              k_min=1.0, gamma_attn=0.25, gamma_ffn=0.25),
        anneal=AnnealSchedule(2.0, 0.5), epochs=40, batch_size=64,
        learning_rate=1e-3, gate_lr_multiplier=glr, weight_decay=0.05,
        seed=seed, augment=False, trace_interval=300)
    t0 = time.time()
    r = train(cfg, train_ds=TRAIN, val_ds=VAL, fixed_mask=fixed_mask)
    pm = r.bank.probabilities()
    print(f"lam={lam} glr={glr} fixed={fixed_mask is not None} seed={seed}: "
          f"acc={r.val_accuracy:.3f} cost={r.hardened_cost_fraction:.3f} "
          f"heads={(pm['head'] > 0.5).sum(1).tolist()} "
          f"neurons={((pm['block'][:, None] > 0.5) & (pm['neuron'] > 0.5)).sum(1).tolist()} "
          f"[{time.time()-t0:.0f}s]", flush=True)
    return r

h10 = run(glr=10.0)
h6 = run(glr=6.0)
