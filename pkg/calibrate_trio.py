# scratch: counting-task trio for the desk-scale criterion (deleted before ship)
import sys, time
sys.path.insert(0, "tests")
import numpy as np
from vitprune.data import ImageDataset
from vitprune.training import TrainConfig, train
from vitprune.losses import PenaltyConfig
from vitprune.gates import AnnealSchedule
from vitprune.model import ModelConfig
from vitprune.cost import cost_constants, uniform_cost_mask, oracle_count

def count_blobs(n, seed, noise=1.2, amp=2.2, counts=(3, 4)):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0.0, noise, (n, 3, 32, 32)).astype(np.float32)
    for i in range(n):
        k = counts[y[i]]
        cells = rng.permutation(16)[:k]
        for cell in cells:
            gr, gc = divmod(int(cell), 4)
            r0 = gr * 8 + rng.integers(0, 4)
            c0 = gc * 8 + rng.integers(0, 4)
            X[i, :, r0:r0 + 4, c0:c0 + 4] += amp
    return ImageDataset(X, y.astype(np.int64), 2)

MODEL = ModelConfig(layers=3, heads=2, dim=48, head_dim=24, ffn_dim=96,
                    image_size=32, patch_size=4, num_classes=2)
TRAIN = count_blobs(2000, 100)
VAL = count_blobs(500, 101)

def run(lam=(0.0, 0.0), glr=10.0, fixed_mask=None, seed=0):
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
    print(f"lam={lam} glr={glr} fixed={fixed_mask is not None}: "
          f"acc={r.val_accuracy:.3f} cost={r.hardened_cost_fraction:.3f} "
          f"[{time.time()-t0:.0f}s]", flush=True)
    return r

dense = run()
hiap = run(lam=(0.9, 0.45), glr=20.0)
consts = cost_constants(MODEL)
um = uniform_cost_mask(MODEL, consts, hiap.hardened_cost_fraction)
print("uniform mask fraction:", oracle_count(um, consts) / consts.dense_prunable_total, flush=True)
uni = run(fixed_mask=um)
print()
print(f"dense {dense.val_accuracy:.3f} | hiap {hiap.val_accuracy:.3f} @ {hiap.hardened_cost_fraction:.3f} | uniform {uni.val_accuracy:.3f}")
print(f"dense-hiap gap {dense.val_accuracy - hiap.val_accuracy:.3f} (<=0.08?) ; hiap-uniform {hiap.val_accuracy - uni.val_accuracy:.3f} (>0?)")
pm = hiap.bank.probabilities()
print("hiap kept heads/layer:", (pm['head'] > 0.5).sum(1).tolist(),
      "dims/layer:", ((pm['head'][:, :, None] > 0.5) & (pm['dim'] > 0.5)).sum((1, 2)).tolist(),
      "neurons/layer:", ((pm['block'][:, None] > 0.5) & (pm['neuron'] > 0.5)).sum(1).tolist())
