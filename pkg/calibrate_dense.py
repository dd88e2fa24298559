# scratch: dense learnability of the XOR-stripes task (deleted before ship)
import sys, time
sys.path.insert(0, "tests")
import numpy as np
from conftest import textured_dataset
from vitprune.training import TrainConfig, train
from vitprune.losses import PenaltyConfig
from vitprune.gates import AnnealSchedule
from vitprune.model import ModelConfig

MODEL = ModelConfig(layers=3, heads=2, dim=48, head_dim=24, ffn_dim=96,
                    image_size=32, patch_size=4, num_classes=2)
TRAIN = textured_dataset(2000, seed=100)
VAL = textured_dataset(500, seed=101)
print("class balance:", TRAIN.labels.mean())

cfg = TrainConfig(
    model=MODEL,
    penalty=PenaltyConfig(lambda_macro=0.0, lambda_micro=0.0),
    anneal=AnnealSchedule(2.0, 0.5), epochs=40, batch_size=64,
    learning_rate=1e-3, gate_lr_multiplier=10.0, weight_decay=0.05,
    seed=0, augment=False, trace_interval=200)
t0 = time.time()
r = train(cfg, train_ds=TRAIN, val_ds=VAL)
print(f"dense acc={r.val_accuracy:.4f} [{time.time()-t0:.0f}s]")
for row in r.metrics:
    if row[8]:
        print("epoch", row[1], "val", row[8])
