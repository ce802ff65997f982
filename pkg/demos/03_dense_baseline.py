"""Dense reference run on two-moons.

Every ticket is judged against this: the same architecture, budget, and
seed-keyed data streams, trained without any gating. The run directory
written by the CLI equivalent (`ticketlab dense`) holds the same records.
"""
import numpy as np

from ticketlab.data import DataConfig
from ticketlab.harness import dense_baseline
from ticketlab.models import ModelConfig
from ticketlab.persist import RunRecord
from ticketlab.search import RoundConfig

train_ds, test_ds = DataConfig(n_train=256, n_test=256, noise_sd=0.1,
                               seed=7).build()
model_cfg = ModelConfig(kind="mlp", widths=(2, 64, 64, 2))
cfg = RoundConfig(iters_per_round=500, batch_size=32, record_every=4)

print(f"data: {train_ds.provenance}")
print(f"model: MLP {model_cfg.widths}, "
      f"{model_cfg.build(0).parameter_count()} parameters\n")

records: list[RunRecord] = []
for seed in (1, 2, 3):
    acc = dense_baseline(model_cfg, train_ds, test_ds, cfg, 500, seed,
                         recorder=records.append)
    print(f"seed {seed}: test accuracy {acc:.4f} after 500 iterations")

print("\nper-epoch records (seed 3, every 4th epoch):")
for r in records:
    if r.seed == 3 and r.split == "test":
        print(f"  epoch {r.epoch:3d}  loss {r.loss:.4f}  acc {r.accuracy:.4f}")
