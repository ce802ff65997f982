"""Supermasks: deterministic gates against sampled ones.

Weights stay frozen at their random initialization; only the mask is
trained. The deterministic soft gate gives every forward pass the same
outputs and real gradients; the stochastic gate samples a fresh Bernoulli
mask per pass and trains through a straight-through estimator. Both reach
a mask near 50% density here, but the deterministic one gets to the
stochastic run's final training accuracy in a fraction of the epochs.
"""
import numpy as np

from ticketlab.data import DataConfig
from ticketlab.harness import masked_accuracy, random_mask_like
from ticketlab.models import ModelConfig
from ticketlab.optim import OptimizerConfig
from ticketlab.search import RoundConfig, run_supermask
from ticketlab.seeding import STREAM_EVAL, seeded_rng

train_ds, test_ds = DataConfig(n_train=256, n_test=256, noise_sd=0.1,
                               seed=7).build()
model_cfg = ModelConfig(kind="mlp", widths=(2, 64, 64, 2))
seed = 1
epochs = 100
iters = epochs * 8

stoch_cfg = RoundConfig(rounds=1, iters_per_round=iters, lam=1e-8,
                        mask_init=0.0, batch_size=32, record_every=1,
                        mask_opt=OptimizerConfig("sgd", lr=20.0, momentum=0.0,
                                                 weight_decay=0.0))
stoch = run_supermask(model_cfg.build(seed), train_ds, stoch_cfg,
                      "stochastic", seed=seed)
stoch_curve = [(r.epoch, r.accuracy) for r in stoch.records
               if r.split == "train"]

det_cfg = RoundConfig(rounds=1, iters_per_round=iters, lam=1e-8,
                      beta_final=200.0, mask_init=0.0, batch_size=32,
                      record_every=1)
det = run_supermask(model_cfg.build(seed), train_ds, det_cfg, "soft",
                    seed=seed)
det_curve = [(r.epoch, r.accuracy) for r in det.records if r.split == "train"]

print("training accuracy by epoch (frozen weights, mask only):")
print(" epoch | stochastic | deterministic")
for e in (1, 5, 10, 25, 50, 100):
    sa = next(a for ep, a in stoch_curve if ep == e)
    da = next(a for ep, a in det_curve if ep == e)
    print(f"  {e:4d} | {sa:10.4f} | {da:13.4f}")

final = stoch_curve[-1][1]
reach = next((e for e, a in det_curve if a >= final), None)
print(f"\nstochastic final training accuracy: {final:.4f} "
      f"(mask ~{100 * stoch.remaining_fraction:.0f}% dense)")
print(f"deterministic reaches it at epoch {reach} of {epochs} "
      f"(mask ~{100 * det.remaining_fraction:.0f}% dense)")

acc = masked_accuracy(model_cfg, det.rewind.arrays, det.masks, test_ds, seed)
rnd = random_mask_like(det.masks, seeded_rng(seed, STREAM_EVAL))
rnd_acc = masked_accuracy(model_cfg, det.rewind.arrays, rnd, test_ds, seed)
print(f"\nlearned mask vs size-matched random mask on frozen weights:")
print(f"  learned {acc:.4f}  random {rnd_acc:.4f}  "
      f"margin {100 * (acc - rnd_acc):+.1f} points")
