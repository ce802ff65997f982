"""Soft-gate ticket search, end to end.

One run: five rounds of 500 iterations, temperature annealed 1 -> 200 in
each round, logits reset between rounds, weights carried over. The output
is an exactly-binary mask plus the stored early iterate; the ticket is
then re-trained from that iterate on the dense budget and compared to the
dense baseline. Search cost is rounds x iterations regardless of how
sparse the result ends up.
"""
import numpy as np

from ticketlab.data import DataConfig
from ticketlab.harness import dense_baseline, per_layer_sparsity, retrain_ticket
from ticketlab.models import ModelConfig
from ticketlab.search import RoundConfig, run_cs

train_ds, test_ds = DataConfig(n_train=256, n_test=256, noise_sd=0.1,
                               seed=7).build()
model_cfg = ModelConfig(kind="mlp", widths=(2, 64, 64, 2))
cfg = RoundConfig(rounds=5, iters_per_round=500, rewind_iter=16, lam=1e-8,
                  beta_final=200.0, mask_init=0.0, batch_size=32,
                  record_every=0)
seed = 1

dense_acc = dense_baseline(model_cfg, train_ds, test_ds, cfg, 500, seed)
print(f"dense baseline (seed {seed}): {dense_acc:.4f}\n")

model = model_cfg.build(seed)
result = run_cs(model, train_ds, cfg, seed=seed)
print(f"search cost: {result.total_iterations} iterations "
      f"({cfg.rounds} rounds x {cfg.iters_per_round})")
print("remaining fraction per round:",
      [f"{r:.3f}" for r in result.remaining_per_round])

print("\nper-layer sparsity of the final mask:")
for row in per_layer_sparsity(result.masks, model, block=2):
    print(f"  {row['name']:8s} size {row['size']:5d} "
          f"remaining {100 * row['remaining_frac']:5.1f}%")

row = retrain_ticket(model_cfg, result.masks, result.rewind, train_ds,
                     test_ds, cfg, 500, seed)
print(f"\nticket re-trained from iterate k={result.rewind.rewind_iter}: "
      f"accuracy {row.accuracy:.4f} at {100 * row.remaining_frac:.1f}% "
      f"weights remaining")
print(f"dense reference: {dense_acc:.4f} at 100% -> "
      f"{'matching' if row.accuracy >= dense_acc else 'not matching'} ticket")
