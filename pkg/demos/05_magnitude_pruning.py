"""Magnitude pruning with rewinding, and its cost structure.

The classic iterative baseline: train, remove the 20% of surviving
weights with smallest magnitude (one global ranking), rewind survivors to
the stored early iterate, repeat. One run emits a whole frontier of
tickets at 0.8^r remaining - but producing the sparse end takes r rounds,
where the soft-gate search reaches any sparsity in a fixed budget.
"""
import numpy as np

from ticketlab.data import DataConfig
from ticketlab.harness import cost_accounting, retrain_ticket
from ticketlab.models import ModelConfig
from ticketlab.search import RoundConfig, run_imp, run_sequential_cs

train_ds, test_ds = DataConfig(n_train=256, n_test=256, noise_sd=0.1,
                               seed=7).build()
model_cfg = ModelConfig(kind="mlp", widths=(2, 64, 64, 2))
cfg = RoundConfig(rounds=8, iters_per_round=200, rewind_iter=16,
                  prune_rate=0.2, rewind_between_rounds=True, batch_size=32,
                  record_every=0)
seed = 1

tickets = run_imp(model_cfg.build(seed), train_ds, cfg, "global", seed=seed)
print("magnitude pruning, 20% per round, global ranking, rewinding on:")
print(" round | remaining | retrained accuracy")
for t in tickets[::2]:
    row = retrain_ticket(model_cfg, t.masks, t.rewind, train_ds, test_ds,
                         cfg, 200, seed, round_idx=t.round)
    print(f"  {t.round:4d} | {100 * t.remaining_fraction:8.2f}% | "
          f"{row.accuracy:.4f}")

print("\nmasks are nested: a weight pruned in round r stays pruned:")
inner = tickets[-1].masks
outer = tickets[0].masks
nested = all(np.all(inner[k] <= outer[k]) for k in inner)
print(f"  final mask subset of round-1 mask: {nested}")

print("\nsequential soft-gate variant (fixed 20%/round, lowest logits):")
seq = run_sequential_cs(model_cfg.build(seed), train_ds, cfg, seed=seed)
print("  remaining per round:",
      [f"{t.remaining_fraction:.3f}" for t in seq])
