"""Hyperparameter sweep, subnetwork selection, and cost accounting.

The mask-logit init is the sparsity dial: sweeping it from -0.3 to 0.3
produces tickets across the whole sparsity range (remaining fraction is
monotone in the init), while every run costs exactly the same number of
iterations. The two selection rules then pick (a) the sparsest ticket
matching the dense baseline and (b) the best-performing ticket overall.
"""
import numpy as np

from ticketlab.data import DataConfig
from ticketlab.harness import (ExperimentPlan, cost_accounting,
                               select_best_performing,
                               select_sparsest_matching, sweep)
from ticketlab.models import ModelConfig
from ticketlab.search import RoundConfig

plan = ExperimentPlan(
    algorithm="cs",
    round_cfg=RoundConfig(rounds=3, iters_per_round=300, rewind_iter=16,
                          lam=1e-8, beta_final=200.0, batch_size=32,
                          record_every=0),
    model_cfg=ModelConfig(kind="mlp", widths=(2, 64, 64, 2)),
    data_cfg=DataConfig(n_train=256, n_test=256, noise_sd=0.1, seed=7),
    seeds=(1, 2),
    grid={"s0": [-0.3, -0.15, 0.0, 0.15, 0.3]},
    evaluate="final")

report = sweep(plan)
print(f"dense baseline (mean over seeds): {report.dense_accuracy:.4f}\n")
print(" s0    | median remaining | median accuracy | rel. acc vs s0=-0.3")
for v in plan.grid["s0"]:
    rows = [r for r in report.rows if r.error is None and r.grid["s0"] == v]
    rem = float(np.median([r.remaining_frac for r in rows]))
    acc = float(np.median([r.accuracy for r in rows]))
    rel = float(np.median([r.accuracy_rel_first for r in rows]))
    print(f" {v:+.2f} | {100 * rem:15.1f}% | {acc:15.4f} | {rel:+19.4f}")

print(f"\nSpearman(mask init, median remaining) = {report.spearman_s0:.3f}")

ok = [r for r in report.rows if r.error is None]
match = select_sparsest_matching(ok, report.dense_accuracy)
best = select_best_performing(ok)
if match is not None:
    print(f"\nsparsest matching ticket: {match.run_id} "
          f"({100 * match.remaining_frac:.1f}% remaining, "
          f"accuracy {match.accuracy:.4f})")
else:
    print("\nno ticket matched the dense baseline")
print(f"best performing ticket:   {best.run_id} "
      f"({100 * best.remaining_frac:.1f}% remaining, "
      f"accuracy {best.accuracy:.4f})")

costs = cost_accounting(ok)["cs"]
print(f"\nsearch cost over the sweep: parallel {costs['parallel_epochs']:.0f}"
      f" epochs, sequential {costs['sequential_epochs']:.0f} epochs "
      f"(every run is exactly {plan.round_cfg.rounds} x "
      f"{plan.round_cfg.iters_per_round} iterations)")
