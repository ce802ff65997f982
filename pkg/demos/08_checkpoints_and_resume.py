"""Checkpoints: bitwise resume and durable rewind stores.

A checkpoint captures weights, mask logits, optimizer slots, the
temperature-schedule position, the in-epoch cursor, and the RNG states.
Loading it and continuing reproduces uninterrupted training exactly, bit
for bit, and a rewind store reloaded from disk re-trains a ticket to the
identical result.
"""
import tempfile
from pathlib import Path

import numpy as np

from ticketlab.data import DataConfig
from ticketlab.harness import retrain_ticket
from ticketlab.masking import GATE_SOFT, TemperatureSchedule
from ticketlab.models import ModelConfig
from ticketlab.optim import CompositeOptimizer
from ticketlab.persist import load_checkpoint, save_checkpoint
from ticketlab.search import RewindStore, RoundConfig, run_cs
from ticketlab.seeding import STREAM_SHUFFLE, seeded_rng
from ticketlab.training import (TrainCursor, capture_train_state,
                                restore_train_state, train)

workdir = Path(tempfile.mkdtemp(prefix="ticketlab-demo-"))
train_ds, test_ds = DataConfig(n_train=256, n_test=256, noise_sd=0.1,
                               seed=7).build()
model_cfg = ModelConfig(kind="mlp", widths=(2, 64, 64, 2))
cfg = RoundConfig(rounds=1, iters_per_round=300, batch_size=32,
                  record_every=0)


def fresh_pieces(seed=3):
    model = model_cfg.build(seed)
    model.set_gate_mode(GATE_SOFT, 0.05)
    opt = CompositeOptimizer([cfg.weight_opt.build(model.weight_tensors()),
                              cfg.mask_opt.build(model.mask_tensors())])
    return model, opt, TemperatureSchedule(cfg.beta_final, 300)


print("=== 300 iterations straight through ===")
model, opt, sched = fresh_pieces()
rng = seeded_rng(3, STREAM_SHUFFLE)
train(model, train_ds, opt, 300, batch_size=32, shuffle_rng=rng,
      schedule=sched, lam=cfg.lam, cursor=TrainCursor())
straight = model.weight_arrays(copy=True)
print("done; first weight:", straight["dense0.w"].flat[0])

print("\n=== 200 iterations, checkpoint to disk, reload, 100 more ===")
model, opt, sched = fresh_pieces()
rng = seeded_rng(3, STREAM_SHUFFLE)
cur = TrainCursor()
train(model, train_ds, opt, 200, batch_size=32, shuffle_rng=rng,
      schedule=sched, lam=cfg.lam, cursor=cur)
arrays, meta = capture_train_state(model, opt, cur, rng, schedule=sched)
ckpt = workdir / "mid.ckpt"
save_checkpoint(ckpt, arrays, meta)
print(f"checkpoint written: {ckpt} ({ckpt.stat().st_size} bytes)")

model2, opt2, sched2 = fresh_pieces()
rng2 = seeded_rng(999, STREAM_SHUFFLE)  # state overwritten on restore
cur2 = TrainCursor()
a, m = load_checkpoint(ckpt)
restore_train_state(a, m, model2, opt2, cur2, rng2, schedule=sched2)
train(model2, train_ds, opt2, 100, batch_size=32, shuffle_rng=rng2,
      schedule=sched2, lam=cfg.lam, cursor=cur2, start_iteration=200)

identical = all(np.array_equal(model2.weight_arrays()[k], straight[k])
                for k in straight)
print(f"resumed run bitwise identical to straight run: {identical}")

print("\n=== rewind store round-trip through disk ===")
res = run_cs(model_cfg.build(5), train_ds,
             RoundConfig(rounds=2, iters_per_round=200, rewind_iter=16,
                         batch_size=32, record_every=0), seed=5)
row_mem = retrain_ticket(model_cfg, res.masks, res.rewind, train_ds, test_ds,
                         cfg, 300, 5)
store_path = workdir / "rewind.ckpt"
save_checkpoint(store_path, res.rewind.arrays,
                {"rewind_iter": res.rewind.rewind_iter})
arrays, meta = load_checkpoint(store_path)
row_disk = retrain_ticket(model_cfg, res.masks,
                          RewindStore(meta["rewind_iter"], arrays),
                          train_ds, test_ds, cfg, 300, 5)
print(f"re-train from memory store: accuracy {row_mem.accuracy:.6f}")
print(f"re-train from disk store:   accuracy {row_disk.accuracy:.6f}")
print(f"identical results: {row_mem.accuracy == row_disk.accuracy}")
