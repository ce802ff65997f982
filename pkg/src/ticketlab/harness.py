"""Experiment orchestration: ticket evaluation, subnetwork selection,
hyperparameter sweeps, per-layer sparsity, and search-cost accounting.

A ticket is evaluated by rebuilding the model, fixing its binary mask,
loading the stored early iterate, and re-training on the same budget as
the dense baseline (or, alternatively, fine-tuning from the final trained
weights). Selection follows the two criteria used for reporting: the
sparsest ticket that matches the dense baseline, and the best-performing
ticket regardless of sparsity.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .data import DataConfig
from .models import Model, ModelConfig
from .persist import RunRecord
from .search import (RewindStore, RoundConfig, TicketResult, run_cs, run_imp,
                     run_iss, run_sequential_cs, run_supermask)
from .seeding import STREAM_SHUFFLE, seeded_rng
from .tensor import set_default_dtype
from .training import RunInfo, TrainCursor, evaluate, lr_milestones_callback, train

GRID_ALIASES = {"s0": "mask_init", "lambda": "lam", "tau": "prune_rate",
                "beta": "beta_final"}


@dataclass
class EvalRow:
    """One evaluated ticket (or a failed run placeholder).

    ``accuracy_rel_first`` / ``remaining_rel_first`` are sweep columns:
    the difference to the cross-seed median at the first grid point, so
    hyperparameter effects can be read off next to the absolute values.
    """

    run_id: str
    algorithm: str
    seed: int
    round: int
    remaining_frac: float | None
    accuracy: float | None
    cost_iters: int
    cost_epochs: float
    grid: dict = field(default_factory=dict)
    per_layer: list | None = None
    error: str | None = None
    accuracy_rel_first: float | None = None
    remaining_rel_first: float | None = None


@dataclass
class EvaluationReport:
    rows: list[EvalRow]
    dense_by_seed: dict[int, float]
    dense_accuracy: float | None
    spearman_s0: float | None
    records: list[RunRecord]


@dataclass
class ExperimentPlan:
    """A fully-specified family of runs: grid x seeds, one algorithm."""

    algorithm: str = "cs"
    round_cfg: RoundConfig = field(default_factory=RoundConfig)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    data_cfg: DataConfig = field(default_factory=DataConfig)
    seeds: tuple = (1,)
    grid: dict = field(default_factory=dict)
    evaluate: str = "final"  # "none" | "final" | "rounds"
    eval_mode: str = "retrain-from-k"  # or "fine-tune"
    eval_budget: int | None = None
    finetune_lr: float = 0.001
    max_workers: int = 1
    scope: str = "global"
    supermask_variant: str = "soft"
    precision: str = "float64"

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if self.evaluate not in ("none", "final", "rounds"):
            raise ValueError(f"unknown evaluation setting {self.evaluate!r}")
        if self.eval_mode not in ("retrain-from-k", "fine-tune"):
            raise ValueError(f"unknown evaluation mode {self.eval_mode!r}")
        for k in self.grid:
            key = GRID_ALIASES.get(k, k)
            if not hasattr(self.round_cfg, key):
                raise ValueError(f"unknown sweep parameter {k!r}")


def dense_baseline(model_cfg: ModelConfig, train_data, test_data,
                   cfg: RoundConfig, budget_iters: int, seed: int,
                   recorder=None, run_id: str | None = None) -> float:
    """Train the dense network for the evaluation budget; returns test
    accuracy. Uses the same seed-keyed streams as ticket re-training so the
    comparison is like-for-like."""
    model = model_cfg.build(seed)
    opt = cfg.weight_opt.build([t for t in model.weight_tensors()
                                if t.requires_grad])
    from .optim import CompositeOptimizer
    opt = CompositeOptimizer([opt])
    run_id = run_id or f"dense-seed{seed}"
    info = RunInfo(run_id=run_id, algorithm="dense", seed=seed)
    cbs = ([lr_milestones_callback(opt, cfg.lr_milestones, cfg.lr_decay)]
           if cfg.lr_milestones else [])
    train(model, train_data, opt, budget_iters, batch_size=cfg.batch_size,
          shuffle_rng=seeded_rng(seed, STREAM_SHUFFLE), cursor=TrainCursor(),
          before_step=cbs, recorder=recorder, run_info=info,
          test_data=test_data, record_every=cfg.record_every)
    _, acc = evaluate(model, test_data)
    if recorder is not None:
        recorder(RunRecord(run_id, "dense", seed, 1, 0, budget_iters,
                           "final_test", accuracy=acc, remaining_frac=1.0))
    return acc


def retrain_ticket(model_cfg: ModelConfig, masks: dict, rewind: RewindStore,
                   train_data, test_data, cfg: RoundConfig,
                   budget_iters: int, seed: int, *, run_id: str = "ticket",
                   algorithm: str = "cs", round_idx: int = 1,
                   recorder=None) -> EvalRow:
    """Re-train the masked subnetwork from the stored iterate k with a fresh
    optimizer and the dense budget; returns its evaluation row."""
    model = model_cfg.build(seed)
    model.apply_hard_masks(masks)
    model.load_weight_arrays(rewind.arrays)
    opt = cfg.weight_opt.build([t for t in model.weight_tensors()
                                if t.requires_grad])
    from .optim import CompositeOptimizer
    opt = CompositeOptimizer([opt])
    info = RunInfo(run_id=run_id, algorithm=algorithm, seed=seed,
                   round=round_idx)
    cbs = ([lr_milestones_callback(opt, cfg.lr_milestones, cfg.lr_decay)]
           if cfg.lr_milestones else [])
    train(model, train_data, opt, budget_iters, batch_size=cfg.batch_size,
          shuffle_rng=seeded_rng(seed, STREAM_SHUFFLE), cursor=TrainCursor(),
          before_step=cbs, recorder=None, run_info=info)
    _, acc = evaluate(model, test_data)
    remaining = _masks_remaining(masks)
    if recorder is not None:
        recorder(RunRecord(run_id, algorithm, seed, round_idx, 0,
                           budget_iters, "retrain_test", accuracy=acc,
                           remaining_frac=remaining))
    return EvalRow(run_id, algorithm, seed, round_idx, remaining, acc,
                   cost_iters=0, cost_epochs=0.0)


def finetune_ticket(model_cfg: ModelConfig, ticket: TicketResult,
                    train_data, test_data, cfg: RoundConfig,
                    budget_iters: int, seed: int, *, finetune_lr: float,
                    run_id: str = "ticket", round_idx: int | None = None,
                    recorder=None) -> EvalRow:
    """Fine-tune from the final trained weights under the frozen mask."""
    if ticket.final_weights is None:
        raise ValueError("ticket carries no final weights to fine-tune from")
    model = model_cfg.build(seed)
    round_idx = ticket.round if round_idx is None else round_idx
    masks = (ticket.round_masks[round_idx - 1]
             if ticket.round_masks and round_idx <= len(ticket.round_masks)
             else ticket.masks)
    model.apply_hard_masks(masks)
    model.load_weight_arrays(ticket.final_weights)
    tuned = replace(cfg.weight_opt, lr=finetune_lr)
    opt = tuned.build([t for t in model.weight_tensors() if t.requires_grad])
    from .optim import CompositeOptimizer
    opt = CompositeOptimizer([opt])
    info = RunInfo(run_id=run_id, algorithm=ticket.algorithm, seed=seed,
                   round=round_idx)
    train(model, train_data, opt, budget_iters, batch_size=cfg.batch_size,
          shuffle_rng=seeded_rng(seed, STREAM_SHUFFLE), cursor=TrainCursor(),
          recorder=None, run_info=info)
    _, acc = evaluate(model, test_data)
    remaining = _masks_remaining(masks)
    if recorder is not None:
        recorder(RunRecord(run_id, ticket.algorithm, seed, round_idx, 0,
                           budget_iters, "finetune_test", accuracy=acc,
                           remaining_frac=remaining))
    return EvalRow(run_id, ticket.algorithm, seed, round_idx, remaining, acc,
                   cost_iters=0, cost_epochs=0.0)


def masked_accuracy(model_cfg: ModelConfig, arrays: dict, masks: dict,
                    test_data, seed: int) -> float:
    """Test accuracy of a masked network at fixed weights (no training);
    used to score supermasks and random-mask controls."""
    model = model_cfg.build(seed)
    model.apply_hard_masks(masks)
    model.load_weight_arrays(arrays)
    _, acc = evaluate(model, test_data)
    return acc


def random_mask_like(masks: dict[str, np.ndarray], rng) -> dict[str, np.ndarray]:
    """A uniformly random mask with exactly the same number of kept weights,
    drawn jointly across all groups (size-matched control)."""
    sizes = {k: m.size for k, m in masks.items()}
    total = sum(sizes.values())
    ones = int(sum(m.sum() for m in masks.values()))
    flat = np.zeros(total)
    flat[rng.choice(total, size=ones, replace=False)] = 1.0
    out = {}
    off = 0
    for k in masks:
        out[k] = flat[off:off + sizes[k]].reshape(masks[k].shape)
        off += sizes[k]
    return out


def _masks_remaining(masks: dict[str, np.ndarray]) -> float:
    total = sum(m.size for m in masks.values())
    return float(sum(m.sum() for m in masks.values()) / total)


def per_layer_sparsity(masks: dict[str, np.ndarray], model: Model,
                       block: int | None = None) -> list[dict]:
    """Remaining fraction per maskable layer, in model order; with ``block``
    set, appends entries for groups of that many consecutive layers. The
    size-weighted mean of the per-layer fractions equals the global
    remaining fraction exactly."""
    rows = []
    names = [g.name for g in model.maskable_groups()]
    for name in names:
        m = masks[name]
        rows.append({"name": name, "size": int(m.size),
                     "remaining_frac": float(m.sum() / m.size)})
    if block:
        for bi in range(0, len(names), block):
            chunk = names[bi:bi + block]
            size = sum(masks[n].size for n in chunk)
            kept = sum(float(masks[n].sum()) for n in chunk)
            rows.append({"name": f"block{bi // block}", "size": int(size),
                         "remaining_frac": kept / size})
    return rows


def select_sparsest_matching(rows: list[EvalRow], dense_acc: float) -> EvalRow | None:
    """Sparsest ticket whose re-trained accuracy is no worse than the dense
    baseline (hard inequality); ties prefer higher accuracy. None when no
    ticket qualifies."""
    if not rows:
        raise ValueError("no evaluation rows to select from")
    ok = [r for r in rows if r.error is None and r.accuracy is not None
          and r.accuracy >= dense_acc]
    if not ok:
        return None
    return min(ok, key=lambda r: (r.remaining_frac, -r.accuracy, r.run_id,
                                  r.round))


def select_best_performing(rows: list[EvalRow]) -> EvalRow:
    """Highest re-trained accuracy; ties prefer the sparser ticket."""
    if not rows:
        raise ValueError("no evaluation rows to select from")
    ok = [r for r in rows if r.error is None and r.accuracy is not None]
    if not ok:
        raise ValueError("no successfully evaluated rows")
    return min(ok, key=lambda r: (-r.accuracy, r.remaining_frac, r.run_id,
                                  r.round))


def cost_accounting(rows: list[EvalRow]) -> dict[str, dict]:
    """Per-algorithm totals assuming full parallelism (max over runs) and
    strict sequential execution (sum over runs), in iterations and epochs."""
    per_run: dict[str, tuple[str, int, float]] = {}
    for r in rows:
        if r.error is not None:
            continue
        per_run[r.run_id] = (r.algorithm, r.cost_iters, r.cost_epochs)
    out: dict[str, dict] = {}
    for _, (alg, it, ep) in sorted(per_run.items()):
        d = out.setdefault(alg, {"parallel_iters": 0, "sequential_iters": 0,
                                 "parallel_epochs": 0.0,
                                 "sequential_epochs": 0.0})
        d["parallel_iters"] = max(d["parallel_iters"], it)
        d["sequential_iters"] += it
        d["parallel_epochs"] = max(d["parallel_epochs"], ep)
        d["sequential_epochs"] += ep
    return out


def _expand_grid(grid: dict) -> list[dict]:
    if not grid:
        raise ValueError("sweep grid is empty")
    keys = sorted(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        points.append(dict(zip(keys, combo)))
    return points


def _apply_point(cfg: RoundConfig, point: dict) -> RoundConfig:
    mapped = {GRID_ALIASES.get(k, k): v for k, v in point.items()}
    return replace(cfg, **mapped)


def run_point(plan: ExperimentPlan, point: dict, seed: int, train_data,
              test_data) -> tuple[list[TicketResult], list[EvalRow],
                                  list[RunRecord]]:
    """Execute one fully-specified run (a single grid point and seed):
    search, then ticket evaluation per the plan. Returns the produced
    tickets alongside the evaluation rows and raw records."""
    set_default_dtype(plan.precision)
    cfg = _apply_point(plan.round_cfg, point)
    tag = "-".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in sorted(point.items()))
    run_id = f"{plan.algorithm}-{tag}-seed{seed}" if tag else \
        f"{plan.algorithm}-seed{seed}"
    records: list[RunRecord] = []
    rec = records.append
    model = plan.model_cfg.build(seed)

    if plan.algorithm == "cs":
        tickets = [run_cs(model, train_data, cfg, seed=seed, run_id=run_id,
                          recorder=rec)]
    elif plan.algorithm == "imp":
        tickets = run_imp(model, train_data, cfg, plan.scope, seed=seed,
                          run_id=run_id, recorder=rec)
    elif plan.algorithm == "iss":
        tickets = [run_iss(model, train_data, cfg, seed=seed, run_id=run_id,
                           recorder=rec)]
    elif plan.algorithm == "seqcs":
        tickets = run_sequential_cs(model, train_data, cfg, seed=seed,
                                    run_id=run_id, recorder=rec)
    elif plan.algorithm == "supermask":
        tickets = [run_supermask(model, train_data, cfg,
                                 plan.supermask_variant, seed=seed,
                                 run_id=run_id, recorder=rec)]
    else:
        raise ValueError(f"unknown algorithm {plan.algorithm!r}")

    result = tickets[-1]
    budget = plan.eval_budget or cfg.iters_per_round
    rows: list[EvalRow] = []

    def eval_one(masks, round_idx, ticket):
        if plan.algorithm == "supermask":
            acc = masked_accuracy(plan.model_cfg, ticket.rewind.arrays, masks,
                                  test_data, seed)
            rec(RunRecord(run_id, ticket.algorithm, seed, round_idx, 0,
                          ticket.total_iterations, "mask_test", accuracy=acc,
                          remaining_frac=_masks_remaining(masks)))
            return EvalRow(run_id, ticket.algorithm, seed, round_idx,
                           _masks_remaining(masks), acc, 0, 0.0)
        if plan.eval_mode == "fine-tune":
            return finetune_ticket(plan.model_cfg, ticket, train_data,
                                   test_data, cfg, budget, seed,
                                   finetune_lr=plan.finetune_lr,
                                   run_id=run_id, round_idx=round_idx,
                                   recorder=rec)
        return retrain_ticket(plan.model_cfg, masks, ticket.rewind,
                              train_data, test_data, cfg, budget, seed,
                              run_id=run_id, algorithm=ticket.algorithm,
                              round_idx=round_idx, recorder=rec)

    if plan.evaluate == "none":
        rows.append(EvalRow(run_id, result.algorithm, seed, result.round,
                            result.remaining_fraction, None,
                            result.total_iterations,
                            result.total_iterations / result.iters_per_epoch,
                            grid=dict(point)))
    elif plan.evaluate == "final":
        row = eval_one(result.masks, result.round, result)
        row.grid = dict(point)
        row.cost_iters = result.total_iterations
        row.cost_epochs = result.total_iterations / result.iters_per_epoch
        row.per_layer = per_layer_sparsity(result.masks, model)
        rows.append(row)
    else:  # rounds
        if len(tickets) > 1:
            pairs = [(t.masks, t.round, t) for t in tickets]
        else:
            pairs = [(m, i + 1, result) for i, m in
                     enumerate(result.round_masks)]
        for masks, round_idx, ticket in pairs:
            row = eval_one(masks, round_idx, ticket)
            row.grid = dict(point)
            row.cost_iters = result.total_iterations
            row.cost_epochs = (result.total_iterations /
                               result.iters_per_epoch)
            rows.append(row)
    return tickets, rows, records


def sweep(plan: ExperimentPlan) -> EvaluationReport:
    """Expand grid x seeds into independent runs, execute (optionally with a
    bounded worker pool), evaluate tickets, and aggregate. Child-run
    failures become error rows; the sweep continues.

    When the mask init is swept, the report includes the Spearman rank
    correlation between its value and the median remaining fraction."""
    plan.validate()
    points = _expand_grid(plan.grid) if plan.grid else [{}]
    train_data, test_data = plan.data_cfg.build()
    set_default_dtype(plan.precision)

    records: list[RunRecord] = []
    dense_by_seed: dict[int, float] = {}
    budget = plan.eval_budget or plan.round_cfg.iters_per_round
    if plan.evaluate != "none":
        for seed in plan.seeds:
            dense_by_seed[seed] = dense_baseline(
                plan.model_cfg, train_data, test_data, plan.round_cfg,
                budget, seed, recorder=records.append)

    jobs = [(point, seed) for point in points for seed in plan.seeds]
    rows: list[EvalRow] = []

    def job(args):
        point, seed = args
        try:
            _, rws, recs = run_point(plan, point, seed, train_data, test_data)
            return rws, recs
        except Exception as exc:  # recorded per-row; sweep continues
            run_id = f"{plan.algorithm}-error-seed{seed}"
            return ([EvalRow(run_id, plan.algorithm, seed, 0, None, None, 0,
                             0.0, grid=dict(point), error=str(exc))], [])

    if plan.max_workers > 1:
        with ThreadPoolExecutor(max_workers=plan.max_workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    for rws, recs in results:
        rows.extend(rws)
        records.extend(recs)

    spearman = sparsity_rank_correlation(rows, plan.grid,
                                         plan.round_cfg.rounds)
    attach_relative_columns(rows, plan.grid)
    dense_acc = (float(np.mean(list(dense_by_seed.values())))
                 if dense_by_seed else None)
    return EvaluationReport(rows, dense_by_seed, dense_acc, spearman, records)


def attach_relative_columns(rows: list[EvalRow], grid: dict) -> None:
    """Fill the *_rel_first columns when exactly one parameter is swept:
    each row's difference to the cross-seed median of the first (lowest)
    grid value, computed per round."""
    if len(grid) != 1:
        return
    key = next(iter(grid))
    first = sorted(grid[key])[0]

    def median_at(rnd, attr):
        vals = [getattr(r, attr) for r in rows
                if r.error is None and r.grid.get(key) == first
                and r.round == rnd and getattr(r, attr) is not None]
        return float(np.median(vals)) if vals else None

    base = {}
    for r in rows:
        if r.error is not None:
            continue
        if r.round not in base:
            base[r.round] = (median_at(r.round, "accuracy"),
                             median_at(r.round, "remaining_frac"))
        acc0, rem0 = base[r.round]
        if acc0 is not None and r.accuracy is not None:
            r.accuracy_rel_first = r.accuracy - acc0
        if rem0 is not None and r.remaining_frac is not None:
            r.remaining_rel_first = r.remaining_frac - rem0


def sparsity_rank_correlation(rows: list[EvalRow], grid: dict,
                              final_round: int) -> float | None:
    """Spearman rank correlation between the swept mask init and the median
    final remaining fraction across seeds; None unless the init was swept."""
    skey = next((k for k in grid if GRID_ALIASES.get(k, k) == "mask_init"),
                None)
    if skey is None:
        return None
    values, medians = [], []
    for v in sorted(grid[skey]):
        rem = [r.remaining_frac for r in rows
               if r.error is None and r.grid.get(skey) == v
               and r.round == final_round and r.remaining_frac is not None]
        if rem:
            values.append(v)
            medians.append(float(np.median(rem)))
    if len(values) < 2:
        return None
    return float(stats.spearmanr(values, medians).statistic)
