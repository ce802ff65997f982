"""Round-structured subnetwork-search controllers.

Five procedures share one round skeleton (train for T iterations, then
sparsify, R times), differing in how the mask is represented and updated:

* ``run_cs``         - deterministic soft gates sigmoid(beta*s) with an
                       exponential temperature ramp per round, an L1 gate
                       penalty, and the between-round logit reset
                       s <- min(beta_end * s_end, s_init). Weights persist
                       across rounds unless rewinding is requested. The
                       final mask is the exact hard step of the logits.
* ``run_imp``        - hard masks; after each round the lowest-magnitude
                       fraction of surviving weights is removed (globally
                       or per layer) and, optionally, survivors rewind to
                       the stored early iterate.
* ``run_iss``        - Bernoulli(sigmoid(s)) sampled masks trained with a
                       straight-through gradient; between rounds components
                       whose logits fell below their init are permanently
                       removed and weights rewind to the early iterate.
* ``run_sequential_cs`` - soft gates as in run_cs, but each round
                       permanently removes a fixed fraction of survivors
                       with the lowest logits (no logit reset).
* ``run_supermask``  - single round that trains only the mask over frozen
                       randomly-initialized weights.

Pruned components always stay in storage with zero gradient (the mask
multiplies the gradient), which makes rewinding exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .masking import (GATE_HARD, GATE_SOFT, GATE_STOCHASTIC,
                      MaskedParameterGroup, TemperatureSchedule, hard_mask,
                      reset_mask)
from .optim import CompositeOptimizer, OptimizerConfig
from .persist import RunRecord
from .seeding import STREAM_MASK, STREAM_SHUFFLE, seeded_rng
from .training import RunInfo, TrainCursor, lr_milestones_callback, train


@dataclass
class RoundConfig:
    """Shared knobs for every controller; not all fields apply to all."""

    rounds: int = 1
    iters_per_round: int = 500
    rewind_iter: int = 0  # snapshot point k, in optimizer iterations
    prune_rate: float | None = None  # fixed per-round removal fraction
    rewind_between_rounds: bool = False
    lam: float = 1e-8
    beta_final: float = 200.0
    mask_init: float = 0.0
    batch_size: int = 32
    lr_milestones: tuple = ()
    lr_decay: float = 0.1
    record_every: int = 1
    st_variant: str = "identity"
    weight_opt: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig("sgd", lr=0.1, momentum=0.9,
                                                weight_decay=1e-4))
    mask_opt: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig("sgd", lr=0.1, momentum=0.9,
                                                weight_decay=0.0))

    def validate(self, need_rate: bool = False) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.iters_per_round < 1:
            raise ValueError("iterations per round must be >= 1")
        if not 0 <= self.rewind_iter < self.iters_per_round:
            raise ValueError("rewind point must satisfy 0 <= k < T")
        if self.prune_rate is not None and not 0.0 < self.prune_rate < 1.0:
            raise ValueError("pruning rate must lie in (0, 1)")
        if need_rate and self.prune_rate is None:
            raise ValueError("this controller requires a pruning rate")
        if self.lam < 0:
            raise ValueError("gate penalty must be non-negative")
        if self.beta_final < 1:
            raise ValueError("final temperature must be >= 1")
        self.weight_opt.validate()
        self.mask_opt.validate()


@dataclass
class RewindStore:
    """Snapshot of every weight tensor at iterate k of round 1."""

    rewind_iter: int
    arrays: dict[str, np.ndarray]


@dataclass
class TicketResult:
    algorithm: str
    run_id: str
    seed: int
    config: RoundConfig
    masks: dict[str, np.ndarray]
    rewind: RewindStore
    records: list[RunRecord]
    remaining_per_round: list[float]
    round_masks: list[dict[str, np.ndarray]]
    total_iterations: int
    iters_per_epoch: int
    round: int = 0  # round that produced `masks` (last executed round)
    prune_exhausted: bool = False
    final_weights: dict[str, np.ndarray] | None = None

    @property
    def remaining_fraction(self) -> float:
        return self.remaining_per_round[-1]


def _mask_remaining(masks: dict[str, np.ndarray]) -> float:
    total = sum(m.size for m in masks.values())
    kept = sum(float(m.sum()) for m in masks.values())
    return kept / total


def _make_optimizer(model, cfg: RoundConfig, train_weights: bool = True,
                    train_masks: bool = True) -> CompositeOptimizer:
    members = []
    if train_weights:
        wparams = [t for t in model.weight_tensors() if t.requires_grad]
        if wparams:
            members.append(cfg.weight_opt.build(wparams))
    if train_masks:
        mparams = [t for t in model.mask_tensors() if t.requires_grad]
        if mparams:
            members.append(cfg.mask_opt.build(mparams))
    return CompositeOptimizer(members)


class _Recorder:
    def __init__(self, sink=None):
        self.rows: list[RunRecord] = []
        self.sink = sink

    def __call__(self, rec: RunRecord):
        self.rows.append(rec)
        if self.sink is not None:
            self.sink(rec)


def _capture_rewind(model, k: int, box: dict):
    def cb(si):
        if si.iteration == k and "store" not in box:
            box["store"] = RewindStore(k, model.weight_arrays(copy=True))
    return cb


def _round_callbacks(model, cfg, box, first_round: bool, optimizer):
    cbs = []
    if first_round:
        cbs.append(_capture_rewind(model, cfg.rewind_iter, box))
    if cfg.lr_milestones:
        cbs.append(lr_milestones_callback(optimizer, cfg.lr_milestones,
                                          cfg.lr_decay))
    return cbs


def _ticket_row(rec, info: RunInfo, r: int, it: int, remaining: float,
                beta: float | None):
    rec(RunRecord(info.run_id, info.algorithm, info.seed, r, 0, it, "ticket",
                  remaining_frac=remaining, beta=beta, lam=info.lam,
                  s0=info.s0))


def _select_lowest(groups: list[MaskedParameterGroup],
                   values: list[np.ndarray],
                   active: list[np.ndarray],
                   rate: float, scope: str) -> list[np.ndarray]:
    """Indices (flat, per group) of the lowest-valued active components to
    remove: floor(rate * active) overall (global) or per group (per-layer),
    at least one when any rounding would stall; ties break on the lowest
    flat index in group order. Returns [] when nothing can be pruned."""
    if scope == "global":
        gids, flats, vals = [], [], []
        for gi, (v, a) in enumerate(zip(values, active)):
            idx = np.flatnonzero(a.reshape(-1))
            gids.append(np.full(idx.size, gi))
            flats.append(idx)
            vals.append(v.reshape(-1)[idx])
        gids = np.concatenate(gids)
        flats = np.concatenate(flats)
        vals = np.concatenate(vals)
        total = vals.size
        nprune = int(np.floor(rate * total + 1e-9))
        if nprune == 0:
            if total <= 1:
                return []
            nprune = 1
        order = np.argsort(vals, kind="stable")[:nprune]
        picks = [np.empty(0, dtype=np.int64)] * len(groups)
        for gi in range(len(groups)):
            picks[gi] = flats[order[gids[order] == gi]]
        return picks
    if scope == "per-layer":
        picks = []
        pruned_any = False
        for v, a in zip(values, active):
            idx = np.flatnonzero(a.reshape(-1))
            ng = int(np.floor(rate * idx.size + 1e-9))
            if ng == 0 and idx.size > 1:
                ng = 1
            if ng == 0:
                picks.append(np.empty(0, dtype=np.int64))
                continue
            order = np.argsort(v.reshape(-1)[idx], kind="stable")[:ng]
            picks.append(idx[order])
            pruned_any = True
        return picks if pruned_any else []
    raise ValueError(f"unknown pruning scope {scope!r}")


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

def run_cs(model, data, cfg: RoundConfig, *, seed: int = 0, run_id: str = "cs",
           test_data=None, recorder=None) -> TicketResult:
    """Soft-gate search: anneal beta 1 -> beta_final each round, reset the
    kept logits between rounds, output the exact hard mask of the final
    logits together with the round-1 rewind snapshot. Total optimizer
    iterations are exactly rounds * iters_per_round, whatever the final
    sparsity."""
    cfg.validate()
    groups = model.maskable_groups()
    if not groups:
        raise ValueError("continuous sparsification needs >= 1 maskable group")
    model.set_gate_mode(GATE_SOFT, cfg.mask_init)
    shuffle = seeded_rng(seed, STREAM_SHUFFLE)
    rec = _Recorder(recorder)
    info = RunInfo(run_id=run_id, algorithm="cs", seed=seed, lam=cfg.lam,
                   s0=cfg.mask_init)
    box: dict = {}
    total = 0
    remaining_per_round: list[float] = []
    round_masks: list[dict[str, np.ndarray]] = []

    for r in range(1, cfg.rounds + 1):
        info.round = r
        opt = _make_optimizer(model, cfg)
        sched = TemperatureSchedule(cfg.beta_final, cfg.iters_per_round)
        cbs = _round_callbacks(model, cfg, box, r == 1, opt)
        total += train(model, data, opt, cfg.iters_per_round,
                       batch_size=cfg.batch_size, shuffle_rng=shuffle,
                       schedule=sched, lam=cfg.lam, cursor=TrainCursor(),
                       start_iteration=total, before_step=cbs, recorder=rec,
                       run_info=info, test_data=test_data,
                       record_every=cfg.record_every)
        masks = {g.name: g.current_hard_mask() for g in groups}
        round_masks.append(masks)
        remaining_per_round.append(_mask_remaining(masks))
        _ticket_row(rec, info, r, total, remaining_per_round[-1], cfg.beta_final)
        if r < cfg.rounds:
            ends = {g.name: g.mask_logits.data.copy() for g in groups}
            for g in groups:
                reset_mask(g, ends[g.name], cfg.beta_final)
            if cfg.rewind_between_rounds:
                model.load_weight_arrays(box["store"].arrays)

    return TicketResult("cs", run_id, seed, cfg, round_masks[-1], box["store"],
                        rec.rows, remaining_per_round, round_masks, total,
                        iters_per_epoch=-(-len(data) // cfg.batch_size),
                        round=cfg.rounds,
                        final_weights=model.weight_arrays(copy=True))


def run_imp(model, data, cfg: RoundConfig, scope: str = "global", *,
            seed: int = 0, run_id: str = "imp", test_data=None,
            recorder=None) -> list[TicketResult]:
    """Iterative magnitude pruning. Emits one ticket per round; masks are
    nested across rounds. With ``rewind_between_rounds`` surviving weights
    return to the round-1 iterate k before the next round."""
    cfg.validate(need_rate=True)
    groups = model.maskable_groups()
    if not groups:
        raise ValueError("magnitude pruning needs >= 1 maskable group")
    model.set_gate_mode(GATE_HARD)
    shuffle = seeded_rng(seed, STREAM_SHUFFLE)
    rec = _Recorder(recorder)
    info = RunInfo(run_id=run_id, algorithm="imp", seed=seed)
    box: dict = {}
    total = 0
    tickets: list[TicketResult] = []
    remaining_per_round: list[float] = []

    for r in range(1, cfg.rounds + 1):
        info.round = r
        opt = _make_optimizer(model, cfg, train_masks=False)
        cbs = _round_callbacks(model, cfg, box, r == 1, opt)
        total += train(model, data, opt, cfg.iters_per_round,
                       batch_size=cfg.batch_size, shuffle_rng=shuffle,
                       lam=0.0, cursor=TrainCursor(), start_iteration=total,
                       before_step=cbs, recorder=rec, run_info=info,
                       test_data=test_data, record_every=cfg.record_every)
        picks = _select_lowest(groups,
                               [np.abs(g.weights.data) for g in groups],
                               [g.frozen_mask > 0 for g in groups],
                               cfg.prune_rate, scope)
        exhausted = not picks
        for g, p in zip(groups, picks or [np.empty(0, int)] * len(groups)):
            g.frozen_mask.reshape(-1)[p] = 0.0
        masks = {g.name: g.frozen_mask.copy() for g in groups}
        remaining_per_round.append(_mask_remaining(masks))
        _ticket_row(rec, info, r, total, remaining_per_round[-1], None)
        final_w = model.weight_arrays(copy=True)
        if cfg.rewind_between_rounds:
            model.load_weight_arrays(box["store"].arrays)
        tickets.append(TicketResult(
            "imp", run_id, seed, cfg, masks, box["store"], rec.rows,
            list(remaining_per_round), [masks], total,
            iters_per_epoch=-(-len(data) // cfg.batch_size), round=r,
            prune_exhausted=exhausted, final_weights=final_w))
        if exhausted:
            break
    return tickets


def run_iss(model, data, cfg: RoundConfig, *, seed: int = 0,
            run_id: str = "iss", test_data=None, recorder=None) -> TicketResult:
    """Stochastic mask search with straight-through gradients. Between
    rounds, components whose logits dropped below their init are frozen out
    permanently and weights rewind to the stored iterate k. The final mask
    is one Bernoulli sample of the trained gate probabilities."""
    cfg.validate()
    groups = model.maskable_groups()
    if not groups:
        raise ValueError("stochastic sparsification needs >= 1 maskable group")
    model.set_gate_mode(GATE_STOCHASTIC, cfg.mask_init)
    shuffle = seeded_rng(seed, STREAM_SHUFFLE)
    mask_rng = seeded_rng(seed, STREAM_MASK)
    rec = _Recorder(recorder)
    info = RunInfo(run_id=run_id, algorithm="iss", seed=seed, lam=cfg.lam,
                   s0=cfg.mask_init)
    box: dict = {}
    total = 0
    remaining_per_round: list[float] = []
    round_masks: list[dict[str, np.ndarray]] = []

    for r in range(1, cfg.rounds + 1):
        info.round = r
        opt = _make_optimizer(model, cfg)
        cbs = _round_callbacks(model, cfg, box, r == 1, opt)
        total += train(model, data, opt, cfg.iters_per_round,
                       batch_size=cfg.batch_size, shuffle_rng=shuffle,
                       lam=cfg.lam, mask_rng=mask_rng,
                       st_variant=cfg.st_variant, cursor=TrainCursor(),
                       start_iteration=total, before_step=cbs, recorder=rec,
                       run_info=info, test_data=test_data,
                       record_every=cfg.record_every)
        masks = {g.name: _bernoulli_mask(g, mask_rng) for g in groups}
        round_masks.append(masks)
        remaining_per_round.append(_mask_remaining(masks))
        _ticket_row(rec, info, r, total, remaining_per_round[-1], None)
        if r < cfg.rounds:
            for g in groups:
                dropped = g.mask_logits.data < g.mask_init
                g.pruned_forever = dropped if g.pruned_forever is None \
                    else (g.pruned_forever | dropped)
            model.load_weight_arrays(box["store"].arrays)

    return TicketResult("iss", run_id, seed, cfg, round_masks[-1], box["store"],
                        rec.rows, remaining_per_round, round_masks, total,
                        iters_per_epoch=-(-len(data) // cfg.batch_size),
                        round=cfg.rounds,
                        final_weights=model.weight_arrays(copy=True))


def _bernoulli_mask(group: MaskedParameterGroup, rng) -> np.ndarray:
    p = expit(group.mask_logits.data)
    m = (rng.random(p.shape) < p).astype(group.weights.dtype)
    if group.pruned_forever is not None:
        m[group.pruned_forever] = 0.0
    return m


def run_sequential_cs(model, data, cfg: RoundConfig, *, seed: int = 0,
                      run_id: str = "seqcs", test_data=None,
                      recorder=None) -> list[TicketResult]:
    """Soft-gate training with a fixed per-round removal quota: after each
    round the fraction ``prune_rate`` of surviving weights with the lowest
    mask logits is removed permanently, so remaining fractions follow
    (1 - rate)^r regardless of the logit values. The temperature resets to
    1 each round; logits are not reset."""
    cfg.validate(need_rate=True)
    groups = model.maskable_groups()
    if not groups:
        raise ValueError("sequential sparsification needs >= 1 maskable group")
    model.set_gate_mode(GATE_SOFT, cfg.mask_init)
    shuffle = seeded_rng(seed, STREAM_SHUFFLE)
    rec = _Recorder(recorder)
    info = RunInfo(run_id=run_id, algorithm="seqcs", seed=seed, lam=cfg.lam,
                   s0=cfg.mask_init)
    box: dict = {}
    total = 0
    tickets: list[TicketResult] = []
    remaining_per_round: list[float] = []

    for r in range(1, cfg.rounds + 1):
        info.round = r
        opt = _make_optimizer(model, cfg)
        sched = TemperatureSchedule(cfg.beta_final, cfg.iters_per_round)
        cbs = _round_callbacks(model, cfg, box, r == 1, opt)
        total += train(model, data, opt, cfg.iters_per_round,
                       batch_size=cfg.batch_size, shuffle_rng=shuffle,
                       schedule=sched, lam=cfg.lam, cursor=TrainCursor(),
                       start_iteration=total, before_step=cbs, recorder=rec,
                       run_info=info, test_data=test_data,
                       record_every=cfg.record_every)
        active = [np.ones(g.weights.shape, dtype=bool)
                  if g.pruned_forever is None else ~g.pruned_forever
                  for g in groups]
        picks = _select_lowest(groups, [g.mask_logits.data for g in groups],
                               active, cfg.prune_rate, "global")
        exhausted = not picks
        for g, a, p in zip(groups, active,
                           picks or [np.empty(0, int)] * len(groups)):
            a.reshape(-1)[p] = False
            g.pruned_forever = ~a
        masks = {g.name: (~g.pruned_forever).astype(g.weights.dtype)
                 for g in groups}
        remaining_per_round.append(_mask_remaining(masks))
        _ticket_row(rec, info, r, total, remaining_per_round[-1],
                    cfg.beta_final)
        final_w = model.weight_arrays(copy=True)
        if cfg.rewind_between_rounds:
            model.load_weight_arrays(box["store"].arrays)
        tickets.append(TicketResult(
            "seqcs", run_id, seed, cfg, masks, box["store"], rec.rows,
            list(remaining_per_round), [masks], total,
            iters_per_epoch=-(-len(data) // cfg.batch_size), round=r,
            prune_exhausted=exhausted, final_weights=final_w))
        if exhausted:
            break
    return tickets


def run_supermask(model, data, cfg: RoundConfig, variant: str = "soft", *,
                  seed: int = 0, run_id: str = "supermask", test_data=None,
                  recorder=None) -> TicketResult:
    """Learn a binary mask over frozen randomly-initialized weights in a
    single round. Only mask logits are trained; the run fails loudly if any
    weight changes. ``variant`` picks the deterministic soft gate or the
    sampled stochastic gate."""
    if cfg.rounds != 1:
        raise ValueError("supermask search runs a single round")
    cfg.validate()
    if variant not in ("soft", "stochastic"):
        raise ValueError(f"unknown supermask variant {variant!r}")
    groups = model.maskable_groups()
    if not groups:
        raise ValueError("supermask search needs >= 1 maskable group")
    snapshot = model.weight_arrays(copy=True)
    mode = GATE_SOFT if variant == "soft" else GATE_STOCHASTIC
    model.set_gate_mode(mode, cfg.mask_init)
    for t in model.weight_tensors():
        t.requires_grad = False
    shuffle = seeded_rng(seed, STREAM_SHUFFLE)
    mask_rng = seeded_rng(seed, STREAM_MASK) if variant == "stochastic" else None
    rec = _Recorder(recorder)
    info = RunInfo(run_id=run_id, algorithm=f"supermask-{variant}", seed=seed,
                   lam=cfg.lam, s0=cfg.mask_init)
    opt = _make_optimizer(model, cfg, train_weights=False)
    sched = (TemperatureSchedule(cfg.beta_final, cfg.iters_per_round)
             if variant == "soft" else None)
    total = train(model, data, opt, cfg.iters_per_round,
                  batch_size=cfg.batch_size, shuffle_rng=shuffle,
                  schedule=sched, lam=cfg.lam, mask_rng=mask_rng,
                  st_variant=cfg.st_variant, cursor=TrainCursor(),
                  recorder=rec, run_info=info, test_data=test_data,
                  record_every=cfg.record_every)
    if variant == "soft":
        masks = {g.name: g.current_hard_mask() for g in groups}
    else:
        masks = {g.name: _bernoulli_mask(g, mask_rng) for g in groups}
    after = model.weight_arrays()
    for k, a in after.items():
        if not np.array_equal(a, snapshot[k]):
            raise RuntimeError(f"frozen weights changed during supermask "
                               f"search: {k!r}")
    remaining = _mask_remaining(masks)
    _ticket_row(rec, info, 1, total, remaining,
                cfg.beta_final if variant == "soft" else None)
    return TicketResult(info.algorithm, run_id, seed, cfg, masks,
                        RewindStore(0, snapshot), rec.rows, [remaining],
                        [masks], total,
                        iters_per_epoch=-(-len(data) // cfg.batch_size),
                        round=1, final_weights=snapshot)


def freeze_mask_and_finetune(model, data, cfg: RoundConfig, *,
                             freeze_at: int, finetune_iters: int,
                             finetune_lr: float, seed: int = 0,
                             run_id: str = "prune", test_data=None,
                             recorder=None):
    """Pruning-mode schedule: train weights and soft gates for ``freeze_at``
    iterations (temperature annealed over that span), then fix the mask to
    the hard step of the logits, stop mask training, and fine-tune the
    surviving weights at ``finetune_lr``.

    Returns (model, masks, records). Calling on an already-frozen model is
    an error.
    """
    cfg.validate()
    if freeze_at < 1 or finetune_iters < 0:
        raise ValueError("freeze point must be >= 1 and tail >= 0")
    groups = model.maskable_groups()
    if not groups:
        raise ValueError("mask freezing needs >= 1 maskable group")
    if any(g.frozen_mask is not None for g in groups):
        raise ValueError("mask already frozen for this model")
    model.set_gate_mode(GATE_SOFT, cfg.mask_init)
    shuffle = seeded_rng(seed, STREAM_SHUFFLE)
    rec = _Recorder(recorder)
    info = RunInfo(run_id=run_id, algorithm="prune", seed=seed, lam=cfg.lam,
                   s0=cfg.mask_init)
    opt = _make_optimizer(model, cfg)
    sched = TemperatureSchedule(cfg.beta_final, freeze_at)
    done = train(model, data, opt, freeze_at, batch_size=cfg.batch_size,
                 shuffle_rng=shuffle, schedule=sched, lam=cfg.lam,
                 cursor=TrainCursor(), recorder=rec, run_info=info,
                 test_data=test_data, record_every=cfg.record_every)
    masks = {}
    for g in groups:
        g.frozen_mask = g.current_hard_mask()
        masks[g.name] = g.frozen_mask.copy()
    info.round = 2
    tail_cfg = replace(cfg, weight_opt=replace(cfg.weight_opt, lr=finetune_lr))
    tail_opt = _make_optimizer(model, tail_cfg, train_masks=False)
    train(model, data, tail_opt, finetune_iters, batch_size=cfg.batch_size,
          shuffle_rng=shuffle, lam=0.0, cursor=TrainCursor(),
          start_iteration=done, recorder=rec, run_info=info,
          test_data=test_data, record_every=cfg.record_every)
    return model, masks, rec.rows
