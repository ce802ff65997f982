import numpy as np
import pytest

from ticketlab.data import DataConfig, gen_two_moons
from ticketlab.harness import (EvalRow, ExperimentPlan, cost_accounting,
                               dense_baseline, finetune_ticket,
                               masked_accuracy, per_layer_sparsity,
                               random_mask_like, retrain_ticket,
                               select_best_performing,
                               select_sparsest_matching, sweep)
from ticketlab.models import ModelConfig, build_mlp
from ticketlab.optim import CompositeOptimizer, OptimizerConfig
from ticketlab.search import RewindStore, RoundConfig, run_cs
from ticketlab.seeding import STREAM_SHUFFLE, seeded_rng
from ticketlab.tensor import NonFiniteError, ShapeError, reset_tape
from ticketlab.training import TrainCursor, train


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture(scope="module")
def moons_pair():
    return DataConfig(n_train=128, n_test=128, noise_sd=0.1, seed=7).build()


MC = ModelConfig(kind="mlp", widths=(2, 16, 2))


def cfg(**kw):
    base = dict(rounds=2, iters_per_round=40, rewind_iter=4, batch_size=32,
                record_every=0)
    base.update(kw)
    return RoundConfig(**base)


def _opt(model, c):
    return CompositeOptimizer([c.weight_opt.build(model.weight_tensors())])


class TestTrainLoop:
    def test_zero_iterations_is_noop(self, moons_pair):
        train_ds, _ = moons_pair
        model = MC.build(1)
        before = {k: a.copy() for k, a in model.weight_arrays().items()}
        c = cfg()
        n = train(model, train_ds, _opt(model, c), 0, batch_size=32,
                  shuffle_rng=seeded_rng(1, STREAM_SHUFFLE))
        assert n == 0
        for k, a in model.weight_arrays().items():
            assert np.array_equal(a, before[k])

    def test_loss_decreases_over_first_steps(self, moons_pair):
        train_ds, _ = moons_pair
        model = MC.build(1)
        c = cfg()
        losses = []
        train(model, train_ds, _opt(model, c), 50, batch_size=128,
              shuffle_rng=seeded_rng(1, STREAM_SHUFFLE),
              after_step=[lambda si: losses.append(si.loss)])
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_batch_larger_than_dataset_rejected(self, moons_pair):
        train_ds, _ = moons_pair
        model = MC.build(1)
        with pytest.raises(ValueError):
            train(model, train_ds, _opt(model, cfg()), 1, batch_size=1000,
                  shuffle_rng=seeded_rng(1, STREAM_SHUFFLE))

    def test_lr_decay_milestones(self, moons_pair):
        train_ds, _ = moons_pair
        model = MC.build(1)
        c = cfg(lr_milestones=(10, 20), lr_decay=0.1)
        opt = _opt(model, c)
        from ticketlab.training import lr_milestones_callback
        cb = lr_milestones_callback(opt, c.lr_milestones, c.lr_decay)
        lr0 = opt.members[0].lr
        train(model, train_ds, opt, 30, batch_size=32,
              shuffle_rng=seeded_rng(1, STREAM_SHUFFLE), before_step=[cb])
        assert abs(opt.members[0].lr - lr0 * 0.01) < 1e-15

    def test_nan_loss_aborts_with_diagnostic_record(self, moons_pair):
        train_ds, _ = moons_pair
        model = MC.build(1)
        c = cfg(weight_opt=OptimizerConfig("sgd", lr=1e30, momentum=0.0))
        rows = []
        with pytest.raises(NonFiniteError), np.errstate(all="ignore"):
            train(model, train_ds, _opt(model, c), 50, batch_size=32,
                  shuffle_rng=seeded_rng(1, STREAM_SHUFFLE),
                  recorder=rows.append)
        assert rows and rows[-1].split == "abort"

    def test_epoch_records_cadence(self, moons_pair):
        train_ds, _ = moons_pair
        model = MC.build(1)
        rows = []
        train(model, train_ds, _opt(model, cfg()), 8, batch_size=32,
              shuffle_rng=seeded_rng(1, STREAM_SHUFFLE),
              recorder=rows.append, record_every=1)
        # 128 samples / 32 = 4 iterations per epoch -> 2 epochs
        assert [r.epoch for r in rows if r.split == "train"] == [1, 2]


class TestRetrainTicket:
    def test_identity_ticket_reproduces_dense_exactly(self, moons_pair):
        train_ds, test_ds = moons_pair
        c = cfg()
        seed = 3
        dense_acc = dense_baseline(MC, train_ds, test_ds, c, 40, seed)
        init_model = MC.build(seed)
        ones = {g.name: np.ones(g.weights.shape)
                for g in init_model.maskable_groups()}
        store = RewindStore(0, init_model.weight_arrays(copy=True))
        row = retrain_ticket(MC, ones, store, train_ds, test_ds, c, 40, seed)
        assert row.accuracy == dense_acc

    def test_all_zeros_mask_predicts_one_class(self, moons_pair):
        train_ds, test_ds = moons_pair
        seed = 3
        init_model = MC.build(seed)
        zeros = {g.name: np.zeros(g.weights.shape)
                 for g in init_model.maskable_groups()}
        store = RewindStore(0, init_model.weight_arrays(copy=True))
        row = retrain_ticket(MC, zeros, store, train_ds, test_ds, cfg(), 40,
                             seed)
        assert row.remaining_frac == 0.0
        assert abs(row.accuracy - 0.5) < 1e-12  # balanced test split

    def test_mask_shape_mismatch_rejected(self, moons_pair):
        train_ds, test_ds = moons_pair
        init_model = MC.build(1)
        bad = {g.name: np.ones((3, 3)) for g in init_model.maskable_groups()}
        store = RewindStore(0, init_model.weight_arrays(copy=True))
        with pytest.raises(ShapeError):
            retrain_ticket(MC, bad, store, train_ds, test_ds, cfg(), 10, 1)

    def test_finetune_mode_runs_from_final_weights(self, moons_pair):
        train_ds, test_ds = moons_pair
        model = MC.build(2)
        res = run_cs(model, train_ds, cfg(), seed=2)
        row = finetune_ticket(MC, res, train_ds, test_ds, cfg(), 20, 2,
                              finetune_lr=0.001)
        assert row.accuracy is not None
        assert row.remaining_frac == res.remaining_fraction


class TestSelection:
    def rows(self):
        return [
            EvalRow("a", "cs", 1, 7, 0.209, 0.9057, 100, 1.0),
            EvalRow("b", "cs", 1, 8, 0.167, 0.9100, 100, 1.0),
            EvalRow("c", "cs", 1, 5, 0.123, 0.9143, 100, 1.0),
        ]

    def test_sparsest_matching_prefers_sparsest_qualifier(self):
        best = select_sparsest_matching(self.rows(), dense_acc=0.9055)
        assert best.run_id == "c" and best.remaining_frac == 0.123

    def test_sparsest_matching_none_when_no_qualifier(self):
        assert select_sparsest_matching(self.rows(), dense_acc=0.99) is None

    def test_sparsest_matching_tie_prefers_higher_accuracy(self):
        rows = [EvalRow("a", "cs", 1, 1, 0.2, 0.910, 0, 0),
                EvalRow("b", "cs", 1, 2, 0.2, 0.912, 0, 0)]
        assert select_sparsest_matching(rows, 0.9).run_id == "b"

    def test_sparsest_matching_invariant_to_row_order(self):
        rows = self.rows()
        a = select_sparsest_matching(rows, 0.9055)
        b = select_sparsest_matching(rows[::-1], 0.9055)
        assert a == b

    def test_empty_rows_rejected(self):
        with pytest.raises(ValueError):
            select_sparsest_matching([], 0.9)
        with pytest.raises(ValueError):
            select_best_performing([])

    def test_best_performing_max_accuracy(self):
        rows = [EvalRow("vgg-low", "cs", 1, 5, 0.017, 0.9335, 0, 0),
                EvalRow("vgg-best", "cs", 1, 4, 0.024, 0.9345, 0, 0)]
        assert select_best_performing(rows).run_id == "vgg-best"

    def test_best_performing_single_row(self):
        rows = [EvalRow("only", "cs", 1, 1, 0.5, 0.8, 0, 0)]
        assert select_best_performing(rows).run_id == "only"

    def test_best_performing_tie_prefers_sparser(self):
        rows = [EvalRow("wide", "cs", 1, 1, 0.30, 0.91, 0, 0),
                EvalRow("slim", "cs", 1, 2, 0.20, 0.91, 0, 0)]
        assert select_best_performing(rows).run_id == "slim"


class TestPerLayerSparsity:
    def test_uniform_mask_uniform_fractions(self):
        model = build_mlp([2, 8, 8, 2], seed=0)
        masks = {g.name: np.ones(g.weights.shape)
                 for g in model.maskable_groups()}
        rows = per_layer_sparsity(masks, model)
        assert all(r["remaining_frac"] == 1.0 for r in rows)

    def test_zeroed_layer_reported(self):
        model = build_mlp([2, 8, 8, 2], seed=0)
        masks = {g.name: np.ones(g.weights.shape)
                 for g in model.maskable_groups()}
        masks["dense1"] = np.zeros_like(masks["dense1"])
        rows = {r["name"]: r["remaining_frac"]
                for r in per_layer_sparsity(masks, model)}
        assert rows["dense1"] == 0.0 and rows["dense0"] == 1.0

    def test_weighted_mean_equals_global_exactly(self):
        rng = np.random.default_rng(0)
        model = build_mlp([2, 8, 8, 2], seed=0)
        masks = {g.name: (rng.random(g.weights.shape) < 0.4).astype(float)
                 for g in model.maskable_groups()}
        rows = per_layer_sparsity(masks, model)
        layer_rows = [r for r in rows if not r["name"].startswith("block")]
        total = sum(r["size"] for r in layer_rows)
        weighted = sum(r["size"] * r["remaining_frac"] for r in layer_rows)
        global_frac = (sum(m.sum() for m in masks.values())
                       / sum(m.size for m in masks.values()))
        assert weighted / total == global_frac

    def test_block_grouping(self):
        model = build_mlp([2, 8, 8, 2], seed=0)
        masks = {g.name: np.ones(g.weights.shape)
                 for g in model.maskable_groups()}
        rows = per_layer_sparsity(masks, model, block=2)
        names = [r["name"] for r in rows]
        assert "block0" in names and "block1" in names


class TestSweep:
    def plan(self, **kw):
        base = dict(
            algorithm="cs",
            round_cfg=cfg(iters_per_round=20, rewind_iter=2),
            model_cfg=MC,
            data_cfg=DataConfig(n_train=64, n_test=64, noise_sd=0.1, seed=7),
            seeds=(1, 2, 3),
            grid={"s0": list(np.linspace(-0.3, 0.3, 11))},
            evaluate="none")
        base.update(kw)
        return ExperimentPlan(**base)

    def test_grid_times_seeds_rows(self):
        report = sweep(self.plan())
        assert len(report.rows) == 33

    def test_empty_grid_rejected(self):
        from ticketlab.harness import _expand_grid
        with pytest.raises(ValueError):
            _expand_grid({})

    def test_cost_column_exact(self):
        report = sweep(self.plan(seeds=(1,)))
        assert all(r.cost_iters == 2 * 20 for r in report.rows)

    def test_unknown_grid_key_rejected(self):
        with pytest.raises(ValueError):
            sweep(self.plan(grid={"bogus": [1, 2]}))

    def test_concurrent_equals_serial(self):
        p1 = self.plan(grid={"s0": [-0.1, 0.1]}, seeds=(1, 2),
                       evaluate="final", max_workers=1)
        p2 = self.plan(grid={"s0": [-0.1, 0.1]}, seeds=(1, 2),
                       evaluate="final", max_workers=4)
        r1 = sweep(p1)
        r2 = sweep(p2)
        assert r1.rows == r2.rows
        assert r1.dense_by_seed == r2.dense_by_seed

    def test_rerun_is_deterministic(self):
        p = self.plan(grid={"s0": [0.0]}, seeds=(1, 2), evaluate="final")
        r1 = sweep(p)
        r2 = sweep(p)
        assert r1.rows == r2.rows

    def test_child_failure_recorded_and_sweep_continues(self):
        p = self.plan(algorithm="imp",
                      round_cfg=cfg(iters_per_round=20, rewind_iter=2,
                                    prune_rate=None),
                      grid={"lambda": [0.0]}, seeds=(1, 2))
        report = sweep(p)
        assert all(r.error is not None for r in report.rows)
        assert len(report.rows) == 2

    def test_spearman_reported_for_s0_sweep(self):
        report = sweep(self.plan(grid={"s0": [-0.3, 0.0, 0.3]}, seeds=(1,)))
        assert report.spearman_s0 is not None
        assert report.spearman_s0 > 0

    def test_relative_to_first_grid_point_columns(self):
        report = sweep(self.plan(grid={"s0": [-0.3, 0.0, 0.3]}, seeds=(1, 2),
                                 evaluate="final"))
        first = [r for r in report.rows if r.grid["s0"] == -0.3]
        base_rem = float(np.median([r.remaining_frac for r in first]))
        for r in report.rows:
            assert r.remaining_rel_first is not None
            assert abs(r.remaining_rel_first
                       - (r.remaining_frac - base_rem)) < 1e-15
            assert r.accuracy_rel_first is not None

    def test_fine_tune_evaluation_mode(self):
        report = sweep(self.plan(grid={"s0": [0.0]}, seeds=(1,),
                                 evaluate="final", eval_mode="fine-tune"))
        rows = [r for r in report.rows if r.error is None]
        assert rows and all(r.accuracy is not None for r in rows)
        assert any(r.split == "finetune_test" for r in report.records)

    def test_float32_precision_mode_end_to_end(self):
        from ticketlab.tensor import set_default_dtype
        try:
            report = sweep(self.plan(grid={"s0": [0.0]}, seeds=(1,),
                                     evaluate="final", precision="float32"))
        finally:
            set_default_dtype("float64")
        rows = [r for r in report.rows if r.error is None]
        assert rows and rows[0].accuracy is not None

    def test_supermask_plan_scores_frozen_masked_net(self):
        report = sweep(self.plan(algorithm="supermask",
                                 round_cfg=cfg(rounds=1, iters_per_round=20),
                                 grid={"s0": [0.0]}, seeds=(1,),
                                 evaluate="final"))
        rows = [r for r in report.rows if r.error is None]
        assert rows and all(r.accuracy is not None for r in rows)
        assert any(r.split == "mask_test" for r in report.records)


class TestCostAccounting:
    def mk(self, run_id, alg, epochs):
        return EvalRow(run_id, alg, 1, 5, 0.1, 0.9, cost_iters=epochs * 10,
                       cost_epochs=epochs)

    def test_parallel_and_sequential_totals(self):
        rows = [self.mk(f"cs-{i}", "cs", 425) for i in range(11)]
        totals = cost_accounting(rows)["cs"]
        assert totals["parallel_epochs"] == 425
        assert totals["sequential_epochs"] == 4675

    def test_single_run_parallel_equals_sequential(self):
        totals = cost_accounting([self.mk("imp-0", "imp", 2550)])["imp"]
        assert totals["parallel_epochs"] == totals["sequential_epochs"] == 2550

    def test_multiple_rows_per_run_counted_once(self):
        rows = [self.mk("cs-0", "cs", 425), self.mk("cs-0", "cs", 425)]
        assert cost_accounting(rows)["cs"]["sequential_epochs"] == 425


class TestSupermaskHelpers:
    def test_random_mask_matches_size(self):
        rng = np.random.default_rng(0)
        masks = {"a": np.array([1.0, 0.0, 1.0, 0.0]),
                 "b": np.array([1.0, 1.0, 0.0, 0.0])}
        rnd = random_mask_like(masks, rng)
        assert sum(m.sum() for m in rnd.values()) == 4
        assert all(rnd[k].shape == masks[k].shape for k in masks)

    def test_masked_accuracy_runs(self, moons_pair):
        _, test_ds = moons_pair
        model = MC.build(1)
        masks = {g.name: np.ones(g.weights.shape)
                 for g in model.maskable_groups()}
        acc = masked_accuracy(MC, model.weight_arrays(copy=True), masks,
                              test_ds, 1)
        assert 0.0 <= acc <= 1.0
