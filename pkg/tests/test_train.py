import numpy as np
import pytest

from tailcast import dataio, mlp, train
from tailcast.errors import (
    ConfigError,
    DataError,
    DivergenceError,
    StrategyUnavailableError,
)
from tailcast.reweight import WeightVector, meta_weights


def linear_params(w, b):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape[1] != 1:
        w = w.T
    spec = mlp.MlpSpec(input_dim=w.shape[0], output_dim=1, hidden_widths=(),
                       dropout_rate=0.0)
    return mlp.ParamSet(spec, [w], [np.atleast_1d(np.asarray(b, dtype=float))])


def make_window(x_val, y_val, origin, extreme=False):
    return dataio.WindowSample(np.array([[float(x_val)]]), np.array([[float(y_val)]]),
                               origin=origin, extreme=extreme)


def make_split(train_pairs, eval_pairs, extreme_train=None):
    train_ws = tuple(
        make_window(x, y, i, extreme=(extreme_train[i] if extreme_train else False))
        for i, (x, y) in enumerate(train_pairs)
    )
    val_ws = tuple(make_window(x, y, 100 + i, extreme=True)
                   for i, (x, y) in enumerate(eval_pairs))
    return dataio.SplitResult(train=train_ws, validation=val_ws, test=(),
                              eval_extreme=val_ws, boundaries=(50, 90))


class TestSgdStep:
    def test_zero_gradient_no_change(self):
        p = mlp.init_params(mlp.MlpSpec(2, 1, (3,), 0.0), seed=0)
        q = train.sgd_step(p, np.zeros(p.n_params), 0.1)
        assert np.array_equal(q.flatten(), p.flatten())

    def test_scalar_update(self):
        p = linear_params([[1.0]], [0.0])
        q = train.sgd_step(p, np.array([2.0, 0.0]), 0.1)
        assert q.weights[0][0, 0] == pytest.approx(0.8, abs=0.0)

    def test_frozen_entries_bit_identical(self):
        p = mlp.init_params(mlp.MlpSpec(2, 1, (3,), 0.0), seed=1)
        mask = np.zeros(p.n_params, dtype=bool)
        mask[: p.weights[0].size] = True  # only first weight matrix trainable
        g = np.ones(p.n_params)
        q = train.sgd_step(p, g, 0.5, trainable_mask=mask)
        assert np.array_equal(q.flatten()[~mask], p.flatten()[~mask])
        assert np.all(q.flatten()[mask] != p.flatten()[mask])

    def test_nonfinite_gradient_rejected(self):
        p = linear_params([[1.0]], [0.0])
        with pytest.raises(DivergenceError):
            train.sgd_step(p, np.array([np.nan, 0.0]), 0.1)


class TestWeightedEpoch:
    def setup_data(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 2))
        y = rng.normal(size=(n, 1))
        p = mlp.init_params(mlp.MlpSpec(2, 1, (4,), 0.0), seed=3)
        return p, x, y

    def test_unit_weights_match_unweighted(self):
        p, x, y = self.setup_data()
        cfg = train.TrainConfig(batch_size=8, learning_rate=0.01, l2=1e-6, seed=5)
        a, _, _ = train.weighted_epoch(p, x, y, np.ones(len(x)), cfg,
                                       np.random.default_rng(5))
        b, _, _ = train.weighted_epoch(p, x, y, np.ones(len(x)), cfg,
                                       np.random.default_rng(5))
        assert np.array_equal(a.flatten(), b.flatten())

    def test_zero_weights_only_l2_shrinkage(self):
        p, x, y = self.setup_data()
        cfg = train.TrainConfig(batch_size=10, learning_rate=0.1, l2=0.01)
        q, _, _ = train.weighted_epoch(p, x, y, np.zeros(len(x)), cfg,
                                       np.random.default_rng(0))
        w_mask = p.weight_entry_mask()
        steps = len(range(0, len(x), cfg.batch_size))
        expected = p.flatten().copy()
        for _ in range(steps):
            expected[w_mask] -= cfg.learning_rate * 2 * cfg.l2 * expected[w_mask]
        assert np.allclose(q.flatten(), expected, atol=1e-15)
        assert np.array_equal(q.flatten()[~w_mask], p.flatten()[~w_mask])

    def test_double_weights_half_rate_same_trajectory(self):
        # exact algebraic identity when l2 = 0
        p, x, y = self.setup_data()
        w = np.random.default_rng(2).uniform(0.5, 2.0, size=len(x))
        cfg1 = train.TrainConfig(batch_size=8, learning_rate=0.02, l2=0.0, seed=7)
        cfg2 = train.TrainConfig(batch_size=8, learning_rate=0.01, l2=0.0, seed=7)
        a, _, _ = train.weighted_epoch(p, x, y, w, cfg1, np.random.default_rng(7))
        b, _, _ = train.weighted_epoch(p, x, y, 2.0 * w, cfg2, np.random.default_rng(7))
        assert np.max(np.abs(a.flatten() - b.flatten())) <= 1e-12


class TestMetaTrainStep:
    def test_orthogonal_eval_gradient_freezes_params(self):
        # eval targets equal current predictions: zero eval gradient, all
        # alignments rectify to zero, and with l2=0 the step is a no-op
        p = linear_params([1.0, -0.5], 0.25)
        rng = np.random.default_rng(0)
        bx, by = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
        ex = rng.normal(size=(3, 2))
        ey = mlp.forward(p, ex).y_hat.copy()
        cfg = train.TrainConfig(strategy="meta", learning_rate=0.1, l2=0.0)
        q, wv, _ = train.meta_train_step(p, bx, by, ex, ey, cfg)
        assert np.array_equal(wv.values, np.zeros(4))
        assert np.array_equal(q.flatten(), p.flatten())

    def test_single_aligned_sample_is_plain_sgd(self):
        p = linear_params([0.5, 0.5], 0.0)
        bx = np.array([[1.0, 2.0]])
        by = np.array([[5.0]])
        # eval point identical to the training point: alignment positive
        cfg = train.TrainConfig(strategy="meta", learning_rate=0.05, l2=0.0)
        q, wv, _ = train.meta_train_step(p, bx, by, bx, by, cfg)
        assert np.array_equal(wv.values, [1.0])
        trace = mlp.forward(p, bx)
        g = mlp.per_example_grads(p, trace, by)[0]
        manual = train.sgd_step(p, g, 0.05)
        assert np.allclose(q.flatten(), manual.flatten(), atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_weights_match_bilevel_finite_difference_oracle(self, seed):
        # brute-force route: perturb each batch weight around zero, push it
        # through the inner SGD step, measure the eval loss, differentiate
        # numerically, then rectify and normalize
        rng = np.random.default_rng(1000 + seed)
        p = linear_params(rng.normal(size=2), rng.normal())
        bx, by = rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
        ex, ey = rng.normal(size=(2, 2)), rng.normal(size=(2, 1))
        phi, eps = 1.0, 1e-6

        def inner_then_eval(w):
            trace = mlp.forward(p, bx)
            grads = mlp.per_example_grads(p, trace, by)
            stepped = p.with_flat(p.flatten() - phi * (grads.T @ w) / len(w))
            return train.evaluate_mse(stepped, ex, ey)

        d_eval = np.zeros(3)
        for i in range(3):
            up, down = np.zeros(3), np.zeros(3)
            up[i], down[i] = eps, -eps
            d_eval[i] = (inner_then_eval(up) - inner_then_eval(down)) / (2 * eps)
        raw = np.maximum(-d_eval, 0.0)  # one weight-space descent step, eta=1
        total = raw.sum()
        oracle = raw / (total if total > 0 else 1.0)

        cfg = train.TrainConfig(strategy="meta", learning_rate=phi, l2=0.0)
        _, wv, _ = train.meta_train_step(p, bx, by, ex, ey, cfg)
        denom = np.maximum(np.abs(oracle), 1e-12)
        assert np.max(np.abs(wv.values - oracle) / denom) <= 1e-4

    def test_empty_eval_batch_rejected(self):
        p = linear_params([1.0], 0.0)
        cfg = train.TrainConfig(strategy="meta")
        with pytest.raises(StrategyUnavailableError):
            train.meta_train_step(p, np.ones((2, 1)), np.ones((2, 1)),
                                  np.empty((0, 1)), np.empty((0, 1)), cfg)


class TestFit:
    def test_patience_one_increasing_eval_stops_after_two(self):
        # training pulls predictions toward +1 while the eval target is -1,
        # so the eval loss strictly increases from the first epoch
        split = make_split(train_pairs=[(1.0, 1.0)] * 4,
                           eval_pairs=[(1.0, -1.0)] * 2)
        cfg = train.TrainConfig(strategy="unweighted", learning_rate=0.05,
                                batch_size=4, max_epochs=50, patience=1,
                                l2=0.0, seed=0)
        p0 = linear_params([0.0], 0.0)
        best, report = train.fit(p0, split, cfg)
        assert report.stopped_epoch == 2
        assert report.best_epoch == 1
        assert report.eval_losses[1] > report.eval_losses[0]
        # returned params are the epoch-1 snapshot: one further epoch from
        # them reproduces the epoch-2 eval loss
        assert report.best_eval_loss == report.eval_losses[0]

    def test_deterministic_report_and_params(self):
        rng = np.random.default_rng(3)
        train_pairs = [(x, 2 * x) for x in rng.normal(size=12)]
        eval_pairs = [(x, 2 * x) for x in rng.normal(size=4)]
        split = make_split(train_pairs, eval_pairs)
        cfg = train.TrainConfig(strategy="unweighted", learning_rate=0.05,
                                batch_size=5, max_epochs=8, patience=50, seed=9)
        p0 = linear_params([0.1], 0.0)
        best_a, rep_a = train.fit(p0, split, cfg)
        best_b, rep_b = train.fit(p0, split, cfg)
        assert rep_a.to_json() == rep_b.to_json()
        assert np.array_equal(best_a.flatten(), best_b.flatten())

    def test_best_epoch_is_minimum_of_trace(self):
        rng = np.random.default_rng(4)
        train_pairs = [(x, x + rng.normal() * 0.1) for x in rng.normal(size=20)]
        eval_pairs = [(x, x) for x in rng.normal(size=5)]
        split = make_split(train_pairs, eval_pairs)
        cfg = train.TrainConfig(strategy="unweighted", learning_rate=0.1,
                                batch_size=7, max_epochs=30, patience=5, seed=1)
        _, report = train.fit(linear_params([0.0], 0.0), split, cfg)
        assert report.best_eval_loss == min(report.eval_losses)
        assert report.eval_losses[report.best_epoch - 1] == report.best_eval_loss

    def test_training_subset_filters_pool(self):
        flags = [True, False, True, False, False, False]
        train_pairs = [(float(i), float(i)) for i in range(6)]
        split = make_split(train_pairs, [(0.0, 0.0)] * 2, extreme_train=flags)
        cfg = train.TrainConfig(strategy="unweighted", learning_rate=0.01,
                                batch_size=10, max_epochs=1, seed=0,
                                training_subset="extreme_only")
        _, report = train.fit(linear_params([0.0], 0.0), split, cfg)
        assert report.weight_stats[0]["n"] == 2
        cfg2 = train.TrainConfig(strategy="unweighted", learning_rate=0.01,
                                 batch_size=10, max_epochs=1, seed=0,
                                 training_subset="normal_only")
        _, report2 = train.fit(linear_params([0.0], 0.0), split, cfg2)
        assert report2.weight_stats[0]["n"] == 4

    def test_meta_without_extremes_unavailable(self):
        split = make_split([(1.0, 1.0)] * 4, [])
        split = dataio.SplitResult(train=split.train, validation=split.validation,
                                   test=(), eval_extreme=(), boundaries=(50, 90))
        cfg = train.TrainConfig(strategy="meta")
        with pytest.raises(StrategyUnavailableError):
            train.fit(linear_params([0.0], 0.0), split, cfg)

    def test_static_strategy_requires_weights(self):
        split = make_split([(1.0, 1.0)] * 4, [(1.0, 1.0)])
        with pytest.raises(ConfigError):
            train.fit(linear_params([0.0], 0.0), split,
                      train.TrainConfig(strategy="ipf"))

    def test_static_weight_audit_mean_one(self):
        rng = np.random.default_rng(8)
        train_pairs = [(x, x) for x in rng.normal(size=30)]
        split = make_split(train_pairs, [(0.0, 0.0)] * 3)
        w = rng.uniform(0.2, 3.0, size=30)
        w = w / w.mean()
        cfg = train.TrainConfig(strategy="ipf", learning_rate=0.01,
                                batch_size=8, max_epochs=2, seed=2)
        _, report = train.fit(linear_params([0.0], 0.0), split, cfg,
                              static_weights=WeightVector(w))
        for epoch in (1, 2):
            stats = [s for s in report.weight_stats if s["epoch"] == epoch]
            total = sum(s["sum"] for s in stats)
            count = sum(s["n"] for s in stats)
            assert total / count == pytest.approx(1.0, abs=1e-9)

    def test_meta_weight_audit_sums_zero_or_one(self):
        rng = np.random.default_rng(9)
        train_pairs = [(x, 2 * x + 0.1 * rng.normal()) for x in rng.normal(size=24)]
        eval_pairs = [(x, 2 * x) for x in rng.normal(size=6)]
        split = make_split(train_pairs, eval_pairs)
        cfg = train.TrainConfig(strategy="meta", learning_rate=0.02,
                                batch_size=6, eval_batch_size=4,
                                max_epochs=3, seed=3)
        _, report = train.fit(linear_params([0.0], 0.0), split, cfg)
        for s in report.weight_stats:
            assert abs(s["sum"] - 1.0) <= 1e-12 or s["sum"] == 0.0


class TestMonotonicityHarness:
    def test_passes_at_half_bound(self):
        for seed in (0, 1):
            toy = train.make_quadratic_toy(seed)
            phi = 0.5 * train.step_size_bound(toy)
            report = train.lemma_monotonicity_harness(toy, phi, steps=500)
            assert report.verdict == "PASS"
            assert report.eval_losses[-1] < report.eval_losses[0]

    def test_zero_rate_constant_trace(self):
        toy = train.make_quadratic_toy(2)
        report = train.lemma_monotonicity_harness(toy, 0.0, steps=50)
        assert report.passed
        assert len(set(report.eval_losses)) == 1

    def test_violations_at_hundredfold_bound(self):
        toy = train.make_quadratic_toy(0)
        phi = 100.0 * train.step_size_bound(toy)
        report = train.lemma_monotonicity_harness(toy, phi, steps=500)
        assert report.verdict == "FAIL"
        assert report.max_increase > train.MONOTONE_TOL

    def test_lipschitz_matches_numerical_hessian(self):
        toy = train.make_quadratic_toy(5)
        # numerical route: largest eigenvalue via finite differences of the
        # eval gradient around the start parameters
        p = toy.params0
        flat = p.flatten()
        h = 1e-6
        dim = flat.size
        hess = np.zeros((dim, dim))
        m = toy.eval_x.shape[0]
        for j in range(dim):
            up, down = flat.copy(), flat.copy()
            up[j] += h
            down[j] -= h
            gu = mlp.combined_gradient(p.with_flat(up),
                                       mlp.forward(p.with_flat(up), toy.eval_x),
                                       toy.eval_y, np.full(m, 1.0 / m))
            gd = mlp.combined_gradient(p.with_flat(down),
                                       mlp.forward(p.with_flat(down), toy.eval_x),
                                       toy.eval_y, np.full(m, 1.0 / m))
            hess[:, j] = (gu - gd) / (2 * h)
        numeric = np.linalg.eigvalsh(0.5 * (hess + hess.T)).max()
        assert train.lipschitz_constant(toy) == pytest.approx(numeric, rel=1e-6)
