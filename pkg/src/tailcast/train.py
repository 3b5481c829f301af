"""Training loops: plain/weighted SGD and gradient-alignment reweighting.

One optimizer (plain SGD) is used everywhere so the reweighting strategies
differ only in the per-sample weights entering the batch gradient
``(1/n) * sum_i w_i * g_i`` plus the L2 term. The gradient-alignment
("meta") step recomputes its weights every batch from the alignment
between per-example training gradients and the gradient of an extreme-only
evaluation batch; because the weights are normalized, the step is
invariant to the scale of the evaluation gradient, which also absorbs the
weight-space step size of the underlying bilevel scheme.

``fit`` adds seeded shuffling, epoch-level evaluation on the extreme
evaluation pool, best-epoch tracking and early stopping. A quadratic-toy
harness empirically checks that the meta step never increases the
evaluation loss when the learning rate respects the smoothness bound
``2n / (L * sigma^2)``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import mlp
from .dataio import SplitResult, WindowSample, extreme_mask, stack_windows
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericError,
    StrategyUnavailableError,
)
from .reweight import WeightVector, meta_weights

STRATEGIES = ("unweighted", "ipf", "evt", "meta")
TRAINING_SUBSETS = ("both", "normal_only", "extreme_only")

# single-step increase tolerated before the monotonicity harness fails
MONOTONE_TOL = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    strategy: str = "unweighted"
    learning_rate: float = 1e-4
    batch_size: int = 500
    eval_batch_size: int = 500
    max_epochs: int = 1000
    patience: int = 50
    l2: float = 1e-6
    seed: int = 0
    training_subset: str = "both"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.training_subset not in TRAINING_SUBSETS:
            raise ConfigError(
                f"training_subset must be one of {TRAINING_SUBSETS}, got {self.training_subset!r}"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")


@dataclass
class TrainReport:
    """Per-epoch losses, best-epoch bookkeeping and weight audit trail."""

    strategy: str
    seed: int
    train_losses: list[float] = field(default_factory=list)
    eval_losses: list[float] = field(default_factory=list)
    baseline_eval_loss: float = float("nan")
    best_epoch: int = 0
    best_eval_loss: float = float("inf")
    stopped_epoch: int = 0
    weight_stats: list[dict] = field(default_factory=list)
    checkpoint_ref: str | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "train_losses": self.train_losses,
            "eval_losses": self.eval_losses,
            "baseline_eval_loss": self.baseline_eval_loss,
            "best_epoch": self.best_epoch,
            "best_eval_loss": self.best_eval_loss,
            "stopped_epoch": self.stopped_epoch,
            "weight_stats": self.weight_stats,
            "checkpoint_ref": self.checkpoint_ref,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def sgd_step(
    params: mlp.ParamSet,
    gradient: np.ndarray,
    learning_rate: float,
    trainable_mask: np.ndarray | None = None,
) -> mlp.ParamSet:
    """One plain SGD update on the trainable entries; frozen entries are
    carried over bit-identically."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(gradient)):
        raise DivergenceError("non-finite gradient")
    flat = params.flatten()
    if trainable_mask is None:
        updated = flat - learning_rate * gradient
    else:
        mask = np.asarray(trainable_mask, dtype=bool)
        updated = flat.copy()
        updated[mask] = flat[mask] - learning_rate * gradient[mask]
    return params.with_flat(updated)


def evaluate_mse(params: mlp.ParamSet, x: np.ndarray, y: np.ndarray) -> float:
    """Unweighted mean squared error in inference mode (normalized units)."""
    trace = mlp.forward(params, x)
    return float(np.mean(mlp.per_example_loss(trace, y)))


def _weight_stat(epoch: int, batch: int, values: np.ndarray) -> dict:
    return {
        "epoch": epoch,
        "batch": batch,
        "n": int(values.size),
        "min": float(values.min()),
        "mean": float(values.mean()),
        "max": float(values.max()),
        "sum": float(values.sum()),
        "zero_fraction": float(np.mean(values == 0.0)),
    }


def weighted_epoch(
    params: mlp.ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    trainable_mask: np.ndarray | None = None,
    epoch: int = 0,
) -> tuple[mlp.ParamSet, float, list[dict]]:
    """One pass of statically weighted SGD over shuffled mini-batches.

    Each batch applies ``(1/n) * sum_i w_i * g_i`` plus the L2 gradient.
    Returns updated parameters, the mean weighted batch loss, and
    per-batch weight statistics.
    """
    n = x.shape[0]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ConfigError(f"weights have shape {weights.shape}, expected ({n},)")
    order = rng.permutation(n)
    losses = []
    stats = []
    for b, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start : start + config.batch_size]
        bx, by, bw = x[idx], y[idx], weights[idx]
        use_dropout = params.spec.dropout_rate > 0.0
        trace = mlp.forward(params, bx, train=use_dropout, rng=rng if use_dropout else None)
        per_loss = mlp.per_example_loss(trace, by)
        losses.append(float(np.mean(bw * per_loss)))
        grad = mlp.combined_gradient(params, trace, by, bw / idx.size)
        grad += mlp.l2_penalty_grad(params, config.l2, trainable_mask)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient in epoch {epoch}, batch {b}")
        params = sgd_step(params, grad, config.learning_rate, trainable_mask)
        stats.append(_weight_stat(epoch, b, bw))
    return params, float(np.mean(losses)), stats


def meta_train_step(
    params: mlp.ParamSet,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
    config: TrainConfig,
    masks: Sequence[np.ndarray] | None = None,
    trainable_mask: np.ndarray | None = None,
) -> tuple[mlp.ParamSet, WeightVector, dict]:
    """One gradient-alignment update.

    The batch weights start at zero, so the inner weighted step is a no-op
    and the evaluation gradient is taken at the current parameters. Each
    training example is then weighted by its rectified, normalized
    alignment with that evaluation gradient, and the parameters move along
    ``(1/n) * sum_i w_i * g_i`` plus the L2 gradient. When no example
    aligns, the data term vanishes and only the L2 term acts.

    ``masks`` lets the caller share one dropout mask per hidden layer
    across the training and evaluation passes of this step.
    """
    if eval_x.shape[0] == 0:
        raise StrategyUnavailableError("gradient-alignment step needs a nonempty eval batch")
    use_dropout = params.spec.dropout_rate > 0.0 and masks is not None

    eval_trace = mlp.forward(params, eval_x, train=use_dropout, masks=masks if use_dropout else None)
    m = eval_x.shape[0]
    eval_grad = mlp.combined_gradient(params, eval_trace, eval_y, np.full(m, 1.0 / m))

    train_trace = mlp.forward(params, batch_x, train=use_dropout, masks=masks if use_dropout else None)
    per_grads = mlp.per_example_grads(params, train_trace, batch_y)
    wv = meta_weights(per_grads, eval_grad)

    n = batch_x.shape[0]
    grad = per_grads.T @ wv.values / n
    grad += mlp.l2_penalty_grad(params, config.l2, trainable_mask)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient in gradient-alignment step")
    new_params = sgd_step(params, grad, config.learning_rate, trainable_mask)

    losses = {
        "train_weighted_loss": float(np.sum(wv.values * mlp.per_example_loss(train_trace, batch_y)) / n),
        "eval_batch_loss": float(np.mean(mlp.per_example_loss(eval_trace, eval_y))),
    }
    return new_params, wv, losses


def _subset_indices(windows: Sequence[WindowSample], subset: str) -> np.ndarray:
    flags = extreme_mask(windows)
    if subset == "both":
        return np.arange(len(windows))
    if subset == "normal_only":
        return np.where(~flags)[0]
    return np.where(flags)[0]


def fit(
    params: mlp.ParamSet,
    split: SplitResult,
    config: TrainConfig,
    static_weights: WeightVector | None = None,
    trainable_mask: np.ndarray | None = None,
) -> tuple[mlp.ParamSet, TrainReport]:
    """Full training run with early stopping on the extreme evaluation set.

    Static strategies (ipf/evt) require ``static_weights`` aligned to
    ``split.train``; the unweighted strategy uses all-one weights; the
    meta strategy draws an evaluation batch per step from
    ``split.eval_extreme``. After every epoch the unweighted MSE on the
    full extreme evaluation pool is measured; the best post-epoch
    parameters are kept and training stops once ``patience`` epochs pass
    without improvement.
    """
    pool_idx = _subset_indices(split.train, config.training_subset)
    if pool_idx.size == 0:
        raise DataError(f"training subset {config.training_subset!r} is empty")
    pool = [split.train[i] for i in pool_idx]
    x, y = stack_windows(pool)

    if config.strategy in ("ipf", "evt"):
        if static_weights is None:
            raise ConfigError(f"strategy {config.strategy!r} needs static weights")
        if len(static_weights) != len(split.train):
            raise ConfigError("static weights must align with the full training split")
        weights = static_weights.values[pool_idx]
    elif config.strategy == "unweighted":
        weights = np.ones(pool_idx.size)
    else:
        weights = None  # meta: recomputed per batch

    if config.strategy == "meta" and not split.eval_extreme:
        raise StrategyUnavailableError(
            "meta strategy needs a nonempty extreme evaluation set"
        )
    if split.eval_extreme:
        monitor_x, monitor_y = stack_windows(split.eval_extreme)
    else:
        if not split.validation:
            raise DataError("no validation windows to monitor early stopping on")
        warnings.warn("no extreme validation windows; monitoring the full validation set")
        monitor_x, monitor_y = stack_windows(split.validation)

    rng = np.random.default_rng(config.seed)
    report = TrainReport(strategy=config.strategy, seed=config.seed)
    report.baseline_eval_loss = evaluate_mse(params, monitor_x, monitor_y)

    best_params = params.copy()
    for epoch in range(1, config.max_epochs + 1):
        if config.strategy == "meta":
            params, train_loss, stats = _meta_epoch(
                params, x, y, monitor_x, monitor_y, config, rng, trainable_mask, epoch
            )
        else:
            params, train_loss, stats = weighted_epoch(
                params, x, y, weights, config, rng, trainable_mask, epoch
            )
        report.train_losses.append(train_loss)
        report.weight_stats.extend(stats)

        eval_loss = evaluate_mse(params, monitor_x, monitor_y)
        report.eval_losses.append(eval_loss)
        if eval_loss < report.best_eval_loss:
            report.best_eval_loss = eval_loss
            report.best_epoch = epoch
            best_params = params.copy()
        report.stopped_epoch = epoch
        if epoch - report.best_epoch >= config.patience:
            break
    return best_params, report


def _meta_epoch(params, x, y, eval_x, eval_y, config, rng, trainable_mask, epoch):
    n = x.shape[0]
    n_eval = eval_x.shape[0]
    order = rng.permutation(n)
    losses = []
    stats = []
    for b, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start : start + config.batch_size]
        m = config.eval_batch_size
        eval_idx = rng.choice(n_eval, size=m, replace=m > n_eval)
        masks = None
        if params.spec.dropout_rate > 0.0:
            masks = mlp._draw_masks(params.spec, 1, rng, shared=True)
        params, wv, step_losses = meta_train_step(
            params, x[idx], y[idx], eval_x[eval_idx], eval_y[eval_idx],
            config, masks=masks, trainable_mask=trainable_mask,
        )
        losses.append(step_losses["train_weighted_loss"])
        stats.append(_weight_stat(epoch, b, wv.values))
    return params, float(np.mean(losses)), stats


# ---------------------------------------------------------------------------
# quadratic-toy harness for the descent guarantee of the alignment step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticToy:
    """Linear model with squared loss; train and eval share a generator.

    The evaluation loss is an exact quadratic in the parameters, so its
    smoothness constant follows from the eval Gram matrix and the descent
    behavior of the alignment step can be checked without slack.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    params0: mlp.ParamSet


def make_quadratic_toy(
    seed: int,
    n_train: int = 12,
    n_eval: int = 8,
    dim: int = 3,
    start_distance: float = 2.0,
    noise_scale: float = 0.05,
) -> QuadraticToy:
    """Shared-optimum linear regression toy, offset from its solution."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=dim)
    b_true = rng.normal()
    tx = rng.normal(size=(n_train, dim))
    ty = (tx @ w_true + b_true + noise_scale * rng.normal(size=n_train))[:, None]
    ex = rng.normal(size=(n_eval, dim))
    ey = (ex @ w_true + b_true + noise_scale * rng.normal(size=n_eval))[:, None]

    spec = mlp.MlpSpec(input_dim=dim, output_dim=1, hidden_widths=(), dropout_rate=0.0)
    direction = rng.normal(size=dim + 1)
    direction /= np.linalg.norm(direction)
    start = np.concatenate([w_true, [b_true]]) + start_distance * direction
    params0 = mlp.ParamSet(spec, [start[:dim].reshape(dim, 1)], [start[dim:]])
    return QuadraticToy(tx, ty, ex, ey, params0)


def lipschitz_constant(toy: QuadraticToy) -> float:
    """Largest Hessian eigenvalue of the evaluation loss.

    For the linear model with per-example loss ``(x.w + b - y)^2`` the
    Hessian is ``(2/M) * A^T A`` with A the eval inputs augmented by a
    ones column for the bias.
    """
    a = np.hstack([toy.eval_x, np.ones((toy.eval_x.shape[0], 1))])
    hessian = 2.0 * a.T @ a / a.shape[0]
    return float(np.linalg.eigvalsh(hessian).max())


def gradient_bound(toy: QuadraticToy) -> float:
    """Largest per-example training gradient norm at the start parameters."""
    trace = mlp.forward(toy.params0, toy.train_x)
    grads = mlp.per_example_grads(toy.params0, trace, toy.train_y)
    return float(np.linalg.norm(grads, axis=1).max())


def step_size_bound(toy: QuadraticToy) -> float:
    """The smoothness step bound 2n / (L * sigma^2) for full-batch steps."""
    n = toy.train_x.shape[0]
    sigma = gradient_bound(toy)
    return 2.0 * n / (lipschitz_constant(toy) * sigma**2)


@dataclass
class MonotonicityReport:
    eval_losses: list[float]
    max_increase: float
    passed: bool
    learning_rate: float
    lipschitz: float
    gradient_bound: float

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def lemma_monotonicity_harness(
    toy: QuadraticToy,
    learning_rate: float,
    steps: int = 500,
) -> MonotonicityReport:
    """Run full-batch alignment steps and track the evaluation loss.

    Passes when no step increases the full evaluation loss by more than
    ``MONOTONE_TOL``; at learning rates far above the smoothness bound the
    report records the violations instead. A zero learning rate leaves the
    parameters untouched, giving a constant trace.
    """
    params = toy.params0.copy()
    losses = [evaluate_mse(params, toy.eval_x, toy.eval_y)]
    if learning_rate == 0.0:
        losses = losses * (steps + 1)
    else:
        config = TrainConfig(
            strategy="meta",
            learning_rate=learning_rate,
            batch_size=toy.train_x.shape[0],
            eval_batch_size=toy.eval_x.shape[0],
            max_epochs=1,
            l2=0.0,
            seed=0,
        )
        for _ in range(steps):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    params, _, _ = meta_train_step(
                        params, toy.train_x, toy.train_y, toy.eval_x, toy.eval_y, config
                    )
            except NumericError:
                # blown past float range: an unambiguous violation
                losses.append(float("inf"))
                break
            losses.append(evaluate_mse(params, toy.eval_x, toy.eval_y))
    diffs = np.diff(losses)
    if diffs.size == 0:
        max_increase = 0.0
    elif np.any(np.isnan(diffs)):
        max_increase = float("inf")
    else:
        max_increase = float(diffs.max())
    return MonotonicityReport(
        eval_losses=losses,
        max_increase=max_increase,
        passed=bool(max_increase <= MONOTONE_TOL),
        learning_rate=learning_rate,
        lipschitz=lipschitz_constant(toy),
        gradient_bound=gradient_bound(toy),
    )
