"""Per-sample loss weights for training on long-tailed targets.

Three strategies are provided:

* histogram inverse-frequency weights (``ipf_weights``): bin the training
  targets, weight each sample by the inverse of its bin count;
* tail-model weights (``evt_weights``): fit a generalized Pareto
  distribution above a threshold and weight tail samples by the inverse of
  their estimated exceedance probability, giving normal samples a small
  constant weight;
* gradient-alignment weights (``meta_weights``): rectified dot products
  between per-example training gradients and an evaluation-set gradient,
  normalized to sum to one (or to zero when nothing aligns).

The static strategies (histogram and tail) are rescaled to mean 1 over the
training set so the effective learning rate stays comparable across
strategies; gradient-alignment weights sum to exactly 0 or 1.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DegenerateFeatureError,
    DimensionError,
    GpdFitError,
    InsufficientTailError,
    NumericError,
)

DEFAULT_BIN_COUNT = 20

# below this magnitude the shape parameter is treated as exactly zero
# (exponential tail), keeping the CDF continuous in the shape
_SHAPE_EPS = 1e-9

# lower bound keeps the likelihood well behaved; upper bound is generous
# for environmental data
_SHAPE_BOUNDS = (-0.5, 1.0)


@dataclass(frozen=True)
class BinHistogram:
    """Equal-width histogram of training targets with per-bin weights.

    ``bin_weights[j]`` is ``1/counts[j]`` for nonempty bins and 0.0 for
    empty ones (no sample can fall there).
    """

    edges: np.ndarray
    counts: np.ndarray
    bin_weights: np.ndarray

    def __post_init__(self):
        if self.edges.size < 3:
            raise DimensionError("need at least 2 bins")
        if np.any(np.diff(self.edges) <= 0):
            raise NumericError("histogram edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return self.counts.size


@dataclass(frozen=True)
class GpdFit:
    """Fitted generalized Pareto tail model.

    ``threshold`` is the exceedance cut (raw target units), ``scale`` the
    GPD scale, ``shape`` the GPD shape, and ``tail_fraction`` the empirical
    fraction of training samples above the threshold, which estimates the
    unconditional probability of landing in the tail.
    """

    threshold: float
    scale: float
    shape: float
    tail_fraction: float
    log_likelihood: float

    def __post_init__(self):
        if not self.scale > 0:
            raise NumericError(f"scale must be > 0, got {self.scale}")
        if not 0.0 < self.tail_fraction < 1.0:
            raise NumericError(f"tail_fraction must lie in (0,1), got {self.tail_fraction}")

    @property
    def upper_bound(self) -> float:
        """Supremum of the supported range (finite only for shape < 0)."""
        if self.shape < 0:
            return self.threshold - self.scale / self.shape
        return np.inf

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "scale": self.scale,
            "shape": self.shape,
            "tail_fraction": self.tail_fraction,
            "log_likelihood": self.log_likelihood,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative per-sample loss weights.

    ``sums_to_one`` records whether the vector was normalized to total 1
    (gradient-alignment weights) as opposed to the mean-1 rescaling used
    by the static strategies.
    """

    values: np.ndarray
    sums_to_one: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise DimensionError("weights must form a 1-D vector")
        if not np.all(np.isfinite(v)):
            raise NumericError("weights must be finite")
        if np.any(v < 0):
            raise NumericError("weights must be nonnegative")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


def ipf_weights(train_targets: np.ndarray, bins: int = DEFAULT_BIN_COUNT) -> tuple[BinHistogram, WeightVector]:
    """Inverse-frequency weights over an equal-width histogram.

    Samples in bin j get raw weight 1/n_j; the vector is then rescaled to
    mean 1 over the training set. All samples sharing a bin share a weight.
    """
    targets = np.asarray(train_targets, dtype=np.float64).ravel()
    if targets.size < 1:
        raise DimensionError("need at least one training target")
    if bins < 2:
        raise DimensionError("need at least 2 bins")
    lo, hi = targets.min(), targets.max()
    if lo == hi:
        raise DegenerateFeatureError(
            "all training targets identical; histogram would collapse to one bin"
        )
    counts, edges = np.histogram(targets, bins=bins, range=(lo, hi))
    bin_weights = np.zeros(bins)
    nonempty = counts > 0
    bin_weights[nonempty] = 1.0 / counts[nonempty]

    idx = np.clip(np.searchsorted(edges, targets, side="right") - 1, 0, bins - 1)
    raw = bin_weights[idx]
    rescaled = raw / raw.mean()
    hist = BinHistogram(edges=edges, counts=counts, bin_weights=bin_weights)
    return hist, WeightVector(rescaled)


def gpd_cdf(z, shape: float):
    """Generalized Pareto CDF at standardized exceedance z = (y - mu)/scale.

    Shape 0 uses the exponential form 1 - exp(-z); otherwise
    1 - (1 + shape*z)^(-1/shape). Accepts scalars or arrays.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise ValueError("z must be >= 0")
    if abs(shape) < _SHAPE_EPS:
        out = 1.0 - np.exp(-z)
    else:
        base = 1.0 + shape * z
        if np.any(base <= 0):
            raise ValueError("1 + shape*z must stay positive (z beyond support)")
        out = 1.0 - base ** (-1.0 / shape)
    return float(out) if out.ndim == 0 else out


def gpd_survival(z, shape: float):
    """Upper tail 1 - CDF, computed directly to avoid cancellation near 1."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise ValueError("z must be >= 0")
    if abs(shape) < _SHAPE_EPS:
        out = np.exp(-z)
    else:
        base = 1.0 + shape * z
        if np.any(base <= 0):
            raise ValueError("1 + shape*z must stay positive (z beyond support)")
        out = base ** (-1.0 / shape)
    return float(out) if out.ndim == 0 else out


def _gpd_negloglik(theta: np.ndarray, excess: np.ndarray) -> float:
    scale, shape = theta
    if scale <= 0:
        return 1e12
    if abs(shape) < _SHAPE_EPS:
        return excess.size * np.log(scale) + excess.sum() / scale
    base = 1.0 + shape * excess / scale
    if np.any(base <= 0):
        return 1e12
    return excess.size * np.log(scale) + (1.0 + 1.0 / shape) * np.log(base).sum()


def fit_gpd(exceedances: np.ndarray, threshold: float, n_total: int) -> GpdFit:
    """Maximum-likelihood GPD fit to values above ``threshold``.

    Starts from method-of-moments estimates plus a small grid of shape
    values and keeps the best converged bounded optimum
    (shape in [-0.5, 1]). ``n_total`` is the training-set size used for
    the empirical tail fraction.
    """
    y = np.asarray(exceedances, dtype=np.float64).ravel()
    if y.size < 5:
        raise InsufficientTailError(
            f"need at least 5 exceedances to fit a tail model, got {y.size}"
        )
    if np.any(y <= threshold):
        raise ValueError("all exceedances must lie strictly above the threshold")
    if not 0 < y.size < n_total:
        raise DimensionError("n_total must exceed the number of exceedances")
    excess = y - threshold
    if excess.max() == excess.min():
        raise DegenerateFeatureError("exceedances are all equal; tail has no spread")

    xbar = excess.mean()
    s2 = excess.var()
    if s2 > 0:
        shape0 = 0.5 * (1.0 - xbar * xbar / s2)
        scale0 = 0.5 * xbar * (xbar * xbar / s2 + 1.0)
    else:
        shape0, scale0 = 0.1, xbar
    shape0 = float(np.clip(shape0, _SHAPE_BOUNDS[0] + 0.05, _SHAPE_BOUNDS[1] - 0.05))
    scale0 = max(scale0, 1e-8)

    starts = [(scale0, shape0)] + [(scale0, s) for s in (-0.2, 0.0, 0.2, 0.5)]
    bounds = [(1e-10, None), _SHAPE_BOUNDS]
    best = None
    diagnostics = []
    for start in starts:
        res = minimize(_gpd_negloglik, np.asarray(start), args=(excess,),
                       method="L-BFGS-B", bounds=bounds)
        diagnostics.append(f"start={start} success={res.success} nll={res.fun:.6g}")
        if res.success and np.isfinite(res.fun):
            if best is None or res.fun < best.fun:
                best = res
    if best is None:
        raise GpdFitError(
            "tail-model likelihood optimization failed; attempts: " + "; ".join(diagnostics)
        )
    scale, shape = best.x
    return GpdFit(
        threshold=float(threshold),
        scale=float(scale),
        shape=float(shape),
        tail_fraction=y.size / n_total,
        log_likelihood=float(-best.fun),
    )


def tail_weight_raw(values: np.ndarray, fit: GpdFit, normal_weight: float) -> np.ndarray:
    """Unrescaled tail weights: 1 / estimated exceedance probability.

    For y >= threshold the probability is tail_fraction times the GPD
    survival of the excess; below the threshold the weight is the constant
    ``normal_weight``. For negative shapes, values beyond the support
    bound are clipped just inside it before weighting.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    out = np.full(v.shape, float(normal_weight))
    in_tail = v >= fit.threshold
    if np.any(in_tail):
        y = v[in_tail]
        if fit.shape < 0:
            y = np.minimum(y, fit.upper_bound - 1e-9)
        z = (y - fit.threshold) / fit.scale
        out[in_tail] = 1.0 / (fit.tail_fraction * gpd_survival(z, fit.shape))
    if not np.all(np.isfinite(out)):
        raise NumericError("tail weights overflowed even after support clipping")
    return out


def evt_weights(
    train_targets: np.ndarray,
    fit: GpdFit,
    normal_weight: float = 1.0,
    rescale: bool = True,
) -> WeightVector:
    """Tail-model weights for the whole training set, rescaled to mean 1.

    Pass ``rescale=False`` to keep the raw inverse-probability scale
    (useful for audits; training always uses the rescaled form).
    """
    if not normal_weight > 0:
        raise DimensionError("normal_weight must be > 0")
    raw = tail_weight_raw(train_targets, fit, normal_weight)
    if rescale:
        raw = raw / raw.mean()
    return WeightVector(raw)


def meta_weights(train_grads: np.ndarray, eval_grad: np.ndarray) -> WeightVector:
    """Rectified, normalized alignment of each training gradient with the
    evaluation gradient.

    u_i = max(<g_eval, g_i>, 0); weights are u_i / sum(u) when any u_i is
    positive, otherwise the all-zero vector (the denominator's degenerate
    guard adds 1 so 0/1 = 0). The result sums to exactly 0 or 1 and is
    invariant to positive rescaling of the evaluation gradient.
    """
    grads = np.asarray(train_grads, dtype=np.float64)
    g_eval = np.asarray(eval_grad, dtype=np.float64).ravel()
    if grads.ndim != 2 or grads.shape[1] != g_eval.size:
        raise DimensionError(
            f"train_grads {grads.shape} incompatible with eval_grad ({g_eval.size},)"
        )
    if not (np.all(np.isfinite(grads)) and np.all(np.isfinite(g_eval))):
        raise NumericError("gradients must be finite")
    aligned = np.maximum(grads @ g_eval, 0.0)
    total = aligned.sum()
    if total == 0.0:
        return WeightVector(aligned, sums_to_one=True)
    return WeightVector(aligned / total, sums_to_one=True)


def write_weights_csv(path: str | Path, origins: np.ndarray, weights: WeightVector) -> Path:
    """Audit export: one (window origin, weight) row per training sample."""
    origins = np.asarray(origins).ravel()
    if origins.size != len(weights):
        raise DimensionError("origins and weights must have equal length")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "weight"])
        for o, w in zip(origins, weights.values):
            writer.writerow([int(o), repr(float(w))])
    return path
