"""Typical-sensor predictor and the consistency interval used by the simple gate.

The predictor forecasts what an unattacked sensor will read at step ``j``
from the readings deemed unattacked at step ``j-1`` and the recent history
of their medians.  One bagged regression-tree forest is trained per input
count ``k``; at run time the forest matching the number of surviving
sensors is selected.

All forests work in coordinates relative to the median ("anchor") of the
latest input set: the features are the sorted deviations from the anchor
plus the anchor increments over the last ``window - 1`` steps, and the
target is the next reading minus the anchor.  This keeps a forest
independent of where a trajectory sits in absolute position.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _trees
from .errors import CalibrationError, ConfigError, PredictionUnavailable, TrainingError
from .scenario import NoiseModel, TrajectoryFamily

Algorithm = Literal["bagged_trees", "perfect_oracle", "last_prediction"]


@dataclass(frozen=True)
class RegressorSpec:
    algorithm: Algorithm = "bagged_trees"
    trees: int = 50
    max_depth: int = 8
    min_leaf: int = 5
    bootstrap_fraction: float = 1.0
    max_features: float | None = None   # fraction of features per split; None = all

    def __post_init__(self):
        if self.algorithm not in ("bagged_trees", "perfect_oracle", "last_prediction"):
            raise ConfigError(f"unknown regressor algorithm {self.algorithm!r}")
        if self.algorithm == "bagged_trees":
            if self.trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
                raise ConfigError("tree hyperparameters must be positive")
            if not 0 < self.bootstrap_fraction <= 1:
                raise ConfigError("bootstrap_fraction must be in (0, 1]")
            if self.max_features is not None and not 0 < self.max_features <= 1:
                raise ConfigError("max_features must be in (0, 1]")


@dataclass
class TrainingSet:
    """Per-count training records.

    ``X[k]`` rows hold ``k`` sorted deviations followed by ``window - 1``
    anchor increments; ``y[k]`` is the target relative to ``anchor[k]``.
    """
    X: dict[int, np.ndarray]
    y: dict[int, np.ndarray]
    anchor: dict[int, np.ndarray]
    window: int
    n_max: int
    truth: dict[int, np.ndarray] = field(default_factory=dict)

    def absolute_targets(self, k: int) -> np.ndarray:
        return self.y[k] + self.anchor[k]


def _increments(anchors: np.ndarray, j: int, window: int) -> np.ndarray:
    """Anchor increments ``a[j-1] - a[j-1-s]`` for ``s = 1..window-1``."""
    return np.array([anchors[j - 1] - anchors[j - 1 - s] for s in range(1, window)])


def history_increments(latest: float, history, window: int) -> np.ndarray:
    """Increment features from the latest anchor and older anchors (newest first).

    Missing older anchors are extrapolated from the oldest increment that is
    available, or taken as zero when there is none.
    """
    hist = list(history)[: window - 1]
    inc = np.zeros(window - 1)
    for s in range(1, window):
        if s <= len(hist):
            inc[s - 1] = latest - hist[s - 1]
        elif hist:
            inc[s - 1] = inc[len(hist) - 1] * s / len(hist)
    return inc


def build_training_set(family: TrajectoryFamily, model: NoiseModel, N_max: int,
                       trials: int, rng: np.random.Generator, window: int = 3) -> TrainingSet:
    """Records from unattacked readings of every family member.

    For each member, trial, step ``j >= window`` and count ``k``: a random
    ``k``-subset of the ``N_max`` readings at ``j-1`` (sorted), the medians
    of independent ``k``-subsets at the earlier steps, and the reading of a
    random sensor at ``j`` as target.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if N_max < 1:
        raise ConfigError("N_max must be >= 1")
    if window < 1:
        raise ConfigError("window must be >= 1")
    if family.m <= window:
        raise ConfigError("trajectories are too short for the requested window")
    m = family.m
    rows = {k: [] for k in range(1, N_max + 1)}
    targets = {k: [] for k in range(1, N_max + 1)}
    anchors_out = {k: [] for k in range(1, N_max + 1)}
    truth_out = {k: [] for k in range(1, N_max + 1)}
    steps = np.arange(window, m)
    for tr in family.members:
        for _ in range(trials):
            readings = tr.values[:, None] + model.sample(rng, (m, N_max))
            target_sensor = rng.integers(0, N_max, size=m)
            target = readings[np.arange(m), target_sensor]
            for k in range(1, N_max + 1):
                pick = np.argsort(rng.random((m, N_max)), axis=1)[:, :k]
                vals = np.sort(np.take_along_axis(readings, pick, axis=1), axis=1)
                anchors = 0.5 * (vals[:, (k - 1) // 2] + vals[:, k // 2])
                dev = vals[steps - 1] - anchors[steps - 1, None]
                inc = np.stack([anchors[steps - 1] - anchors[steps - 1 - s]
                                for s in range(1, window)], axis=1) if window > 1 \
                    else np.empty((steps.size, 0))
                rows[k].append(np.hstack([dev, inc]))
                targets[k].append(target[steps] - anchors[steps - 1])
                anchors_out[k].append(anchors[steps - 1])
                truth_out[k].append(tr.values[steps])
    cat = lambda d: {k: np.concatenate(v) for k, v in d.items()}
    return TrainingSet(cat(rows), cat(targets), cat(anchors_out), window, N_max, cat(truth_out))


@dataclass
class Forest:
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ConfigError(f"expected {self.n_features} features, got {X.shape}")
        return _trees.predict_forest(X, self.feat, self.thr, self.left, self.right, self.value)


def fit_forest(X: np.ndarray, y: np.ndarray, spec: RegressorSpec,
               rng: np.random.Generator) -> Forest:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, F = X.shape
    nodes = _trees.max_nodes(spec.max_depth)
    shape = (spec.trees, nodes)
    feat = np.full(shape, -1, dtype=np.int64)
    thr = np.zeros(shape)
    left = np.full(shape, -1, dtype=np.int64)
    right = np.full(shape, -1, dtype=np.int64)
    value = np.zeros(shape)
    order = _trees.presort(X)
    n_boot = max(1, int(round(spec.bootstrap_fraction * n)))
    mtry = F if spec.max_features is None else max(1, int(round(spec.max_features * F)))
    for t in range(spec.trees):
        weights = np.bincount(rng.integers(0, n, size=n_boot), minlength=n).astype(np.float64)
        keys = rng.random((nodes, F)) if mtry < F else np.zeros((1, 1))
        _trees.build_tree(X, y, order, weights, spec.max_depth, spec.min_leaf, keys, mtry,
                          feat[t], thr[t], left[t], right[t], value[t])
    return Forest(feat, thr, left, right, value, F)


@dataclass
class PredictorModel:
    spec: RegressorSpec
    n_max: int
    window: int
    per_count_models: dict[int, Forest]
    trained_on: str = ""
    _stacked: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.spec.algorithm == "bagged_trees":
            missing = [k for k in range(1, self.n_max + 1) if k not in self.per_count_models]
            if missing:
                raise TrainingError(f"no model for input counts {missing}")

    def features(self, prev_sorted: np.ndarray, history=()) -> tuple[float, np.ndarray]:
        """Anchor and feature row for one sorted input set."""
        k = prev_sorted.size
        anchor = 0.5 * (prev_sorted[(k - 1) // 2] + prev_sorted[k // 2])
        inc = history_increments(anchor, history, self.window)
        return anchor, np.concatenate([prev_sorted - anchor, inc])

    def predict(self, prev_deemed_unattacked, prev_prediction: float | None = None,
                history=(), truth: float | None = None) -> float:
        """Prediction for the current step.

        ``history`` holds the anchors of earlier steps, newest first.  The
        perfect oracle needs ``truth``.
        """
        algo = self.spec.algorithm
        if algo == "perfect_oracle":
            if truth is None:
                raise ConfigError("the perfect oracle needs the true value")
            return float(truth)
        prev = np.sort(np.asarray(prev_deemed_unattacked, dtype=float))
        k = prev.size
        if k == 0:
            raise PredictionUnavailable("no sensor was deemed unattacked at the previous step")
        if k > self.n_max:
            raise ConfigError(f"{k} inputs exceed N_max={self.n_max}")
        anchor, row = self.features(prev, history)
        if algo == "last_prediction":
            return float(anchor)
        return float(anchor + self.per_count_models[k].predict(row[None, :])[0])

    def stacked(self):
        if self._stacked is None:
            ks = range(1, self.n_max + 1)
            self._stacked = tuple(
                np.ascontiguousarray(np.stack([getattr(self.per_count_models[k], a) for k in ks]))
                for a in ("feat", "thr", "left", "right", "value"))
        return self._stacked

    def predict_batch(self, sorted_vals: np.ndarray, counts: np.ndarray,
                      increments: np.ndarray, truth: np.ndarray | None = None) -> np.ndarray:
        """Row-wise predictions; ``sorted_vals`` rows hold ``counts`` valid
        ascending entries first.  Rows with a zero count give NaN."""
        algo = self.spec.algorithm
        counts = np.asarray(counts, dtype=np.int64)
        if algo == "perfect_oracle":
            return np.asarray(truth, dtype=float).copy()
        if algo == "last_prediction":
            R = sorted_vals.shape[0]
            k = np.maximum(counts, 1)
            idx = np.arange(R)
            med = 0.5 * (sorted_vals[idx, (k - 1) // 2] + sorted_vals[idx, k // 2])
            return np.where(counts > 0, med, np.nan)
        return _trees.predict_relative(np.ascontiguousarray(sorted_vals, dtype=float), counts,
                                       np.ascontiguousarray(increments, dtype=float),
                                       *self.stacked())


def train(spec: RegressorSpec, training: TrainingSet | None, rng: np.random.Generator | None = None,
          n_max: int | None = None, window: int | None = None, trained_on: str = "") -> PredictorModel:
    """Fit one forest per input count (bagged trees) or wrap a test double."""
    if spec.algorithm != "bagged_trees":
        n = n_max if n_max is not None else (training.n_max if training else 1)
        w = window if window is not None else (training.window if training else 1)
        return PredictorModel(spec, n, w, {}, trained_on)
    if training is None or rng is None:
        raise TrainingError("bagged trees need training data and an rng")
    models = {}
    for k in range(1, training.n_max + 1):
        X = training.X.get(k)
        if X is None or X.shape[0] == 0:
            raise TrainingError(f"no training records for input count k={k}")
        models[k] = fit_forest(X, training.y[k], spec, rng)
    return PredictorModel(spec, training.n_max, training.window, models, trained_on)


@dataclass(frozen=True)
class ResidualInterval:
    lo: float
    hi: float
    beta: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise CalibrationError(f"degenerate interval [{self.lo}, {self.hi}]")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must be in (0, 1)")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, d):
        return (d >= self.lo) & (d <= self.hi)


def nearest_rank(sorted_values: np.ndarray, p: float):
    """Nearest-rank empirical quantile of an ascending sample."""
    n = sorted_values.shape[0]
    rank = int(np.ceil(p * n - 1e-9))
    return sorted_values[min(max(rank, 1), n) - 1]


MIN_RESIDUALS = 1000


def interval_from_residuals(residuals, beta: float) -> ResidualInterval:
    """Equal-tail ``beta`` interval of a residual sample (nearest-rank)."""
    if not 0 < beta < 1:
        raise ConfigError("beta must be in (0, 1)")
    r = np.sort(np.asarray(residuals, dtype=float).ravel())
    if r.size < MIN_RESIDUALS:
        raise CalibrationError(f"need at least {MIN_RESIDUALS} residuals, got {r.size}")
    lo = float(nearest_rank(r, (1 - beta) / 2))
    hi = float(nearest_rank(r, (1 + beta) / 2))
    if not lo < hi:
        raise CalibrationError(f"residuals give a degenerate interval [{lo}, {hi}]")
    return ResidualInterval(lo, hi, beta)


def calibrate_interval(model: PredictorModel, heldout: TrainingSet, beta: float) -> ResidualInterval:
    """Interval from the residuals ``reading - prediction`` on held-out records."""
    res = []
    for k in range(1, heldout.n_max + 1):
        X = heldout.X[k]
        if model.spec.algorithm == "perfect_oracle":
            pred = heldout.truth[k]
        elif model.spec.algorithm == "last_prediction":
            pred = heldout.anchor[k]
        else:
            pred = heldout.anchor[k] + model.per_count_models[k].predict(X)
        res.append(heldout.absolute_targets(k) - pred)
    return interval_from_residuals(np.concatenate(res), beta)
