"""Validity stub, simple residual gate, histogram gate and the per-step pipeline.

The pipeline state is kept as arrays with a leading trial axis
(:class:`DefenseBatch`) so Monte Carlo runs can advance many independent
trials per numpy call.  :class:`DefenseState` and :func:`defense_step` are
the single-trial view of the same machinery.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import CalibrationError, ConfigError, InvariantViolation
from .predictor import PredictorModel, ResidualInterval, nearest_rank
from .scenario import TrajectoryFamily


class Label(enum.IntEnum):
    PASSED_ALL = 0
    FAILED_EDAD = 1
    FAILED_SIMPLE = 2
    FAILED_ADDITIONAL = 3


Mode = Literal["simple", "additional"]


# --------------------------------------------------------------------------
# validity stub

def edad_stub(sequence, family: TrajectoryFamily | np.ndarray, tol: float) -> np.ndarray:
    """Pass each sensor whose history stays within ``tol`` of some member.

    ``sequence`` is ``(N, h)`` (one row per sensor); ``family`` is a family
    or a ``(M, h)`` member matrix aligned with the same ``h`` steps.
    """
    if not tol > 0:
        raise ConfigError("tol must be positive")
    seq = np.atleast_2d(np.asarray(sequence, dtype=float))
    fam = family.matrix() if isinstance(family, TrajectoryFamily) else np.atleast_2d(family)
    if fam.shape[1] != seq.shape[1]:
        raise ConfigError("sequence and family histories have different lengths")
    dev = np.max(np.abs(seq[:, None, :] - fam[None, :, :]), axis=2)
    return np.any(dev <= tol, axis=1)


# --------------------------------------------------------------------------
# simple gate

def simple_gate(readings, prediction, interval: ResidualInterval) -> np.ndarray:
    """Closed-interval residual test ``lo <= reading - prediction <= hi``."""
    d = np.asarray(readings, dtype=float) - prediction
    return (d >= interval.lo) & (d <= interval.hi)


# --------------------------------------------------------------------------
# histograms

@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 25
    support_lo: float = -1.0
    support_hi: float = 1.0

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("need at least 2 bins")
        if not self.support_lo < self.support_hi:
            raise ConfigError("support_lo must be below support_hi")

    @classmethod
    def from_interval(cls, interval: ResidualInterval, bins: int = 25) -> "HistogramSpec":
        return cls(bins, interval.lo, interval.hi)

    @property
    def width(self) -> float:
        return (self.support_hi - self.support_lo) / self.bins

    def centers(self) -> np.ndarray:
        return self.support_lo + (np.arange(self.bins) + 0.5) * self.width

    def bin_index(self, d, strict: bool = True):
        d = np.asarray(d, dtype=float)
        if strict and np.any((d < self.support_lo) | (d > self.support_hi)):
            raise InvariantViolation("difference outside the histogram support")
        idx = np.floor((d - self.support_lo) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)


@dataclass
class Histogram:
    counts: np.ndarray
    spec: HistogramSpec
    members: list[list[int]]


def build_histogram(differences, spec: HistogramSpec, sensors=None) -> Histogram:
    d = np.asarray(differences, dtype=float).ravel()
    sensors = np.arange(d.size) if sensors is None else np.asarray(sensors)
    idx = spec.bin_index(d)
    counts = np.bincount(idx, minlength=spec.bins)
    members = [[] for _ in range(spec.bins)]
    for s, b in zip(sensors.tolist(), idx.tolist()):
        members[b].append(s)
    return Histogram(counts, spec, members)


@dataclass(frozen=True)
class UpperBound:
    u: np.ndarray
    alpha: float
    spec: HistogramSpec

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.int64)
        if u.shape != (self.spec.bins,):
            raise ConfigError("bound must have one entry per bin")
        if np.any(u < 0):
            raise InvariantViolation("negative bin capacity")
        object.__setattr__(self, "u", u)


MIN_WINDOWS = 100


def upper_bound_from_counts(counts: np.ndarray, alpha: float, spec: HistogramSpec) -> UpperBound:
    """Per bin, the smallest ``u`` with ``P(count < u) >= alpha``."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must be in (0, 1)")
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[1] != spec.bins:
        raise ConfigError("counts must be (windows, bins)")
    if counts.shape[0] < MIN_WINDOWS:
        raise CalibrationError(f"need at least {MIN_WINDOWS} calibration windows, "
                               f"got {counts.shape[0]}")
    q = nearest_rank(np.sort(counts, axis=0), alpha)
    return UpperBound(q + 1, alpha, spec)


def calibrate_upper_bound(calibration_windows, alpha: float, spec: HistogramSpec) -> UpperBound:
    """Bound from many unattacked per-step difference sets."""
    rows = [np.bincount(spec.bin_index(w), minlength=spec.bins) for w in calibration_windows]
    if len(rows) < MIN_WINDOWS:
        raise CalibrationError(f"need at least {MIN_WINDOWS} calibration windows, got {len(rows)}")
    return upper_bound_from_counts(np.stack(rows), alpha, spec)


def additional_gate(hist: Histogram, bound: UpperBound, differences) -> set[int]:
    """Sensors to drop so that no bin holds more than ``u[b]`` entries.

    Inside an overfull bin the largest ``|difference|`` go first, ties to the
    lowest sensor index.  ``differences`` maps sensor index to difference
    (a dict, or a sequence indexed by sensor).
    """
    if hist.spec != bound.spec:
        raise ConfigError("histogram and bound use different bin layouts")
    excluded = set()
    for b in np.nonzero(hist.counts > bound.u)[0]:
        excess = int(hist.counts[b] - bound.u[b])
        ranked = sorted(hist.members[b], key=lambda s: (-abs(differences[s]), s))
        excluded.update(ranked[:excess])
    return excluded


def additional_exclusions(d: np.ndarray, candidate: np.ndarray, bound: UpperBound) -> np.ndarray:
    """Row-wise :func:`additional_gate` on ``(T, N)`` arrays; returns the
    excluded mask.  Only ``candidate`` entries are histogrammed."""
    T, N = d.shape
    B = bound.spec.bins
    rows, cols = np.nonzero(candidate)
    out = np.zeros((T, N), dtype=bool)
    if rows.size == 0:
        return out
    dv = d[rows, cols]
    key = rows * B + bound.spec.bin_index(dv)
    counts = np.bincount(key, minlength=T * B)
    excess = np.maximum(counts - np.tile(bound.u, T), 0)
    if not excess.any():
        return out
    order = np.lexsort((cols, -np.abs(dv), key))
    skey = key[order]
    rank = np.arange(skey.size) - np.searchsorted(skey, skey, side="left")
    hit = rank < excess[skey]
    out[rows[order][hit], cols[order][hit]] = True
    return out


# --------------------------------------------------------------------------
# pipeline

def _masked_sorted(values: np.ndarray, mask: np.ndarray):
    vals = np.sort(np.where(mask, values, np.inf), axis=1)
    return vals, mask.sum(axis=1)


def masked_median(sorted_vals: np.ndarray, counts: np.ndarray) -> np.ndarray:
    idx = np.arange(sorted_vals.shape[0])
    k = np.maximum(counts, 1)
    med = 0.5 * (sorted_vals[idx, (k - 1) // 2] + sorted_vals[idx, k // 2])
    return np.where(counts > 0, med, np.nan)


@dataclass
class StepResult:
    labels: np.ndarray        # (T, N) int8 Label values
    passed: np.ndarray        # (T, N) bool
    prediction: np.ndarray    # (T,)
    differences: np.ndarray   # (T, N)
    fallback: np.ndarray      # (T,) bool, nobody passed


class DefenseBatch:
    """Defense pipeline for ``n_trials`` independent trials run in lockstep.

    ``family_matrix`` (``(M, steps)``) drives the validity stub; with
    ``edad_tol=inf`` the stub passes everything.  Step ``j`` of the run is
    compared with column ``j`` of the family.
    """

    def __init__(self, predictor: PredictorModel, interval: ResidualInterval, mode: Mode = "simple",
                 bound: UpperBound | None = None, *, n_trials: int = 1, n_sensors: int,
                 family_matrix: np.ndarray | None = None, edad_tol: float = np.inf,
                 edad_window: int = 1):
        if mode not in ("simple", "additional"):
            raise ConfigError(f"unknown defense mode {mode!r}")
        if (bound is not None) != (mode == "additional"):
            raise ConfigError("an upper bound is required exactly in additional mode")
        if n_sensors > predictor.n_max and predictor.spec.algorithm == "bagged_trees":
            raise ConfigError(f"predictor supports at most {predictor.n_max} sensors")
        if edad_window < 1:
            raise ConfigError("edad_window must be >= 1")
        self.predictor = predictor
        self.interval = interval
        self.mode = mode
        self.bound = bound
        self.T = n_trials
        self.N = n_sensors
        self.family_matrix = family_matrix
        self.edad_tol = edad_tol
        self.edad_window = edad_window
        self.w = predictor.window
        self.j = 0
        self.prev_vals = np.full((self.T, self.N), np.inf)
        self.prev_count = np.zeros(self.T, dtype=np.int64)
        self.last_anchor = np.full(self.T, np.nan)
        self.history = np.full((self.T, max(self.w - 1, 0)), np.nan)
        self.n_hist = 0
        self.prev_prediction = np.full(self.T, np.nan)
        self._edad_active = family_matrix is not None and np.isfinite(edad_tol)
        if self._edad_active:
            fam = np.asarray(family_matrix, dtype=float)
            self._fam_order = np.argsort(fam, axis=0, kind="stable")
            self._fam_sorted = np.take_along_axis(fam, self._fam_order, axis=0)
            gaps = np.diff(self._fam_sorted, axis=0)
            # Members more than 2*tol apart can match a reading one at a time,
            # so a single run length per sensor suffices.
            self._sparse = gaps.size == 0 or float(gaps.min()) > 2 * edad_tol
            if self._sparse:
                self.run = np.zeros((self.T, self.N), dtype=np.int32)
                self.matched = np.full((self.T, self.N), -1, dtype=np.int64)
            else:
                self.run = np.zeros((self.T, self.N, fam.shape[0]), dtype=np.int32)

    @property
    def started(self) -> bool:
        return self.j > 0

    def increments(self) -> np.ndarray:
        inc = np.zeros((self.T, max(self.w - 1, 0)))
        h = self.n_hist
        for s in range(self.w - 1):
            if s < h:
                inc[:, s] = self.last_anchor - self.history[:, s]
            elif h > 0:
                inc[:, s] = inc[:, h - 1] * (s + 1) / h
        return inc

    def predict(self, truth: np.ndarray | None = None) -> np.ndarray:
        """Predictions for the current step (NaN before the first step)."""
        if not self.started:
            return np.full(self.T, np.nan)
        p = self.predictor.predict_batch(self.prev_vals, self.prev_count, self.increments(),
                                         truth=truth)
        empty = self.prev_count == 0
        if empty.any() and self.predictor.spec.algorithm != "perfect_oracle":
            p = np.where(empty, self.prev_prediction, p)
        return p

    def _edad(self, readings: np.ndarray) -> np.ndarray:
        if not self._edad_active:
            return np.ones((self.T, self.N), dtype=bool)
        need = min(self.edad_window, self.j + 1)
        if self._sparse:
            col = self._fam_sorted[:, self.j]
            M = col.size
            pos = np.searchsorted(col, readings)
            lo = np.clip(pos - 1, 0, M - 1)
            hi = np.clip(pos, 0, M - 1)
            use_hi = np.abs(col[hi] - readings) < np.abs(col[lo] - readings)
            near = np.where(use_hi, hi, lo)
            within = np.abs(col[near] - readings) <= self.edad_tol
            member = np.where(within, self._fam_order[near, self.j], -1)
            same = within & (member == self.matched)
            self.run = np.where(same, self.run + 1, within.astype(np.int32)).astype(np.int32)
            self.matched = member
            return self.run >= need
        col = self.family_matrix[:, self.j]
        within = np.abs(readings[:, :, None] - col[None, None, :]) <= self.edad_tol
        self.run = np.where(within, self.run + 1, 0).astype(np.int32)
        return np.any(self.run >= need, axis=2)

    def _commit(self, readings, passed, p):
        vals, count = _masked_sorted(readings, passed)
        anchor = np.where(count > 0, masked_median(vals, count), p)
        if self.w > 1:
            if self.started:
                self.history = np.concatenate([self.last_anchor[:, None], self.history[:, :-1]], axis=1)
                self.n_hist = min(self.n_hist + 1, self.w - 1)
        self.last_anchor = anchor
        self.prev_vals = vals
        self.prev_count = count
        self.prev_prediction = p
        self.j += 1

    def trusted_step(self, readings: np.ndarray, truth: np.ndarray | None = None) -> StepResult:
        """Advance through a step known to be unattacked (no residual gating)."""
        readings = np.asarray(readings, dtype=float).reshape(self.T, self.N)
        edad = self._edad(readings)
        p = self.predict(truth)
        if not self.started:
            vals, count = _masked_sorted(readings, edad)
            p = masked_median(vals, count)
        labels = np.where(edad, Label.PASSED_ALL, Label.FAILED_EDAD).astype(np.int8)
        d = readings - p[:, None]
        self._commit(readings, edad, p)
        return StepResult(labels, edad, p, d, edad.sum(axis=1) == 0)

    def gate(self, readings: np.ndarray, prediction: np.ndarray | None = None) -> StepResult:
        """Run the gates on this step's readings and advance the state.

        ``prediction`` must be what :meth:`predict` returned for this step
        (passed back so callers can hand it to an attacker first).
        """
        readings = np.asarray(readings, dtype=float).reshape(self.T, self.N)
        p = self.predict() if prediction is None else np.asarray(prediction, dtype=float).copy()
        edad = self._edad(readings)
        cold = np.isnan(p)
        if cold.any():
            vals, count = _masked_sorted(readings, edad)
            p = np.where(cold, masked_median(vals, count), p)
        d = readings - p[:, None]
        with np.errstate(invalid="ignore"):
            simple = edad & (d >= self.interval.lo) & (d <= self.interval.hi)
        passed = simple
        excluded = np.zeros_like(simple)
        if self.mode == "additional":
            excluded = additional_exclusions(np.where(simple, d, 0.0), simple, self.bound)
            passed = simple & ~excluded
        labels = np.full((self.T, self.N), Label.PASSED_ALL, dtype=np.int8)
        labels[~edad] = Label.FAILED_EDAD
        labels[edad & ~simple] = Label.FAILED_SIMPLE
        labels[excluded] = Label.FAILED_ADDITIONAL
        # When nobody passes, the next prediction restarts from the readings
        # that pass the validity stub, exactly like the very first step.
        empty = passed.sum(axis=1) == 0
        self._commit(readings, np.where(empty[:, None], edad, passed), p)
        return StepResult(labels, passed, p, d, passed.sum(axis=1) == 0)


@dataclass
class GateDecision:
    labels: np.ndarray
    prediction: float
    fallback: bool

    @property
    def passed(self) -> np.ndarray:
        return np.nonzero(self.labels == Label.PASSED_ALL)[0]


@dataclass
class DefenseState:
    """Single-trial defense state; ``bound`` is present iff mode is additional."""
    predictor: PredictorModel
    interval: ResidualInterval
    n_sensors: int
    mode: Mode = "simple"
    bound: UpperBound | None = None
    family: TrajectoryFamily | None = None
    edad_tol: float = np.inf
    edad_window: int = 10
    _batch: DefenseBatch = field(init=False, repr=False)

    def __post_init__(self):
        fam = None if self.family is None else self.family.matrix()
        self._batch = DefenseBatch(self.predictor, self.interval, self.mode, self.bound,
                                   n_trials=1, n_sensors=self.n_sensors, family_matrix=fam,
                                   edad_tol=self.edad_tol, edad_window=self.edad_window)

    @property
    def prev_deemed_unattacked(self) -> np.ndarray:
        k = self._batch.prev_count[0]
        return self._batch.prev_vals[0, :k].copy()

    @property
    def prev_prediction(self) -> float:
        return float(self._batch.prev_prediction[0])

    @property
    def step(self) -> int:
        return self._batch.j

    def predict(self, truth: float | None = None) -> float:
        t = None if truth is None else np.array([truth], dtype=float)
        return float(self._batch.predict(t)[0])

    def warm_up(self, readings, truth: float | None = None) -> None:
        """Consume a step known to be clean without gating it."""
        t = None if truth is None else np.array([truth], dtype=float)
        self._batch.trusted_step(np.asarray(readings, dtype=float)[None, :], t)


def defense_step(state: DefenseState, readings_at_j, truth: float | None = None,
                 prediction: float | None = None) -> tuple[GateDecision, DefenseState]:
    """One pipeline step: validity stub, prediction, simple gate and, in
    additional mode, the histogram gate.  Returns the decision and the
    (mutated) state."""
    if prediction is None:
        prediction = state.predict(truth)
    res = state._batch.gate(np.asarray(readings_at_j, dtype=float)[None, :],
                            np.array([prediction], dtype=float))
    return GateDecision(res.labels[0], float(res.prediction[0]), bool(res.fallback[0])), state
