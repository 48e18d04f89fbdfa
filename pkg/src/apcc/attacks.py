"""Attackers: blind valid-trajectory substitution, the edge attack and the
water-filling attack.

Each attacker only receives the view it is entitled to.  The substitution
planner works from the trajectory family alone; the edge attacker also sees
the current prediction and the consistency interval; the water-filling
attacker additionally sees the histogram bound and the honest differences.
The ``*_batch`` functions operate on ``(T, N)`` arrays, one row per trial.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .defense import HistogramSpec, UpperBound
from .errors import ConfigError, PlanError
from .predictor import ResidualInterval
from .scenario import NoiseModel, ObservationMatrix, TrajectoryFamily

Kind = Literal["none", "substitution", "edge", "water_filling"]
Selection = Literal["random", "nonrandom"]
Side = Literal["high", "low"]
Capacity = Literal["live", "static"]


@dataclass(frozen=True)
class AttackConfig:
    kind: Kind = "none"
    N_A: int = 0
    selection: Selection = "nonrandom"
    side: Side = "high"
    epsilon: float | None = None    # edge inset; None means 1/1000 of the interval width
    capacity: Capacity = "live"     # water filling: do hijacked sensors free their bins?

    def __post_init__(self):
        if self.kind not in ("none", "substitution", "edge", "water_filling"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.selection not in ("random", "nonrandom"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.side not in ("high", "low"):
            raise ConfigError(f"unknown side {self.side!r}")
        if self.N_A < 0:
            raise ConfigError("N_A must be non-negative")
        if self.kind == "none" and self.N_A:
            raise ConfigError("kind 'none' requires N_A == 0")
        if self.capacity not in ("live", "static"):
            raise ConfigError(f"unknown capacity accounting {self.capacity!r}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    def check(self, N: int) -> None:
        if not self.N_A < N:
            raise ConfigError(f"N_A={self.N_A} must be below N={N}")

    def inset(self, interval: ResidualInterval) -> float:
        eps = interval.width / 1000.0 if self.epsilon is None else self.epsilon
        if eps >= interval.width:
            raise ConfigError("epsilon must be smaller than the interval width")
        return eps


# --------------------------------------------------------------------------
# views

@dataclass(frozen=True)
class SubstitutionView:
    family: TrajectoryFamily


@dataclass(frozen=True)
class EdgeView:
    prediction: float
    interval: ResidualInterval


@dataclass(frozen=True)
class WaterFillingView:
    prediction: float
    interval: ResidualInterval
    bound: UpperBound


# --------------------------------------------------------------------------
# plans

@dataclass(frozen=True)
class AttackPlan:
    """Columnar plan: entry ``i`` sets ``sensor[i]`` at ``step[i]`` to ``value[i]``."""
    steps: np.ndarray
    sensors: np.ndarray
    values: np.ndarray
    N_A: int

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        sensors = np.asarray(self.sensors, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if not steps.shape == sensors.shape == values.shape:
            raise PlanError("plan columns have different lengths")
        if not np.all(np.isfinite(values)):
            raise PlanError("injected values must be finite")
        if steps.size:
            per_step = np.bincount(steps)
            if np.any(per_step[per_step > 0] != self.N_A):
                raise PlanError(f"every planned step must attack exactly {self.N_A} sensors")
            keys = steps * (sensors.max() + 1) + sensors
            if np.unique(keys).size != keys.size:
                raise PlanError("a sensor is attacked twice in one step")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "values", values)

    @classmethod
    def empty(cls) -> "AttackPlan":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0), 0)

    def __len__(self):
        return self.steps.size

    def at(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.steps == step
        return self.sensors[sel], self.values[sel]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sensor", "value"])
            for s, i, v in zip(self.steps.tolist(), self.sensors.tolist(), self.values.tolist()):
                w.writerow([s, i, repr(v)])

    @classmethod
    def from_csv(cls, path, N_A: int) -> "AttackPlan":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return cls.empty() if N_A == 0 else cls(np.empty(0), np.empty(0), np.empty(0), N_A)
        return cls(data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2], N_A)


def apply_plan(plan: AttackPlan, obs: ObservationMatrix) -> ObservationMatrix:
    """Copy of ``obs`` with the planned readings injected and labelled."""
    if plan.steps.size and (plan.sensors.min() < 0 or plan.sensors.max() >= obs.N
                            or plan.steps.min() < 0 or plan.steps.max() >= obs.m):
        raise PlanError("plan addresses a sensor or step outside the observation matrix")
    out = obs.copy()
    out.readings[plan.sensors, plan.steps] = plan.values
    out.attacked_mask[plan.sensors, plan.steps] = True
    return out


# --------------------------------------------------------------------------
# substitution

def substitution_attack(family: TrajectoryFamily, truth_index: int, N_A: int, N: int,
                        model: NoiseModel, rng: np.random.Generator) -> AttackPlan:
    """Replace ``N_A`` randomly chosen sensors with other family members.

    The attacker is blind, so sensor selection is always uniform.  Members
    are drawn without replacement from those other than the truth, and
    every step gets a fresh noise draw.
    """
    sensors, members = substitution_draw(len(family), truth_index, N_A, N, rng)
    if N_A == 0:
        return AttackPlan.empty()
    m = family.m
    fam = family.matrix()
    noise = model.sample(rng, (m, N_A))
    values = fam[members].T + noise      # (m, N_A)
    steps = np.repeat(np.arange(m), N_A)
    return AttackPlan(steps, np.tile(sensors, m), values.ravel(), N_A)


def substitution_draw(count: int, truth_index: int, N_A: int, N: int, rng: np.random.Generator):
    """Attacked sensors and the distinct non-truth members they will carry."""
    if not 0 <= N_A < N:
        raise ConfigError(f"need 0 <= N_A < N, got N_A={N_A}, N={N}")
    if count < N_A + 1:
        raise ConfigError(f"substitution needs at least N_A + 1 = {N_A + 1} family members, "
                          f"family has {count}")
    if not 0 <= truth_index < count:
        raise ConfigError("truth_index outside the family")
    others = np.delete(np.arange(count), truth_index)
    members = rng.permutation(others)[:N_A]
    sensors = np.sort(rng.permutation(N)[:N_A])
    return sensors, members


# --------------------------------------------------------------------------
# sensor selection shared by the knowledgeable attackers

def select_sensors(d: np.ndarray, N_A: int, selection: Selection, side: Side,
                   keys: np.ndarray | None = None) -> np.ndarray:
    """Indices ``(T, N_A)`` of the sensors to hijack, in pairing order.

    Nonrandom selection takes the sensors whose honest differences lie
    farthest toward the edge opposite to ``side`` (ties to the lowest
    index); random selection ranks sensors by the supplied uniform keys.
    """
    T, N = d.shape
    if N_A == 0:
        return np.empty((T, 0), dtype=np.int64)
    if selection == "random":
        if keys is None:
            raise ConfigError("random selection needs random keys")
        return np.argsort(keys, axis=1, kind="stable")[:, :N_A]
    toward = d if side == "high" else -d
    return np.argsort(toward, axis=1, kind="stable")[:, :N_A]


# --------------------------------------------------------------------------
# edge attack

def edge_values(prediction, interval: ResidualInterval, side: Side, epsilon: float):
    if not 0 < epsilon < interval.width:
        raise ConfigError("epsilon must lie in (0, interval width)")
    offset = interval.hi - epsilon if side == "high" else interval.lo + epsilon
    return np.asarray(prediction, dtype=float) + offset


def edge_attack_batch(prediction: np.ndarray, interval: ResidualInterval, d: np.ndarray, N_A: int,
                      selection: Selection, side: Side, epsilon: float,
                      keys: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    idx = select_sensors(d, N_A, selection, side, keys)
    vals = np.repeat(edge_values(prediction, interval, side, epsilon)[:, None], N_A, axis=1)
    return idx, vals


def edge_attack(view: EdgeView, unattacked_readings_at_j, N_A: int, selection: Selection = "nonrandom",
                side: Side = "high", epsilon: float | None = None,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Attacked sensor indices and injected values for one step.

    Every injected value sits ``epsilon`` inside the chosen edge of the
    interval around the prediction.
    """
    x = np.asarray(unattacked_readings_at_j, dtype=float)
    if not 0 <= N_A < x.size:
        raise ConfigError(f"need 0 <= N_A < N, got N_A={N_A}, N={x.size}")
    eps = view.interval.width / 1000.0 if epsilon is None else epsilon
    if selection == "random" and rng is None:
        raise ConfigError("random selection needs an rng")
    keys = rng.random((1, x.size)) if selection == "random" else None
    d = x[None, :] - view.prediction
    idx, vals = edge_attack_batch(np.array([view.prediction]), view.interval, d, N_A,
                                  selection, side, eps, keys)
    return idx[0], vals[0]


# --------------------------------------------------------------------------
# water-filling attack

def damage_order(spec: HistogramSpec, side: Side) -> np.ndarray:
    """Bins from most to least damaging: by signed center, chosen side first."""
    order = np.argsort(spec.centers(), kind="stable")
    return order[::-1] if side == "high" else order


def fill_bins(capacity: np.ndarray, N_A: int, spec: HistogramSpec, side: Side) -> np.ndarray:
    """Greedy allocation ``(T, bins)`` of ``N_A`` attacks.

    Bins are filled in damage order up to their capacity; whatever does not
    fit goes to the bin whose center is closest to zero difference.
    """
    capacity = np.maximum(np.atleast_2d(capacity), 0)
    order = damage_order(spec, side)
    cap = capacity[:, order]
    before = np.cumsum(cap, axis=1) - cap
    alloc_o = np.clip(N_A - before, 0, cap)
    alloc = np.zeros_like(capacity)
    alloc[:, order] = alloc_o
    leftover = N_A - alloc.sum(axis=1)
    alloc[:, int(np.argmin(np.abs(spec.centers())))] += leftover
    return alloc


def water_filling_batch(prediction: np.ndarray, interval: ResidualInterval, bound: UpperBound,
                        d: np.ndarray, N_A: int, selection: Selection, side: Side,
                        keys: np.ndarray | None = None,
                        capacity: Capacity = "live") -> tuple[np.ndarray, np.ndarray]:
    """Attacked indices and values ``(T, N_A)`` for one step of many trials.

    With ``live`` accounting the capacity of a bin is ``u[b]`` minus the
    honest sensors that remain in it once the hijacked sensors have vacated
    their own bins.  ``static`` accounting subtracts the full unattacked
    histogram instead, so hijacking a sensor frees nothing.
    """
    T, N = d.shape
    spec = bound.spec
    idx = select_sensors(d, N_A, selection, side, keys)
    if N_A == 0:
        return idx, np.empty((T, 0))
    honest = (d >= spec.support_lo) & (d <= spec.support_hi)
    if capacity == "live":
        np.put_along_axis(honest, idx, False, axis=1)
    bins = spec.bin_index(np.where(honest, d, spec.support_lo))
    key = np.arange(T)[:, None] * spec.bins + bins
    counts = np.bincount(key[honest], minlength=T * spec.bins).reshape(T, spec.bins)
    alloc = fill_bins(bound.u[None, :] - counts, N_A, spec, side)
    # slot s is the s-th allocation in damage order, paired with idx[:, s]
    order = damage_order(spec, side)
    ends = np.cumsum(alloc[:, order], axis=1)
    pos = (ends[:, None, :] <= np.arange(N_A)[None, :, None]).sum(axis=2)
    slot_bins = order[pos]
    vals = prediction[:, None] + spec.centers()[slot_bins]
    return idx, vals


def water_filling_attack(view: WaterFillingView, unattacked_differences, N_A: int,
                         selection: Selection = "nonrandom", side: Side = "high",
                         rng: np.random.Generator | None = None,
                         capacity: Capacity = "live") -> tuple[np.ndarray, np.ndarray]:
    """Single-step water-filling plan: attacked indices and injected values."""
    d = np.asarray(unattacked_differences, dtype=float)[None, :]
    if not 0 <= N_A < d.shape[1]:
        raise ConfigError(f"need 0 <= N_A < N, got N_A={N_A}, N={d.shape[1]}")
    if selection == "random" and rng is None:
        raise ConfigError("random selection needs an rng")
    keys = rng.random(d.shape) if selection == "random" else None
    idx, vals = water_filling_batch(np.array([view.prediction]), view.interval, view.bound, d,
                                    N_A, selection, side, keys, capacity)
    return idx[0], vals[0]
