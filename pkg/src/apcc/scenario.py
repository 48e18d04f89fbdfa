"""Valid trajectories, sensor noise and noisy multi-sensor observations."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigError
from .rng import stream

# Slack for floating point roundoff in the smoothness check.
_STEP_ROUNDOFF = 1e-9


@dataclass(frozen=True)
class Trajectory:
    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ConfigError("a trajectory needs at least two samples")
        if not np.all(np.isfinite(v)):
            raise ConfigError("trajectory values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.size

    def max_step(self) -> float:
        return float(np.max(np.abs(np.diff(self.values))))

    def is_valid(self, v_max: float) -> bool:
        return self.max_step() <= v_max * self.dt * (1 + _STEP_ROUNDOFF) + _STEP_ROUNDOFF

    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.values)))

    def window(self, start: int, stop: int | None = None) -> "Trajectory":
        return Trajectory(self.values[start:stop], self.dt)


@dataclass(frozen=True)
class TrajectoryFamily:
    members: list[Trajectory]
    generation_seed: int
    v_max: float

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigError("empty trajectory family")
        m, dt = self.members[0].m, self.members[0].dt
        for tr in self.members:
            if tr.m != m or tr.dt != dt:
                raise ConfigError("family members must share m and dt")
            if not tr.is_valid(self.v_max):
                raise ConfigError("family member violates the speed bound")

    def __len__(self):
        return len(self.members)

    @property
    def m(self) -> int:
        return self.members[0].m

    @property
    def dt(self) -> float:
        return self.members[0].dt

    def matrix(self) -> np.ndarray:
        """Members stacked as a ``(count, m)`` array."""
        return np.stack([tr.values for tr in self.members])

    def window(self, start: int, stop: int | None = None) -> "TrajectoryFamily":
        return TrajectoryFamily([tr.window(start, stop) for tr in self.members],
                                self.generation_seed, self.v_max)

    def save(self, path) -> None:
        """Write the family as a columnar text file (one row per step)."""
        header = "\n".join([
            "apcc-family v1",
            f"m={self.m}",
            f"dt={self.dt!r}",
            f"v_max={self.v_max!r}",
            f"seed={self.generation_seed}",
            f"count={len(self)}",
        ])
        np.savetxt(path, self.matrix().T, fmt="%.17g", delimiter=",", header=header)

    @classmethod
    def load(cls, path) -> "TrajectoryFamily":
        meta = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                text = line[1:].strip()
                if "=" in text:
                    k, v = text.split("=", 1)
                    meta[k.strip()] = v.strip()
                elif text and text != "apcc-family v1":
                    raise ConfigError(f"{path}: unsupported family file header {text!r}")
        try:
            m, dt = int(meta["m"]), float(meta["dt"])
            v_max, seed = float(meta["v_max"]), int(meta["seed"])
        except KeyError as exc:
            raise ConfigError(f"{path}: missing header field {exc}") from None
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        if data.shape[0] != m:
            raise ConfigError(f"{path}: expected {m} rows, found {data.shape[0]}")
        return cls([Trajectory(col, dt) for col in data.T], seed, v_max)


def default_spacing(m: int, dt: float, v_max: float) -> float:
    # Two members can each travel at most v_max*(m-1)*dt, so 4x that keeps
    # them from ever crossing.
    return max(4.0 * v_max * (m - 1) * dt, 1.0)


def generate_family(seed: int, count: int, m: int, dt: float, v_max: float,
                    amplitude: float, *, spacing: float | None = None,
                    velocity_jitter: float = 0.05, smooth: int = 5) -> TrajectoryFamily:
    """Build ``count`` distinct smooth trajectories.

    Each member integrates a velocity process: Gaussian increments with
    standard deviation ``velocity_jitter * v_max * sqrt(dt)`` per step,
    clipped to ``[-v_max, v_max]`` and smoothed by a ``smooth``-point moving
    average.  Member ``i`` is then offset so its mean sits at
    ``amplitude + o_i * spacing`` with ``o = 0, +1, -1, +2, -2, ...``; member
    0 therefore has mean exactly ``amplitude``.
    """
    if count < 2:
        raise ConfigError("substitution attacks need a family of at least 2 members")
    if m < 2:
        raise ConfigError("m must be at least 2")
    for name, val in (("dt", dt), ("v_max", v_max), ("amplitude", amplitude)):
        if not val > 0:
            raise ConfigError(f"{name} must be positive, got {val}")
    if smooth < 1:
        raise ConfigError("smooth must be >= 1")
    if spacing is None:
        spacing = default_spacing(m, dt, v_max)
    if not spacing > 0:
        raise ConfigError("spacing must be positive")

    rng = stream(seed, "family")
    step_sd = velocity_jitter * v_max * np.sqrt(dt)
    kernel = np.ones(smooth) / smooth
    members = []
    for i in range(count):
        v0 = rng.uniform(-0.8, 0.8) * v_max
        vel = np.clip(v0 + np.cumsum(rng.normal(0.0, step_sd, m)), -v_max, v_max)
        if smooth > 1:
            padded = np.concatenate([np.full(smooth - 1, vel[0]), vel])
            vel = np.convolve(padded, kernel, mode="valid")
        pos = np.concatenate([[0.0], np.cumsum(vel[:-1] * dt)])
        rank = (i + 1) // 2 * (1 if i % 2 else -1)
        pos = pos - pos.mean() + amplitude + rank * spacing
        members.append(Trajectory(pos, dt))
    return TrajectoryFamily(members, seed, v_max)


@dataclass(frozen=True)
class NoiseModel:
    kind: Literal["gaussian", "laplacian"]
    scale: float

    def __post_init__(self):
        if self.kind not in ("gaussian", "laplacian"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if not self.scale >= 0:
            raise ConfigError("noise scale must be non-negative")

    @classmethod
    def from_variance(cls, kind: str, variance: float) -> "NoiseModel":
        if variance < 0:
            raise ConfigError("variance must be non-negative")
        scale = np.sqrt(variance) if kind == "gaussian" else np.sqrt(variance / 2.0)
        return cls(kind, float(scale))

    def variance(self) -> float:
        return self.scale ** 2 if self.kind == "gaussian" else 2.0 * self.scale ** 2

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance()))

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal(size)
        # inverse CDF of the Laplace distribution
        u = rng.random(size) - 0.5
        return -self.scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def describe(self) -> str:
        return f"{self.kind}(scale={self.scale!r})"


def sample_noise(model: NoiseModel, rng: np.random.Generator) -> float:
    return float(model.sample(rng))


@dataclass
class ObservationMatrix:
    readings: np.ndarray          # (N, m)
    truth: Trajectory
    attacked_mask: np.ndarray     # (N, m) bool
    noise: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.readings.shape != self.attacked_mask.shape:
            raise ConfigError("readings and attacked_mask shapes differ")
        if self.readings.shape[1] != self.truth.m:
            raise ConfigError("readings do not match the truth length")

    @property
    def N(self) -> int:
        return self.readings.shape[0]

    @property
    def m(self) -> int:
        return self.readings.shape[1]

    def copy(self) -> "ObservationMatrix":
        return ObservationMatrix(self.readings.copy(), self.truth, self.attacked_mask.copy(),
                                 None if self.noise is None else self.noise.copy())


def observe(truth: Trajectory, model: NoiseModel, N: int,
            rng: np.random.Generator) -> ObservationMatrix:
    """Noisy readings ``truth + noise`` for ``N`` sensors, all unattacked."""
    if N < 1:
        raise ConfigError("need at least one sensor")
    # drawn step-major so that prefixes of a stream give prefixes of the run
    noise = model.sample(rng, (truth.m, N)).T.copy()
    readings = truth.values[None, :] + noise
    return ObservationMatrix(readings, truth, np.zeros_like(readings, dtype=bool), noise)
