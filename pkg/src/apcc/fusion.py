"""Maximum-likelihood fusion, the genie baseline and error metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigError
from .scenario import ObservationMatrix, Trajectory

FusionMethod = Literal["gaussian_mle", "laplacian_mle"]

METHOD_FOR_NOISE = {"gaussian": "gaussian_mle", "laplacian": "laplacian_mle"}


def _check(method):
    if method not in ("gaussian_mle", "laplacian_mle"):
        raise ConfigError(f"unknown fusion method {method!r}")


def fuse(method: FusionMethod, deemed_unattacked, prev_estimate: float) -> float:
    """Mean (Gaussian MLE) or median (Laplacian MLE); ``prev_estimate`` if empty.

    For an even count the median is the average of the two central values.
    """
    _check(method)
    x = np.asarray(deemed_unattacked, dtype=float)
    if x.size == 0:
        return float(prev_estimate)
    return float(np.mean(x) if method == "gaussian_mle" else np.median(x))


def fuse_batch(method: FusionMethod, values: np.ndarray, mask: np.ndarray,
               prev_estimate: np.ndarray) -> np.ndarray:
    """Row-wise :func:`fuse` over the entries of ``values`` where ``mask`` holds."""
    _check(method)
    n = mask.sum(axis=1)
    if method == "gaussian_mle":
        with np.errstate(invalid="ignore", divide="ignore"):
            est = np.where(mask, values, 0.0).sum(axis=1) / n
    else:
        srt = np.sort(np.where(mask, values, np.inf), axis=1)
        rows = np.arange(values.shape[0])
        k = np.maximum(n, 1)
        est = 0.5 * (srt[rows, (k - 1) // 2] + srt[rows, k // 2])
    return np.where(n > 0, est, prev_estimate)


@dataclass
class EstimateSeries:
    estimates: np.ndarray
    fallback_steps: set = field(default_factory=set)

    def __post_init__(self):
        self.estimates = np.asarray(self.estimates, dtype=float)
        if not np.all(np.isfinite(self.estimates)):
            raise ConfigError("estimates must be finite")

    @property
    def m(self) -> int:
        return self.estimates.size


def genie_estimate(method: FusionMethod, obs: ObservationMatrix) -> EstimateSeries:
    """Fuse only the truly unattacked readings at every step."""
    honest = ~obs.attacked_mask
    if np.any(honest.sum(axis=0) == 0):
        raise ConfigError("every sensor is attacked at some step; the genie estimate is undefined")
    est = fuse_batch(method, obs.readings.T, honest.T, np.zeros(obs.m))
    return EstimateSeries(est)


def _values(series):
    return series.estimates if isinstance(series, EstimateSeries) else np.asarray(series, float)


def squared_errors(estimates, truth: Trajectory) -> np.ndarray:
    e = _values(estimates)
    if e.shape[-1] != truth.m:
        raise ConfigError(f"estimate length {e.shape[-1]} does not match m={truth.m}")
    return (e - truth.values) ** 2


def mse(estimates, truth: Trajectory) -> float:
    """Average over trials of the per-trial mean squared error.

    ``estimates`` is one series, or a list / ``(trials, m)`` array of them.
    """
    if isinstance(estimates, (list, tuple)):
        estimates = np.stack([_values(s) for s in estimates])
    sq = squared_errors(estimates, truth)
    return float(np.mean(np.atleast_2d(sq).mean(axis=1)))


def nrmse(mse_value: float, truth: Trajectory | float) -> float:
    """``sqrt(mse / mean|y|)``; the denominator is the mean absolute truth."""
    denom = truth.mean_abs() if isinstance(truth, Trajectory) else float(truth)
    if not denom > 0:
        raise ConfigError("mean |y| is zero; NRMSE is undefined")
    if mse_value < 0:
        raise ConfigError("mse must be non-negative")
    return float(np.sqrt(mse_value / denom))


@dataclass
class MetricReport:
    mse: float
    nrmse: float
    mean_abs_y: float
    rmse: float
    per_step_sq_errors: list = field(default_factory=list)
    cell: dict = field(default_factory=dict)

    @classmethod
    def from_estimates(cls, estimates, truth: Trajectory, cell: dict | None = None) -> "MetricReport":
        sq = np.atleast_2d(squared_errors(estimates if not isinstance(estimates, (list, tuple))
                                          else np.stack([_values(s) for s in estimates]), truth))
        value = float(np.mean(sq.mean(axis=1)))
        return cls(value, nrmse(value, truth), truth.mean_abs(), float(np.sqrt(value)),
                   sq.mean(axis=0).tolist(), dict(cell or {}))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))
