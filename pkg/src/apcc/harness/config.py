"""Experiment configuration: defaults, JSON config files and validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..attacks import AttackConfig
from ..errors import ConfigError
from ..predictor import RegressorSpec
from ..scenario import NoiseModel


@dataclass
class ExperimentConfig:
    # noise and sensors
    noise: str = "gaussian"
    variances: list = field(default_factory=lambda: [1e-4])
    N: int = 50
    N_A: list = field(default_factory=lambda: [0])
    # defense
    modes: list = field(default_factory=lambda: ["simple"])
    alphas: list = field(default_factory=lambda: [0.9])
    beta: float = 0.999
    bins: int = 25
    fusion: str | None = None           # None picks the MLE matching the noise
    edad_tol_sigmas: float = 6.0
    edad_window: int = 1
    # attack
    attack: str = "none"
    selection: str = "nonrandom"
    side: str = "high"
    epsilon: float | None = None
    wf_capacity: str = "live"           # water-filling capacity accounting: live | static
    # trajectories
    m: int = 150
    run_steps: int | None = None        # steps per Monte Carlo trial; None = m
    dt: float = 1e-3
    v_max: float = 30.0
    amplitude: float = 3953.0
    family_count: int = 48
    family_seed: int = 1
    truth_mode: str = "fixed"
    truth_index: int = 0
    # predictor
    predictor: str = "bagged_trees"
    trees: int = 50
    max_depth: int = 8
    min_leaf: int = 5
    bootstrap_fraction: float = 1.0
    max_features: float | None = None
    window: int = 3
    n_max: int | None = None            # largest input count the predictor serves; None = N
    training_trials: int = 1
    calibration_runs: int = 200
    # Monte Carlo
    mc_runs: int = 10_000
    master_seed: int = 0
    chunk: int = 1000
    workers: int = 1
    # files
    artifact_dir: str | None = None
    output: str | None = None

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        for name in ("variances", "N_A", "modes", "alphas"):
            val = getattr(self, name)
            if not isinstance(val, (list, tuple)):
                setattr(self, name, [val])
        NoiseModel.from_variance(self.noise, 0.0)
        if not self.variances or any(not v > 0 for v in self.variances):
            raise ConfigError("variances must be positive")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        for na in self.N_A:
            if not 0 <= int(na) < self.N:
                raise ConfigError(f"every N_A must satisfy 0 <= N_A < N={self.N}, got {na}")
        for mode in self.modes:
            if mode not in ("simple", "additional"):
                raise ConfigError(f"unknown defense mode {mode!r}")
        for a in self.alphas:
            if not 0 < a < 1:
                raise ConfigError(f"alpha must be in (0, 1), got {a}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must be in (0, 1), got {self.beta}")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        if self.fusion not in (None, "gaussian_mle", "laplacian_mle"):
            raise ConfigError(f"unknown fusion method {self.fusion!r}")
        if not self.edad_tol_sigmas > 0 or self.edad_window < 1:
            raise ConfigError("edad_tol_sigmas must be positive and edad_window >= 1")
        for na in self.N_A:
            AttackConfig(self.attack, int(na) if self.attack != "none" else 0,
                         self.selection, self.side, self.epsilon, self.wf_capacity)
        if self.attack == "none" and any(self.N_A):
            raise ConfigError("attack 'none' only allows N_A = 0")
        if self.m < 2 or not self.dt > 0 or not self.v_max > 0 or not self.amplitude > 0:
            raise ConfigError("m >= 2 and positive dt, v_max, amplitude are required")
        if self.run_steps is not None and self.run_steps < 2:
            raise ConfigError("run_steps must be >= 2")
        if self.family_count < 2:
            raise ConfigError("family_count must be >= 2")
        if self.attack == "substitution" and self.family_count < max(self.N_A) + 1:
            raise ConfigError(f"substitution with N_A={max(self.N_A)} needs a family of at least "
                              f"{max(self.N_A) + 1} members")
        if self.truth_mode not in ("fixed", "resampled"):
            raise ConfigError(f"unknown truth_mode {self.truth_mode!r}")
        if not 0 <= self.truth_index < self.family_count:
            raise ConfigError("truth_index outside the family")
        self.regressor()
        if self.n_max is not None and self.n_max < self.N:
            raise ConfigError(f"n_max={self.n_max} is below N={self.N}")
        if self.window < 1 or self.training_trials < 1 or self.calibration_runs < 1:
            raise ConfigError("window, training_trials and calibration_runs must be >= 1")
        if self.mc_runs < 1:
            raise ConfigError("mc_runs must be >= 1")
        if self.chunk < 1 or self.workers < 1:
            raise ConfigError("chunk and workers must be >= 1")

    def regressor(self) -> RegressorSpec:
        return RegressorSpec(self.predictor, self.trees, self.max_depth, self.min_leaf,
                             self.bootstrap_fraction, self.max_features)

    def noise_model(self, variance: float) -> NoiseModel:
        return NoiseModel.from_variance(self.noise, variance)

    def fusion_method(self) -> str:
        if self.fusion:
            return self.fusion
        return "gaussian_mle" if self.noise == "gaussian" else "laplacian_mle"

    def attack_config(self, N_A: int) -> AttackConfig:
        kind = self.attack if N_A > 0 else "none"
        return AttackConfig(kind, N_A, self.selection, self.side, self.epsilon, self.wf_capacity)

    @property
    def predictor_n_max(self) -> int:
        return self.N if self.n_max is None else self.n_max

    @property
    def lead_in(self) -> int:
        return self.window

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)
