"""Monte Carlo engine: calibration runs and attacked trials.

Many trials advance in lockstep, one numpy row per trial.  Every random
draw of a trial comes from streams keyed by ``(master_seed, purpose,
trial_id)``, and every reduction inside a step is row-wise, so a trial's
numbers do not depend on which other trials share its chunk.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field

import numpy as np

from .. import attacks as atk
from ..attacks import AttackConfig
from ..defense import DefenseBatch, HistogramSpec, Label, upper_bound_from_counts
from ..errors import ArtifactMismatch, ConfigError
from ..fusion import fuse_batch
from ..predictor import build_training_set, interval_from_residuals, train
from ..rng import stream
from ..scenario import NoiseModel, TrajectoryFamily, generate_family
from .artifacts import DefenseArtifacts, header_hash
from .config import ExperimentConfig


# --------------------------------------------------------------------------
# shared inputs

@functools.lru_cache(maxsize=8)
def _family(seed, count, steps, dt, v_max, amplitude) -> TrajectoryFamily:
    return generate_family(seed, count, steps, dt, v_max, amplitude)


def build_family(cfg: ExperimentConfig, m: int | None = None) -> TrajectoryFamily:
    """Family covering the trusted lead-in plus ``m`` evaluated steps."""
    steps = (cfg.m if m is None else m) + cfg.lead_in
    return _family(cfg.family_seed, cfg.family_count, steps, cfg.dt, cfg.v_max, cfg.amplitude)


def predictor_header(cfg: ExperimentConfig, variance: float) -> dict:
    return {
        "family": [cfg.family_seed, cfg.family_count, cfg.m + cfg.lead_in, cfg.dt, cfg.v_max,
                   cfg.amplitude],
        "noise": [cfg.noise, float(variance)],
        "regressor": [cfg.predictor, cfg.trees, cfg.max_depth, cfg.min_leaf,
                      cfg.bootstrap_fraction, cfg.max_features],
        "n_max": cfg.predictor_n_max,
        "window": cfg.window,
        "training_trials": cfg.training_trials,
        "master_seed": cfg.master_seed,
    }


def artifact_header(cfg: ExperimentConfig, variance: float) -> dict:
    h = predictor_header(cfg, variance)
    h.update({
        "N": cfg.N,
        "beta": cfg.beta,
        "alphas": sorted(float(a) for a in cfg.alphas),
        "bins": cfg.bins,
        "calibration_runs": cfg.calibration_runs,
        "edad": [cfg.edad_tol_sigmas, cfg.edad_window],
    })
    return h


_PREDICTORS: dict = {}


def trained_predictor(cfg: ExperimentConfig, variance: float):
    """Train (or fetch from the in-process cache) the predictor for one noise level."""
    key = header_hash(predictor_header(cfg, variance))
    if key in _PREDICTORS:
        return _PREDICTORS[key]
    spec = cfg.regressor()
    model = cfg.noise_model(variance)
    desc = f"{model.describe()} family_seed={cfg.family_seed}"
    if spec.algorithm != "bagged_trees":
        pm = train(spec, None, n_max=cfg.predictor_n_max, window=cfg.window, trained_on=desc)
    else:
        fam = build_family(cfg)
        ts = build_training_set(fam, model, cfg.predictor_n_max, cfg.training_trials,
                                stream(cfg.master_seed, "train", 0), cfg.window)
        pm = train(spec, ts, stream(cfg.master_seed, "bootstrap", 0), trained_on=desc)
    _PREDICTORS[key] = pm
    return pm


@dataclass
class Setup:
    """Everything the engine needs for one noise level."""
    cfg: ExperimentConfig
    variance: float
    noise: NoiseModel
    family: np.ndarray          # (members, steps)
    artifacts: DefenseArtifacts | None = None

    @classmethod
    def create(cls, cfg: ExperimentConfig, variance: float, artifacts=None, m: int | None = None):
        fam = build_family(cfg, m)
        return cls(cfg, float(variance), cfg.noise_model(variance), fam.matrix(), artifacts)

    @property
    def steps(self) -> int:
        return self.family.shape[1]

    @property
    def edad_tol(self) -> float:
        return self.cfg.edad_tol_sigmas * self.noise.std if self.noise.std > 0 else 1e-9

    def truth_indices(self, trial_ids) -> np.ndarray:
        if self.cfg.truth_mode == "fixed":
            return np.full(len(trial_ids), self.cfg.truth_index)
        count = self.family.shape[0]
        return np.array([stream(self.cfg.master_seed, "truth", t).integers(count) for t in trial_ids])


# --------------------------------------------------------------------------
# simulation

@dataclass
class SimResult:
    trial_ids: np.ndarray
    sq_defense: np.ndarray        # per trial, summed over evaluated steps
    sq_genie: np.ndarray
    mean_abs_y: np.ndarray
    fallback_steps: np.ndarray
    rejected: np.ndarray          # (T, 3): EDAD, simple, additional rejections summed
    leaked: np.ndarray            # attacked readings that reached fusion
    honest_rejected: np.ndarray
    m: int
    trace: dict = field(default_factory=dict)

    @property
    def mse_defense(self):
        return self.sq_defense / self.m

    @property
    def mse_genie(self):
        return self.sq_genie / self.m


def _noise_block(setup: Setup, trial_ids, purpose: str) -> np.ndarray:
    N = setup.cfg.N
    return np.stack([setup.noise.sample(stream(setup.cfg.master_seed, purpose, t), (setup.steps, N))
                     for t in trial_ids])


def _defense(setup: Setup, mode: str, alpha, T: int, gated: bool = True) -> DefenseBatch:
    art = setup.artifacts
    if art is None:
        raise ConfigError("calibration artifacts are required")
    bound = art.bound(alpha) if mode == "additional" else None
    return DefenseBatch(art.predictor, art.interval, mode, bound, n_trials=T, n_sensors=setup.cfg.N,
                        family_matrix=setup.family, edad_tol=setup.edad_tol,
                        edad_window=setup.cfg.edad_window)


def simulate(setup: Setup, mode: str, alpha, attack: AttackConfig, trial_ids,
             purpose: str = "noise", record: bool = False, on_step=None) -> SimResult:
    """Run the given trials through attack, defense and fusion.

    The first ``lead_in`` steps are trusted (no attack, no gating) and are
    not scored.  ``on_step(j, readings, result)`` is called after every
    scored step.  The squared errors are accumulated per trial, so long
    runs never hold the whole trace unless ``record`` is set.
    """
    cfg = setup.cfg
    trial_ids = np.asarray(trial_ids, dtype=np.int64)
    T, N, L, steps = trial_ids.size, cfg.N, cfg.lead_in, setup.steps
    attack.check(N)
    art = setup.artifacts
    method = cfg.fusion_method()
    truth = setup.family[setup.truth_indices(trial_ids)]
    noise = _noise_block(setup, trial_ids, purpose)
    N_A = attack.N_A if attack.kind != "none" else 0

    keys = None
    if attack.kind in ("edge", "water_filling") and attack.selection == "random" and N_A:
        keys = np.stack([stream(cfg.master_seed, "attack", t).random((steps, N)) for t in trial_ids])
    sub_idx = sub_vals = None
    if attack.kind == "substitution" and N_A:
        sub_idx = np.empty((T, N_A), dtype=np.int64)
        sub_vals = np.empty((T, steps, N_A))
        for r, t in enumerate(trial_ids):
            sensors, members = atk.substitution_draw(setup.family.shape[0], int(
                setup.truth_indices([t])[0]), N_A, N, stream(cfg.master_seed, "attack", t))
            sub_idx[r] = sensors
            sub_vals[r] = setup.family[members].T + setup.noise.sample(
                stream(cfg.master_seed, "attack_noise", t), (steps, N_A))
    eps = attack.inset(art.interval) if attack.kind == "edge" else None
    bound = art.bound(alpha) if (mode == "additional" or attack.kind == "water_filling") else None

    defense = _defense(setup, mode, alpha, T)
    rows = np.arange(T)[:, None]
    sq_d = np.zeros(T)
    sq_g = np.zeros(T)
    fallback = np.zeros(T, dtype=np.int64)
    rejected = np.zeros((T, 3), dtype=np.int64)
    leaked = np.zeros(T, dtype=np.int64)
    honest_rej = np.zeros(T, dtype=np.int64)
    trace = {k: [] for k in ("estimate", "genie", "prediction", "labels", "attacked", "readings")} \
        if record else {}
    est_prev = np.zeros(T)

    for j in range(steps):
        y = truth[:, j]
        clean = y[:, None] + noise[:, j, :]
        if j < L:
            res = defense.trusted_step(clean, y)
            est_prev = fuse_batch(method, clean, res.passed, y)
            continue
        p = defense.predict(y)
        x = clean
        attacked = np.zeros((T, N), dtype=bool)
        if N_A:
            if attack.kind == "substitution":
                x = clean.copy()
                x[rows, sub_idx] = sub_vals[:, j, :]
                attacked[rows, sub_idx] = True
            else:
                d = clean - p[:, None]
                k = None if keys is None else keys[:, j, :]
                if attack.kind == "edge":
                    idx, vals = atk.edge_attack_batch(p, art.interval, d, N_A, attack.selection,
                                                      attack.side, eps, k)
                else:
                    idx, vals = atk.water_filling_batch(p, art.interval, bound, d, N_A,
                                                        attack.selection, attack.side, k,
                                                        attack.capacity)
                x = clean.copy()
                x[rows, idx] = vals
                attacked[rows, idx] = True
        res = defense.gate(x, p)
        est = fuse_batch(method, x, res.passed, est_prev)
        ge = fuse_batch(method, x, ~attacked, est_prev)
        sq_d += (est - y) ** 2
        sq_g += (ge - y) ** 2
        fallback += res.fallback
        for s, lab in enumerate((Label.FAILED_EDAD, Label.FAILED_SIMPLE, Label.FAILED_ADDITIONAL)):
            rejected[:, s] += (res.labels == lab).sum(axis=1)
        leaked += (attacked & res.passed).sum(axis=1)
        honest_rej += (~attacked & ~res.passed).sum(axis=1)
        est_prev = est
        if record:
            trace["estimate"].append(est)
            trace["genie"].append(ge)
            trace["prediction"].append(res.prediction)
            trace["labels"].append(res.labels)
            trace["attacked"].append(attacked)
            trace["readings"].append(x)
        if on_step is not None:
            on_step(j, x, res)

    m = steps - L
    mean_abs = np.abs(truth[:, L:]).mean(axis=1)
    if record:
        trace = {k: np.stack(v, axis=1) for k, v in trace.items()}
        trace["truth"] = truth[:, L:]
    return SimResult(trial_ids, sq_d, sq_g, mean_abs, fallback, rejected, leaked, honest_rej, m, trace)


# --------------------------------------------------------------------------
# calibration

def _clean_runs(setup: Setup, predictor, interval, runs: int, on_step, mode: str,
                purpose: str = "heldout"):
    """Unattacked closed-loop runs, cycling the truth through the family
    members.  Calibration uses the held-out streams."""
    cfg = setup.cfg
    chunk = min(cfg.chunk, runs)
    members = setup.family.shape[0]
    for start in range(0, runs, chunk):
        ids = np.arange(start, min(start + chunk, runs))
        truth = setup.family[ids % members]
        noise = _noise_block(setup, ids, purpose)
        d = DefenseBatch(predictor, interval, "simple", None, n_trials=ids.size,
                         n_sensors=cfg.N, family_matrix=setup.family, edad_tol=setup.edad_tol,
                         edad_window=cfg.edad_window)
        for j in range(setup.steps):
            y = truth[:, j]
            x = y[:, None] + noise[:, j, :]
            if mode == "ungated" or j < cfg.lead_in:
                res = d.trusted_step(x, y)
            else:
                res = d.gate(x, d.predict(y))
            if j >= cfg.lead_in:
                on_step(res)


def calibrate(cfg: ExperimentConfig, variance: float) -> DefenseArtifacts:
    """Train the predictor, then calibrate the interval and the bin bounds.

    The interval comes from residuals of every validity-passing sensor on
    unattacked runs where all of them feed the predictor.  The bin bounds
    come from per-step histograms of the simple-gate survivors on a second
    set of unattacked runs gated by that interval.
    """
    setup = Setup.create(cfg, variance)
    predictor = trained_predictor(cfg, variance)
    runs = cfg.calibration_runs

    residuals = []
    _clean_runs(setup, predictor, _PLACEHOLDER, runs,
                lambda res: residuals.append(res.differences[res.passed]), "ungated")
    interval = interval_from_residuals(np.concatenate(residuals), cfg.beta)
    spec = HistogramSpec.from_interval(interval, cfg.bins)

    counts = []

    def collect(res):
        T = res.passed.shape[0]
        b = spec.bin_index(np.where(res.passed, res.differences, spec.support_lo))
        key = np.arange(T)[:, None] * spec.bins + b
        counts.append(np.bincount(key[res.passed], minlength=T * spec.bins).reshape(T, spec.bins))

    _clean_runs(setup, predictor, interval, runs, collect, "simple")
    counts = np.concatenate(counts)
    bounds = {float(a): upper_bound_from_counts(counts, a, spec) for a in cfg.alphas}
    stats = {"residuals": int(sum(r.size for r in residuals)), "windows": int(counts.shape[0]),
             "mean_survivors": float(counts.sum(axis=1).mean())}
    return DefenseArtifacts(predictor, interval, spec, bounds, artifact_header(cfg, variance), stats)


def calibration_coverage(cfg: ExperimentConfig, variance: float, art: DefenseArtifacts,
                         runs: int, purpose: str = "noise") -> dict:
    """Check calibrated artifacts on fresh unattacked runs.

    Replays both calibration protocols on the ``purpose`` streams (never the
    held-out ones) and reports the fraction of residuals inside the
    interval and, per alpha and bin, the fraction of windows whose count
    stays strictly below the bound.
    """
    setup = Setup.create(cfg, variance, art)
    inside = [0, 0]

    def residuals(res):
        d = res.differences[res.passed]
        inside[0] += int(np.count_nonzero((d >= art.interval.lo) & (d <= art.interval.hi)))
        inside[1] += d.size

    _clean_runs(setup, art.predictor, _PLACEHOLDER, runs, residuals, "ungated", purpose)
    spec = art.hist_spec
    below = {a: np.zeros(spec.bins, dtype=np.int64) for a in art.bounds}
    windows = [0]

    def histograms(res):
        T = res.passed.shape[0]
        b = spec.bin_index(np.where(res.passed, res.differences, spec.support_lo))
        key = np.arange(T)[:, None] * spec.bins + b
        counts = np.bincount(key[res.passed], minlength=T * spec.bins).reshape(T, spec.bins)
        for a, bound in art.bounds.items():
            below[a] += (counts < bound.u).sum(axis=0)
        windows[0] += T

    _clean_runs(setup, art.predictor, art.interval, runs, histograms, "simple", purpose)
    return {"interval_coverage": inside[0] / inside[1], "residuals": inside[1],
            "bin_coverage": {a: v / windows[0] for a, v in below.items()},
            "windows": windows[0]}


class _Placeholder:
    """Interval stand-in for ungated runs, which never consult it."""
    lo, hi, beta, width = -np.inf, np.inf, 0.5, np.inf


_PLACEHOLDER = _Placeholder()


def artifact_path(cfg: ExperimentConfig, variance: float):
    from pathlib import Path
    h = artifact_header(cfg, variance)
    return Path(cfg.artifact_dir) / f"apcc-{cfg.noise}-{variance:g}-N{cfg.N}-{header_hash(h)}.npz"


def get_artifacts(cfg: ExperimentConfig, variance: float, cache: dict | None = None) -> DefenseArtifacts:
    """Artifacts for one noise level: in-memory cache, then disk, then calibrate."""
    header = artifact_header(cfg, variance)
    key = header_hash(header)
    if cache is not None and key in cache:
        return cache[key]
    art = None
    if cfg.artifact_dir:
        path = artifact_path(cfg, variance)
        if path.exists():
            art = DefenseArtifacts.load(path, header)
    if art is None:
        art = calibrate(cfg, variance)
        if cfg.artifact_dir:
            art.save(artifact_path(cfg, variance))
    if cache is not None:
        cache[key] = art
    return art


def require_match(art: DefenseArtifacts, cfg: ExperimentConfig, variance: float) -> None:
    expected = artifact_header(cfg, variance)
    art.check(expected)
    if art.predictor.n_max < cfg.N:
        raise ArtifactMismatch(f"predictor serves at most {art.predictor.n_max} sensors, N={cfg.N}")


# --------------------------------------------------------------------------
# single trials

@dataclass
class TrialReport:
    trial_id: int
    estimates: np.ndarray
    genie: np.ndarray
    truth: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray            # (m, N)
    attacked: np.ndarray          # (m, N)
    mse_defense: float
    mse_genie: float
    fallback_steps: list

    def decisions_csv(self, path) -> None:
        """Gate decisions as ``step,sensor,label`` rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sensor", "label"])
            for j, row in enumerate(self.labels):
                for i, lab in enumerate(row.tolist()):
                    w.writerow([j, i, Label(lab).name])


def run_trial(cfg: ExperimentConfig, trial_id: int, artifacts: DefenseArtifacts, *,
              variance: float | None = None, mode: str | None = None, alpha: float | None = None,
              N_A: int | None = None) -> TrialReport:
    """One fully recorded trial; defaults to the first cell of the config."""
    variance = cfg.variances[0] if variance is None else variance
    require_match(artifacts, cfg, variance)
    setup = Setup.create(cfg, variance, artifacts, cfg.run_steps)
    mode = cfg.modes[0] if mode is None else mode
    alpha = cfg.alphas[0] if alpha is None else alpha
    N_A = cfg.N_A[0] if N_A is None else N_A
    r = simulate(setup, mode, alpha, cfg.attack_config(N_A), [trial_id], record=True)
    tr = r.trace
    fb = np.nonzero((tr["labels"][0] != Label.PASSED_ALL).all(axis=1))[0].tolist()
    return TrialReport(trial_id, tr["estimate"][0], tr["genie"][0], tr["truth"][0],
                       tr["prediction"][0], tr["labels"][0], tr["attacked"][0],
                       float(r.mse_defense[0]), float(r.mse_genie[0]), fb)
