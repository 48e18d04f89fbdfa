"""Calibration artifacts: trained predictor, consistency interval and bin bounds.

Artifacts are written as a single ``.npz`` file whose ``header`` entry is a
JSON document describing everything the calibration depended on.  Loading
with an expected header refuses any file whose header differs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..defense import HistogramSpec, UpperBound
from ..errors import ArtifactMismatch
from ..predictor import Forest, PredictorModel, RegressorSpec, ResidualInterval

FORMAT_VERSION = 1
_FOREST_FIELDS = ("feat", "thr", "left", "right", "value")


def header_hash(header: dict) -> str:
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class DefenseArtifacts:
    predictor: PredictorModel
    interval: ResidualInterval
    hist_spec: HistogramSpec
    bounds: dict = field(default_factory=dict)      # alpha -> UpperBound
    header: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def bound(self, alpha: float) -> UpperBound:
        try:
            return self.bounds[alpha]
        except KeyError:
            raise ArtifactMismatch(f"no histogram bound calibrated for alpha={alpha}; "
                                   f"available: {sorted(self.bounds)}") from None

    def check(self, expected: dict) -> None:
        check_header(self.header, expected)

    # ------------------------------------------------------------------
    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        pm = self.predictor
        if pm.spec.algorithm == "bagged_trees":
            for name, arr in zip(_FOREST_FIELDS, pm.stacked()):
                arrays[f"forest_{name}"] = arr
        alphas = sorted(self.bounds)
        arrays["alphas"] = np.array(alphas, dtype=float)
        arrays["u"] = np.array([self.bounds[a].u for a in alphas], dtype=np.int64).reshape(
            len(alphas), self.hist_spec.bins)
        meta = {
            "version": FORMAT_VERSION,
            "header": self.header,
            "hash": header_hash(self.header),
            "predictor": {"spec": pm.spec.__dict__, "n_max": pm.n_max, "window": pm.window,
                          "trained_on": pm.trained_on},
            "interval": {"lo": self.interval.lo, "hi": self.interval.hi, "beta": self.interval.beta},
            "hist_spec": {"bins": self.hist_spec.bins, "lo": self.hist_spec.support_lo,
                          "hi": self.hist_spec.support_hi},
            "stats": self.stats,
        }
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path, expected: dict | None = None) -> "DefenseArtifacts":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != FORMAT_VERSION:
                raise ArtifactMismatch(f"{path}: artifact format version {meta.get('version')} "
                                       f"is not {FORMAT_VERSION}")
            if expected is not None:
                check_header(meta["header"], expected)
            p = meta["predictor"]
            spec = RegressorSpec(**p["spec"])
            models = {}
            if spec.algorithm == "bagged_trees":
                stacked = [data[f"forest_{name}"] for name in _FOREST_FIELDS]
                n_features = lambda k: k + p["window"] - 1
                for k in range(1, p["n_max"] + 1):
                    models[k] = Forest(*(a[k - 1].copy() for a in stacked), n_features(k))
            predictor = PredictorModel(spec, p["n_max"], p["window"], models, p["trained_on"])
            hs = meta["hist_spec"]
            hist_spec = HistogramSpec(hs["bins"], hs["lo"], hs["hi"])
            bounds = {float(a): UpperBound(u, float(a), hist_spec)
                      for a, u in zip(data["alphas"], data["u"])}
        iv = meta["interval"]
        return cls(predictor, ResidualInterval(iv["lo"], iv["hi"], iv["beta"]), hist_spec, bounds,
                   meta["header"], meta.get("stats", {}))


def check_header(found: dict, expected: dict) -> None:
    diffs = sorted(k for k in set(found) | set(expected) if found.get(k) != expected.get(k))
    if diffs:
        detail = ", ".join(f"{k}: artifact={found.get(k)!r} requested={expected.get(k)!r}"
                           for k in diffs[:6])
        raise ArtifactMismatch(f"calibration artifact does not match the configuration ({detail})")
