"""Grid experiments, the alpha tradeoff sweep and table output."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import APCCError, ArtifactMismatch, ConfigError
from .config import ExperimentConfig
from .engine import Setup, get_artifacts, require_match, simulate

log = logging.getLogger(__name__)

# Column order of every emitted table.  Cells are identified by the first
# ten columns; the rest are measurements.
COLUMNS = [
    "noise", "variance", "N", "N_A", "defense", "attack", "selection", "side", "alpha", "beta",
    "mc_runs", "nrmse_ge", "nrmse_defense", "se_ge", "se_defense", "mse_ge", "mse_defense",
    "rmse_defense", "mean_abs_y", "fallback_rate", "rejected_edad", "rejected_simple",
    "rejected_additional", "leaked_attacks", "honest_rejected", "status", "error",
]
KEY_COLUMNS = COLUMNS[:10]
_INT = {"N", "N_A", "mc_runs"}
_STR = {"noise", "defense", "attack", "selection", "side", "status", "error"}


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def key(self, row) -> tuple:
        return tuple(row[c] for c in KEY_COLUMNS)

    def find(self, **match) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def get(self, **match) -> dict:
        hits = self.find(**match)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]

    def to_json(self) -> str:
        return json.dumps({"columns": COLUMNS, "rows": self.rows}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        data = json.loads(text)
        if data.get("columns") != COLUMNS:
            raise ConfigError("result file has an unexpected column layout")
        return cls(data["rows"])

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        rows = []
        for raw in csv.DictReader(io.StringIO(text)):
            row = {}
            for c in COLUMNS:
                v = raw[c]
                if c in _STR:
                    row[c] = v
                elif v == "":
                    row[c] = None
                else:
                    row[c] = int(v) if c in _INT else float(v)
            rows.append(row)
        return cls(rows)


def _se(values: np.ndarray):
    if values.size < 2:
        return None
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


def _nrmse_se(mse_values: np.ndarray, mean_abs: float):
    se = _se(mse_values)
    mse = float(np.mean(mse_values))
    if se is None:
        return None
    if mse == 0:
        return 0.0
    # delta method for sqrt(mse / mean|y|)
    return float(se / (2.0 * np.sqrt(mse * mean_abs)))


def run_cell(setup: Setup, mode: str, alpha, N_A: int) -> dict:
    """Monte Carlo average for one grid cell (trial ids ``0..mc_runs-1``)."""
    cfg = setup.cfg
    attack = cfg.attack_config(N_A)
    ids = np.arange(cfg.mc_runs)
    chunks = [ids[i:i + cfg.chunk] for i in range(0, ids.size, cfg.chunk)]
    work = lambda c: simulate(setup, mode, alpha, attack, c)
    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    mse_d, mse_g = cat("mse_defense"), cat("mse_genie")
    mean_abs = float(np.mean(cat("mean_abs_y")))
    steps = parts[0].m * ids.size
    rejected = np.concatenate([p.rejected for p in parts]).sum(axis=0)
    md, mg = float(np.mean(mse_d)), float(np.mean(mse_g))
    return {
        "mc_runs": int(ids.size),
        "nrmse_ge": float(np.sqrt(mg / mean_abs)),
        "nrmse_defense": float(np.sqrt(md / mean_abs)),
        "se_ge": _nrmse_se(mse_g, mean_abs),
        "se_defense": _nrmse_se(mse_d, mean_abs),
        "mse_ge": mg,
        "mse_defense": md,
        "rmse_defense": float(np.sqrt(md)),
        "mean_abs_y": mean_abs,
        "fallback_rate": float(cat("fallback_steps").sum() / steps),
        "rejected_edad": float(rejected[0] / steps),
        "rejected_simple": float(rejected[1] / steps),
        "rejected_additional": float(rejected[2] / steps),
        "leaked_attacks": float(cat("leaked").sum() / steps),
        "honest_rejected": float(cat("honest_rejected").sum() / steps),
    }


def cells(cfg: ExperimentConfig):
    """Grid cells in emission order: variance, defense, alpha, N_A."""
    for variance in cfg.variances:
        for mode in cfg.modes:
            needs_bound = mode == "additional" or cfg.attack == "water_filling"
            for alpha in (cfg.alphas if needs_bound else [None]):
                for N_A in cfg.N_A:
                    yield float(variance), mode, alpha, int(N_A)


def _row(cfg, variance, mode, alpha, N_A) -> dict:
    row = dict.fromkeys(COLUMNS)
    row.update(noise=cfg.noise, variance=variance, N=cfg.N, N_A=N_A, defense=mode,
               attack=cfg.attack if N_A else "none", selection=cfg.selection, side=cfg.side,
               alpha=None if alpha is None else float(alpha), beta=cfg.beta, mc_runs=cfg.mc_runs,
               status="ok", error="")
    return row


def run_experiment(cfg: ExperimentConfig, artifacts: dict | None = None) -> ResultTable:
    """Every grid cell of ``cfg``; ``artifacts`` maps variance to
    pre-computed artifacts (otherwise they are loaded or calibrated)."""
    table = ResultTable()
    cache: dict = {}
    setups = {}
    for variance, mode, alpha, N_A in cells(cfg):
        row = _row(cfg, variance, mode, alpha, N_A)
        if variance not in setups:
            if artifacts is not None and variance in artifacts:
                art = artifacts[variance]
                require_match(art, cfg, variance)
            else:
                art = get_artifacts(cfg, variance, cache)
            setups[variance] = Setup.create(cfg, variance, art, cfg.run_steps)
        try:
            row.update(run_cell(setups[variance], mode, alpha, N_A))
        except (ArtifactMismatch, ConfigError):
            raise
        except (APCCError, FloatingPointError, ValueError, IndexError) as exc:
            log.error("cell %s failed: %s", (variance, mode, alpha, N_A), exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.info("cell variance=%g mode=%s alpha=%s N_A=%d nrmse=%s ge=%s", variance, mode, alpha,
                 N_A, row["nrmse_defense"], row["nrmse_ge"])
        table.rows.append(row)
    return table


# --------------------------------------------------------------------------
# tradeoff sweep

SWEEP_COLUMNS = ["noise", "variance", "N", "beta", "alpha", "N_A_worst", "nrmse_no_attack",
                 "se_no_attack", "nrmse_worst", "se_worst"]


def sweep_tradeoff(cfg: ExperimentConfig, artifacts: dict | None = None) -> list[dict]:
    """NRMSE without attack against worst-case NRMSE at the largest N_A, per alpha."""
    if cfg.attack != "water_filling":
        raise ConfigError("the tradeoff sweep needs attack = water_filling")
    worst = max(cfg.N_A)
    sub = cfg.replace(N_A=sorted({0, worst}), modes=["additional"])
    table = run_experiment(sub, artifacts)
    out = []
    for variance in sub.variances:
        for alpha in sub.alphas:
            r0 = table.get(variance=float(variance), alpha=float(alpha), N_A=0)
            rw = table.get(variance=float(variance), alpha=float(alpha), N_A=worst)
            out.append({"noise": cfg.noise, "variance": float(variance), "N": cfg.N,
                        "beta": cfg.beta, "alpha": float(alpha), "N_A_worst": worst,
                        "nrmse_no_attack": r0["nrmse_defense"], "se_no_attack": r0["se_defense"],
                        "nrmse_worst": rw["nrmse_defense"], "se_worst": rw["se_defense"]})
    return out


# --------------------------------------------------------------------------
# output

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _sci(v) -> str:
    return "n/a" if v is None else f"{v:.2e}"


def _label(r) -> str:
    label = r["defense"] if r["alpha"] is None else f"{r['defense']} (alpha={r['alpha']:g})"
    return f"{label}, beta={r['beta']:g}"


def markdown(table: ResultTable) -> str:
    """Tables grouped by noise level, one column per N_A."""
    groups: dict = {}
    for r in table.rows:
        groups.setdefault((r["noise"], r["variance"], r["N"]), []).append(r)
    lines = []
    for (noise, variance, N), rows in groups.items():
        nas = sorted({r["N_A"] for r in rows})
        attack = next((r["attack"] for r in rows if r["N_A"]), "none")
        lines += [f"### {noise} noise, variance {variance:g}, N = {N}, attack: {attack}", "",
                  "| approach | " + " | ".join(f"N_A = {n}" for n in nas) + " |",
                  "|---" * (len(nas) + 1) + "|"]
        ge: dict = {}
        by_label: dict = {}
        for r in rows:
            ge.setdefault(r["N_A"], r["nrmse_ge"])
            ok = r["status"] == "ok"
            by_label.setdefault(_label(r), {})[r["N_A"]] = r["nrmse_defense"] if ok else None
        lines.append("| NRMSE GE | " + " | ".join(_sci(ge.get(n)) for n in nas) + " |")
        for label, vals in by_label.items():
            lines.append(f"| NRMSE {label} | " + " | ".join(_sci(vals.get(n)) for n in nas) + " |")
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


def emit(table: ResultTable | list, fmt: str, path) -> Path:
    """Write a result table (or sweep rows) as csv, json or markdown."""
    path = Path(path)
    if isinstance(table, list):
        if fmt != "csv":
            raise ConfigError("sweep rows are emitted as csv only")
        text = _csv_text(table, SWEEP_COLUMNS)
    elif fmt == "csv":
        text = _csv_text(table.rows, COLUMNS)
    elif fmt == "json":
        text = table.to_json() + "\n"
    elif fmt == "markdown":
        text = markdown(table)
    else:
        raise ConfigError(f"unknown output format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
