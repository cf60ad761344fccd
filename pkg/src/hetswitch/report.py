"""Fairness / generalisation statistics and report emission."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor_nn import params_to_bytes

SCHEMA_VERSION = 1


def fairness_stats(pa: Mapping[str, float]) -> tuple[float, float]:
    """(population variance, mean) of per-profile accuracies, in percentage
    points. ``pa`` holds fractions in [0, 1]."""
    if not pa:
        raise ValueError("no profile accuracies")
    vals = [100.0 * pa[k] for k in sorted(pa)]
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return var, mean


def worst_case(pa: Mapping[str, float]) -> float:
    if not pa:
        raise ValueError("no profile accuracies")
    return min(pa.values())


def worst_profiles(pa: Mapping[str, float]) -> list[str]:
    w = worst_case(pa)
    return sorted(k for k, v in pa.items() if v == w)


def degradation(acc_self: float, acc_cross: float, relative: bool = True) -> float:
    """Accuracy drop moving from the training device to another, in percent.

    Relative: (self - cross) / self * 100. Absolute: (self - cross) * 100.
    Negative when the other device does better.
    """
    if relative:
        if acc_self <= 0:
            raise ValueError("relative degradation needs a positive self accuracy")
        return (acc_self - acc_cross) / acc_self * 100.0
    return (acc_self - acc_cross) * 100.0


def degradation_matrix(acc: np.ndarray, relative: bool = True) -> np.ndarray:
    """``acc[i, j]`` = accuracy on profile j of the model trained on i."""
    acc = np.asarray(acc, dtype=float)
    n = acc.shape[0]
    out = np.zeros_like(acc)
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0 if i == j else degradation(acc[i, i], acc[i, j], relative)
    return out


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    strategy: str
    rounds: list[dict] = field(default_factory=list)  # one row per round
    clients: list[dict] = field(default_factory=list)  # per (round, client) telemetry
    final_accuracy: dict[str, float] = field(default_factory=dict)
    final_params: np.ndarray | None = None
    extra: dict = field(default_factory=dict)  # mode-specific sections (dg, matrix)

    def summary(self) -> dict:
        if not self.final_accuracy:
            return {}
        var, mean = fairness_stats(self.final_accuracy)
        return {
            "variance": var,
            "mean_accuracy": mean,
            "worst_accuracy": 100.0 * worst_case(self.final_accuracy),
            "worst_profiles": worst_profiles(self.final_accuracy),
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "strategy": self.strategy,
            "config": self.config,
            "final_accuracy": {k: self.final_accuracy[k] for k in sorted(self.final_accuracy)},
            "summary": self.summary(),
            "n_rounds_logged": len(self.rounds),
            **self.extra,
        }


def _csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def emit(report: ExperimentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json, rounds.csv, clients.csv and model.bin into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "rounds": out / "rounds.csv",
        "clients": out / "clients.csv",
    }
    paths["report"].write_text(to_json(report.to_dict()))
    paths["rounds"].write_text(_csv_text(report.rounds))
    paths["clients"].write_text(_csv_text(report.clients))
    if report.final_params is not None:
        paths["model"] = out / "model.bin"
        paths["model"].write_bytes(params_to_bytes(report.final_params))
    return paths


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
