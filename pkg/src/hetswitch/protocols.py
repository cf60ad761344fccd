"""Multi-run protocols: leave-one-device-out and train-on-i / test-on-j."""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from . import tensor_nn as nn
from .fed_data import BaseDataset, ClientShard, RenderCache, ShareTable, assign_profiles
from .fl_core import FlConfig, Federation, Strategy, run_experiment
from .heteroswitch import HeteroSwitch
from .isp import DeviceProfile, TransformDegrees, random_wb_gamma
from .report import ExperimentReport, degradation, degradation_matrix, worst_case
from .rng import stream


def _without(table: ShareTable | None, profiles: Sequence[DeviceProfile], excluded: str) -> ShareTable:
    if table is None:
        return ShareTable.uniform([p.name for p in profiles if p.name != excluded])
    kept = [(k, v) for k, v in table.entries if k != excluded]
    total = sum(v for _, v in kept)
    if total <= 0:
        raise ValueError(f"excluding {excluded!r} leaves no training share")
    return ShareTable(tuple((k, v / total) for k, v in kept))


def dg_protocol(
    cfg: FlConfig,
    strategy: Strategy,
    base: BaseDataset,
    shards: list[ClientShard],
    profiles: list[DeviceProfile],
    excluded: str,
    spec: nn.ModelSpec,
    table: ShareTable | None = None,
    cache: RenderCache | None = None,
    **run_kw,
) -> ExperimentReport:
    """Train with ``excluded`` removed from the device mix, test on it.

    Clients are re-assigned over the remaining profiles (shares renormalised;
    uniform when no table is given). Every profile is still evaluated, so the
    report carries both the held-out and the in-distribution accuracies.
    """
    names = [p.name for p in profiles]
    if excluded not in names:
        raise KeyError(f"unknown profile {excluded!r}")
    if len(profiles) < 2:
        raise ValueError("leave-one-out needs at least two profiles")
    train_table = _without(table, profiles, excluded)
    assigned = assign_profiles(shards, profiles, train_table, cfg.seed)
    ex_id = names.index(excluded)
    if any(s.profile_id == ex_id for s in assigned):
        raise AssertionError(f"excluded profile {excluded!r} leaked into training shards")
    fed = Federation(base, assigned, profiles, cache)
    rep = run_experiment(cfg, strategy, fed, spec, **run_kw)
    acc = rep.final_accuracy
    rep.extra["dg"] = {
        "excluded": excluded,
        "ood_accuracy": acc[excluded],
        "in_distribution": {k: acc[k] for k in sorted(acc) if k != excluded},
        "train_profiles": sorted({names[s.profile_id] for s in assigned}),
    }
    return rep


def dg_sweep(cfg, strategy, base, shards, profiles, spec, table=None, cache=None,
             exclude: Sequence[str] | None = None, **run_kw) -> tuple[dict[str, ExperimentReport], dict]:
    """One leave-one-out run per profile; summary holds the worst OOD accuracy."""
    if len(profiles) < 2:
        raise ValueError("leave-one-out needs at least two profiles")
    cache = cache or RenderCache(base)
    exclude = list(exclude) if exclude is not None else [p.name for p in profiles]
    reports = {ex: dg_protocol(cfg, strategy, base, shards, profiles, ex, spec, table, cache, **run_kw)
               for ex in exclude}
    ood = {ex: r.extra["dg"]["ood_accuracy"] for ex, r in reports.items()}
    summary = {
        "ood_accuracy": ood,
        "worst_ood_accuracy": worst_case(ood),
        "worst_ood_profiles": sorted(k for k, v in ood.items() if v == worst_case(ood)),
    }
    return reports, summary


def train_test_matrix(cfg, strategy, base, shards, profiles, spec, cache=None,
                      relative: bool = True, **run_kw) -> tuple[np.ndarray, np.ndarray, list[ExperimentReport]]:
    """Train one model per profile (all clients on it), evaluate on every profile.

    Returns (accuracy matrix, degradation matrix in percent, per-row reports).
    """
    cache = cache or RenderCache(base)
    names = [p.name for p in profiles]
    acc = np.zeros((len(profiles), len(profiles)))
    reports = []
    for i in range(len(profiles)):
        only_i = [replace(s, profile_id=i) for s in shards]
        rep = run_experiment(cfg, strategy, Federation(base, only_i, profiles, cache), spec, **run_kw)
        acc[i] = [rep.final_accuracy[n] for n in names]
        reports.append(rep)
    return acc, degradation_matrix(acc, relative), reports


def robustness_comparison(cfg, base, shards, profiles, spec, train_degree: float = 0.3,
                          test_degrees: Sequence[float] = (0.3, 0.5, 0.7, 0.9),
                          variants: Sequence[str] = ("transform", "transform+swad", "transform+swa"),
                          cache=None, **run_kw) -> tuple[dict, list[ExperimentReport]]:
    """Train once per weight-averaging variant (random WB and gamma at
    ``train_degree``), then score each model on the clean test split and on
    copies hit by random WB only / random gamma only at each test degree.

    The perturbed test sets are drawn once and shared by all variants.
    """
    x, y = base.test_x, base.test_y
    shifted = {}
    for k, d in enumerate(test_degrees):
        shifted[("wb", d)] = random_wb_gamma(x, TransformDegrees(d, 0.0), stream(cfg.seed, "robustness", 2 * k))
        shifted[("gamma", d)] = random_wb_gamma(x, TransformDegrees(0.0, d), stream(cfg.seed, "robustness", 2 * k + 1))
    fed = Federation(base, shards, profiles, cache)
    out, reports = {}, []
    for v in variants:
        strat = HeteroSwitch(degrees=TransformDegrees(train_degree, train_degree), mode=v)
        rep = run_experiment(cfg, strat, fed, spec, **run_kw)
        state = nn.ModelState(spec, rep.final_params)
        clean = nn.accuracy(state, x, y)
        row = {"clean_accuracy": clean, "wb": {}, "gamma": {}}
        for (kind, d), xs in shifted.items():
            acc = nn.accuracy(state, xs, y)
            row[kind][repr(d)] = {"accuracy": acc, "degradation": degradation(clean, acc) if clean > 0 else None}
        out[v] = row
        reports.append(rep)
    return out, reports
