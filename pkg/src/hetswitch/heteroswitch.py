"""HeteroSwitch client update and its server-side loss tracker.

Per round the server broadcasts ``l_ema``, an exponential moving average of
past aggregated train losses. A client whose data the global model already
fits well (initial loss below ``l_ema``) is considered biased toward what the
model has seen; it then trains on randomly white-balanced / gamma-shifted
copies of its images and keeps a per-batch running average of its weights,
which it returns if its train loss also ends below ``l_ema``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor_nn as nn
from .fed_data import ClientData
from .fl_core import (
    ClientUpdateResult, FlConfig, ServerState, Strategy, client_rng, data_digest,
    fedavg_aggregate, local_sgd, weighted_loss,
)
from .isp import TransformDegrees, random_wb_gamma
from .rng import counting_stream


MODES = ("switch", "transform", "transform+swad", "transform+swa")


@dataclass(frozen=True)
class EmaTracker:
    alpha: float = 0.9
    value: float | None = None  # None until the first round has reported

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")

    @property
    def initialized(self) -> bool:
        return self.value is not None


def update_ema(t: EmaTracker, l_cur: float) -> EmaTracker:
    if not math.isfinite(l_cur):
        raise ValueError(f"loss must be finite, got {l_cur}")
    if t.value is None:
        return replace(t, value=float(l_cur))
    return replace(t, value=t.alpha * l_cur + (1 - t.alpha) * t.value)


def server_round_hook(t: EmaTracker, results) -> EmaTracker:
    return update_ema(t, weighted_loss(results))


class SwaAccumulator:
    """Running mean of weight snapshots, one fold per batch.

    ``fold`` computes ``(W_swa * i + W) / (i + 1)`` rearranged as
    ``W_swa + (W - W_swa) / (i + 1)`` so a constant sequence stays exact.
    The first fold replaces the initial copy outright (its weight is zero).
    With ``keep_snapshots`` the raw snapshots are kept for auditing.
    """

    def __init__(self, init: np.ndarray, keep_snapshots: bool = False):
        self.mean = np.array(init, copy=True)
        self.count = 0
        self.snapshots: list[np.ndarray] | None = [] if keep_snapshots else None

    def fold(self, w: np.ndarray) -> None:
        if self.count == 0:
            self.mean = np.array(w, copy=True)
        else:
            self.mean = self.mean + (w - self.mean) / (self.count + 1)
        self.count += 1
        if self.snapshots is not None:
            self.snapshots.append(np.array(w, copy=True))

    def audit_error(self) -> float:
        """max |incremental mean - mean of stored snapshots|."""
        if not self.snapshots:
            return 0.0
        return float(np.max(np.abs(self.mean - np.mean(self.snapshots, axis=0))))


@dataclass(frozen=True)
class SwitchDecision:
    switch1: bool
    switch2: bool
    l_init: float
    l_train: float

    def __post_init__(self):
        if self.switch2 and not self.switch1:
            raise ValueError("switch2 requires switch1")


def heteroswitch_client(
    global_state: nn.ModelState,
    data: ClientData,
    cfg: FlConfig,
    l_ema: float | None,
    degrees: TransformDegrees = TransformDegrees(),
    client_id: int = 0,
    rnd: int = 0,
    audit: bool = True,
    mode: str = "switch",
) -> ClientUpdateResult:
    """One client's local round.

    ``l_ema=None`` means the tracker has no value yet: no switching.
    ``mode`` is ``"switch"`` (loss-gated), or one of the ungated ablations
    ``"transform"`` (random WB/gamma on every client, no averaging) and
    ``"transform+swad"`` (random WB/gamma and per-batch averaging everywhere)
    and ``"transform+swa"`` (same, but averaging once per epoch).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if len(data) == 0:
        raise ValueError(f"client {client_id} has no data")
    digest_before = data_digest(data) if audit else None
    l_init = nn.dataset_loss(global_state, data.images, data.labels)
    if mode == "switch":
        switch1 = l_ema is not None and l_init < l_ema
    else:
        switch1 = True

    shuffle_rng = client_rng(cfg.seed, client_id, rnd)
    aug_rng = counting_stream(cfg.seed, "augment", client_id, rnd)
    train = data
    swa = None
    if switch1:
        # augmented copy for this round only; ``data`` stays untouched
        train = ClientData(random_wb_gamma(data.images, degrees, aug_rng), data.labels)
        if mode != "transform":
            swa = SwaAccumulator(global_state.params, keep_snapshots=audit)

    per_epoch = mode == "transform+swa"
    fold = swa.fold if swa is not None else None
    # train loss = running mean of batch losses, (L * i + loss) / (i + 1),
    # with the same batch counter i as the weight average
    state, l_train, _ = local_sgd(global_state, train, cfg, shuffle_rng,
                                  on_step=None if per_epoch else fold,
                                  on_epoch=fold if per_epoch else None)
    if mode == "switch":
        switch2 = switch1 and l_train < l_ema
    else:
        switch2 = swa is not None
    decision = SwitchDecision(switch1, switch2, l_init, l_train)
    params = swa.mean if decision.switch2 else state.params

    telemetry = {
        "l_ema": l_ema,
        "l_init": l_init,
        "switch1": decision.switch1,
        "switch2": decision.switch2,
        "draws": shuffle_rng.draws + aug_rng.draws,
        "aug_draws": aug_rng.draws,
    }
    if audit:
        telemetry["hash_before"] = digest_before
        telemetry["hash_after"] = data_digest(data)
        telemetry["swa_err"] = swa.audit_error() if swa is not None else None
    return ClientUpdateResult(client_id, params, l_train, len(data), telemetry)


class HeteroSwitch(Strategy):
    name = "heteroswitch"

    def __init__(self, alpha: float = 0.9, degrees: TransformDegrees = TransformDegrees(),
                 audit: bool = True, mode: str = "switch"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        EmaTracker(alpha)  # validates
        self.alpha = alpha
        self.degrees = degrees
        self.audit = audit
        self.mode = mode

    def params(self):
        return {"alpha": self.alpha, "wb_degree": self.degrees.wb_degree,
                "gamma_degree": self.degrees.gamma_degree, "mode": self.mode}

    def init_extras(self, server: ServerState, cfg):
        server.extras["ema"] = EmaTracker(self.alpha)

    def broadcast(self, server, client_id):
        return {"l_ema": server.extras["ema"].value}

    def client_update(self, global_state, data, cfg, client_id, rnd, l_ema=None):
        return heteroswitch_client(global_state, data, cfg, l_ema, self.degrees, client_id, rnd,
                                   audit=self.audit, mode=self.mode)

    def aggregate(self, server, results, cfg):
        server.state = server.state.with_params(fedavg_aggregate(results))
        server.extras["ema"] = server_round_hook(server.extras["ema"], results)

    def round_log(self, server):
        return {"l_ema": server.extras["ema"].value}

    def final_extras(self, server):
        return {"l_ema": server.extras["ema"].value}
