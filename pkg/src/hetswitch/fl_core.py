"""Federated round engine and the FedAvg / FedProx / q-FedAvg / Scaffold baselines."""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_nn as nn
from .fed_data import BaseDataset, ClientData, ClientShard, RenderCache, build_eval_sets, render_shard
from .isp import DeviceProfile
from .report import ExperimentReport
from .rng import CountingRng, counting_stream, stream

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class RoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlConfig:
    n_clients: int = 100  # N
    clients_per_round: int = 20  # K
    batch_size: int = 10  # B
    local_epochs: int = 1  # E
    rounds: int = 1000  # T
    lr: float = 0.1  # eta
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients", "must be >= 1")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigError("clients_per_round", f"must be in [1, n_clients={self.n_clients}]")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs", "must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")


@dataclass
class ClientUpdateResult:
    client_id: int
    params: np.ndarray
    train_loss: float
    n_samples: int
    telemetry: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # strategy-private payload (e.g. delta_c)


@dataclass
class ServerState:
    state: nn.ModelState
    round: int = 0
    extras: dict = field(default_factory=dict)


def select_clients(n: int, k: int, rnd: int, seed: int) -> list[int]:
    """K of N client ids, uniform without replacement, ascending."""
    if not 1 <= k <= n:
        raise ValueError(f"cannot select {k} of {n} clients")
    if k == n:
        return list(range(n))
    return sorted(int(i) for i in stream(seed, "selection", rnd).choice(n, size=k, replace=False))


def client_rng(seed: int, client_id: int, rnd: int) -> CountingRng:
    return counting_stream(seed, "client", client_id, rnd)


GradHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


def local_sgd(
    state: nn.ModelState,
    data: ClientData,
    cfg: FlConfig,
    rng: CountingRng,
    grad_hook: GradHook | None = None,
    on_step: Callable[[np.ndarray], None] | None = None,
    on_epoch: Callable[[np.ndarray], None] | None = None,
) -> tuple[nn.ModelState, float, int]:
    """E epochs of minibatch SGD over ``data`` with a fresh permutation per epoch.

    The train loss is the running mean of per-batch losses (each taken before
    that batch's step), updated as ``L = (L * i + l) / (i + 1)``.
    Returns (final state, train loss, number of steps).
    """
    n = len(data)
    if n == 0:
        raise ValueError("client has no data")
    loss_mean, steps = 0.0, 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = nn.backward(state, nn.Batch(data.images[idx], data.labels[idx]))
            if grad_hook is not None:
                g = grad_hook(state.params, g)
            state = nn.sgd_step(state, g, cfg.lr)
            loss_mean = (loss_mean * steps + loss) / (steps + 1)
            steps += 1
            if on_step is not None:
                on_step(state.params)
        if on_epoch is not None:
            on_epoch(state.params)
    return state, loss_mean, steps


def data_digest(data: ClientData) -> str:
    return hashlib.blake2b(np.ascontiguousarray(data.images).tobytes(), digest_size=8).hexdigest()


def fedavg_client(global_state: nn.ModelState, data: ClientData, cfg: FlConfig,
                  client_id: int = 0, rnd: int = 0) -> ClientUpdateResult:
    rng = client_rng(cfg.seed, client_id, rnd)
    state, loss, _ = local_sgd(global_state, data, cfg, rng)
    return ClientUpdateResult(client_id, state.params, loss, len(data), {"draws": rng.draws})


def fedavg_aggregate(results: Sequence[ClientUpdateResult]) -> np.ndarray:
    """Sample-count weighted mean, summed in ascending client-id order."""
    if not results:
        raise ValueError("nothing to aggregate")
    ordered = sorted(results, key=lambda r: r.client_id)
    total = sum(r.n_samples for r in ordered)
    acc = np.zeros_like(ordered[0].params)
    for r in ordered:
        acc += (r.n_samples / total) * r.params
    return acc


def weighted_loss(results: Sequence[ClientUpdateResult]) -> float:
    ordered = sorted(results, key=lambda r: r.client_id)
    total = sum(r.n_samples for r in ordered)
    return float(sum(r.n_samples * r.train_loss for r in ordered) / total)


def fedprox_client(global_state: nn.ModelState, data: ClientData, cfg: FlConfig, mu: float,
                   client_id: int = 0, rnd: int = 0) -> ClientUpdateResult:
    """FedAvg local training with the proximal gradient mu * (w - w_global) added."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    rng = client_rng(cfg.seed, client_id, rnd)
    w_g = global_state.params
    hook = None if mu == 0 else (lambda w, g: g + mu * (w - w_g))
    state, loss, _ = local_sgd(global_state, data, cfg, rng, grad_hook=hook)
    return ClientUpdateResult(client_id, state.params, loss, len(data), {"draws": rng.draws})


def qfedavg_round(global_params: np.ndarray, results: Sequence[ClientUpdateResult],
                  q: float, lipschitz: float) -> np.ndarray:
    """q-FFL aggregate.

    With F_k the client's loss at the global model (``extras["init_loss"]``):
        delta_k = L * (w_g - w_k)
        h_k     = q * F_k^(q-1) * |delta_k|^2 + L * F_k^q
        w+      = w_g - sum(F_k^q * delta_k) / sum(h_k)
    """
    if q < 0:
        raise ValueError(f"q must be >= 0, got {q}")
    if lipschitz <= 0:
        raise ValueError("lipschitz constant must be positive")
    num = np.zeros_like(global_params)
    den = 0.0
    for r in sorted(results, key=lambda r: r.client_id):
        f = max(float(r.extras["init_loss"]), 1e-12)
        delta = lipschitz * (global_params - r.params)
        fq = f ** q
        num += fq * delta
        den += q * f ** (q - 1) * float(delta @ delta) + lipschitz * fq
    return global_params - num / den


def qfedavg_client(global_state: nn.ModelState, data: ClientData, cfg: FlConfig,
                   client_id: int = 0, rnd: int = 0) -> ClientUpdateResult:
    init_loss = nn.dataset_loss(global_state, data.images, data.labels)
    res = fedavg_client(global_state, data, cfg, client_id, rnd)
    res.extras["init_loss"] = init_loss
    res.telemetry["l_init"] = init_loss
    return res


def scaffold_client(global_state: nn.ModelState, data: ClientData, cfg: FlConfig,
                    c_server: np.ndarray, c_client: np.ndarray,
                    client_id: int = 0, rnd: int = 0) -> tuple[ClientUpdateResult, np.ndarray, np.ndarray]:
    """Local steps on g + (c - c_i); option-II variate update
    c_i+ = c_i - c + (w_g - w_local) / (steps * lr)."""
    rng = client_rng(cfg.seed, client_id, rnd)
    correction = c_server - c_client
    state, loss, steps = local_sgd(global_state, data, cfg, rng, grad_hook=lambda w, g: g + correction)
    c_new = c_client - c_server + (global_state.params - state.params) / (steps * cfg.lr)
    res = ClientUpdateResult(client_id, state.params, loss, len(data), {"draws": rng.draws})
    return res, c_new, c_new - c_client


# --- strategies ------------------------------------------------------------

class Strategy:
    """A client update rule plus the matching server aggregation."""

    name = "base"

    def params(self) -> dict:
        return {}

    def init_extras(self, server: ServerState, cfg: FlConfig) -> None:
        pass

    def broadcast(self, server: ServerState, client_id: int) -> dict:
        return {}

    def client_update(self, global_state, data, cfg, client_id, rnd, **msg) -> ClientUpdateResult:
        raise NotImplementedError

    def aggregate(self, server: ServerState, results: list[ClientUpdateResult], cfg: FlConfig) -> None:
        server.state = server.state.with_params(fedavg_aggregate(results))

    def round_log(self, server: ServerState) -> dict:
        return {}

    def final_extras(self, server: ServerState) -> dict:
        return {}


class FedAvg(Strategy):
    name = "fedavg"

    def client_update(self, global_state, data, cfg, client_id, rnd, **msg):
        return fedavg_client(global_state, data, cfg, client_id, rnd)


class FedProx(Strategy):
    name = "fedprox"

    def __init__(self, mu: float = 0.1):
        if mu < 0:
            raise ValueError("mu must be >= 0")
        self.mu = mu

    def params(self):
        return {"mu": self.mu}

    def client_update(self, global_state, data, cfg, client_id, rnd, **msg):
        return fedprox_client(global_state, data, cfg, self.mu, client_id, rnd)


class QFedAvg(Strategy):
    name = "qfedavg"

    def __init__(self, q: float = 1e-6, lipschitz: float | None = None):
        if q < 0:
            raise ValueError("q must be >= 0")
        self.q = q
        self.lipschitz = lipschitz  # None: 1 / lr

    def params(self):
        return {"q": self.q, "lipschitz": self.lipschitz}

    def client_update(self, global_state, data, cfg, client_id, rnd, **msg):
        return qfedavg_client(global_state, data, cfg, client_id, rnd)

    def aggregate(self, server, results, cfg):
        lip = self.lipschitz if self.lipschitz is not None else 1.0 / cfg.lr
        server.state = server.state.with_params(qfedavg_round(server.state.params, results, self.q, lip))


class Scaffold(Strategy):
    name = "scaffold"

    def init_extras(self, server, cfg):
        server.extras["c"] = np.zeros_like(server.state.params)
        server.extras["c_clients"] = {}

    def broadcast(self, server, client_id):
        c = server.extras["c"]
        return {"c_server": c, "c_client": server.extras["c_clients"].get(client_id, np.zeros_like(c))}

    def client_update(self, global_state, data, cfg, client_id, rnd, c_server=None, c_client=None):
        res, c_new, dc = scaffold_client(global_state, data, cfg, c_server, c_client, client_id, rnd)
        res.extras.update(c_new=c_new, delta_c=dc)
        return res

    def aggregate(self, server, results, cfg):
        super().aggregate(server, results, cfg)
        ordered = sorted(results, key=lambda r: r.client_id)
        dc_sum = np.zeros_like(server.extras["c"])
        for r in ordered:
            dc_sum += r.extras["delta_c"]
            server.extras["c_clients"][r.client_id] = r.extras["c_new"]
        # c += (K / N) * mean(delta_c) == sum(delta_c) / N
        server.extras["c"] = server.extras["c"] + dc_sum / cfg.n_clients


# --- experiment driver -----------------------------------------------------

@dataclass
class Federation:
    """Everything a run needs about the data side."""

    base: BaseDataset
    shards: list[ClientShard]
    profiles: list[DeviceProfile]
    cache: RenderCache | None = None
    eval_profiles: list[str] | None = None  # default: all profiles

    def __post_init__(self):
        if self.cache is None:
            self.cache = RenderCache(self.base)
        for s in self.shards:
            if s.profile_id is None or not 0 <= s.profile_id < len(self.profiles):
                raise ValueError(f"client {s.client_id} has no valid profile assignment")
        self._eval = None

    def client_data(self, client_id: int) -> ClientData:
        return render_shard(self.shards[client_id], self.base, self.profiles, self.cache)

    def eval_sets(self) -> dict[str, ClientData]:
        if self._eval is None:
            names = self.eval_profiles
            profs = [p for p in self.profiles if names is None or p.name in names]
            self._eval = build_eval_sets(self.base, profs, self.cache)
        return self._eval


def eval_rounds(total: int, every: int | None = None) -> set[int]:
    every = every or max(1, total // 50)
    return {r for r in range(1, total + 1) if r % every == 0} | {total}


def evaluate(state: nn.ModelState, fed: Federation) -> dict[str, float]:
    return {name: nn.accuracy(state, d.images, d.labels) for name, d in fed.eval_sets().items()}


def run_experiment(
    cfg: FlConfig,
    strategy: Strategy,
    fed: Federation,
    spec: nn.ModelSpec,
    threads: int = 1,
    eval_every: int | None = None,
    config_echo: dict | None = None,
    init_state: nn.ModelState | None = None,
) -> ExperimentReport:
    if len(fed.shards) != cfg.n_clients:
        raise ConfigError("n_clients", f"config says {cfg.n_clients} but federation has {len(fed.shards)} shards")
    state = init_state or nn.init_params(spec, int(stream(cfg.seed, "init").integers(2**63)))
    server = ServerState(state)
    strategy.init_extras(server, cfg)
    when = eval_rounds(cfg.rounds, eval_every)
    report = ExperimentReport(
        config=config_echo if config_echo is not None else {"fl": asdict(cfg), "strategy": strategy.params()},
        seed=cfg.seed,
        strategy=strategy.name,
    )
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for rnd in range(1, cfg.rounds + 1):
            server.round = rnd
            chosen = select_clients(cfg.n_clients, cfg.clients_per_round, rnd, cfg.seed)
            global_state = server.state

            def work(cid: int) -> ClientUpdateResult:
                msg = strategy.broadcast(server, cid)
                try:
                    res = strategy.client_update(global_state, fed.client_data(cid), cfg, cid, rnd, **msg)
                except Exception as e:
                    raise RoundError(f"round {rnd}: client {cid} failed: {e}") from e
                if not np.all(np.isfinite(res.params)) or not np.isfinite(res.train_loss):
                    raise RoundError(f"round {rnd}: client {cid} returned non-finite parameters or loss")
                return res

            results = list(pool.map(work, chosen)) if pool else [work(c) for c in chosen]
            strategy.aggregate(server, results, cfg)
            if not np.all(np.isfinite(server.state.params)):
                raise RoundError(f"round {rnd}: aggregate is non-finite")

            row = {"round": rnd, "strategy": strategy.name, "mean_loss": weighted_loss(results),
                   "n_clients": len(results)}
            row.update(strategy.round_log(server))
            if rnd in when:
                acc = evaluate(server.state, fed)
                row.update({f"acc_{k}": v for k, v in acc.items()})
                report.final_accuracy = acc
            report.rounds.append(row)
            for r in results:
                prof = fed.profiles[fed.shards[r.client_id].profile_id].name
                report.clients.append({"round": rnd, "client": r.client_id, "profile": prof,
                                       "n": r.n_samples, "l_train": r.train_loss, **r.telemetry})
            if rnd in when:
                log.info("round %d %s loss=%.4f", rnd, strategy.name, row["mean_loss"])
    finally:
        if pool:
            pool.shutdown()
    report.final_params = server.state.params
    report.extra["server"] = strategy.final_extras(server)
    return report
