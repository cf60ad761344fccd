"""Experiment configuration (JSON) and presets.

Top-level keys: ``dataset``, ``profiles``, ``fl``, ``strategy``, ``model``,
``mode``, ``seed``, ``eval_every``, ``relative_degradation``, ``exclude``,
``robustness``. See README for the full schema.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import tensor_nn as nn
from .fed_data import MARKET_SHARE, BaseDataset, ShareTable, gen_base_synthetic, load_cifar_binary, load_dataset
from .fl_core import ConfigError, FedAvg, FedProx, FlConfig, QFedAvg, Scaffold, Strategy
from .heteroswitch import MODES, HeteroSwitch
from .isp import DeviceProfile, ProfileRanges, TransformDegrees, make_profiles


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSource(_Strict):
    n_train: int = Field(4000, ge=2)
    n_test: int = Field(800, ge=2)
    n_classes: int = Field(4, ge=2)
    height: int = Field(16, ge=4)
    width: int = Field(16, ge=4)


class CifarSource(_Strict):
    train_path: str
    test_path: str | None = None
    variant: Literal["cifar100", "cifar10"] = "cifar100"


class DatasetConfig(_Strict):
    synthetic: SyntheticSource | None = None
    cifar: CifarSource | None = None
    file: str | None = None  # container written by dump_dataset

    @model_validator(mode="after")
    def _one_source(self):
        n = sum(x is not None for x in (self.synthetic, self.cifar, self.file))
        if n != 1:
            raise ValueError("dataset: exactly one of synthetic, cifar, file must be given")
        return self


class RangesConfig(_Strict):
    wb: tuple[float, float] = (0.8, 1.2)
    gamma: tuple[float, float] = (0.7, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    brightness: tuple[float, float] = (-0.15, 0.15)
    saturation: tuple[float, float] = (0.5, 1.5)
    hue: tuple[float, float] = (-25.0, 25.0)
    quant_levels: tuple[int, int] | None = None


class ProfilesConfig(_Strict):
    count: int = Field(10, ge=1)
    ranges: RangesConfig = RangesConfig()
    explicit: list[dict] | None = None  # overrides count/ranges
    shares: Literal["uniform", "market"] | dict[str, float] = "uniform"


class FlSection(_Strict):
    n_clients: int = 100
    clients_per_round: int = 20
    batch_size: int = 10
    local_epochs: int = 1
    rounds: int = 1000
    lr: float = 0.1

    @model_validator(mode="after")
    def _check(self):
        try:
            FlConfig(**self.model_dump())
        except ConfigError as e:
            raise ValueError(f"fl.{e}") from None
        return self


class FedAvgConfig(_Strict):
    name: Literal["fedavg"] = "fedavg"


class FedProxConfig(_Strict):
    name: Literal["fedprox"]
    mu: float = Field(0.1, ge=0)


class QFedAvgConfig(_Strict):
    name: Literal["qfedavg"]
    q: float = Field(1e-6, ge=0)
    lipschitz: float | None = Field(None, gt=0)  # default 1 / lr


class ScaffoldConfig(_Strict):
    name: Literal["scaffold"]


class HeteroSwitchConfig(_Strict):
    name: Literal["heteroswitch"]
    alpha: float = Field(0.9, gt=0, le=1)
    wb_degree: float = Field(0.001, ge=0, lt=1)
    gamma_degree: float = Field(0.9, ge=0, lt=1)
    mode: Literal[MODES] = "switch"  # type: ignore[valid-type]
    audit: bool = True


StrategyConfig = Annotated[
    Union[FedAvgConfig, FedProxConfig, QFedAvgConfig, ScaffoldConfig, HeteroSwitchConfig],
    Field(discriminator="name"),
]


class ModelConfig(_Strict):
    layers: list[dict] | None = None  # None: default small CNN
    dtype: Literal["float64", "float32"] = "float64"


class RobustnessConfig(_Strict):
    train_degree: float = Field(0.3, ge=0, lt=1)
    test_degrees: list[float] = [0.3, 0.5, 0.7, 0.9]
    variants: list[Literal["transform", "transform+swad", "transform+swa"]] = [
        "transform", "transform+swad", "transform+swa"]


class ExperimentConfig(_Strict):
    dataset: DatasetConfig = DatasetConfig(synthetic=SyntheticSource())
    profiles: ProfilesConfig = ProfilesConfig()
    fl: FlSection = FlSection()
    strategy: StrategyConfig = FedAvgConfig()
    model: ModelConfig = ModelConfig()
    mode: Literal["standard", "dg-sweep", "degradation-matrix", "robustness"] = "standard"
    seed: int = Field(0, ge=0, lt=2**64)
    eval_every: int | None = Field(None, ge=1)
    relative_degradation: bool = True
    exclude: list[str] | None = None  # dg-sweep: subset to hold out (default: all)
    robustness: RobustnessConfig = RobustnessConfig()

    # --- builders ---------------------------------------------------------

    def fl_config(self) -> FlConfig:
        return FlConfig(seed=self.seed, **self.fl.model_dump())

    def build_strategy(self, **override) -> Strategy:
        s = self.strategy.model_copy(update=override) if override else self.strategy
        if s.name == "fedavg":
            return FedAvg()
        if s.name == "fedprox":
            return FedProx(s.mu)
        if s.name == "qfedavg":
            return QFedAvg(s.q, s.lipschitz)
        if s.name == "scaffold":
            return Scaffold()
        return HeteroSwitch(s.alpha, TransformDegrees(s.wb_degree, s.gamma_degree), audit=s.audit, mode=s.mode)

    def build_dataset(self) -> BaseDataset:
        d = self.dataset
        if d.synthetic is not None:
            s = d.synthetic
            return gen_base_synthetic(s.n_train, s.n_test, s.n_classes, s.height, s.width, seed=self.seed)
        if d.cifar is not None:
            return load_cifar_binary(d.cifar.train_path, d.cifar.test_path, d.cifar.variant)
        return load_dataset(d.file)

    def build_profiles(self) -> list[DeviceProfile]:
        p = self.profiles
        if p.explicit is not None:
            profiles = [DeviceProfile.from_dict(d) for d in p.explicit]
        elif p.shares == "market":
            names = MARKET_SHARE.names()
            generated = make_profiles(len(names), ProfileRanges(**p.ranges.model_dump()), self.seed)
            profiles = [DeviceProfile.from_dict({**g.to_dict(), "name": n}) for g, n in zip(generated, names)]
        else:
            profiles = make_profiles(p.count, ProfileRanges(**p.ranges.model_dump()), self.seed)
        if len({q.name for q in profiles}) != len(profiles):
            raise ValueError("profiles: names must be unique")
        return profiles

    def share_table(self, profiles: list[DeviceProfile]) -> ShareTable:
        s = self.profiles.shares
        if s == "uniform":
            return ShareTable.uniform([p.name for p in profiles])
        if s == "market":
            return MARKET_SHARE
        return ShareTable(tuple(s.items()))

    def model_spec(self, base: BaseDataset) -> nn.ModelSpec:
        if self.model.layers is None:
            return nn.default_spec(base.image_shape, base.n_classes, self.model.dtype)
        return nn.ModelSpec.from_dict({"layers": self.model.layers, "input_shape": list(base.image_shape),
                                       "n_classes": base.n_classes, "dtype": self.model.dtype})

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.model_validate(json.loads(Path(path).read_text()))


# --- presets -----------------------------------------------------------------

# the ten synthetic devices differ in contrast, brightness, saturation and hue only
_SYNTH_PROFILES = {"count": 10, "ranges": {"wb": (1.0, 1.0), "gamma": (1.0, 1.0)}}


def _desk(**kw) -> dict:
    base = {
        "dataset": {"synthetic": {"n_train": 4000, "n_test": 800, "n_classes": 4, "height": 16, "width": 16}},
        "profiles": _SYNTH_PROFILES,
        "fl": {"n_clients": 50, "clients_per_round": 10, "batch_size": 10, "local_epochs": 1,
               "rounds": 200, "lr": 0.1},
        "strategy": {"name": "heteroswitch"},
    }
    base.update(kw)
    return base


PRESETS: dict[str, dict] = {
    # full-scale federated parameters: N=100, K=20, B=10, E=1, T=1000, lr=0.1
    "paper-fl-defaults": {
        "dataset": {"synthetic": {"n_train": 10000, "n_test": 2000, "n_classes": 10, "height": 32, "width": 32}},
        "profiles": {"shares": "market"},
        "fl": {"n_clients": 100, "clients_per_round": 20, "batch_size": 10, "local_epochs": 1,
               "rounds": 1000, "lr": 0.1},
        "strategy": {"name": "heteroswitch", "alpha": 0.9, "wb_degree": 0.001, "gamma_degree": 0.9},
    },
    # ten randomised contrast/brightness/saturation/hue devices, desk scale
    "synthetic-10-profiles": _desk(),
    "synthetic-10-profiles-fedavg": _desk(strategy={"name": "fedavg"}),
    "market-share": _desk(profiles={"shares": "market"}),
    "dg-sweep": _desk(mode="dg-sweep", profiles={"count": 5}, fl={
        "n_clients": 40, "clients_per_round": 10, "batch_size": 10, "local_epochs": 1, "rounds": 100, "lr": 0.1}),
    "degradation-matrix": _desk(
        mode="degradation-matrix",
        strategy={"name": "fedavg"},
        profiles={"explicit": [
            {"name": "neutral"},
            {"name": "warm-flat", "wb": [1.4, 1.0, 0.6], "gamma": 1.8, "contrast": 0.5, "saturation": 0.3},
            {"name": "cool-vivid", "wb": [0.6, 0.9, 1.4], "gamma": 0.5, "contrast": 1.5, "saturation": 1.8,
             "hue_shift": 120.0},
        ]},
        fl={"n_clients": 20, "clients_per_round": 10, "batch_size": 10, "local_epochs": 1, "rounds": 60, "lr": 0.1},
    ),
    # centralised robustness comparison of transform-only vs dense vs per-epoch weight averaging
    "swa-vs-swad": _desk(
        mode="robustness",
        fl={"n_clients": 1, "clients_per_round": 1, "batch_size": 10, "local_epochs": 10, "rounds": 1, "lr": 0.1},
        profiles={"count": 1},
    ),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig.model_validate(PRESETS[name])
