"""Shipped parameter tables: DDQN hyperparameters and baseline settings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources


def _load(name: str) -> dict:
    return json.loads(resources.files("v3lplab.resources").joinpath(name).read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def ddqn_hyperparameters() -> dict:
    return _load("ddqn_hyperparameters.json")


@lru_cache(maxsize=None)
def baseline_table() -> dict:
    return _load("baseline_params.json")


@dataclass(frozen=True)
class TauResetParams:
    tau: int

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


@dataclass(frozen=True)
class EwaParams:
    n_arms: int
    eta: float
    interval: int

    def __post_init__(self):
        if self.n_arms < 1 or self.interval < 1 or self.eta < 0:
            raise ValueError("EWA needs n_arms >= 1, interval >= 1, eta >= 0")


def _entry(section: str, pool: str, period: int, l0: float):
    table = baseline_table()[section]
    try:
        return table[pool][str(period)][str(int(l0))]
    except KeyError:
        raise KeyError(f"no {section} parameters for pool={pool!r} period={period} l0={l0}") from None


def tau_reset_params(pool: str, period: int, l0: float) -> TauResetParams:
    return TauResetParams(int(_entry("tau_reset", pool, period, l0)))


def ewa_params(pool: str, period: int, l0: float) -> EwaParams:
    e = _entry("ewa", pool, period, l0)
    return EwaParams(int(e["N"]), float(e["eta"]), int(e["T_re"]))
