"""Hourly liquidity-provision decision process.

The fund ``l`` is the hedged fund value: position value plus cash plus the
environment's residue account (undeployed capital, the short-delta hedge P&L and
gas paid). With that bookkeeping ``l[t+1] - l[t] = fee - gas - dLVR`` every hour.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from v3lplab.amm import (
    PriceRange, Position, accrue_fee, lvr_increment, price_to_tick, snap_to_spacing,
    solve_liquidity,
)
from v3lplab.pipeline import PoolHourRow

ORIGINAL = "original"
RISK_PENALIZED = "risk_penalized"
HISTORY_LEN = 32
TRACE_COLUMNS = ("t", "action", "fee", "gas", "lvr", "cash", "fund", "center", "width", "price")


@dataclass(frozen=True)
class RewardConfig:
    mode: str = ORIGINAL
    lam: float = 0.5
    l0: float = 250.0
    gas_flat: float = 5.0
    # restores the printed "+ dLVR" sign, for ablation only
    literal_lvr_sign: bool = False

    def __post_init__(self):
        if self.mode not in (ORIGINAL, RISK_PENALIZED):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if not self.l0 > 0:
            raise ValueError("l0 must be positive")
        if self.lam < 0 or self.gas_flat < 0:
            raise ValueError("lambda and gas_flat must be nonnegative")


def compute_reward(mode: str, fee: float, dlvr: float, gas_charged: float, action: int,
                   prev_action: int, lam: float, l0: float, literal_lvr_sign: bool = False) -> float:
    if mode == ORIGINAL:
        return fee - gas_charged + (dlvr if literal_lvr_sign else -dlvr)
    if mode == RISK_PENALIZED:
        if not l0 > 0:
            raise ValueError("l0 must be positive")
        switched = 1.0 if action != prev_action else 0.0
        return (fee - lam * dlvr - gas_charged - lam * switched) / l0
    raise ValueError(f"unknown reward mode {mode!r}")


@dataclass
class EnvState:
    features: np.ndarray
    cash: float
    center: int
    width: int
    fund: float


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class EpisodeMetrics:
    """Totals of one backtest run; ``pnl`` is the figure a report prints."""

    l0: float
    fee: float = 0.0
    gas: float = 0.0
    lvr: float = 0.0
    pnl_hedged: float = 0.0
    pnl_unhedged: float = 0.0
    reallocations: int = 0
    steps: int = 0
    pnl_basis: str = "hedged"

    @property
    def pnl(self) -> float:
        return self.pnl_hedged if self.pnl_basis == "hedged" else self.pnl_unhedged

    @property
    def rel_fee(self) -> float:
        return self.fee / self.l0

    @property
    def rel_gas(self) -> float:
        return self.gas / self.l0

    @property
    def rel_lvr(self) -> float:
        return self.lvr / self.l0

    @property
    def rel_pnl(self) -> float:
        return self.pnl / self.l0

    def to_dict(self) -> dict:
        return {
            "l0": self.l0, "fee": self.fee, "gas": self.gas, "lvr": self.lvr,
            "pnl_hedged": self.pnl_hedged, "pnl_unhedged": self.pnl_unhedged,
            "reallocations": self.reallocations, "steps": self.steps, "pnl_basis": self.pnl_basis,
            "rel_fee": self.rel_fee, "rel_gas": self.rel_gas, "rel_lvr": self.rel_lvr,
            "rel_pnl": self.rel_pnl,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeMetrics":
        keys = ("l0", "fee", "gas", "lvr", "pnl_hedged", "pnl_unhedged",
                "reallocations", "steps", "pnl_basis")
        return cls(**{k: d[k] for k in keys if k in d})


def observation(state: EnvState) -> np.ndarray:
    """``[features..., cash, center, width, fund]``."""
    return np.concatenate([state.features, [state.cash, state.center, state.width, state.fund]])


def window(history: Sequence[np.ndarray], length: int = HISTORY_LEN) -> np.ndarray:
    """Last ``length`` observations, left-padded by repeating the earliest one."""
    if len(history) == 0:
        raise ValueError("window needs at least one observation")
    recent = list(history)[-length:]
    pad = [recent[0]] * (length - len(recent))
    return np.stack(pad + recent)


class LiquidityEnv:
    """One slice of pool hours with aligned (normalized) feature rows.

    ``scale_obs`` presents the bookkeeping fields on a network-friendly scale:
    cash and fund over ``l0``, center as its offset from the market tick in
    units of ``spacing * max_width``, width over ``max_width``. The raw fields
    stay available through :meth:`state`.
    """

    def __init__(self, rows: Sequence[PoolHourRow], features: np.ndarray, reward: RewardConfig,
                 spacing: int = 60, max_width: int = 10, scale_obs: bool = True):
        features = np.asarray(features, dtype=float)
        if len(rows) < 2:
            raise ValueError("an episode slice needs at least 2 hours")
        if features.ndim != 2 or len(features) != len(rows):
            raise ValueError(f"features must be {len(rows)} x F, got {features.shape}")
        if spacing < 1 or max_width < 1:
            raise ValueError("spacing and max_width must be positive")
        self.rows = list(rows)
        self.features = features
        self.reward_config = reward
        self.spacing = spacing
        self.max_width = max_width
        self.scale_obs = scale_obs
        self.prices = np.array([r.close for r in self.rows])
        self.ticks = [price_to_tick(p) for p in self.prices]
        self.timestamps = np.array([r.timestamp for r in self.rows], dtype=np.int64)
        self.reset()

    @property
    def n_actions(self) -> int:
        return self.max_width + 1

    @property
    def obs_dim(self) -> int:
        return self.features.shape[1] + 4

    @property
    def episode_length(self) -> int:
        return len(self.rows) - 1

    @property
    def done(self) -> bool:
        return self.t >= len(self.rows) - 1

    @property
    def price(self) -> float:
        return float(self.prices[self.t])

    @property
    def tick(self) -> int:
        return self.ticks[self.t]

    def reset(self) -> np.ndarray:
        cfg = self.reward_config
        self.t = 0
        self.cash = 0.0
        self.reserve = cfg.l0
        self.hedge = 0.0
        self.gas_paid = 0.0
        self.center = snap_to_spacing(self.ticks[0], self.spacing)
        self.width = 0
        self.position: Position | None = None
        self.prev_action = 0
        self.fund = cfg.l0
        self.metrics = EpisodeMetrics(l0=cfg.l0)
        self.trace: list[tuple] = []
        return self.observe()

    def position_value(self, price: float | None = None) -> float:
        if self.position is None:
            return 0.0
        return self.position.value(self.price if price is None else price)

    def _revalue(self) -> float:
        return self.position_value() + self.cash + self.reserve + self.hedge - self.gas_paid

    def state(self) -> EnvState:
        return EnvState(self.features[self.t], self.cash, self.center, self.width, self.fund)

    def observe(self) -> np.ndarray:
        if not self.scale_obs:
            return observation(self.state())
        l0 = self.reward_config.l0
        offset = (self.center - self.tick) / (self.spacing * self.max_width)
        extra = [self.cash / l0, offset, self.width / self.max_width, self.fund / l0]
        return np.concatenate([self.features[self.t], extra])

    def _reallocate(self, width: int) -> None:
        price = self.price
        budget = self.cash + self.reserve + self.position_value(price)
        self.center = snap_to_spacing(self.tick, self.spacing)
        self.width = width
        rng = PriceRange.centered(self.center, width, self.spacing)
        self.position = Position(rng, solve_liquidity(budget, rng, price), price)
        self.cash = 0.0
        self.reserve = 0.0

    def step(self, action: int) -> Transition:
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        action = int(action)
        if not 0 <= action <= self.max_width:
            raise ValueError(f"action {action} outside 0..{self.max_width}")
        cfg = self.reward_config
        obs = self.observe()
        gas = 0.0
        if action != 0:
            self._reallocate(action)
            gas = cfg.gas_flat
            self.gas_paid += gas
            self.metrics.reallocations += 1

        p_t = self.price
        self.t += 1
        row = self.rows[self.t]
        p_next = self.price
        fee = dlvr = 0.0
        if self.position is not None:
            in_range = self.position.range.contains_tick(self.tick)
            fee = accrue_fee(row.fees_usd, self.position.liquidity, row.active_liquidity, in_range)
            dlvr = lvr_increment(self.position, p_t, p_next)
            amount0, _ = self.position.amounts(p_t)
            self.hedge -= amount0 * (p_next - p_t)
        self.cash += fee
        self.fund = self._revalue()

        reward = compute_reward(cfg.mode, fee, dlvr, gas, action, self.prev_action,
                                cfg.lam, cfg.l0, cfg.literal_lvr_sign)
        self.prev_action = action
        m = self.metrics
        m.fee += fee
        m.gas += gas
        m.lvr += dlvr
        m.steps += 1
        m.pnl_hedged = self.fund - cfg.l0
        m.pnl_unhedged = self.position_value() + self.cash + self.reserve - self.gas_paid - cfg.l0
        self.trace.append((self.t - 1, action, fee, gas, dlvr, self.cash, self.fund,
                           self.center, self.width, p_next))
        return Transition(obs, action, reward, self.observe(), self.done)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for rec in self.trace:
                w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in rec])
