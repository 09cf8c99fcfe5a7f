"""Uniswap-V3-style position math on human-unit prices (token1 per token0, USD per ETH).

All functions are pure. Liquidity is expressed in the human-unit convention where
token0 amounts are ETH and token1 amounts are USD, so ``L = sqrt(x * y)`` on the
virtual reserves of the position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

TICK_BASE = 1.0001
MAX_TICK = 400_000
_LOG_BASE = math.log(TICK_BASE)


class Bounded(Protocol):
    @property
    def price_lower(self) -> float: ...

    @property
    def price_upper(self) -> float: ...


def _check_price(price: float, name: str = "price") -> None:
    if not math.isfinite(price) or price <= 0:
        raise ValueError(f"{name} must be positive and finite, got {price!r}")


def tick_to_price(tick: int) -> float:
    if abs(tick) > MAX_TICK:
        raise ValueError(f"tick {tick} outside [-{MAX_TICK}, {MAX_TICK}]")
    return TICK_BASE ** tick


def price_to_tick(price: float) -> int:
    """Largest tick whose price does not exceed ``price``."""
    _check_price(price)
    tick = math.floor(math.log(price) / _LOG_BASE)
    # log/division rounding can land one tick off an exact power
    if abs(tick + 1) <= MAX_TICK and tick_to_price(tick + 1) <= price:
        tick += 1
    elif abs(tick) <= MAX_TICK and tick_to_price(tick) > price:
        tick -= 1
    return tick


def snap_to_spacing(tick: int, spacing: int) -> int:
    """Nearest multiple of ``spacing``; exact halves round away from zero."""
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    tick = int(tick)
    sign = -1 if tick < 0 else 1
    return sign * ((2 * abs(tick) + spacing) // (2 * spacing)) * spacing


@dataclass(frozen=True)
class PriceBounds:
    """A price interval that need not sit on the tick grid."""

    price_lower: float
    price_upper: float

    def __post_init__(self):
        _check_price(self.price_lower, "price_lower")
        _check_price(self.price_upper, "price_upper")
        if not self.price_lower < self.price_upper:
            raise ValueError("zero-width or inverted range")


@dataclass(frozen=True)
class PriceRange:
    lower: int
    upper: int
    spacing: int = 1

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not self.lower < self.upper:
            raise ValueError(f"zero-width or inverted range [{self.lower}, {self.upper}]")
        if self.lower % self.spacing or self.upper % self.spacing:
            raise ValueError("range ends must be multiples of spacing")
        if max(abs(self.lower), abs(self.upper)) > MAX_TICK:
            raise ValueError("range ends outside the supported tick domain")
        if (self.upper - self.lower) % (2 * self.spacing):
            raise ValueError("range must span an even number of spacings")

    @classmethod
    def centered(cls, center: int, width: int, spacing: int) -> "PriceRange":
        """Range ``[center - width*spacing, center + width*spacing]``."""
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        return cls(center - width * spacing, center + width * spacing, spacing)

    @property
    def width(self) -> int:
        return (self.upper - self.lower) // (2 * self.spacing)

    @property
    def center(self) -> int:
        return (self.upper + self.lower) // 2

    @property
    def price_lower(self) -> float:
        return tick_to_price(self.lower)

    @property
    def price_upper(self) -> float:
        return tick_to_price(self.upper)

    def contains_tick(self, tick: int) -> bool:
        return self.lower <= tick < self.upper


@dataclass(frozen=True)
class Position:
    range: PriceRange
    liquidity: float
    open_price: float

    def __post_init__(self):
        if not self.liquidity >= 0:
            raise ValueError("liquidity must be nonnegative")
        _check_price(self.open_price, "open_price")

    def amounts(self, price: float) -> tuple[float, float]:
        return token_amounts(self.liquidity, self.range, price)

    def value(self, price: float) -> float:
        return position_value(self.liquidity, self.range, price)


@dataclass(frozen=True)
class FeeParams:
    fee_tier: float = 0.003
    gas_flat: float = 5.0

    def __post_init__(self):
        if not 0 < self.fee_tier < 1:
            raise ValueError("fee_tier must lie in (0, 1)")
        if not self.gas_flat >= 0:
            raise ValueError("gas_flat must be nonnegative")


def _sqrt_bounds(rng: Bounded) -> tuple[float, float]:
    sa, sb = math.sqrt(rng.price_lower), math.sqrt(rng.price_upper)
    if not sa < sb:
        raise ValueError("zero-width range")
    return sa, sb


def token_amounts(liquidity: float, rng: Bounded, price: float) -> tuple[float, float]:
    """(amount0 in ETH, amount1 in USD) held by ``liquidity`` units at ``price``."""
    _check_price(price)
    if liquidity < 0:
        raise ValueError("liquidity must be nonnegative")
    sa, sb = _sqrt_bounds(rng)
    sp = min(max(math.sqrt(price), sa), sb)
    return liquidity * (sb - sp) / (sp * sb), liquidity * (sp - sa)


def unit_value(rng: Bounded, price: float) -> float:
    """USD value of one liquidity unit; piecewise over the three price regimes."""
    _check_price(price)
    sa, sb = _sqrt_bounds(rng)
    if price <= sa * sa:
        return price * (1.0 / sa - 1.0 / sb)
    if price >= sb * sb:
        return sb - sa
    sp = math.sqrt(price)
    return 2.0 * sp - sa - price / sb


def position_value(liquidity: float, rng: Bounded, price: float) -> float:
    if liquidity < 0:
        raise ValueError("liquidity must be nonnegative")
    return liquidity * unit_value(rng, price)


def solve_liquidity(budget_usd: float, rng: Bounded, price: float) -> float:
    if not math.isfinite(budget_usd) or budget_usd <= 0:
        raise ValueError(f"budget must be positive, got {budget_usd!r}")
    return budget_usd / unit_value(rng, price)


def accrue_fee(pool_fee_usd: float, agent_liquidity: float,
               pool_active_liquidity: float, in_range: bool) -> float:
    """Agent's pro-rata cut of the hour's pool fees, treating it as marginal liquidity."""
    if pool_fee_usd < 0:
        raise ValueError("pool fee must be nonnegative")
    if agent_liquidity < 0:
        raise ValueError("agent liquidity must be nonnegative")
    if not in_range or agent_liquidity == 0:
        return 0.0
    if pool_active_liquidity < 0:
        raise ValueError("pool liquidity must be nonnegative")
    return pool_fee_usd * (agent_liquidity / (pool_active_liquidity + agent_liquidity))


def lvr_increment(position: Position, p_t: float, p_next: float) -> float:
    """Hold-the-amounts portfolio minus the LP position after a move ``p_t -> p_next``.

    Nonnegative because the LP value curve is concave in price; zero when the
    price is unchanged or stays on one side of the range.
    """
    _check_price(p_t, "p_t")
    _check_price(p_next, "p_next")
    lo, hi = position.range.price_lower, position.range.price_upper
    if p_t == p_next or max(p_t, p_next) <= lo or min(p_t, p_next) >= hi:
        return 0.0
    x0, y0 = position.amounts(p_t)
    # concavity makes this nonnegative; clip rounding residue
    return max(0.0, x0 * p_next + y0 - position.value(p_next))


def lvr_rate(liquidity: float, rng: Bounded, price: float, sigma: float) -> float:
    """Instantaneous LVR per unit time, ``sigma**2 * L * sqrt(p) / 4`` inside the range."""
    _check_price(price)
    if not rng.price_lower < price < rng.price_upper:
        return 0.0
    return sigma * sigma * liquidity * math.sqrt(price) / 4.0
