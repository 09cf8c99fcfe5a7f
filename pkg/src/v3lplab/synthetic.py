"""Deterministic synthetic pool-hour series for fixtures and smoke runs."""

from __future__ import annotations

import itertools
from importlib import resources

import numpy as np

from v3lplab.amm import price_to_tick
from v3lplab.pipeline import HOUR, PERIODS, WARMUP, PoolHourRow, read_pool_hours

FIXTURE_2000H = "fixture_2000h.csv"
FIXTURE_START = 1_627_862_400  # 2021-08-02T00:00:00Z
FIXTURE_SEED = 20210802


def gbm_pool_hours(n_hours: int, start_ts: int = FIXTURE_START, seed: int = 0,
                   p0: float = 2500.0, sigma: float = 0.007, drift: float = 0.0,
                   fee_tier: float = 0.003, mean_volume: float = 1.0e6,
                   liquidity: float = 1.0e7, substeps: int = 6,
                   timestamps: np.ndarray | None = None) -> list[PoolHourRow]:
    """Hourly OHLC from a GBM sampled ``substeps`` times per hour.

    ``sigma`` is the hourly log-volatility. Volume is lognormal and loosely
    proportional to the hour's absolute return; fees are ``fee_tier * volume``.
    """
    rng = np.random.default_rng(seed)
    if timestamps is None:
        timestamps = start_ts + HOUR * np.arange(n_hours, dtype=np.int64)
    n = len(timestamps)
    dt = 1.0 / substeps
    shocks = rng.standard_normal((n, substeps))
    log_steps = (drift - 0.5 * sigma**2) * dt + sigma * np.sqrt(dt) * shocks
    log_path = np.log(p0) + np.cumsum(log_steps.ravel()).reshape(n, substeps)
    opens = np.concatenate([[np.log(p0)], log_path[:-1, -1]])
    paths = np.exp(np.column_stack([opens, log_path]))
    activity = np.abs(np.log(paths[:, -1] / paths[:, 0])) / sigma
    volume = mean_volume * rng.lognormal(-0.125, 0.5, n) * (0.5 + 0.5 * activity)
    active = liquidity * rng.lognormal(-0.02, 0.2, n)
    rows = []
    for i in range(n):
        path = paths[i]
        close = float(path[-1])
        rows.append(PoolHourRow(
            timestamp=int(timestamps[i]),
            open=float(path[0]),
            high=float(path.max()),
            low=float(path.min()),
            close=close,
            volume_usd=float(volume[i]),
            fees_usd=float(fee_tier * volume[i]),
            active_liquidity=float(active[i]),
            tick=price_to_tick(close),
        ))
    return rows


def load_fixture_2000h() -> list[PoolHourRow]:
    """The bundled 2,000-hour fixture shipped with the package."""
    path = resources.files("v3lplab.resources").joinpath(FIXTURE_2000H)
    with resources.as_file(path) as p:
        return read_pool_hours(p)


def make_fixture_2000h() -> list[PoolHourRow]:
    return gbm_pool_hours(2000, seed=FIXTURE_SEED, mean_volume=4.0e6)


def _missing_per_segment(pool: str) -> tuple[list[int], list[int]]:
    """Hours to drop in each of the 7 segments cut by the four period windows.

    Window k covers segments k..k+3; the drop counts are chosen so that every
    window holds exactly its train+valid+test total.
    """
    specs = [PERIODS[pool][k] for k in (1, 2, 3, 4)]
    cuts = sorted({s.start_ts for s in specs} | {s.end_ts for s in specs})
    deficits = [(s.end_ts - s.start_ts) // HOUR - s.total for s in specs]
    top = max(deficits)
    for g2, g3, g4 in itertools.product(range(top + 1), repeat=3):
        g1 = deficits[0] - g2 - g3 - g4
        g5 = deficits[1] - g2 - g3 - g4
        g6 = deficits[2] - g3 - g4 - g5
        g7 = deficits[3] - g4 - g5 - g6
        gaps = [g1, g2, g3, g4, g5, g6, g7]
        if min(gaps) >= 0:
            return cuts, gaps
    raise ValueError(f"no consistent gap layout for {pool}")


def period_fixture_timestamps(pool: str) -> np.ndarray:
    """Hourly timestamps from the first period start (minus warm-up) to the last end,
    with hours removed so each period window matches its split counts exactly."""
    cuts, gaps = _missing_per_segment(pool)
    lead = cuts[0] - (WARMUP + 14) * HOUR
    keep = [np.arange(lead, cuts[0], HOUR, dtype=np.int64)]
    for (a, b), gap in zip(zip(cuts[:-1], cuts[1:]), gaps):
        hours = np.arange(a, b, HOUR, dtype=np.int64)
        # drop evenly spaced hours away from the segment edges
        drop = set(np.linspace(1, len(hours) - 2, gap, dtype=int).tolist()) if gap else set()
        keep.append(np.array([h for i, h in enumerate(hours) if i not in drop], dtype=np.int64))
    return np.concatenate(keep)


def period_fixture(pool: str, seed: int = 7) -> list[PoolHourRow]:
    return gbm_pool_hours(0, seed=seed, timestamps=period_fixture_timestamps(pool))
