"""Pool-hour ingestion, cleaning, feature construction, pruning, normalization and splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from v3lplab import indicators as ta

logger = logging.getLogger(__name__)

POOL_HOUR_COLUMNS = ("timestamp", "open", "high", "low", "close",
                     "volume_usd", "fees_usd", "active_liquidity", "tick")

FEATURE_NAMES = (
    "hourly_open_price", "high_over_open", "low_over_open", "close_over_open",
    "hourly_volume_usd", "dema_over_open", "dmi", "aroon_osc", "bop", "cci_14",
    "cci_20", "cmo", "mom", "trix", "uo", "stoch_k", "stoch_d", "stoch_kd_diff",
    "smi_1", "smi_2", "smi_3", "natr", "tr", "psar_over_open", "adx", "apo",
    "ht_dcperiod", "ht_dcphase",
)
# Hilbert-transform cycle features are carried as zero placeholders.
OPTIONAL_FEATURES = ("ht_dcperiod", "ht_dcphase")
DROPPED_FEATURES = ("adx", "apo", "ht_dcperiod", "ht_dcphase",
                    "cci_20", "smi_1", "stoch_k", "stoch_d")
KEPT_FEATURES = tuple(f for f in FEATURE_NAMES if f not in DROPPED_FEATURES)
LOG_FEATURES = ("hourly_open_price", "hourly_volume_usd")
WARMUP = 50
HOUR = 3600


@dataclass(frozen=True)
class PoolHourRow:
    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume_usd: float
    fees_usd: float
    active_liquidity: float
    tick: int

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self))


def write_pool_hours(rows: Iterable[PoolHourRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POOL_HOUR_COLUMNS)
        for r in rows:
            w.writerow([r.timestamp, repr(r.open), repr(r.high), repr(r.low), repr(r.close),
                        repr(r.volume_usd), repr(r.fees_usd), repr(r.active_liquidity), r.tick])


def read_pool_hours(path) -> list[PoolHourRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(POOL_HOUR_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for line in reader:
            try:
                out.append(PoolHourRow(
                    timestamp=int(line["timestamp"]),
                    open=float(line["open"]), high=float(line["high"]),
                    low=float(line["low"]), close=float(line["close"]),
                    volume_usd=float(line["volume_usd"]), fees_usd=float(line["fees_usd"]),
                    active_liquidity=float(line["active_liquidity"]),
                    tick=int(line["tick"]),
                ))
            except ValueError as exc:
                raise ValueError(f"{path}: line {reader.line_num}: {exc}") from None
    return out


def clean_rows(raw: Sequence[PoolHourRow]) -> list[PoolHourRow]:
    """First row per timestamp, non-finite rows dropped, sorted by time."""
    seen = set()
    kept = []
    for row in raw:
        if row.timestamp in seen:
            continue
        seen.add(row.timestamp)
        if row.is_finite():
            kept.append(row)
    kept.sort(key=lambda r: r.timestamp)
    return kept


@dataclass
class FeatureFrame:
    names: tuple[str, ...]
    values: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = np.asarray(self.values, dtype=float)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.values.shape != (len(self.timestamps), len(self.names)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.timestamps)} rows x {len(self.names)} names")

    def __len__(self):
        return len(self.timestamps)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureFrame":
        idx = [self.names.index(n) for n in names]
        return FeatureFrame(tuple(names), self.values[:, idx], self.timestamps)

    def rows(self, start: int, stop: int) -> "FeatureFrame":
        return FeatureFrame(self.names, self.values[start:stop], self.timestamps[start:stop])

    def to_csv(self, path, extra: dict[str, Sequence] | None = None) -> None:
        df = pd.DataFrame(self.values, columns=list(self.names))
        df.insert(0, "timestamp", self.timestamps)
        for key, col in (extra or {}).items():
            df[key] = list(col)
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path, names: Sequence[str] | None = None) -> "FeatureFrame":
        df = pd.read_csv(path, float_precision="round_trip")
        if names is None:
            names = [c for c in df.columns if c in FEATURE_NAMES]
        return cls(tuple(names), df[list(names)].to_numpy(float), df["timestamp"].to_numpy())


def compute_features(rows: Sequence[PoolHourRow], warmup: int = WARMUP) -> FeatureFrame:
    """The 28 canonical features; the first ``warmup`` rows are consumed by lookbacks."""
    if len(rows) <= warmup:
        raise ValueError(f"need more than W={warmup} rows for indicator warm-up, got {len(rows)}")
    df = pd.DataFrame([(r.timestamp, r.open, r.high, r.low, r.close, r.volume_usd) for r in rows],
                      columns=["timestamp", "open", "high", "low", "close", "volume"])
    o, h, lo, c = df["open"], df["high"], df["low"], df["close"]
    plus_di, minus_di, adx = ta.directional(h, lo, c, 14)
    stoch_k, stoch_d = ta.stochastic(h, lo, c, 14, 3, 3)
    smi = ta.smi(h, lo, c, 13, 2)
    zeros = pd.Series(0.0, index=df.index)
    cols = {
        "hourly_open_price": o,
        "high_over_open": h / o,
        "low_over_open": lo / o,
        "close_over_open": c / o,
        "hourly_volume_usd": df["volume"],
        "dema_over_open": ta.dema(c, 9) / o,
        "dmi": plus_di - minus_di,
        "aroon_osc": ta.aroon_osc(h, lo, 14),
        "bop": ta.bop(o, h, lo, c),
        "cci_14": ta.cci(h, lo, c, 14),
        "cci_20": ta.cci(h, lo, c, 20),
        "cmo": ta.cmo(c, 14),
        "mom": ta.momentum(c, 10),
        "trix": ta.trix(c, 15),
        "uo": ta.ultimate_oscillator(h, lo, c, 7, 14, 28),
        "stoch_k": stoch_k,
        "stoch_d": stoch_d,
        "stoch_kd_diff": stoch_k - stoch_d,
        "smi_1": ta.ema(smi.dropna(), 3).reindex(df.index),
        "smi_2": ta.ema(smi.dropna(), 5).reindex(df.index),
        "smi_3": ta.ema(smi.dropna(), 8).reindex(df.index),
        "natr": ta.natr(h, lo, c, 14),
        "tr": ta.true_range(h, lo, c),
        "psar_over_open": ta.psar(h, lo, 0.02, 0.2) / o,
        "adx": adx,
        "apo": ta.apo(c, 12, 26),
        "ht_dcperiod": zeros,
        "ht_dcphase": zeros,
    }
    values = np.column_stack([cols[n].to_numpy(float) for n in FEATURE_NAMES])[warmup:]
    bad = ~np.isfinite(values)
    if bad.any():
        r, k = np.argwhere(bad)[0]
        raise ValueError(f"feature {FEATURE_NAMES[k]} is not finite at row {r + warmup}")
    return FeatureFrame(FEATURE_NAMES, values, df["timestamp"].to_numpy()[warmup:])


def _abs_corr(values: np.ndarray, names: Sequence[str]) -> np.ndarray:
    std = values.std(axis=0)
    flat = std == 0
    for i in np.flatnonzero(flat):
        logger.warning("feature %s has zero variance; treating its correlations as 0", names[i])
    centered = (values - values.mean(axis=0)) / np.where(flat, 1.0, std)
    corr = centered.T @ centered / len(values)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    return np.abs(corr)


def prune_features(frame: FeatureFrame, threshold: float = 0.8) -> list[str]:
    """Scan in frame order; drop a feature whose |corr| with any earlier feature exceeds ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if not np.isfinite(frame.values).all():
        raise ValueError("frame contains non-finite values")
    corr = _abs_corr(frame.values, frame.names)
    kept = []
    for j, name in enumerate(frame.names):
        if j == 0 or corr[j, :j].max() <= threshold:
            kept.append(name)
    return kept


@dataclass
class NormalizerStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    log: tuple[bool, ...]

    def to_json(self, path) -> None:
        payload = {
            "names": list(self.names),
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
            "log": list(self.log),
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "NormalizerStats":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tuple(d["names"]), np.array(d["mean"]), np.array(d["std"]), tuple(d["log"]))


def _log_columns(values: np.ndarray, names, log_flags) -> np.ndarray:
    out = values.copy()
    for j, (name, flag) in enumerate(zip(names, log_flags)):
        if flag:
            if (out[:, j] <= 0).any():
                raise ValueError(f"feature {name} must be strictly positive before log-transform")
            out[:, j] = np.log(out[:, j])
    return out


def fit_normalizer(train: FeatureFrame, log_features: Sequence[str] = LOG_FEATURES) -> NormalizerStats:
    if len(train) == 0:
        raise ValueError("cannot fit normalizer on an empty slice")
    flags = tuple(n in log_features for n in train.names)
    x = _log_columns(train.values, train.names, flags)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    for name, s in zip(train.names, std):
        if not s > 0:
            raise ValueError(f"feature {name} has zero standard deviation on the training slice")
    return NormalizerStats(train.names, mean, std, flags)


def apply_normalizer(stats: NormalizerStats, frame: FeatureFrame) -> FeatureFrame:
    if tuple(frame.names) != stats.names:
        frame = frame.select(stats.names)
    x = _log_columns(frame.values, frame.names, stats.log)
    return FeatureFrame(frame.names, (x - stats.mean) / stats.std, frame.timestamps)


def _utc(date: str) -> int:
    return int(datetime.strptime(date, "%Y-%m-%d").replace(tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True)
class PeriodSpec:
    """A dated window split into contiguous train/valid/test blocks; ``end`` is exclusive."""

    period: int
    start: str
    end: str
    n_train: int
    n_valid: int
    n_test: int

    @property
    def start_ts(self) -> int:
        return _utc(self.start)

    @property
    def end_ts(self) -> int:
        return _utc(self.end)

    @property
    def total(self) -> int:
        return self.n_train + self.n_valid + self.n_test


PERIOD_DATES = {1: ("2021-08-02", "2022-09-22"), 2: ("2021-09-12", "2022-11-03"),
                3: ("2021-10-24", "2022-12-14"), 4: ("2021-12-05", "2023-01-25")}
_PERIOD_COUNTS = {
    "ETH-USDC": {1: (7983, 984, 984), 2: (7983, 984, 1008), 3: (7983, 1008, 984), 4: (7984, 984, 981)},
    "ETH-USDT": {1: (7964, 984, 984), 2: (7972, 984, 983), 3: (7973, 984, 976), 4: (7958, 984, 954)},
}
PERIODS = {
    pool: {p: PeriodSpec(p, *PERIOD_DATES[p], *counts) for p, counts in by_period.items()}
    for pool, by_period in _PERIOD_COUNTS.items()
}


def period_spec(pool: str, period: int) -> PeriodSpec:
    try:
        return PERIODS[pool][period]
    except KeyError:
        raise KeyError(f"no period spec for pool={pool!r} period={period!r}") from None


def split_indices(timestamps: np.ndarray, spec: PeriodSpec) -> tuple[slice, slice, slice]:
    ts = np.asarray(timestamps)
    lo = int(np.searchsorted(ts, spec.start_ts, side="left"))
    hi = int(np.searchsorted(ts, spec.end_ts, side="left"))
    available = hi - lo
    if available < spec.total:
        raise ValueError(f"period {spec.period} window holds {available} rows, "
                         f"short by {spec.total - available}")
    if available > spec.total:
        logger.info("period %d: %d trailing rows beyond the split counts are unused",
                    spec.period, available - spec.total)
    a = lo + spec.n_train
    b = a + spec.n_valid
    return slice(lo, a), slice(a, b), slice(b, b + spec.n_test)


def split_dataset(frame: FeatureFrame, spec: PeriodSpec):
    tr, va, te = split_indices(frame.timestamps, spec)
    return frame.rows(tr.start, tr.stop), frame.rows(va.start, va.stop), frame.rows(te.start, te.stop)
