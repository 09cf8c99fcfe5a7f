"""Technical indicators on hourly OHLCV series.

Every function takes pandas Series and returns a Series aligned to the input.
Warm-up values may be NaN; degenerate denominators (flat windows) map to a
neutral value instead of inf.
"""

import numpy as np
import pandas as pd


def _ratio(num: pd.Series, den: pd.Series, fill: float = 0.0) -> pd.Series:
    out = num / den.where(den != 0)
    flat = (den == 0) & num.notna()
    return out.mask(flat, fill)


def ema(x: pd.Series, span: int) -> pd.Series:
    return x.ewm(span=span, adjust=False).mean()


def wilder(x: pd.Series, n: int) -> pd.Series:
    return x.ewm(alpha=1.0 / n, adjust=False).mean()


def true_range(high, low, close):
    prev = close.shift(1)
    tr = pd.concat([high - low, (high - prev).abs(), (low - prev).abs()], axis=1).max(axis=1)
    tr.iloc[0] = high.iloc[0] - low.iloc[0]
    return tr


def natr(high, low, close, n=14):
    return 100.0 * _ratio(wilder(true_range(high, low, close), n), close)


def dema(close, n=9):
    e = ema(close, n)
    return 2.0 * e - ema(e, n)


def directional(high, low, close, n=14):
    """Wilder +DI, -DI and ADX."""
    up = high.diff()
    down = -low.diff()
    plus_dm = up.where((up > down) & (up > 0), 0.0).fillna(0.0)
    minus_dm = down.where((down > up) & (down > 0), 0.0).fillna(0.0)
    atr = wilder(true_range(high, low, close), n)
    plus_di = 100.0 * _ratio(wilder(plus_dm, n), atr)
    minus_di = 100.0 * _ratio(wilder(minus_dm, n), atr)
    dx = 100.0 * _ratio((plus_di - minus_di).abs(), plus_di + minus_di)
    return plus_di, minus_di, wilder(dx, n)


def aroon_osc(high, low, n=14):
    # bars since the rolling extreme, window includes the current bar
    since_high = high.rolling(n + 1).apply(lambda w: n - int(np.argmax(w)), raw=True)
    since_low = low.rolling(n + 1).apply(lambda w: n - int(np.argmin(w)), raw=True)
    return 100.0 * (since_low - since_high) / n


def bop(open_, high, low, close):
    return _ratio(close - open_, high - low)


def cci(high, low, close, n=14):
    tp = (high + low + close) / 3.0
    sma = tp.rolling(n).mean()
    mad = tp.rolling(n).apply(lambda w: np.mean(np.abs(w - w.mean())), raw=True)
    return _ratio(tp - sma, 0.015 * mad)


def cmo(close, n=14):
    d = close.diff()
    gain = d.clip(lower=0).rolling(n).sum()
    loss = (-d).clip(lower=0).rolling(n).sum()
    return 100.0 * _ratio(gain - loss, gain + loss)


def momentum(close, n=10):
    return close - close.shift(n)


def trix(close, n=15):
    e3 = ema(ema(ema(close, n), n), n)
    return 100.0 * e3.pct_change()


def ultimate_oscillator(high, low, close, short=7, mid=14, long=28):
    prev = close.shift(1)
    bp = close - pd.concat([low, prev], axis=1).min(axis=1)
    tr = pd.concat([high, prev], axis=1).max(axis=1) - pd.concat([low, prev], axis=1).min(axis=1)
    avgs = [_ratio(bp.rolling(n).sum(), tr.rolling(n).sum(), 0.5) for n in (short, mid, long)]
    return 100.0 * (4.0 * avgs[0] + 2.0 * avgs[1] + avgs[2]) / 7.0


def stochastic(high, low, close, k=14, smooth=3, d=3):
    """Slow stochastic: %K smoothed over ``smooth`` bars, %D its ``d``-bar mean."""
    ll = low.rolling(k).min()
    hh = high.rolling(k).max()
    fast = 100.0 * _ratio(close - ll, hh - ll, 0.5)
    slow_k = fast.rolling(smooth).mean()
    return slow_k, slow_k.rolling(d).mean()


def smi(high, low, close, n=13, smooth=2):
    """Stochastic momentum index, double-EMA smoothed."""
    ll = low.rolling(n).min()
    hh = high.rolling(n).max()
    rel = close - (hh + ll) / 2.0
    rng = hh - ll
    num = ema(ema(rel.dropna(), smooth), smooth).reindex(close.index)
    den = ema(ema(rng.dropna(), smooth), smooth).reindex(close.index)
    return 100.0 * _ratio(num, den / 2.0)


def psar(high, low, step=0.02, max_step=0.2):
    h = high.to_numpy(dtype=float)
    lo = low.to_numpy(dtype=float)
    out = np.empty_like(h)
    rising = True
    af = step
    ep = h[0]
    sar = lo[0]
    out[0] = sar
    for i in range(1, len(h)):
        sar = sar + af * (ep - sar)
        if rising:
            sar = min(sar, lo[i - 1], lo[i - 2] if i > 1 else lo[i - 1])
            if lo[i] < sar:
                rising, sar, ep, af = False, ep, lo[i], step
            elif h[i] > ep:
                ep, af = h[i], min(af + step, max_step)
        else:
            sar = max(sar, h[i - 1], h[i - 2] if i > 1 else h[i - 1])
            if h[i] > sar:
                rising, sar, ep, af = True, ep, h[i], step
            elif lo[i] < ep:
                ep, af = lo[i], min(af + step, max_step)
        out[i] = sar
    return pd.Series(out, index=high.index)


def apo(close, fast=12, slow=26):
    return ema(close, fast) - ema(close, slow)
