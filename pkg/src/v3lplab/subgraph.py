"""Paginated pool-hour client for a Uniswap V3 subgraph endpoint."""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor

import requests

from v3lplab.amm import price_to_tick
from v3lplab.pipeline import HOUR, PoolHourRow

logger = logging.getLogger(__name__)

POOL_HOURS_QUERY = """
query poolHours($pool: String!, $start: Int!, $end: Int!, $first: Int!) {
  poolHourDatas(first: $first, orderBy: periodStartUnix, orderDirection: asc,
                where: {pool: $pool, periodStartUnix_gte: $start, periodStartUnix_lt: $end}) {
    periodStartUnix
    open
    high
    low
    close
    volumeUSD
    feesUSD
    liquidity
  }
}
"""

_POOL_ID = re.compile(r"^0x[0-9a-fA-F]{40}$")


class SubgraphTransportError(RuntimeError):
    """Endpoint unreachable or returned a non-2xx status; safe to retry."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class SubgraphParseError(ValueError):
    def __init__(self, field: str, detail: str):
        super().__init__(f"malformed response field {field!r}: {detail}")
        self.field = field


def _parse_entry(entry: dict, liquidity_scale: float) -> PoolHourRow:
    def get(key, conv):
        if key not in entry:
            raise SubgraphParseError(key, "missing")
        try:
            return conv(entry[key])
        except (TypeError, ValueError) as exc:
            raise SubgraphParseError(key, str(exc)) from None

    close = get("close", float)
    if not close > 0:
        raise SubgraphParseError("close", f"non-positive price {close!r}")
    return PoolHourRow(
        timestamp=get("periodStartUnix", int),
        open=get("open", float),
        high=get("high", float),
        low=get("low", float),
        close=close,
        volume_usd=get("volumeUSD", float),
        fees_usd=get("feesUSD", float),
        active_liquidity=get("liquidity", float) / liquidity_scale,
        tick=price_to_tick(close),
    )


class SubgraphClient:
    """Pool-hour fetcher.

    Pages are requested with a timestamp cursor (``periodStartUnix_gte``), so a
    repeated or overlapping page only produces duplicates, which are removed
    after merging. Raw liquidity is divided by ``10**((decimals0 + decimals1)/2)``
    to express it in the human-unit convention used by :mod:`v3lplab.amm`.
    """

    def __init__(self, endpoint_url: str, page_size: int = 1000, max_attempts: int = 3,
                 backoff: float = 0.5, timeout: float = 30.0, decimals: tuple[int, int] = (6, 18),
                 session: requests.Session | None = None):
        if page_size < 1:
            raise ValueError("page_size must be positive")
        self.endpoint_url = endpoint_url
        self.page_size = page_size
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self.liquidity_scale = 10.0 ** ((decimals[0] + decimals[1]) / 2)
        self.session = session or requests.Session()

    def _post(self, body: dict) -> dict:
        last = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(self.endpoint_url, json=body, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
                last = exc
                logger.warning("subgraph request failed (attempt %d/%d): %s",
                               attempt, self.max_attempts, exc)
                if attempt < self.max_attempts:
                    time.sleep(self.backoff * attempt)
            except ValueError as exc:
                raise SubgraphParseError("body", f"invalid JSON: {exc}") from None
        raise SubgraphTransportError(str(last), self.max_attempts)

    def fetch_page(self, pool_id: str, start: int, end: int) -> list[PoolHourRow]:
        body = {"query": POOL_HOURS_QUERY,
                "variables": {"pool": pool_id.lower(), "start": start, "end": end,
                              "first": self.page_size}}
        payload = self._post(body)
        if payload.get("errors"):
            raise SubgraphParseError("errors", str(payload["errors"]))
        try:
            entries = payload["data"]["poolHourDatas"]
        except (KeyError, TypeError):
            raise SubgraphParseError("data.poolHourDatas", "missing") from None
        if not isinstance(entries, list):
            raise SubgraphParseError("data.poolHourDatas", "not a list")
        return [_parse_entry(e, self.liquidity_scale) for e in entries]

    def _fetch_window(self, pool_id: str, start: int, end: int) -> list[PoolHourRow]:
        rows = []
        cursor = start
        stalls = 0
        while cursor < end:
            page = self.fetch_page(pool_id, cursor, end)
            rows.extend(page)
            if len(page) < self.page_size:
                break
            nxt = max(r.timestamp for r in page) + 1
            if nxt <= cursor:
                # a replayed page; ask again rather than stop short
                stalls += 1
                if stalls >= self.max_attempts:
                    raise SubgraphTransportError(f"pagination cursor stuck at {cursor}", stalls)
                continue
            stalls = 0
            cursor = nxt
        return rows

    def fetch_pool_hours(self, pool_id: str, time_window: tuple[int, int],
                         workers: int = 1) -> list[PoolHourRow]:
        if not _POOL_ID.match(pool_id):
            raise ValueError(f"malformed pool id {pool_id!r}")
        start, end = int(time_window[0]), int(time_window[1])
        if end <= start:
            return []
        if workers <= 1:
            rows = self._fetch_window(pool_id, start, end)
        else:
            # hour-aligned chunks, merged then deduplicated
            n_hours = -(-(end - start) // HOUR)
            per = -(-n_hours // workers) * HOUR
            bounds = [(s, min(s + per, end)) for s in range(start, end, per)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = pool.map(lambda b: self._fetch_window(pool_id, *b), bounds)
                rows = [r for part in parts for r in part]
        merged = {}
        for r in rows:
            if start <= r.timestamp < end:
                merged.setdefault(r.timestamp, r)
        return [merged[t] for t in sorted(merged)]


def fetch_pool_hours(endpoint_url: str, pool_id: str, time_window: tuple[int, int],
                     page_size: int = 1000, workers: int = 1, **kwargs) -> list[PoolHourRow]:
    client = SubgraphClient(endpoint_url, page_size=page_size, **kwargs)
    return client.fetch_pool_hours(pool_id, time_window, workers=workers)
