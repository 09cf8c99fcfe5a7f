"""Comparison strategies, all run through the same environment accounting.

* tau-reset: hold a symmetric range of half-width ``tau`` spacings, recenter on exit
* EWA: exponential weights over candidate widths, re-drawn every ``interval`` hours
* DP: value iteration on a discretized-GBM price grid
* buy-and-hold and daily rebalancing
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from v3lplab.amm import (
    PriceRange, lvr_rate, price_to_tick, snap_to_spacing, solve_liquidity, tick_to_price,
)
from v3lplab.env import EpisodeMetrics, LiquidityEnv
from v3lplab.params import EwaParams
from v3lplab.pipeline import PoolHourRow

DAY = 86_400
# hourly discount; 1/(1 - gamma) = 1000 hours, the scale of a backtest window
DP_GAMMA = 0.999


def run_policy(env: LiquidityEnv, policy: Callable[[LiquidityEnv], int]) -> EpisodeMetrics:
    env.reset()
    while not env.done:
        env.step(policy(env))
    return env.metrics


# -- tau-reset ---------------------------------------------------------------

def tau_reset_policy(center: int, width: int, tick: int, tau: int, spacing: int) -> int:
    if width > 0 and center - tau * spacing <= tick <= center + tau * spacing:
        return 0
    return tau


def tau_reset(env: LiquidityEnv, tau: int) -> EpisodeMetrics:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return run_policy(env, lambda e: tau_reset_policy(e.center, e.width, e.tick, tau, e.spacing))


# -- exponential weights -----------------------------------------------------

def ewa_probabilities(cumulative_rewards, eta: float) -> np.ndarray:
    r = np.asarray(cumulative_rewards, dtype=float)
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if not np.isfinite(r).all():
        raise ValueError("cumulative rewards must be finite")
    z = eta * r
    w = np.exp(z - z.max())
    return w / w.sum()


class ExpWeights:
    def __init__(self, n_arms: int, eta: float):
        self.eta = eta
        self.cumulative = np.zeros(n_arms)

    def probabilities(self) -> np.ndarray:
        return ewa_probabilities(self.cumulative, self.eta)

    def update(self, rewards) -> None:
        self.cumulative += np.asarray(rewards, dtype=float)

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.cumulative), p=self.probabilities()))


def interval_return(env: LiquidityEnv, start: int, stop: int, width: int) -> float:
    """Return on ``l0`` of deploying ``width`` at hour ``start`` and holding until ``stop``."""
    rows = env.rows[start:stop + 1]
    sub = LiquidityEnv(rows, np.zeros((len(rows), 0)), env.reward_config,
                       env.spacing, max(env.max_width, width))
    sub.step(width)
    while not sub.done:
        sub.step(0)
    m = sub.metrics
    return (m.fee - m.gas - m.lvr) / m.l0


def ewa_run(env: LiquidityEnv, params: EwaParams, rng: np.random.Generator,
            history: list | None = None) -> EpisodeMetrics:
    """Full-information EWA: every arm's return over the elapsed interval is simulated.

    Arm ``n`` (0-based) is width ``n + 1``. If ``history`` is a list, the
    probability vector in force after each re-evaluation is appended to it.
    """
    if params.n_arms > env.max_width:
        raise ValueError(f"{params.n_arms} arms exceed max width {env.max_width}")
    weights = ExpWeights(params.n_arms, params.eta)
    env.reset()
    last = 0
    while not env.done:
        t = env.t
        if t % params.interval == 0:
            if t > 0:
                weights.update([interval_return(env, last, t, n + 1) for n in range(params.n_arms)])
            if history is not None:
                history.append(weights.probabilities())
            last = t
            env.step(weights.draw(rng) + 1)
        else:
            env.step(0)
    return env.metrics


# -- dynamic programming -----------------------------------------------------

@dataclass
class DenseDpModel:
    """Finite MDP: ``rewards[s, a]`` and ``transitions[a, s, s']``."""

    rewards: np.ndarray
    transitions: np.ndarray
    gamma: float

    def check(self) -> None:
        _check_stochastic(self.transitions)

    def bellman(self, v: np.ndarray) -> np.ndarray:
        return self.rewards + self.gamma * np.einsum("ast,t->sa", self.transitions, v)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]


def _check_stochastic(kernel: np.ndarray) -> None:
    if (kernel < 0).any() or not np.allclose(kernel.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
        raise ValueError("transition kernel rows must be nonnegative and sum to 1")


@dataclass
class LpDpModel:
    """Liquidity-provision control on a log-price grid.

    A state is (current width ``w``, offset node ``j`` of the price from the
    position center); ``w = 0`` means no position. Action 0 keeps the
    position; action ``k`` recenters at the current price with width ``k``,
    pays gas and moves the offset to the center node. The per-hour objective is
    expected fee minus the variance-rate LVR of the position.
    """

    log_step: float
    kernel: np.ndarray        # (n, n) hourly move between offset nodes
    hourly: np.ndarray        # (W + 1, n) fee - LVR while holding
    gas: float
    gamma: float

    @property
    def n_nodes(self) -> int:
        return self.kernel.shape[0]

    @property
    def center(self) -> int:
        return self.n_nodes // 2

    @property
    def n_actions(self) -> int:
        return self.hourly.shape[0]

    @property
    def n_states(self) -> int:
        return self.hourly.size

    def check(self) -> None:
        _check_stochastic(self.kernel)

    def bellman(self, v: np.ndarray) -> np.ndarray:
        vw = v.reshape(self.hourly.shape)
        ev = vw @ self.kernel.T
        q = np.empty(self.hourly.shape + (self.n_actions,))
        q[:, :, 0] = self.hourly + self.gamma * ev
        c = self.center
        for k in range(1, self.n_actions):
            q[:, :, k] = -self.gas + self.hourly[k, c] + self.gamma * ev[k, c]
        return q.reshape(self.n_states, self.n_actions)

    def state_index(self, width: int, log_offset: float) -> int:
        j = int(round(log_offset / self.log_step)) + self.center
        j = min(max(j, 0), self.n_nodes - 1)
        return min(width, self.n_actions - 1) * self.n_nodes + j


@dataclass
class DpSolution:
    values: np.ndarray
    policy: np.ndarray
    residuals: list


def dp_solve(model, tol: float = 1e-8, max_iter: int = 100_000) -> DpSolution:
    """Value iteration until successive value functions differ by < ``tol`` in sup norm."""
    if not 0 <= model.gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    model.check()
    v = np.zeros(model.n_states)
    residuals = []
    for _ in range(max_iter):
        v_new = model.bellman(v).max(axis=1)
        res = float(np.max(np.abs(v_new - v)))
        residuals.append(res)
        v = v_new
        if res < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not reach {tol} in {max_iter} sweeps")
    return DpSolution(v, np.argmax(model.bellman(v), axis=1), residuals)


def gbm_kernel(n_nodes: int, log_step: float, sigma: float) -> np.ndarray:
    """One-hour transition matrix between log-price nodes; mass beyond the edges stays on them.

    Trinomial lattice (variance matched) when ``sigma <= log_step``, otherwise
    the normal distribution integrated over node cells.
    """
    k = np.zeros((n_nodes, n_nodes))
    if sigma == 0:
        return np.eye(n_nodes)
    if sigma <= log_step:
        p = 0.5 * (sigma / log_step) ** 2
        for i in range(n_nodes):
            k[i, i] += 1 - 2 * p
            k[i, max(i - 1, 0)] += p
            k[i, min(i + 1, n_nodes - 1)] += p
        return k
    def cdf(x):
        return 0.5 * (1 + math.erf(x / (sigma * math.sqrt(2))))

    for i in range(n_nodes):
        for j in range(n_nodes):
            lo = -math.inf if j == 0 else (j - i - 0.5) * log_step
            hi = math.inf if j == n_nodes - 1 else (j - i + 0.5) * log_step
            k[i, j] = cdf(hi) - cdf(lo)
    return k / k.sum(axis=1, keepdims=True)


def build_lp_model(train_rows: Sequence[PoolHourRow], l0: float, spacing: int, max_width: int,
                   gas: float, gamma: float = DP_GAMMA, n_nodes: int = 201) -> LpDpModel:
    """Estimate an :class:`LpDpModel` from a training slice.

    The grid spans +-4 sample standard deviations of the log price level (widened
    if needed to hold the widest range). Hourly volatility, mean pool fees and
    mean pool liquidity come from the same slice; the reference price is the
    slice's last close.
    """
    closes = np.array([r.close for r in train_rows])
    logp = np.log(closes)
    sigma = float(np.std(np.diff(logp))) if len(closes) > 2 else 0.0
    tick_log = math.log(1.0001)
    half = (n_nodes - 1) // 2
    span = max(4.0 * float(np.std(logp)), 1.5 * max_width * spacing * tick_log)
    step = span / half
    fee_bar = float(np.mean([r.fees_usd for r in train_rows]))
    pool_l = float(np.mean([r.active_liquidity for r in train_rows]))
    p_ref = float(closes[-1])
    offsets = (np.arange(n_nodes) - half) * step

    hourly = np.zeros((max_width + 1, n_nodes))
    center_tick = snap_to_spacing(price_to_tick(p_ref), spacing)
    for w in range(1, max_width + 1):
        rng = PriceRange.centered(center_tick, w, spacing)
        liq = solve_liquidity(l0, rng, p_ref)
        fee = fee_bar * liq / (pool_l + liq)
        half_width = w * spacing * tick_log
        for j, x in enumerate(offsets):
            if abs(x) < half_width:
                p = tick_to_price(center_tick) * math.exp(x)
                hourly[w, j] = fee - lvr_rate(liq, rng, p, sigma)
    return LpDpModel(step, gbm_kernel(n_nodes, step, sigma), hourly, gas, gamma)


def dp_run(env: LiquidityEnv, model: LpDpModel, solution: DpSolution) -> EpisodeMetrics:
    def act(e: LiquidityEnv) -> int:
        offset = math.log(e.price / tick_to_price(e.center))
        return int(solution.policy[model.state_index(e.width, offset)])
    return run_policy(env, act)


# -- simple references ---------------------------------------------------------

def buy_and_hold(rows: Sequence[PoolHourRow], l0: float) -> EpisodeMetrics:
    """Convert ``l0`` to ETH at the first open and hold to the last close."""
    if not rows:
        raise ValueError("empty slice")
    pnl = l0 * (rows[-1].close / rows[0].open - 1.0)
    return EpisodeMetrics(l0=l0, pnl_unhedged=pnl, steps=len(rows) - 1, pnl_basis="unhedged")


def daily_rebalance(env: LiquidityEnv, width: int) -> EpisodeMetrics:
    """Deploy at the first hour, then recenter at every UTC midnight."""
    if width < 1:
        raise ValueError("width must be >= 1")

    def act(e: LiquidityEnv) -> int:
        if e.t == 0 or e.timestamps[e.t] % DAY == 0:
            return width
        return 0
    return run_policy(env, act)
