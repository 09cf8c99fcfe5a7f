"""Replay buffers, double-Q targets, epsilon-greedy control and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from v3lplab import neural
from v3lplab.env import HISTORY_LEN, EpisodeMetrics, window
from v3lplab.neural import Adam, QNetwork, build_network, soft_update

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "td_loss", "valid_pnl", "epsilon")


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """FIFO ring buffer with uniform, with-replacement sampling.

    ``state_shape`` is fixed at construction: ``(D,)`` for flat transitions,
    ``(T, D)`` for sequence windows. Storage grows on demand up to ``capacity``.
    """

    def __init__(self, state_shape: tuple[int, ...], capacity: int = neural.BUFFER_SIZE,
                 rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.state_shape = tuple(state_shape)
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self._size = 0
        self._head = 0
        self._alloc(min(self.capacity, 1024))

    def _alloc(self, n: int) -> None:
        old = getattr(self, "_states", None)
        new = {
            "_states": np.empty((n,) + self.state_shape),
            "_next": np.empty((n,) + self.state_shape),
            "_actions": np.empty(n, dtype=np.int64),
            "_rewards": np.empty(n),
            "_dones": np.empty(n),
        }
        if old is not None:
            for k, arr in new.items():
                arr[: self._size] = getattr(self, k)[: self._size]
        for k, arr in new.items():
            setattr(self, k, arr)

    def __len__(self) -> int:
        return self._size

    def push(self, state, action: int, reward: float, next_state, done: bool) -> None:
        state = np.asarray(state, dtype=float)
        next_state = np.asarray(next_state, dtype=float)
        if state.shape != self.state_shape or next_state.shape != self.state_shape:
            raise ValueError(f"transition states must have shape {self.state_shape}, "
                             f"got {state.shape} and {next_state.shape}")
        if self._size < self.capacity:
            i = self._size
            if i == len(self._rewards):
                self._alloc(min(self.capacity, 2 * i))
            self._size += 1
        else:
            i = self._head
            self._head = (self._head + 1) % self.capacity
        self._states[i] = state
        self._next[i] = next_state
        self._actions[i] = action
        self._rewards[i] = reward
        self._dones[i] = float(done)

    def _order(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % max(self._size, 1)

    def contents(self) -> list[tuple]:
        """Stored transitions oldest first, as (state, action, reward, next_state, done)."""
        return [(self._states[i], int(self._actions[i]), float(self._rewards[i]),
                 self._next[i], bool(self._dones[i])) for i in self._order()]

    def sample(self, batch_size: int, min_size: int | None = None) -> Batch:
        need = batch_size if min_size is None else min_size
        if self._size < max(need, 1):
            raise RuntimeError(f"buffer holds {self._size} transitions, need {max(need, 1)}")
        idx = self.rng.integers(0, self._size, size=batch_size)
        return Batch(self._states[idx], self._actions[idx], self._rewards[idx],
                     self._next[idx], self._dones[idx])


def select_action(q, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy with probability ``1 - epsilon`` (ties go to the lowest index), else uniform."""
    q = np.asarray(q)
    if q.size == 0:
        raise ValueError("empty Q vector")
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def ddqn_target(rewards, dones, q_policy_next, q_target_next, gamma: float) -> np.ndarray:
    """``r + gamma * (1 - done) * Q_target(s', argmax_a Q_policy(s', a))``."""
    q_policy_next = np.atleast_2d(q_policy_next)
    q_target_next = np.atleast_2d(q_target_next)
    if q_policy_next.shape != q_target_next.shape:
        raise ValueError("policy and target Q tables differ in shape")
    best = np.argmax(q_policy_next, axis=1)
    bootstrap = q_target_next[np.arange(len(best)), best]
    return np.asarray(rewards, dtype=float) + gamma * (1.0 - np.asarray(dones, dtype=float)) * bootstrap


def batch_targets(batch: Batch, policy: QNetwork, target: QNetwork, gamma: float) -> np.ndarray:
    return ddqn_target(batch.rewards, batch.dones, policy.q_values(batch.next_states),
                       target.q_values(batch.next_states), gamma)


@dataclass
class TrainConfig:
    gamma: float = neural.GAMMA
    batch_size: int = neural.BATCH_SIZE
    buffer_size: int = neural.BUFFER_SIZE
    lr: float = neural.LEARNING_RATE
    clip_norm: float | None = neural.CLIP_NORM
    target_rate: float = neural.TARGET_UPDATE_RATE
    hidden: tuple[int, ...] = neural.HIDDEN_UNITS
    ssm_hidden: int = 64
    history_len: int = HISTORY_LEN
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    warmup: int = 1000
    patience: int = 10
    max_epochs: int = 200
    steps_per_epoch: int | None = None
    train_every: int = 1
    eval_max_steps: int = 10_000
    seed: int = 0

    def __post_init__(self):
        for name in ("eps_start", "eps_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.train_every < 1:
            raise ValueError("train_every must be >= 1")
        self.hidden = tuple(self.hidden)


def epsilon_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    horizon = max(1, int(cfg.eps_fraction * total_steps))
    frac = min(1.0, step / horizon)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


class _History:
    """Turns raw observations into network inputs: the observation itself, or a window."""

    def __init__(self, kind: str, length: int):
        self.kind = kind
        self.buf = deque(maxlen=length)
        self.length = length

    def reset(self, obs):
        self.buf.clear()
        return self.push(obs)

    def push(self, obs):
        if self.kind == "dueling":
            return np.asarray(obs, dtype=float)
        self.buf.append(np.asarray(obs, dtype=float))
        return window(self.buf, self.length)


def make_network(kind: str, obs_dim: int, n_actions: int, cfg: TrainConfig, seed: int) -> QNetwork:
    if kind == "dueling":
        arch = {"kind": "dueling", "obs_dim": obs_dim, "n_actions": n_actions, "hidden": list(cfg.hidden)}
    elif kind == "mamba":
        arch = {"kind": "mamba", "obs_dim": obs_dim, "n_actions": n_actions,
                "history": cfg.history_len, "ssm_hidden": cfg.ssm_hidden, "hidden": cfg.hidden[-1],
                "activation": "gelu"}
    else:
        raise ValueError(f"unknown agent kind {kind!r}")
    return build_network(arch, seed=seed)


def _kind_of(net: QNetwork) -> str:
    return net.arch["kind"]


def evaluate(env, net: QNetwork, kind: str | None = None) -> EpisodeMetrics:
    """Greedy rollout over the whole slice; the environment is reset first."""
    kind = kind or _kind_of(net)
    hist = _History(kind, net.arch.get("history", HISTORY_LEN))
    state = hist.reset(env.reset())
    while not env.done:
        tr = env.step(int(np.argmax(net.q_values(state))))
        state = hist.push(tr.next_state)
    return env.metrics


def greedy_return(env, net: QNetwork, max_steps: int = 10_000) -> float:
    """Undiscounted greedy episode return for environments without metrics."""
    hist = _History(_kind_of(net), net.arch.get("history", HISTORY_LEN))
    state = hist.reset(env.reset())
    total = 0.0
    for _ in range(max_steps):
        tr = env.step(int(np.argmax(net.q_values(state))))
        total += tr.reward
        state = hist.push(tr.next_state)
        if tr.done:
            break
    return total


def validation_score(env, net: QNetwork, cfg: TrainConfig) -> float:
    if hasattr(env, "metrics"):
        return evaluate(env, net).pnl_hedged
    return greedy_return(env, net, cfg.eval_max_steps)


@dataclass
class TrainResult:
    net: QNetwork
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    final_net: QNetwork | None = None

    def write_log(self, path) -> None:
        write_train_log(self.log, path)


def write_train_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["td_loss"]), repr(r["valid_pnl"]), repr(r["epsilon"])])


def td_step(policy: QNetwork, target: QNetwork, opt: Adam, batch: Batch, gamma: float) -> float:
    """One MSE step on the double-Q targets; returns the batch loss."""
    y = batch_targets(batch, policy, target, gamma)
    q, cache = policy.forward(batch.states)
    rows = np.arange(len(y))
    err = q[rows, batch.actions] - y
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite TD loss")
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * err / len(y)
    _, grads = policy.backward(cache, dq)
    opt.step(policy, grads)
    return loss


def train(env, valid_env, kind: str, cfg: TrainConfig | None = None) -> TrainResult:
    """Epsilon-greedy DDQN training with soft target updates and validation early stopping.

    ``env`` and ``valid_env`` must provide ``reset() -> obs``, ``step(a) -> Transition``,
    ``done``, ``n_actions`` and ``obs_dim``. An epoch is one pass over the training
    episode unless ``cfg.steps_per_epoch`` is set. Returns the network with the best
    validation score.
    """
    cfg = cfg or TrainConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    buffer_rng = np.random.default_rng(seeds[1])
    eps_rng = np.random.default_rng(seeds[2])

    policy = make_network(kind, env.obs_dim, env.n_actions, cfg, init_seed)
    target = policy.copy()
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)
    shape = policy.input_shape
    buffer = ReplayBuffer(shape, cfg.buffer_size, buffer_rng)
    hist = _History(kind, cfg.history_len)

    steps_per_epoch = cfg.steps_per_epoch or getattr(env, "episode_length", None)
    if not steps_per_epoch:
        raise ValueError("steps_per_epoch is required for environments without episode_length")
    total_steps = cfg.max_epochs * steps_per_epoch

    result = TrainResult(net=policy.copy())
    wait = 0
    step = 0
    state = hist.reset(env.reset())
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        eps = epsilon_at(step, total_steps, cfg)
        for _ in range(steps_per_epoch):
            eps = epsilon_at(step, total_steps, cfg)
            action = select_action(policy.q_values(state), eps, eps_rng)
            tr = env.step(action)
            next_state = hist.push(tr.next_state)
            buffer.push(state, action, tr.reward, next_state, tr.done)
            state = hist.reset(env.reset()) if env.done else next_state
            step += 1
            if len(buffer) >= max(cfg.warmup, 1) and step % cfg.train_every == 0:
                batch = buffer.sample(cfg.batch_size, min_size=1)
                try:
                    losses.append(td_step(policy, target, opt, batch, cfg.gamma))
                except FloatingPointError as exc:
                    raise FloatingPointError(f"training diverged at epoch {epoch}, step {step}: {exc}") from None
                soft_update(target, policy, cfg.target_rate)
        score = validation_score(valid_env, policy, cfg)
        td = float(np.median(losses)) if losses else float("nan")
        result.log.append({"epoch": epoch, "td_loss": td, "valid_pnl": float(score), "epsilon": float(eps)})
        logger.info("epoch %d td_loss=%.6g valid=%.6g eps=%.3f", epoch, td, score, eps)
        if score > result.best_score:
            result.best_score = float(score)
            result.best_epoch = epoch
            result.net = policy.copy()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    result.final_net = policy
    return result
