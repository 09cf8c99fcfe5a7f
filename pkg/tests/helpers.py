"""Small environments with known solutions, shared by several test modules."""

import numpy as np

from v3lplab.env import Transition


class ChainMDP:
    """Five states in a row; state 4 is terminal.

    Action 1 moves right, action 0 moves left (state 0 stays put). Stepping from
    3 into 4 pays 1 and ends the episode, every other move pays 0. Episodes start
    at a random non-terminal state and are truncated after ``horizon`` steps
    without marking the transition terminal.
    """

    n_states = 5
    n_actions = 2
    obs_dim = 5

    def __init__(self, seed=0, horizon=20, start=None):
        self.rng = np.random.default_rng(seed)
        self.horizon = horizon
        self.start = start
        self.reset()

    def obs(self):
        return np.eye(self.n_states)[self.s]

    def reset(self):
        self.s = self.start if self.start is not None else int(self.rng.integers(0, 4))
        self.k = 0
        self.terminal = False
        return self.obs()

    @property
    def done(self):
        return self.terminal or self.k >= self.horizon

    def step(self, a):
        before = self.obs()
        if a == 1:
            nxt = self.s + 1
        else:
            nxt = max(self.s - 1, 0)
        reward = 1.0 if nxt == 4 else 0.0
        self.s = nxt
        self.k += 1
        self.terminal = nxt == 4
        return Transition(before, a, reward, self.obs(), self.terminal)


def chain_q_star(gamma, tol=1e-14):
    """Q* of :class:`ChainMDP` by plain value iteration over the 4 live states."""
    v = np.zeros(5)
    while True:
        q = np.zeros((5, 2))
        for s in range(4):
            left, right = max(s - 1, 0), s + 1
            q[s, 0] = gamma * v[left]
            q[s, 1] = (1.0 if right == 4 else 0.0) + (0.0 if right == 4 else gamma * v[right])
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            return q[:4]
        v = v_new


def chain_q_closed_form(gamma):
    right = np.array([gamma**3, gamma**2, gamma, 1.0])
    left = gamma * np.array([right[0], right[0], right[1], right[2]])
    return np.column_stack([left, right])


class NoisyBandit:
    """Single-state environment: every step ends the episode and pays ``means[a]`` plus noise.

    Rewards actually paid are kept per arm so tests can compare against sample means.
    """

    obs_dim = 1

    def __init__(self, means=(1.0, 2.0, 3.0), noise=0.1, seed=0):
        self.means = np.asarray(means, dtype=float)
        self.n_actions = len(self.means)
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.paid = [[] for _ in self.means]
        self.done = False

    def reset(self):
        self.done = False
        return np.ones(1)

    def step(self, a):
        r = float(self.means[a] + self.noise * self.rng.standard_normal())
        self.paid[a].append(r)
        self.done = True
        return Transition(np.ones(1), a, r, np.ones(1), True)

    def sample_means(self):
        return np.array([np.mean(p) for p in self.paid])
