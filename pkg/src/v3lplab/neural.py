"""Small numpy networks with hand-written backward passes.

Modules expose ``parameters()`` (name -> array, by reference), ``forward(x)``
returning ``(out, cache)`` and ``backward(cache, dout)`` returning
``(dx, grads)`` with grads keyed like ``parameters()``.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from v3lplab.params import ddqn_hyperparameters

CHECKPOINT_FORMAT = "v3lplab-params"
CHECKPOINT_VERSION = 1

_HP = ddqn_hyperparameters()
HIDDEN_UNITS = tuple(_HP["hidden_units"])
LEARNING_RATE = _HP["learning_rate"]
BATCH_SIZE = _HP["batch_size"]
BUFFER_SIZE = _HP["buffer_size"]
GAMMA = _HP["discount_factor"]
TARGET_UPDATE_RATE = _HP["target_update_rate"]
CLIP_NORM = _HP["gradient_clip_norm"]

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(z):
    return np.maximum(z, 0.0)


def _gelu_tanh(z):
    return np.tanh(_GELU_C * (z + 0.044715 * z * z * z))


def gelu(z):
    """tanh approximation"""
    return 0.5 * z * (1.0 + _gelu_tanh(z))


def gelu_grad(z, t=None):
    """Derivative of :func:`gelu`; ``t`` is the cached inner tanh if available."""
    t = _gelu_tanh(z) if t is None else t
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


class Module:
    def parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]

    def copy(self):
        return copy.deepcopy(self)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: str | None = None):
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        scale = math.sqrt(2.0 / n_in) if activation == "relu" else math.sqrt(1.0 / n_in)
        self.W = rng.normal(0.0, scale, (n_in, n_out))
        self.b = np.zeros(n_out)
        self.activation = activation

    def parameters(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x):
        z = x @ self.W + self.b
        out = relu(z) if self.activation == "relu" else z
        return out, (x, z)

    def backward(self, cache, dout):
        x, z = cache
        dz = dout * (z > 0) if self.activation == "relu" else dout
        return dz @ self.W.T, {"W": x.T @ dz, "b": dz.sum(axis=0)}


class SsmLayer(Module):
    """Recurrence ``h <- act(h @ A + x_t @ B)`` from ``h = 0``; returns the final state.

    ``activation="identity"`` turns it into a linear memory whose output equals
    ``sum_k x[T-1-k] @ B @ A^k``.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, activation: str = "gelu",
                 a_scale: float = 0.9):
        if activation not in ("gelu", "identity"):
            raise ValueError(f"unsupported activation {activation!r}")
        q, r = np.linalg.qr(rng.standard_normal((hidden, hidden)))
        self.A = a_scale * q * np.sign(np.diag(r))
        bound = 1.0 / math.sqrt(d_in)
        self.B = rng.uniform(-bound, bound, (d_in, hidden))
        self.activation = activation

    @property
    def hidden(self) -> int:
        return self.A.shape[0]

    def parameters(self):
        return {"A": self.A, "B": self.B}

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.B.shape[0]:
            raise ValueError(f"expected (batch, T, {self.B.shape[0]}) input, got {x.shape}")
        n, T, _ = x.shape
        xb = x @ self.B
        h = np.zeros((n, self.hidden))
        hs, zs = [h], []
        for t in range(T):
            z = h @ self.A + xb[:, t]
            if self.activation == "gelu":
                th = _gelu_tanh(z)
                h = 0.5 * z * (1.0 + th)
            else:
                th, h = None, z
            if not np.isfinite(h).all():
                raise FloatingPointError(f"non-finite SSM state at step {t}")
            zs.append((z, th))
            hs.append(h)
        out = h[0] if single else h
        return out, (x, hs, zs, single)

    def backward(self, cache, dout):
        x, hs, zs, single = cache
        dh = dout[None] if single else dout
        dA = np.zeros_like(self.A)
        dxb = np.empty(x.shape[:2] + (self.hidden,))
        for t in range(len(zs) - 1, -1, -1):
            z, th = zs[t]
            dz = dh * gelu_grad(z, th) if self.activation == "gelu" else dh
            dA += hs[t].T @ dz
            dxb[:, t] = dz
            dh = dz @ self.A.T
        dB = np.einsum("ntd,nth->dh", x, dxb)
        dx = dxb @ self.B.T
        return (dx[0] if single else dx), {"A": dA, "B": dB}


def forward_ssm(layer: SsmLayer, sequence) -> np.ndarray:
    return layer(sequence)


class DuelingHead(Module):
    """``Q = V + A - mean(A)`` over actions."""

    def __init__(self, n_in: int, n_actions: int, rng: np.random.Generator):
        self.value = Dense(n_in, 1, rng)
        self.advantage = Dense(n_in, n_actions, rng)

    def parameters(self):
        p = {f"value.{k}": v for k, v in self.value.parameters().items()}
        p.update({f"advantage.{k}": v for k, v in self.advantage.parameters().items()})
        return p

    def streams(self, x):
        v, vc = self.value.forward(x)
        a, ac = self.advantage.forward(x)
        return v, a, (vc, ac)

    def forward(self, x):
        v, a, caches = self.streams(x)
        return v + (a - a.mean(axis=1, keepdims=True)), caches

    def backward(self, cache, dq):
        vc, ac = cache
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        dx_v, gv = self.value.backward(vc, dv)
        dx_a, ga = self.advantage.backward(ac, da)
        grads = {f"value.{k}": g for k, g in gv.items()}
        grads.update({f"advantage.{k}": g for k, g in ga.items()})
        return dx_v + dx_a, grads


class Sequential(Module):
    def __init__(self, layers: list[tuple[str, Module]]):
        self.layers = layers

    def parameters(self):
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.parameters().items()}

    def forward(self, x):
        caches = []
        for _, layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, dout):
        grads = {}
        for (name, layer), c in zip(reversed(self.layers), reversed(caches)):
            dout, g = layer.backward(c, dout)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return dout, grads


class QNetwork(Sequential):
    """A trunk feeding a dueling head; ``arch`` rebuilds the same shapes."""

    arch: dict

    @property
    def input_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    def _batch(self, x):
        x = np.asarray(x, dtype=float)
        shape = self.input_shape
        single = x.shape == shape
        if single:
            x = x[None]
        if x.shape[1:] != shape:
            raise ValueError(f"expected input shape {shape} (optionally batched), got {x.shape}")
        return x, single

    def q_values(self, x) -> np.ndarray:
        x, single = self._batch(x)
        q = self.forward(x)[0]
        return q[0] if single else q

    def value(self, x) -> np.ndarray:
        """State value from the value stream alone."""
        x, single = self._batch(x)
        for _, layer in self.layers[:-1]:
            x = layer(x)
        v = self.layers[-1][1].value(x)[:, 0]
        return v[0] if single else v


class DuelingQNet(QNetwork):
    def __init__(self, obs_dim: int, n_actions: int, hidden=HIDDEN_UNITS, seed=0):
        rng = np.random.default_rng(seed)
        layers, n_in = [], obs_dim
        for i, n in enumerate(hidden):
            layers.append((f"dense{i}", Dense(n_in, n, rng, "relu")))
            n_in = n
        layers.append(("head", DuelingHead(n_in, n_actions, rng)))
        super().__init__(layers)
        self.arch = {"kind": "dueling", "obs_dim": obs_dim, "n_actions": n_actions,
                     "hidden": list(hidden)}

    @property
    def input_shape(self):
        return (self.arch["obs_dim"],)


class MambaQNet(QNetwork):
    """SSM over a (T, D) window, one ReLU dense layer, then the dueling head."""

    def __init__(self, obs_dim: int, n_actions: int, history: int = 32, ssm_hidden: int = 64,
                 hidden: int = 64, seed=0, activation: str = "gelu"):
        rng = np.random.default_rng(seed)
        super().__init__([
            ("ssm", SsmLayer(obs_dim, ssm_hidden, rng, activation)),
            ("dense", Dense(ssm_hidden, hidden, rng, "relu")),
            ("head", DuelingHead(hidden, n_actions, rng)),
        ])
        self.arch = {"kind": "mamba", "obs_dim": obs_dim, "n_actions": n_actions,
                     "history": history, "ssm_hidden": ssm_hidden, "hidden": hidden,
                     "activation": activation}

    @property
    def input_shape(self):
        return (self.arch["history"], self.arch["obs_dim"])


def forward_q(net: QNetwork, obs) -> np.ndarray:
    return net.q_values(obs)


def build_network(arch: dict, seed: int = 0) -> QNetwork:
    kw = {k: v for k, v in arch.items() if k != "kind"}
    if arch["kind"] == "dueling":
        kw["hidden"] = tuple(kw["hidden"])
        return DuelingQNet(seed=seed, **kw)
    if arch["kind"] == "mamba":
        return MambaQNet(seed=seed, **kw)
    raise ValueError(f"unknown network kind {arch['kind']!r}")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    def __init__(self, lr: float = LEARNING_RATE, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = CLIP_NORM):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, net: Module, grads: dict[str, np.ndarray]) -> float:
        """Clip, then apply one Adam update in place. Returns the pre-clip norm."""
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {k}")
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, p in net.parameters().items():
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
        return norm


def backward_and_step(net: Module, cache, dout, opt: Adam) -> Module:
    _, grads = net.backward(cache, dout)
    opt.step(net, grads)
    return net


def soft_update(target: Module, policy: Module, rate: float = TARGET_UPDATE_RATE) -> Module:
    tp, pp = target.parameters(), policy.parameters()
    if tp.keys() != pp.keys():
        raise ValueError("target and policy parameter sets differ")
    for k, t in tp.items():
        if t.shape != pp[k].shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {pp[k].shape}")
        t *= 1.0 - rate
        t += rate * pp[k]
    return target


def grad_check(net: Module, x, eps: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    The scalar checked is ``sum(out * R)`` for a fixed random ``R``. With
    ``max_coords`` set, a random subset of at least that many coordinates is
    checked instead of all of them.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    out, cache = net.forward(x)
    proj = rng.standard_normal(np.shape(out))
    _, grads = net.backward(cache, proj)

    def loss():
        return float(np.sum(net.forward(x)[0] * proj))

    worst = 0.0
    for name, p in net.parameters().items():
        coords = range(p.size)
        if max_coords is not None:
            total = sum(q.size for q in net.parameters().values())
            share = max(1, math.ceil(max_coords * p.size / total))
            coords = rng.choice(p.size, size=min(p.size, share), replace=False)
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(g[i]), 1e-8)
            worst = max(worst, abs(numeric - g[i]) / denom)
    return worst


def save_checkpoint(net: QNetwork, path, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in net.parameters().items()},
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_checkpoint(path) -> QNetwork:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    net = build_network(payload["arch"])
    params = net.parameters()
    if params.keys() != payload["params"].keys():
        raise ValueError(f"{path}: parameter names do not match architecture")
    for k, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        if arr.shape != params[k].shape:
            raise ValueError(f"{path}: shape mismatch for {k}")
        params[k][...] = arr
    return net
