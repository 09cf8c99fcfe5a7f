"""Headline acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that pytest repeats in its terminal summary.
The whole module takes about ten minutes on one CPU core, most of it in the
two five-epoch sequence-model training runs.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from helpers import ChainMDP, chain_q_star
from v3lplab import baselines, cli, neural
from v3lplab.agents import TrainConfig, ddqn_target, evaluate, train
from v3lplab.amm import (
    Position, PriceRange, lvr_increment, lvr_rate, position_value, price_to_tick, solve_liquidity,
)
from v3lplab.baselines import DenseDpModel, ExpWeights, dp_solve
from v3lplab.env import LiquidityEnv, RewardConfig
from v3lplab.neural import (
    Dense, DuelingHead, DuelingQNet, MambaQNet, Sequential, SsmLayer, forward_ssm, grad_check,
)
from v3lplab.params import EwaParams, baseline_table, ddqn_hyperparameters, ewa_params, tau_reset_params
from v3lplab.pipeline import PoolHourRow, compute_features, period_spec, split_dataset
from v3lplab.synthetic import period_fixture

SMOKE_SPLITS = [1400, 250, 300]


# -- AMM math ---------------------------------------------------------------------

def test_amm_oracle_suite(record_criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_trip, worst_edge, regimes = 0.0, 0.0, {"below": 0, "inside": 0, "above": 0}
    for i in range(10_000):
        center = 60 * int(rng.integers(-3000, 3000))
        width = int(rng.integers(1, 40))
        pr = PriceRange.centered(center, width, 60)
        lo, hi = pr.price_lower, pr.price_upper
        regime = ("below", "inside", "above")[i % 3]
        if regime == "below":
            price = lo * math.exp(-rng.uniform(1e-6, 1.0))
        elif regime == "inside":
            price = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        else:
            price = hi * math.exp(rng.uniform(1e-6, 1.0))
        regimes[regime] += 1
        budget = 10 ** rng.uniform(0, 6)
        liq = solve_liquidity(budget, pr, price)
        worst_trip = max(worst_trip, abs(position_value(liq, pr, price) - budget) / budget)
        for edge in (lo, hi):
            eps = 1e-9 * edge
            a, b = position_value(liq, pr, edge - eps), position_value(liq, pr, edge + eps)
            worst_edge = max(worst_edge, abs(a - b) / max(abs(a), 1e-300))
    elapsed = time.perf_counter() - t0
    ok = worst_trip <= 1e-9 and worst_edge <= 1e-6 and elapsed < 10 and min(regimes.values()) > 3000
    record_criterion("AMM math oracle suite", ok,
                     f"round-trip {worst_trip:.2e}, continuity {worst_edge:.2e}, {elapsed:.2f}s, {regimes}")
    assert ok


def test_lvr_properties(record_criterion):
    rng = np.random.default_rng(7)
    negative = nonzero_flat = nonzero_outside = 0
    for _ in range(10_000):
        pr = PriceRange.centered(60 * int(rng.integers(-500, 500)), int(rng.integers(1, 20)), 60)
        lo, hi = pr.price_lower, pr.price_upper
        p0 = math.exp(rng.uniform(math.log(lo) - 0.3, math.log(hi) + 0.3))
        p1 = p0 * math.exp(rng.normal(0, 0.05))
        pos = Position(pr, solve_liquidity(250.0, pr, p0), p0)
        negative += lvr_increment(pos, p0, p1) < 0
        nonzero_flat += lvr_increment(pos, p0, p0) != 0
        below = lo * np.exp(-rng.uniform(1e-6, 0.5, 2))
        above = hi * np.exp(rng.uniform(1e-6, 0.5, 2))
        nonzero_outside += lvr_increment(pos, *below) != 0
        nonzero_outside += lvr_increment(pos, *above) != 0

    sigma, liq = 0.002, 1000.0
    wide = PriceRange.centered(0, 115, 60)
    p, total, expected, escaped = 1.0, 0.0, 0.0, False
    for z in np.random.default_rng(3).standard_normal(20_000):
        nxt = p * math.exp(sigma * z - 0.5 * sigma**2)
        total += lvr_increment(Position(wide, liq, p), p, nxt)
        expected += lvr_rate(liq, wide, p, sigma)
        escaped |= not wide.price_lower < nxt < wide.price_upper
        p = nxt
    ratio = total / expected
    ok = negative == 0 and nonzero_flat == 0 and nonzero_outside == 0 and not escaped and abs(ratio - 1) < 0.15
    record_criterion("LVR properties", ok,
                     f"negative {negative}, flat-nonzero {nonzero_flat}, outside-nonzero {nonzero_outside}, "
                     f"estimator/closed-form {ratio:.4f} over 20000 in-range steps")
    assert ok


# -- networks -----------------------------------------------------------------------

def test_gradient_verification(record_criterion):
    errs = {}
    rng = np.random.default_rng(0)
    errs["linear"] = [grad_check(Sequential([("lin", Dense(5, 3, rng))]), rng.standard_normal((4, 5)))]
    errs["dense"], errs["dueling"], errs["ssm"] = [], [], []
    for draw in range(5):
        r = np.random.default_rng(100 + draw)
        errs["dense"].append(grad_check(Sequential([("d", Dense(6, 8, r, "relu"))]),
                                        r.standard_normal((3, 6)), seed=draw))
        errs["dueling"].append(grad_check(Sequential([("h", DuelingHead(5, 4, r))]),
                                          r.standard_normal((3, 5)), seed=draw))
        errs["ssm"].append(grad_check(Sequential([("s", SsmLayer(3, 6, r))]),
                                      r.standard_normal((2, 8, 3)), seed=draw))
    worst = {k: max(v) for k, v in errs.items()}
    ok = worst["linear"] < 1e-8 and all(worst[k] < 1e-4 for k in ("dense", "dueling", "ssm"))
    record_criterion("Gradient verification", ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    assert ok


def test_ssm_identity_mode(record_criterion):
    rng = np.random.default_rng(11)
    layer = SsmLayer(6, 16, rng, activation="identity")
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((32, 6))
        want = np.zeros(16)
        Ak = np.eye(16)
        for k in range(32):
            want += x[31 - k] @ layer.B @ Ak
            Ak = Ak @ layer.A
        worst = max(worst, float(np.abs(forward_ssm(layer, x) - want).max()))
    ok = worst <= 1e-10
    record_criterion("SSM identity-mode equivalence", ok, f"max abs error {worst:.2e} over 100 sequences, T=32")
    assert ok


def test_dueling_and_double_q_exactness(record_criterion):
    worst = 0.0
    for seed in range(50):
        net = DuelingQNet(24, 11, seed=seed)
        x = np.random.default_rng(seed).standard_normal((16, 24)) * 5
        worst = max(worst, float(np.abs((net.q_values(x) - net.value(x)[:, None]).mean(axis=1)).max()))
    y = float(ddqn_target([1.0], [0.0], [[0.2, 0.5]], [[3.0, 7.0]], 0.9)[0])
    ok = worst <= 1e-12 and y == 7.3
    record_criterion("Dueling/double-Q exactness", ok, f"max |mean_a(Q - V)| {worst:.1e}, y = {y!r}")
    assert ok


# -- learning ---------------------------------------------------------------------------

def test_chain_mdp_convergence(record_criterion):
    q_star = chain_q_star(0.9)
    details, passed = [], 0
    for seed in range(3):
        t0 = time.perf_counter()
        cfg = TrainConfig(gamma=0.9, lr=1e-3, batch_size=64, warmup=200, steps_per_epoch=500,
                          max_epochs=40, patience=40, buffer_size=20_000, seed=seed)
        res = train(ChainMDP(seed=100 + seed), ChainMDP(seed=0, start=0), "dueling", cfg)
        elapsed = time.perf_counter() - t0
        q = res.final_net.q_values(np.eye(5)[:4])
        err = float(np.max(np.abs(q - q_star) / np.abs(q_star)))
        optimal = bool((q.argmax(axis=1) == q_star.argmax(axis=1)).all())
        passed += err < 0.05 and optimal and elapsed < 300
        details.append(f"seed {seed}: {err:.2%} in {elapsed:.0f}s")
    ok = passed == 3
    record_criterion("Synthetic-MDP convergence", ok, f"{passed}/3 seeds; " + "; ".join(details))
    assert ok


# -- baselines ---------------------------------------------------------------------------

def _enumerated_optimum(model):
    n = model.n_states
    best, best_v = None, None
    for pi in itertools.product(range(model.rewards.shape[1]), repeat=n):
        P = np.array([model.transitions[pi[s], s] for s in range(n)])
        v = np.linalg.solve(np.eye(n) - model.gamma * P, model.rewards[np.arange(n), pi])
        if best_v is None or v.sum() > best_v.sum():
            best, best_v = pi, v
    return best


def test_baseline_oracles(record_criterion):
    dp_matches = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        P = r.uniform(size=(2, 3, 3))
        P /= P.sum(axis=2, keepdims=True)
        model = DenseDpModel(r.normal(size=(3, 2)), P, 0.9)
        dp_matches += tuple(dp_solve(model).policy) == _enumerated_optimum(model)

    rng = np.random.default_rng(1)
    w = ExpWeights(5, 1.0)
    worst_sum, rounds = 0.0, None
    for t in range(1, 201):
        rewards = rng.uniform(0, 0.5, 5)
        rewards[2] += 0.25
        w.update(rewards)
        p = w.probabilities()
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        if rounds is None and p[2] > 0.9:
            rounds = t

    # flat, then one jump well outside a 2-spacing range, then flat again
    prices = [2000.0] * 10 + [2300.0] * 10
    rows = [PoolHourRow(1_627_862_400 + 3600 * i, p, p, p, p, 1e5, 100.0, 1e6, price_to_tick(p))
            for i, p in enumerate(prices)]
    env = LiquidityEnv(rows, np.zeros((20, 0)), RewardConfig(), 60, 10)
    reallocs = baselines.tau_reset(env, 2).reallocations

    ok = dp_matches == 20 and worst_sum <= 1e-12 and rounds is not None and reallocs == 2
    record_criterion("Baseline oracles", ok,
                     f"DP = enumeration on {dp_matches}/20 models; EWA sum error {worst_sum:.1e}, "
                     f"p > 0.9 after {rounds} rounds; tau-reset reallocations {reallocs}")
    assert ok


# -- end to end on the 2000-hour fixture ---------------------------------------------------

@pytest.fixture(scope="module")
def smoke_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    conf = root / "c.json"
    conf.write_text(json.dumps({
        "splits": SMOKE_SPLITS, "agent": "mamba", "source": {"kind": "fixture_2000h"},
        "train": {"max_epochs": 5, "patience": 5}, "paths": {"work_dir": "work"},
        "strategy": {"tau": 6, "ewa": {"N": 10, "eta": 1, "T_re": 21}}}))
    assert cli.run_cli(["ingest", "--config", str(conf)]) == 0
    assert cli.run_cli(["features", "--config", str(conf)]) == 0
    return root, conf


def test_accounting_identity(record_criterion, smoke_dir):
    _, conf = smoke_dir
    cfg = cli.load_config(conf)
    segs = cli.load_segments(cfg)
    rows = [r for name in cli.SPLITS for r in segs[name][0]]
    feats = np.vstack([segs[name][1] for name in cli.SPLITS])
    # the three splits, the whole fixture, and eight 250-hour windows
    episodes = [(0, len(rows))] + [(s, s + 250) for s in range(0, 2000 - 250, 250)]
    episodes += [(0, 1400), (1400, 1650), (1650, 1950)]
    model = baselines.build_lp_model(segs["train"][0], 250.0, 60, 10, 5.0)
    policy = dp_solve(model)
    nets = {"dueling": DuelingQNet(24, 11, seed=1),
            "mamba": MambaQNet(24, 11, history=32, ssm_hidden=16, hidden=16, seed=2)}

    def env(a, b):
        return LiquidityEnv(rows[a:b], feats[a:b], RewardConfig(), 60, 10)

    worst_identity, gas_mismatch, runs = 0.0, 0, 0
    for a, b in episodes:
        if b > len(rows):
            continue
        results = [
            baselines.tau_reset(env(a, b), 6),
            baselines.ewa_run(env(a, b), EwaParams(10, 1.0, 21), np.random.default_rng(a)),
            baselines.dp_run(env(a, b), model, policy),
            baselines.daily_rebalance(env(a, b), 6),
            baselines.buy_and_hold(rows[a:b], 250.0),
            evaluate(env(a, b), nets["dueling"]),
        ]
        if b - a <= 300:
            results.append(evaluate(env(a, b), nets["mamba"]))
        for m in results:
            worst_identity = max(worst_identity, abs(m.pnl_hedged - (m.fee - m.gas - m.lvr)))
            gas_mismatch += m.gas != 5.0 * m.reallocations
            runs += 1
    ok = worst_identity <= 1e-9 and gas_mismatch == 0
    record_criterion("Accounting identity", ok,
                     f"{runs} strategy-episodes, max identity error {worst_identity:.1e} USD, "
                     f"gas mismatches {gas_mismatch}")
    assert ok


# reference parameter tables: (pool, period) -> values for l0 = 250, 500, 1000
TAU_TABLE = {
    ("ETH-USDC", 1): (6, 4, 1), ("ETH-USDC", 2): (5, 2, 1), ("ETH-USDC", 3): (6, 3, 2), ("ETH-USDC", 4): (4, 3, 1),
    ("ETH-USDT", 1): (6, 4, 1), ("ETH-USDT", 2): (5, 2, 1), ("ETH-USDT", 3): (10, 3, 1), ("ETH-USDT", 4): (4, 3, 1),
}
EWA_TABLE = {
    ("ETH-USDC", 1): ((10, 1, 21), (10, 1, 14), (10, 1, 6)),
    ("ETH-USDC", 2): ((10, 10, 24), (10, 10, 24), (10, 10, 9)),
    ("ETH-USDC", 3): ((10, 1, 22), (10, 4, 15), (10, 1, 13)),
    ("ETH-USDC", 4): ((10, 7, 24), (10, 1, 21), (10, 1, 18)),
    ("ETH-USDT", 1): ((10, 1, 21), (10, 1, 14), (10, 1, 6)),
    ("ETH-USDT", 2): ((10, 10, 24), (10, 10, 24), (10, 10, 12)),
    ("ETH-USDT", 3): ((10, 1, 22), (10, 7, 22), (10, 10, 3)),
    ("ETH-USDT", 4): ((10, 7, 21), (10, 1, 21), (10, 1, 21)),
}
HYPER_TABLE = {"hidden_units": [64, 64], "activation": "relu", "final_activation": None,
               "learning_rate": 1e-4, "batch_size": 256, "buffer_size": 10**6, "discount_factor": 0.9,
               "target_update_rate": 0.01, "gradient_clip_norm": 0.7}


def test_config_fidelity(record_criterion):
    mismatches = []
    hp = ddqn_hyperparameters()
    if hp != HYPER_TABLE or any(type(hp[k]) is not type(v) for k, v in HYPER_TABLE.items()):
        mismatches.append("ddqn hyperparameters")
    wired = (neural.HIDDEN_UNITS, neural.LEARNING_RATE, neural.BATCH_SIZE, neural.BUFFER_SIZE,
             neural.GAMMA, neural.TARGET_UPDATE_RATE, neural.CLIP_NORM)
    if wired != ((64, 64), 1e-4, 256, 10**6, 0.9, 0.01, 0.7):
        mismatches.append("network constants")
    table = baseline_table()
    for (pool, period), taus in TAU_TABLE.items():
        for l0, tau in zip((250, 500, 1000), taus):
            if table["tau_reset"][pool][str(period)][str(l0)] != tau or tau_reset_params(pool, period, l0).tau != tau:
                mismatches.append(f"tau {pool} {period} {l0}")
    for (pool, period), triples in EWA_TABLE.items():
        for l0, (n, eta, t_re) in zip((250, 500, 1000), triples):
            raw = table["ewa"][pool][str(period)][str(l0)]
            if raw != {"N": n, "eta": eta, "T_re": t_re} or ewa_params(pool, period, l0) != EwaParams(n, eta, t_re):
                mismatches.append(f"ewa {pool} {period} {l0}")
    n_entries = 1 + sum(len(v) for v in TAU_TABLE.values()) + sum(len(v) for v in EWA_TABLE.values())
    ok = not mismatches
    record_criterion("Config fidelity", ok,
                     f"{n_entries} table entries checked; mismatches: {mismatches or 'none'}")
    assert ok


SPLIT_TABLE = {
    ("ETH-USDC", 1): (7983, 984, 984), ("ETH-USDC", 2): (7983, 984, 1008),
    ("ETH-USDC", 3): (7983, 1008, 984), ("ETH-USDC", 4): (7984, 984, 981),
    ("ETH-USDT", 1): (7964, 984, 984), ("ETH-USDT", 2): (7972, 984, 983),
    ("ETH-USDT", 3): (7973, 984, 976), ("ETH-USDT", 4): (7958, 984, 954),
}


def test_split_fidelity(record_criterion):
    frames = {pool: compute_features(period_fixture(pool)) for pool in ("ETH-USDC", "ETH-USDT")}
    wrong = []
    for (pool, period), counts in SPLIT_TABLE.items():
        got = tuple(len(p) for p in split_dataset(frames[pool], period_spec(pool, period)))
        if got != counts:
            wrong.append(f"{pool} {period}: {got}")
    ok = not wrong
    record_criterion("Split fidelity", ok, f"8 pool/period splits; mismatches: {wrong or 'none'}")
    assert ok


@pytest.mark.slow
def test_end_to_end_smoke(record_criterion, smoke_dir):
    root, conf = smoke_dir
    logs, times = [], []
    for out in ("run_a", "run_b"):
        work = root / out
        work.mkdir()
        for name in ("pool_hours.csv", "features.csv", "stats.json"):
            (work / name).write_bytes((root / "work" / name).read_bytes())
        t0 = time.perf_counter()
        assert cli.run_cli(["train", "--config", str(conf), "--seed", "7", "--out", str(work)]) == 0
        times.append(time.perf_counter() - t0)
        logs.append((work / "train_log_mamba.csv").read_bytes())

    cfg = cli.load_config(conf)
    segs = cli.load_segments(cfg)
    final_valid = float(logs[0].decode().splitlines()[-1].split(",")[2])
    random_pnls = []
    for k in range(20):
        env = cli.make_env(cfg, segs["valid"])
        rng = np.random.default_rng(1000 + k)
        env.reset()
        while not env.done:
            env.step(int(rng.integers(env.n_actions)))
        random_pnls.append(env.metrics.pnl_hedged)
    random_mean = float(np.mean(random_pnls))
    epochs = len(logs[0].decode().splitlines()) - 1
    ok = (epochs == 5 and max(times) < 900 and final_valid >= random_mean and logs[0] == logs[1])
    record_criterion("End-to-end smoke", ok,
                     f"{epochs} epochs in {times[0]:.0f}s/{times[1]:.0f}s; final greedy valid PnL "
                     f"{final_valid:.3f} vs random mean {random_mean:.3f}; logs identical {logs[0] == logs[1]}")
    assert ok
