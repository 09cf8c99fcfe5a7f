"""Command-line front end: ingest -> features -> train -> backtest -> report.

Every stage reads one JSON config and works inside a single work directory
(``paths.work_dir`` or ``--out``). Path entries can be overridden through
environment variables named ``V3LPLAB_<KEY>``, e.g. ``V3LPLAB_WORK_DIR``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from v3lplab import baselines, params, report, synthetic
from v3lplab.agents import TrainConfig, evaluate, train
from v3lplab.env import ORIGINAL, RISK_PENALIZED, LiquidityEnv, RewardConfig
from v3lplab.neural import load_checkpoint, save_checkpoint
from v3lplab.pipeline import (
    KEPT_FEATURES, WARMUP, FeatureFrame, NormalizerStats, PoolHourRow, apply_normalizer,
    clean_rows, compute_features, fit_normalizer, period_spec, prune_features,
    read_pool_hours, split_indices, write_pool_hours,
)
from v3lplab.subgraph import fetch_pool_hours

STAGES = ("ingest", "features", "train", "backtest", "report")
STRATEGIES = ("tau_reset", "ewa", "dp", "buy_and_hold", "daily_rebalance", "dueling", "mamba")
AGENTS = ("dueling", "mamba")
SOURCES = ("fixture_2000h", "synthetic", "period_fixture", "subgraph")
SPLITS = ("train", "valid", "test")
PATH_KEYS = ("work_dir", "pool_hours", "features", "stats", "checkpoint")
ENV_PREFIX = "V3LPLAB_"

log = logging.getLogger("v3lplab")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"field={field_name} {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    pool: str = "ETH-USDC"
    pool_id: str | None = None
    period: int | None = None
    splits: list | None = None          # [n_train, n_valid, n_test] from the first feature row
    l0: float = 250.0
    agent: str = "dueling"
    reward_mode: str = ORIGINAL
    lam: float = 0.5
    gas_flat: float = 5.0
    max_width: int = 10
    spacing: int = 60
    seed: int = 0
    features: str | float = "fixed"     # "fixed" list, or a pruning threshold
    backtest_split: str = "test"
    source: dict = field(default_factory=lambda: {"kind": "fixture_2000h"})
    train: dict = field(default_factory=dict)
    strategy: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(key, "is not a known config field")
        cfg = cls(**d)
        cfg._resolve_paths(base_dir or Path.cwd())
        cfg.validate()
        return cfg

    def _resolve_paths(self, base_dir: Path) -> None:
        paths = dict(self.paths)
        for key in PATH_KEYS:
            env = os.environ.get(ENV_PREFIX + key.upper())
            if env:
                paths[key] = env
        for key in paths:
            if key not in PATH_KEYS:
                raise ConfigError(f"paths.{key}", f"is not one of {', '.join(PATH_KEYS)}")
        work = Path(paths.get("work_dir", "."))
        work = work if work.is_absolute() else base_dir / work
        resolved = {"work_dir": work}
        defaults = {"pool_hours": "pool_hours.csv", "features": "features.csv", "stats": "stats.json",
                    "checkpoint": f"checkpoint_{self.agent}.json"}
        for key, default in defaults.items():
            p = Path(paths[key]) if key in paths else work / default
            resolved[key] = p if p.is_absolute() else base_dir / p
        self.paths = resolved

    def validate(self) -> None:
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(isinstance(self.l0, (int, float)) and math.isfinite(self.l0) and self.l0 > 0, "l0", "must be positive")
        need(self.agent in AGENTS, "agent", f"must be one of {', '.join(AGENTS)}")
        need(self.reward_mode in (ORIGINAL, RISK_PENALIZED), "reward_mode",
             f"must be {ORIGINAL} or {RISK_PENALIZED}")
        need(isinstance(self.lam, (int, float)) and self.lam >= 0, "lambda", "must be nonnegative")
        need(isinstance(self.gas_flat, (int, float)) and self.gas_flat >= 0, "gas_flat", "must be nonnegative")
        need(isinstance(self.max_width, int) and self.max_width >= 1, "max_width", "must be a positive integer")
        need(isinstance(self.spacing, int) and self.spacing >= 1, "spacing", "must be a positive integer")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a nonnegative integer")
        need(self.backtest_split in SPLITS, "backtest_split", f"must be one of {', '.join(SPLITS)}")
        need((self.period is None) != (self.splits is None), "period",
             "exactly one of period and splits must be set")
        if self.period is not None:
            try:
                period_spec(self.pool, self.period)
            except KeyError as exc:
                raise ConfigError("period", str(exc.args[0])) from None
        else:
            need(isinstance(self.splits, list) and len(self.splits) == 3
                 and all(isinstance(n, int) and n >= 1 for n in self.splits),
                 "splits", "must be three positive integers")
        if self.features != "fixed":
            need(isinstance(self.features, (int, float)) and 0 < self.features < 1, "features",
                 "must be \"fixed\" or a pruning threshold in (0, 1)")
        need(isinstance(self.source, dict) and self.source.get("kind") in SOURCES, "source.kind",
             f"must be one of {', '.join(SOURCES)}")
        try:
            self.train_config(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError("train", str(exc)) from None

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def reward(self) -> RewardConfig:
        return RewardConfig(self.reward_mode, float(self.lam), float(self.l0), float(self.gas_flat))

    @property
    def period_label(self) -> str:
        return str(self.period) if self.period is not None else "custom"

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["paths"] = {k: str(v) for k, v in self.paths.items()}
        return d


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw, path.parent.resolve())


def _require(cfg: ExperimentConfig, key: str) -> Path:
    p = cfg.paths[key]
    if not p.is_file():
        raise ConfigError(f"paths.{key}", f"does not exist: {p}")
    return p


# -- stages --------------------------------------------------------------------

def stage_ingest(cfg: ExperimentConfig, seed: int) -> list[Path]:
    src = dict(cfg.source)
    kind = src.pop("kind")
    if kind == "fixture_2000h":
        rows = synthetic.load_fixture_2000h()
    elif kind == "synthetic":
        try:
            rows = synthetic.gbm_pool_hours(seed=src.pop("seed", seed), **src)
        except TypeError as exc:
            raise ConfigError("source", str(exc)) from None
    elif kind == "period_fixture":
        rows = synthetic.period_fixture(cfg.pool, seed=src.pop("seed", seed))
    else:
        for key in ("endpoint", "start", "end"):
            if key not in src:
                raise ConfigError(f"source.{key}", "is required for subgraph ingestion")
        if not cfg.pool_id:
            raise ConfigError("pool_id", "is required for subgraph ingestion")
        rows = fetch_pool_hours(src.pop("endpoint"), cfg.pool_id, (src.pop("start"), src.pop("end")), **src)
    out = cfg.paths["pool_hours"]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pool_hours(rows, out)
    log.info("wrote %d pool hours to %s", len(rows), out)
    return []


def _split_slices(cfg: ExperimentConfig, timestamps: np.ndarray) -> tuple[slice, slice, slice]:
    if cfg.period is not None:
        return split_indices(timestamps, period_spec(cfg.pool, cfg.period))
    n_train, n_valid, n_test = cfg.splits
    if n_train + n_valid + n_test > len(timestamps):
        raise ConfigError("splits", f"need {n_train + n_valid + n_test} feature rows, have {len(timestamps)}")
    return slice(0, n_train), slice(n_train, n_train + n_valid), \
        slice(n_train + n_valid, n_train + n_valid + n_test)


def stage_features(cfg: ExperimentConfig, seed: int) -> list[Path]:
    src = _require(cfg, "pool_hours")
    rows = clean_rows(read_pool_hours(src))
    frame = compute_features(rows, WARMUP)
    tr, va, te = _split_slices(cfg, frame.timestamps)
    if cfg.features == "fixed":
        names = list(KEPT_FEATURES)
    else:
        names = prune_features(frame.rows(tr.start, tr.stop), float(cfg.features))
    frame = frame.select(names)
    stats = fit_normalizer(frame.rows(tr.start, tr.stop))
    normed = apply_normalizer(stats, frame)
    labels = np.full(len(frame), "unused", dtype=object)
    for name, s in zip(SPLITS, (tr, va, te)):
        labels[s] = name
    cfg.paths["features"].parent.mkdir(parents=True, exist_ok=True)
    normed.to_csv(cfg.paths["features"], extra={"split": labels})
    stats.to_json(cfg.paths["stats"])
    return [src]


def load_segments(cfg: ExperimentConfig) -> dict[str, tuple[list[PoolHourRow], np.ndarray]]:
    """Pool rows and normalized feature rows for each split, aligned by timestamp."""
    rows = {r.timestamp: r for r in clean_rows(read_pool_hours(_require(cfg, "pool_hours")))}
    stats = NormalizerStats.from_json(_require(cfg, "stats"))
    path = _require(cfg, "features")
    frame = FeatureFrame.from_csv(path, names=stats.names)
    labels = pd.read_csv(path, usecols=["split"])["split"].to_numpy()
    out = {}
    for name in SPLITS:
        idx = np.flatnonzero(labels == name)
        missing = [int(t) for t in frame.timestamps[idx] if int(t) not in rows]
        if missing:
            raise ValueError(f"features reference {len(missing)} hours absent from pool hours, first {missing[0]}")
        out[name] = ([rows[int(t)] for t in frame.timestamps[idx]], frame.values[idx])
    return out


def make_env(cfg: ExperimentConfig, segment) -> LiquidityEnv:
    seg_rows, feats = segment
    return LiquidityEnv(seg_rows, feats, cfg.reward(), cfg.spacing, cfg.max_width)


def stage_train(cfg: ExperimentConfig, seed: int, agent: str | None = None) -> list[Path]:
    agent = agent or cfg.agent
    segs = load_segments(cfg)
    result = train(make_env(cfg, segs["train"]), make_env(cfg, segs["valid"]), agent, cfg.train_config(seed))
    work = cfg.paths["work_dir"]
    result.write_log(work / f"train_log_{agent}.csv")
    ckpt = cfg.paths["checkpoint"] if agent == cfg.agent else work / f"checkpoint_{agent}.json"
    save_checkpoint(result.net, ckpt, meta={"best_epoch": result.best_epoch, "seed": seed})
    return [cfg.paths[k] for k in ("pool_hours", "features", "stats")]


def _tau(cfg: ExperimentConfig) -> int:
    if "tau" in cfg.strategy:
        return int(cfg.strategy["tau"])
    if cfg.period is None:
        raise ConfigError("strategy.tau", "is required when splits are given explicitly")
    try:
        return params.tau_reset_params(cfg.pool, cfg.period, cfg.l0).tau
    except KeyError as exc:
        raise ConfigError("strategy.tau", str(exc.args[0])) from None


def _ewa(cfg: ExperimentConfig) -> params.EwaParams:
    if "ewa" in cfg.strategy:
        e = cfg.strategy["ewa"]
        return params.EwaParams(int(e["N"]), float(e["eta"]), int(e["T_re"]))
    if cfg.period is None:
        raise ConfigError("strategy.ewa", "is required when splits are given explicitly")
    try:
        return params.ewa_params(cfg.pool, cfg.period, cfg.l0)
    except KeyError as exc:
        raise ConfigError("strategy.ewa", str(exc.args[0])) from None


def run_strategy(cfg: ExperimentConfig, strategy: str, seed: int, segs) -> tuple:
    seg = segs[cfg.backtest_split]
    if strategy == "buy_and_hold":
        return baselines.buy_and_hold(seg[0], cfg.l0), None
    env = make_env(cfg, seg)
    if strategy == "tau_reset":
        m = baselines.tau_reset(env, _tau(cfg))
    elif strategy == "daily_rebalance":
        m = baselines.daily_rebalance(env, int(cfg.strategy.get("daily_width", _tau(cfg))))
    elif strategy == "ewa":
        m = baselines.ewa_run(env, _ewa(cfg), np.random.default_rng(seed))
    elif strategy == "dp":
        model = baselines.build_lp_model(segs["train"][0], cfg.l0, cfg.spacing, cfg.max_width,
                                         cfg.gas_flat, float(cfg.strategy.get("dp_gamma", baselines.DP_GAMMA)))
        m = baselines.dp_run(env, model, baselines.dp_solve(model))
    else:
        path = cfg.paths["checkpoint"] if strategy == cfg.agent else \
            cfg.paths["work_dir"] / f"checkpoint_{strategy}.json"
        if not path.is_file():
            raise ConfigError("paths.checkpoint", f"does not exist: {path}")
        m = evaluate(env, load_checkpoint(path), strategy)
    return m, env


def stage_backtest(cfg: ExperimentConfig, seed: int, strategy: str) -> list[Path]:
    segs = load_segments(cfg)
    metrics, env = run_strategy(cfg, strategy, seed, segs)
    work = cfg.paths["work_dir"]
    report.write_metrics(metrics, strategy, cfg.period_label, work)
    if env is not None:
        env.write_trace(work / f"trace_{strategy}.csv")
    inputs = [cfg.paths[k] for k in ("pool_hours", "features", "stats")]
    if strategy in AGENTS:
        inputs.append(cfg.paths["checkpoint"] if strategy == cfg.agent else work / f"checkpoint_{strategy}.json")
    return inputs


def stage_report(cfg: ExperimentConfig, seed: int) -> list[Path]:
    files = sorted(cfg.paths["work_dir"].glob("metrics_*.json"))
    if not files:
        raise ConfigError("paths.work_dir", f"holds no metrics_*.json files: {cfg.paths['work_dir']}")
    report.emit_report([report.read_metrics(f) for f in files], cfg.paths["work_dir"])
    return files


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v3lplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, metavar="PATH", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, metavar="INT", help="override the config seed")
        p.add_argument("--out", default=None, metavar="DIR", help="work directory (overrides paths.work_dir)")
        if stage == "backtest":
            p.add_argument("--strategy", required=True, choices=STRATEGIES)
        elif stage == "train":
            p.add_argument("--strategy", choices=AGENTS, default=None, help="agent kind (default: config agent)")
        else:
            p.add_argument("--strategy", default=None, help=argparse.SUPPRESS)
    return parser


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            out = Path(args.out).resolve()
            cfg.paths = {k: (out / v.name if v.parent == cfg.paths["work_dir"] else v)
                         for k, v in cfg.paths.items()}
            cfg.paths["work_dir"] = out
        seed = cfg.seed if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError("--seed", "must be nonnegative")
        cfg.paths["work_dir"].mkdir(parents=True, exist_ok=True)
        if args.stage == "ingest":
            inputs = stage_ingest(cfg, seed)
        elif args.stage == "features":
            inputs = stage_features(cfg, seed)
        elif args.stage == "train":
            inputs = stage_train(cfg, seed, args.strategy)
        elif args.stage == "backtest":
            inputs = stage_backtest(cfg, seed, args.strategy)
        else:
            inputs = stage_report(cfg, seed)
        name = args.stage if args.stage not in ("train", "backtest") else \
            f"{args.stage}_{args.strategy or cfg.agent}"
        report.write_manifest(cfg.paths["work_dir"], name, cfg.as_dict(), seed, [Path(args.config), *inputs])
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
