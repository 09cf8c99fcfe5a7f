"""Relative-metric tables and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

from v3lplab.env import EpisodeMetrics

REPORT_COLUMNS = ("strategy", "period", "rel_fee", "rel_gas", "rel_lvr", "rel_pnl")
# max for fee and PnL, min for gas and LVR
DIRECTIONS = {"rel_fee": "max", "rel_gas": "min", "rel_lvr": "min", "rel_pnl": "max"}
ARROWS = {"max": "↑", "min": "↓"}


def _cells(m: EpisodeMetrics) -> dict:
    if m.pnl_basis == "unhedged":
        # market-exposure rows carry only PnL
        return {"rel_fee": None, "rel_gas": None, "rel_lvr": None, "rel_pnl": m.rel_pnl}
    return {"rel_fee": m.rel_fee, "rel_gas": m.rel_gas, "rel_lvr": m.rel_lvr, "rel_pnl": m.rel_pnl}


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def build_table(entries: Iterable[tuple[str, object, EpisodeMetrics]]) -> dict:
    rows = []
    for strategy, period, m in entries:
        rows.append({"strategy": str(strategy), "period": str(period), "pnl_basis": m.pnl_basis,
                     **{k: (None if v is None else round(v, 6)) for k, v in _cells(m).items()}})
    if not rows:
        raise ValueError("report needs at least one metrics entry")
    rows.sort(key=lambda r: (r["period"], r["strategy"]))

    best: dict[str, dict[str, list[str]]] = {}
    for period in sorted({r["period"] for r in rows}):
        group = [r for r in rows if r["period"] == period]
        best[period] = {}
        for col, direction in DIRECTIONS.items():
            vals = [r[col] for r in group if r[col] is not None]
            if not vals:
                continue
            target = max(vals) if direction == "max" else min(vals)
            best[period][col] = [r["strategy"] for r in group if r[col] == target]
    for r in rows:
        r["best"] = [c for c in DIRECTIONS if r["strategy"] in best[r["period"]].get(c, [])]
    return {"columns": list(REPORT_COLUMNS),
            "directions": {c: {"better": d, "arrow": ARROWS[d]} for c, d in DIRECTIONS.items()},
            "rows": rows, "best": best}


def emit_report(entries: Sequence[tuple[str, object, EpisodeMetrics]], out_dir) -> tuple[Path, Path]:
    """Write ``report.csv`` and its ``report.json`` mirror with best-per-column markers."""
    table = build_table(entries)
    out = Path(out_dir)
    csv_path, json_path = out / "report.csv", out / "report.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in table["rows"]:
                w.writerow([r["strategy"], r["period"]] + [_fmt(r[c]) for c in REPORT_COLUMNS[2:]])
        json_path.write_text(json.dumps(table, indent=2, ensure_ascii=False, sort_keys=True) + "\n",
                             encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return csv_path, json_path


def write_metrics(metrics: EpisodeMetrics, strategy: str, period, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"strategy": strategy, "period": period, **metrics.to_dict()}
    json_path = out / f"metrics_{strategy}.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = out / f"metrics_{strategy}.csv"
    keys = sorted(payload)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        w.writerow([payload[k] for k in keys])
    return json_path, csv_path


def read_metrics(path) -> tuple[str, object, EpisodeMetrics]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return d["strategy"], d["period"], EpisodeMetrics.from_dict(d)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, stage: str, config: dict, seed: int, inputs: Sequence) -> Path:
    payload = {
        "stage": stage,
        "config_sha256": config_digest(config),
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs if Path(p).is_file()},
    }
    path = Path(out_dir) / f"manifest_{stage}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
