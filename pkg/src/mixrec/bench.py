"""Forward-pass timing sweeps over s, C or K with fixed mixer hidden sizes."""

from __future__ import annotations

import csv
import time
from dataclasses import replace

import numpy as np

from .config import BenchConfig
from .data import FeatureSchema, encode_features
from .model import MLP4Rec, ModelConfig

AXES = ("s", "C", "K")
CSV_COLUMNS = ("axis", "value", "median_ns", "p10", "p90")


def bench_features(n_items: int, n_features: int, seed: int = 0):
    """Item id plus ``n_features - 1`` random token features."""
    rng = np.random.default_rng(seed)
    pairs = [(f"tok{j}", "token") for j in range(n_features - 1)]
    items = [f"i{m}" for m in range(n_items)]
    raw = {it: {name: f"v{rng.integers(16)}" for name, _ in pairs} for it in items}
    return encode_features(items, FeatureSchema.from_pairs(pairs), raw)


def time_forward(model: MLP4Rec, items: np.ndarray, runs: int, warmup: int = 2) -> np.ndarray:
    for _ in range(warmup):
        model.forward(items)
    out = np.empty(runs, dtype=np.int64)
    for r in range(runs):
        t0 = time.perf_counter_ns()
        model.forward(items)
        out[r] = time.perf_counter_ns() - t0
    return out


def sweep(cfg: BenchConfig, seed: int = 0) -> list[dict]:
    if cfg.axis not in AXES:
        raise ValueError(f"bench axis must be one of {AXES}, got {cfg.axis!r}")
    rows = []
    base = ModelConfig(
        max_len=cfg.max_len, embed_dim=cfg.embed_dim, n_layers=cfg.n_layers, dropout=0.0,
        seq_hidden=cfg.seq_hidden, channel_hidden=cfg.channel_hidden, feature_hidden=cfg.feature_hidden,
    )
    for value in cfg.values:
        mc, k = base, cfg.n_features
        if cfg.axis == "s":
            mc = replace(base, max_len=value)
        elif cfg.axis == "C":
            mc = replace(base, embed_dim=value)
        else:
            k = value
        model = MLP4Rec(mc, bench_features(cfg.n_items, k, seed), seed=seed)
        items = np.random.default_rng(seed).integers(1, cfg.n_items + 1, size=(cfg.batch, mc.max_len))
        ns = time_forward(model, items, cfg.runs)
        rows.append({
            "axis": cfg.axis,
            "value": int(value),
            "median_ns": int(np.median(ns)),
            "p10": int(np.percentile(ns, 10)),
            "p90": int(np.percentile(ns, 90)),
        })
    return rows


def growth_ratios(rows: list[dict]) -> list[float]:
    """Median-time ratio between consecutive sweep points."""
    return [b["median_ns"] / a["median_ns"] for a, b in zip(rows, rows[1:])]


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
