"""Seeded Markov-chain interaction logs for desk-scale experiments.

Each item ``m`` has a designated successor.  With probability ``1 - noise``
the next item is the successor of the current state, otherwise it is drawn
uniformly from all items.  For ``order == 1`` the state is the current item;
for higher orders it is a weighted sum of the last ``order`` items modulo
the catalog size, so the next item depends on more than the last one.

Every item carries a categorical feature ``category = m mod n_categories``
(a ``feature_noise`` fraction of items get a random category instead).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import FeatureSchema, InteractionRecord, SequenceDataset, assemble_dataset
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 200
    n_users: int = 2000
    order: int = 1
    noise: float = 0.05
    feature_noise: float = 0.0
    n_categories: int = 10
    min_len: int = 20
    max_len: int = 60
    successor: str = "permutation"
    seq_len: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.n_items < 2 or self.n_users < 1:
            raise ConfigError("synthetic data needs at least 2 items and 1 user")
        if self.order < 1:
            raise ConfigError("markov order must be >= 1")
        if not (0.0 <= self.noise <= 1.0 and 0.0 <= self.feature_noise <= 1.0):
            raise ConfigError("noise levels must lie in [0, 1]")
        if not 5 <= self.min_len <= self.max_len:
            raise ConfigError("need 5 <= min_len <= max_len so every user survives 5-core filtering")
        if self.successor not in ("permutation", "shift"):
            raise ConfigError(f"unknown successor rule {self.successor!r}")
        if self.n_categories < 1:
            raise ConfigError("n_categories must be >= 1")


def successor_map(cfg: SynthConfig) -> np.ndarray:
    if cfg.successor == "shift":
        return (np.arange(cfg.n_items) + 1) % cfg.n_items
    return np.random.default_rng([cfg.seed, 1]).permutation(cfg.n_items)


def transition_matrix(cfg: SynthConfig) -> np.ndarray:
    """Generating matrix ``P[a, b] = Pr(next = b | current = a)`` for an order-1 chain."""
    if cfg.order != 1:
        raise ConfigError("the transition matrix is only defined for order 1")
    m = cfg.n_items
    p = np.full((m, m), cfg.noise / m)
    p[np.arange(m), successor_map(cfg)] += 1.0 - cfg.noise
    return p


def _state(history: list[int], order: int, m: int) -> int:
    recent = history[-order:]
    return sum((j + 1) * x for j, x in enumerate(reversed(recent))) % m


def sample_chain(cfg: SynthConfig, length: int, rng: np.random.Generator, succ: np.ndarray) -> list[int]:
    m = cfg.n_items
    seq = [int(rng.integers(m))]
    for _ in range(length - 1):
        if rng.random() < cfg.noise:
            seq.append(int(rng.integers(m)))
        else:
            seq.append(int(succ[_state(seq, cfg.order, m)]))
    return seq


def item_categories(cfg: SynthConfig) -> np.ndarray:
    cats = np.arange(cfg.n_items) % cfg.n_categories
    if cfg.feature_noise > 0:
        rng = np.random.default_rng([cfg.seed, 2])
        flip = rng.random(cfg.n_items) < cfg.feature_noise
        cats[flip] = rng.integers(cfg.n_categories, size=int(flip.sum()))
    return cats


def generate_records(cfg: SynthConfig) -> tuple[list[InteractionRecord], dict]:
    cfg.validate()
    succ = successor_map(cfg)
    rng = np.random.default_rng([cfg.seed, 0])
    records = []
    for u in range(cfg.n_users):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        for t, m in enumerate(sample_chain(cfg, length, rng, succ)):
            records.append(InteractionRecord(f"u{u}", f"i{m}", t))
    cats = item_categories(cfg)
    raw = {f"i{m}": {"category": f"c{cats[m]}"} for m in range(cfg.n_items)}
    return records, raw


def synth_generate(cfg: SynthConfig) -> SequenceDataset:
    """Generate, 5-core filter and leave-one-out split a synthetic log."""
    records, raw = generate_records(cfg)
    schema = FeatureSchema.from_pairs([("category", "token")])
    ds = assemble_dataset(records, raw, schema, max_len=cfg.seq_len, k=5)
    ds.stats["synthetic"] = asdict(cfg)
    return ds
