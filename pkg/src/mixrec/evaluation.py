"""Sampled-candidate ranking evaluation: HR@K, NDCG@K and MRR@K.

Each evaluated user gets its ground-truth item plus 100 sampled negatives.
The rank of the ground truth is pessimistic: candidates scoring equal to it
are placed ahead of it.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import EvalCandidates, SequenceDataset, build_eval_candidates
from .errors import ContractError, NumericalError

METRICS = ("MRR", "NDCG", "HR")


def score_candidates(h: np.ndarray, candidate_embeddings: np.ndarray) -> np.ndarray:
    """Dot-product scores ``E @ h`` (batched over leading axes of ``h``)."""
    h = np.asarray(h)
    e = np.asarray(candidate_embeddings)
    return np.einsum("...nc,...c->...n", e, h)


def rank_of_target(scores: np.ndarray, target: int | np.ndarray = 0) -> np.ndarray:
    """1-based pessimistic rank of ``scores[..., target]`` among its row."""
    scores = np.asarray(scores)
    target = np.broadcast_to(np.asarray(target), scores.shape[:-1])
    if np.any(target < 0) or np.any(target >= scores.shape[-1]):
        raise ContractError("target index outside the candidate list")
    st = np.take_along_axis(scores, target[..., None], axis=-1)
    higher = (scores > st).sum(axis=-1)
    ties = (scores == st).sum(axis=-1) - 1
    return 1 + higher + ties


def hr_at_k(rank, k: int = 10):
    return (np.asarray(rank) <= k).astype(np.float64)


def ndcg_at_k(rank, k: int = 10):
    r = np.asarray(rank, dtype=np.float64)
    return np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)


def mrr_at_k(rank, k: int = 10):
    r = np.asarray(rank, dtype=np.float64)
    return np.where(r <= k, 1.0 / r, 0.0)


_METRIC_FNS = {"HR": hr_at_k, "NDCG": ndcg_at_k, "MRR": mrr_at_k}


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = (10,)) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        for name in METRICS:
            out[f"{name}@{k}"] = float(_METRIC_FNS[name](ranks, k).mean()) if ranks.size else 0.0
    return out


@dataclass
class EvalProtocol:
    k: int = 10
    negatives: int = 100
    seed: int = 0
    split: str = "test"
    ks: tuple[int, ...] = (1, 5, 10)

    def validate(self) -> None:
        if self.k < 1:
            raise ContractError("cutoff K must be >= 1")
        if self.split not in ("train", "validation", "test"):
            raise ContractError(f"unknown split {self.split!r}")
        if self.negatives < self.k:
            warnings.warn(f"{self.negatives} negatives with cutoff {self.k}: HR@{self.k} is trivially high")

    def cutoffs(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.ks) | {self.k}))


@dataclass
class MetricsReport:
    split: str
    seed: int
    n_users: int
    skipped: int
    metrics: dict[str, float]
    protocol: dict = field(default_factory=dict)
    ranks: np.ndarray | None = None
    users: np.ndarray | None = None

    def to_json(self, include_ranks: bool = False) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("ranks", "users")}
        if include_ranks and self.ranks is not None:
            out["ranks"] = self.ranks.tolist()
            out["users"] = self.users.tolist()
        return out


def _rank_block(model, contexts: np.ndarray, candidates: np.ndarray, batch_size: int) -> np.ndarray:
    ranks = np.empty(contexts.shape[0], dtype=np.int64)
    for lo in range(0, contexts.shape[0], batch_size):
        hi = lo + batch_size
        scores = model.score_candidates(contexts[lo:hi], candidates[lo:hi])
        if not np.all(np.isfinite(scores)):
            raise NumericalError("non-finite candidate scores during evaluation")
        ranks[lo:hi] = rank_of_target(scores, 0)
    return ranks


def rank_users(model, cands: EvalCandidates, batch_size: int = 512, workers: int = 1) -> np.ndarray:
    """Ranks for every user in ``cands``; sharding does not change the result."""
    n = cands.contexts.shape[0]
    if workers <= 1 or n < 2 * workers:
        return _rank_block(model, cands.contexts, cands.candidates, batch_size)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_rank_block, model, cands.contexts[a:b], cands.candidates[a:b], batch_size)
            for a, b in zip(bounds[:-1], bounds[1:])
        ]
        return np.concatenate([f.result() for f in futures])


def evaluate(model, dataset: SequenceDataset, protocol: EvalProtocol | None = None,
             candidates: EvalCandidates | None = None, batch_size: int = 512, workers: int = 1) -> MetricsReport:
    """Rank each user's held-out item among sampled negatives.

    ``model`` needs ``score_candidates(contexts, candidates) -> scores``.
    Pass prebuilt ``candidates`` to reuse one candidate set across models.
    """
    protocol = protocol or EvalProtocol()
    protocol.validate()
    if candidates is None:
        candidates = build_eval_candidates(dataset, protocol.split, protocol.negatives, protocol.seed)
    ranks = rank_users(model, candidates, batch_size, workers)
    return MetricsReport(
        split=protocol.split,
        seed=protocol.seed,
        n_users=int(ranks.size),
        skipped=dataset.n_users - int(ranks.size),
        metrics=metrics_from_ranks(ranks, protocol.cutoffs()),
        protocol=asdict(protocol),
        ranks=ranks,
        users=candidates.users,
    )


def mean_report(reports: Sequence[MetricsReport]) -> dict[str, float]:
    keys = reports[0].metrics.keys()
    return {k: float(np.mean([r.metrics[k] for r in reports])) for k in keys}


def format_table(rows: Sequence[tuple[str, dict[str, float]]], k: int = 10) -> str:
    """Aligned text table with columns MRR@k, NDCG@k, HR@k."""
    cols = [f"{m}@{k}" for m in METRICS]
    width = max([len(label) for label, _ in rows] + [8])
    lines = [f"{'':{width}s}" + "".join(f"{c:>10s}" for c in cols)]
    for label, metrics in rows:
        lines.append(f"{label:{width}s}" + "".join(f"{metrics[c]:>10.4f}" for c in cols))
    return "\n".join(lines)


def seed_table(reports: Sequence[MetricsReport], k: int = 10) -> str:
    """Per-seed rows followed by their mean."""
    rows = [(f"seed {r.seed}", r.metrics) for r in reports]
    if len(reports) > 1:
        rows.append(("mean", mean_report(reports)))
    return format_table(rows, k)


def dump_ranks(path, report: MetricsReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(include_ranks=True), fh, sort_keys=True)
