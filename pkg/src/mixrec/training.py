"""Shifted next-item training with sampled negatives, BCE loss and Adam."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import SequenceDataset, build_eval_candidates, pad_batch
from .errors import ConfigError, NumericalError
from .evaluation import EvalProtocol, evaluate
from .model import MLP4Rec, PopRec, is_decayed, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 200
    patience: int = 10
    weight_decay: float = 0.0
    negatives: int = 1
    max_grad_norm: float | None = None
    eval_every: int = 1
    eval_negatives: int = 100
    monitor: str = "NDCG@10"
    seed: int = 0
    # track HR@1 on the training split until it reaches this value
    target_train_hr1: float | None = None
    stop_at_target: bool = True

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.epochs < 0 or self.negatives < 1 or self.eval_every < 1:
            raise ConfigError("patience, batch_size, negatives and eval_every must be >= 1, epochs >= 0")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be positive")


# ---------------------------------------------------------------------------
# batches


class TrainingBatch(NamedTuple):
    users: np.ndarray
    inputs: np.ndarray  # (B, s)
    targets: np.ndarray  # (B, s), item at the next position, 0 where unsupervised
    negatives: np.ndarray  # (B, s, n)
    mask: np.ndarray  # (B, s) bool


def shift_targets(sequences: Sequence[np.ndarray], s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left-padded inputs ``seq[:-1]``, targets ``seq[1:]`` and the supervision mask."""
    inputs = pad_batch([np.asarray(q)[:-1] for q in sequences], s)
    targets = pad_batch([np.asarray(q)[1:] for q in sequences], s)
    mask = (inputs != 0) & (targets != 0)
    return inputs, targets, mask


def sample_train_negatives(sequences: Sequence[np.ndarray], mask: np.ndarray, n_items: int, n: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Uniform items outside each user's own sequence, one draw per masked slot."""
    B, s = mask.shape
    seen = np.zeros((B, n_items + 1), dtype=bool)
    for row, q in enumerate(sequences):
        seen[row, q] = True
    seen[:, 0] = True
    rows, cols = np.nonzero(mask)
    rows, cols = np.repeat(rows, n), np.repeat(cols, n)
    slot = np.tile(np.arange(n), mask.sum())
    draw = rng.integers(1, n_items + 1, size=rows.size)
    bad = seen[rows, draw]
    while bad.any():
        draw[bad] = rng.integers(1, n_items + 1, size=int(bad.sum()))
        bad = seen[rows, draw]
    out = np.zeros((B, s, n), dtype=np.int64)
    out[rows, cols, slot] = draw
    return out


def build_batches(dataset: SequenceDataset, batch_size: int, rng: np.random.Generator,
                  n_negatives: int = 1) -> Iterator[TrainingBatch]:
    """Shuffled training batches; users with fewer than two training items are skipped."""
    users = np.array([u for u in range(dataset.n_users) if dataset.train[u].size >= 2], dtype=np.int64)
    users = users[rng.permutation(users.size)]
    s = dataset.max_len
    for lo in range(0, users.size, batch_size):
        chunk = users[lo : lo + batch_size]
        seqs = [dataset.train[u][-(s + 1):] for u in chunk]
        inputs, targets, mask = shift_targets(seqs, s)
        negs = sample_train_negatives([dataset.train[u] for u in chunk], mask, dataset.n_items, n_negatives, rng)
        yield TrainingBatch(chunk, inputs, targets, negs, mask)


# ---------------------------------------------------------------------------
# loss


class LossTerms(NamedTuple):
    total: Tensor
    mean: Tensor
    count: int


def bce_loss(pos_scores, neg_scores, mask) -> LossTerms:
    """``-sum [log sig(pos) + sum_j log(1 - sig(neg_j))]`` over masked positions.

    ``neg_scores`` carries one trailing axis of negatives per position; a
    plain ``pos``-shaped array is treated as a single negative.
    """
    pos = T.as_tensor(pos_scores)
    neg = T.as_tensor(neg_scores)
    if neg.shape == pos.shape:
        neg = T.reshape(neg, neg.shape + (1,))
    if neg.shape[:-1] != pos.shape:
        raise ValueError(f"score shapes disagree: {pos.shape} vs {neg.shape}")
    m = np.asarray(mask, dtype=pos.data.dtype)
    per_pos = T.add(T.softplus(T.neg(pos)), T.tsum(T.softplus(neg), axis=-1))
    total = T.tsum(T.mul(per_pos, Tensor(m)))
    count = int(m.sum())
    return LossTerms(total, T.scale(total, 1.0 / max(count, 1)), count)


def batch_loss(model: MLP4Rec, batch: TrainingBatch, training: bool = True, rng=None) -> LossTerms:
    h = model.forward(batch.inputs, training=training, rng=rng)
    pos = T.tsum(T.mul(h, model.item_embeddings(batch.targets)), axis=-1)
    neg = model.score(h, batch.negatives)
    return bce_loss(pos, neg, batch.mask)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig, decayed: Sequence[str] | None = None) -> OptimizerState:
    """Bias-corrected Adam with decoupled weight decay on ``decayed`` tensors.

    Every gradient is checked before anything is updated, so a non-finite
    gradient leaves parameters and state untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")
    if config.max_grad_norm is not None:
        grads = {k: g.copy() for k, g in grads.items()}
        clip_by_global_norm(grads, config.max_grad_norm)
    decayed = set(decayed or ())
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay and name in decayed:
            update = update + config.weight_decay * p.data
        p.data -= (config.lr * update).astype(p.data.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    loss_sum: float
    positions: int
    seconds: float


def train_epoch(model: MLP4Rec, dataset: SequenceDataset, state: OptimizerState, config: TrainConfig,
                rng: np.random.Generator, epoch: int = 0) -> EpochStats:
    start = time.perf_counter()
    decayed = [n for n in model.params if is_decayed(n)]
    total, count = 0.0, 0
    for batch in build_batches(dataset, config.batch_size, rng, config.negatives):
        if not batch.mask.any():
            continue
        with T.GradTape() as tape:
            loss = batch_loss(model, batch, training=True, rng=rng)
        if not math.isfinite(loss.total.item()):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        grads = T.backward(tape, loss.mean)
        adam_step(model.params, {n: grads[p] for n, p in model.params.items() if p in grads}, state, config, decayed)
        model.zero_padding_rows()
        total += loss.total.item()
        count += loss.count
    return EpochStats(epoch, total / max(count, 1), total, count, time.perf_counter() - start)


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best_value = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for 1-based ``epoch``; True means stop now."""
        if value > self.best_value:
            self.best_value, self.best_epoch, self.bad = value, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def early_stop(history: Sequence[float], patience: int) -> tuple[bool, int]:
    """``(stop, best_epoch)`` for a metric history; epochs are 1-based."""
    if not len(history):
        raise ValueError("history must be non-empty")
    es = EarlyStopping(patience)
    for epoch, value in enumerate(history, start=1):
        if es.update(epoch, value):
            return True, es.best_epoch
    return False, es.best_epoch


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_value: float
    stopped: str
    epochs_run: int
    target_epoch: int | None = None


def fit(model, dataset: SequenceDataset, config: TrainConfig, log_path=None, checkpoint_path=None,
        run_meta: dict | None = None) -> FitResult:
    """Epoch loop with validation-based early stopping.

    The best weights (by ``config.monitor`` on the validation split) are
    restored at the end, unless the run stopped on ``target_train_hr1``.
    ``log_path`` receives one JSON line per epoch.  ``checkpoint_path`` is
    rewritten whenever validation improves and once more with the final
    weights, so a zero-epoch run still ships its initialization.
    """
    config.validate()
    if isinstance(model, PopRec):
        model.fit(dataset)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, run_meta)
        return FitResult([], 0, math.nan, "pop_rec", 0)
    rng = np.random.default_rng([config.seed, 7])
    state = OptimizerState()
    val_cands = build_eval_candidates(dataset, "validation", config.eval_negatives, config.seed)
    train_cands = (build_eval_candidates(dataset, "train", config.eval_negatives, config.seed)
                   if config.target_train_hr1 is not None else None)
    stopper = EarlyStopping(config.patience)
    best = {k: v.data.copy() for k, v in model.params.items()}
    history: list[dict] = []
    stopped = "max_epochs"
    target_epoch = None
    log = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            stats = train_epoch(model, dataset, state, config, rng, epoch)
            row = {"epoch": epoch, "variant": model.config.variant, "train_loss": stats.train_loss,
                   "seconds": round(stats.seconds, 4)}
            reason = None
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                report = evaluate(model, dataset, EvalProtocol(split="validation", negatives=config.eval_negatives,
                                                               seed=config.seed), candidates=val_cands)
                row["valid"] = report.metrics
                if stopper.update(epoch, report.metrics[config.monitor]):
                    reason = "early_stop"
                if stopper.best_epoch == epoch:
                    best = {k: v.data.copy() for k, v in model.params.items()}
                    if checkpoint_path is not None:
                        save_checkpoint(checkpoint_path, model, {**(run_meta or {}), "epoch": epoch})
                if train_cands is not None and target_epoch is None:
                    tr = evaluate(model, dataset, EvalProtocol(split="train", negatives=config.eval_negatives,
                                                               seed=config.seed), candidates=train_cands)
                    row["train_hr@1"] = tr.metrics["HR@1"]
                    if tr.metrics["HR@1"] >= config.target_train_hr1:
                        target_epoch = epoch
                        if config.stop_at_target:
                            reason = "target_reached"
            history.append(row)
            if log is not None:
                log.write(json.dumps(row, sort_keys=True) + "\n")
                log.flush()
            if reason is not None:
                stopped = reason
                break
    finally:
        if log is not None:
            log.close()
    if stopped != "target_reached":
        for k, v in model.params.items():
            v.data[...] = best[k]
    if checkpoint_path is not None:
        final_epoch = history[-1]["epoch"] if stopped == "target_reached" else stopper.best_epoch
        save_checkpoint(checkpoint_path, model, {**(run_meta or {}), "epoch": final_epoch})
    return FitResult(history, stopper.best_epoch, stopper.best_value, stopped, len(history), target_epoch)
