"""Interaction-log ingestion, filtering, leave-one-out splitting and feature encoding.

File formats
------------
Interactions: UTF-8 TSV with header ``user_id<TAB>item_id<TAB>timestamp``.
Extra trailing columns are ignored.

Features: UTF-8 TSV with header ``item_id<TAB><feature>...``.  Token-sequence
cells hold ``|``-separated tokens, float cells hold decimal literals and an
empty cell means the value is missing.

Internal item and token indices start at 1; index 0 is reserved for padding
and unknown values everywhere.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .container import read_container, write_container
from .errors import ContractError, DataError, EmptyDatasetError, ProtocolError, SchemaError

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("id", "token", "token_sequence", "float")
TOKEN_SEPARATOR = "|"
SPLITS = ("train", "validation", "test")


class InteractionRecord(NamedTuple):
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str


@dataclass(frozen=True)
class FeatureSchema:
    """The K item features; the first is always the item id."""

    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        if not self.features:
            raise SchemaError("a schema needs at least the id feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate feature names in {names}")
        for f in self.features:
            if f.kind not in FEATURE_KINDS:
                raise SchemaError(f"feature {f.name!r} has unknown kind {f.kind!r}")
        kinds = [f.kind for f in self.features]
        if kinds[0] != "id" or kinds.count("id") != 1:
            raise SchemaError("exactly one id feature is required and it must come first")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> FeatureSchema:
        specs = [FeatureSpec("item_id", "id")]
        specs += [FeatureSpec(name.strip(), kind.strip()) for name, kind in pairs]
        return cls(tuple(specs))

    @classmethod
    def parse(cls, text: str) -> FeatureSchema:
        """Parse ``"genre:token_sequence,year:float"``; an empty string means id only."""
        pairs = []
        for chunk in filter(None, (c.strip() for c in text.split(","))):
            if ":" not in chunk:
                raise SchemaError(f"feature declaration {chunk!r} must look like name:kind")
            name, kind = chunk.split(":", 1)
            pairs.append((name, kind))
        return cls.from_pairs(pairs)

    @property
    def K(self) -> int:
        return len(self.features)

    @property
    def explicit(self) -> tuple[FeatureSpec, ...]:
        return self.features[1:]

    def to_json(self) -> list:
        return [[f.name, f.kind] for f in self.features]

    @classmethod
    def from_json(cls, obj) -> FeatureSchema:
        return cls(tuple(FeatureSpec(n, k) for n, k in obj))


class Vocabulary:
    """Bijection between external values and indices ``1..size``; 0 is unknown."""

    def __init__(self, values: Iterable[str] = ()):
        self._index: dict[str, int] = {}
        self._values: list[str] = []
        for v in values:
            self.add(v)

    def add(self, value: str) -> int:
        idx = self._index.get(value)
        if idx is None:
            self._values.append(value)
            idx = len(self._values)
            self._index[value] = idx
        return idx

    def encode(self, value: str | None) -> int:
        if value is None:
            return 0
        return self._index.get(value, 0)

    def decode(self, index: int) -> str:
        if not 1 <= index <= len(self._values):
            raise KeyError(f"index {index} is padding or out of range")
        return self._values[index - 1]

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, value) -> bool:
        return value in self._index

    @property
    def values(self) -> list[str]:
        return list(self._values)


# ---------------------------------------------------------------------------
# ingestion


def _read_tsv(path) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line and lineno > 1:
                continue
            yield lineno, line.split("\t")


def read_interactions(path) -> list[InteractionRecord]:
    rows = _read_tsv(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: empty interactions file") from None
    want = ["user_id", "item_id", "timestamp"]
    if header[:3] != want:
        raise DataError(f"{path}:1: header must start with {'<TAB>'.join(want)}, got {header!r}")
    records = []
    for lineno, cells in rows:
        if len(cells) < 3 or not cells[0] or not cells[1]:
            raise DataError(f"{path}:{lineno}: malformed interaction line")
        try:
            ts = int(cells[2])
        except ValueError:
            try:
                ts = int(float(cells[2]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {cells[2]!r}") from None
        records.append(InteractionRecord(cells[0], cells[1], ts))
    return records


def read_features(path, schema: FeatureSchema) -> dict[str, dict[str, str | None]]:
    rows = _read_tsv(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: empty features file") from None
    if not header or header[0] != "item_id":
        raise DataError(f"{path}:1: first column must be item_id")
    declared = {f.name for f in schema.explicit}
    for col in header[1:]:
        if col not in declared:
            raise SchemaError(f"{path}: column {col!r} is not declared in the schema")
    for name in declared:
        if name not in header[1:]:
            raise SchemaError(f"{path}: schema feature {name!r} has no column")
    out: dict[str, dict[str, str | None]] = {}
    for lineno, cells in rows:
        if len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        out[cells[0]] = {col: (cell if cell != "" else None) for col, cell in zip(header[1:], cells[1:])}
    return out


def ingest(interactions_path, features_path, schema: FeatureSchema):
    """Parse both files; returns ``(records, raw_features)``.

    Items without a feature row get ``None`` (missing) for every feature.
    """
    records = read_interactions(interactions_path)
    if features_path is None:
        if schema.explicit:
            raise SchemaError("schema declares explicit features but no features file was given")
        raw = {}
    else:
        raw = read_features(features_path, schema)
    empty = {f.name: None for f in schema.explicit}
    features = {}
    for rec in records:
        if rec.item_id not in features:
            features[rec.item_id] = raw.get(rec.item_id, empty)
    return records, features


# ---------------------------------------------------------------------------
# preprocessing


def k_core_filter(records: Sequence[InteractionRecord], k: int = 5) -> list[InteractionRecord]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ContractError("k must be at least 1")
    current = list(records)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyDatasetError(f"{k}-core filtering removed every interaction")
    return current


def build_sequences(records: Sequence[InteractionRecord]) -> dict[str, list[str]]:
    """Per-user item lists in ascending timestamp order; ties keep file order."""
    grouped: dict[str, list[InteractionRecord]] = {}
    for r in records:
        grouped.setdefault(r.user_id, []).append(r)
    return {u: [r.item_id for r in sorted(rs, key=lambda r: r.timestamp)] for u, rs in grouped.items()}


def pad_truncate(sequence: Sequence[int], s: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Keep the most recent ``s`` items and left-pad with 0 so real items sit rightmost."""
    if s < 1:
        raise ContractError("s must be at least 1")
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.size == 0:
        raise ContractError("cannot pad an empty sequence")
    seq = seq[-s:]
    out = np.zeros(s, dtype=np.int64)
    out[s - seq.size :] = seq
    mask = np.zeros(s, dtype=bool)
    mask[s - seq.size :] = True
    return out, mask


def pad_batch(sequences: Sequence[Sequence[int]], s: int) -> np.ndarray:
    """Vectorized :func:`pad_truncate` for many sequences; empty sequences give all zeros."""
    out = np.zeros((len(sequences), s), dtype=np.int64)
    for row, seq in enumerate(sequences):
        tail = np.asarray(seq, dtype=np.int64)[-s:]
        if tail.size:
            out[row, s - tail.size :] = tail
    return out


@dataclass
class LeaveOneOutSplit:
    train: list[list]
    valid: list
    test: list
    users: list
    dropped: int


def split_leave_one_out(sequences: dict[str, list]) -> LeaveOneOutSplit:
    """Last item is test, second-to-last is validation, the rest is training."""
    users, train, valid, test = [], [], [], []
    dropped = 0
    for user, seq in sequences.items():
        if len(seq) < 3:
            dropped += 1
            continue
        users.append(user)
        train.append(list(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    if dropped:
        logger.info("dropped %d users with fewer than 3 interactions", dropped)
    return LeaveOneOutSplit(train, valid, test, users, dropped)


# ---------------------------------------------------------------------------
# feature encoding


@dataclass
class EncodedFeature:
    """One explicit feature encoded per internal item index (row 0 = padding).

    ``index`` for token features, ``tokens``/``counts`` for token sequences,
    ``value`` for floats.
    """

    name: str
    kind: str
    vocab: Vocabulary | None = None
    index: np.ndarray | None = None
    tokens: np.ndarray | None = None
    counts: np.ndarray | None = None
    value: np.ndarray | None = None
    mean: float = 0.0
    std: float = 1.0

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) if self.vocab is not None else 0


@dataclass
class ItemFeatures:
    schema: FeatureSchema
    n_items: int
    encoded: list[EncodedFeature]

    def vocab_sizes(self) -> dict[str, int]:
        out = {"item_id": self.n_items}
        for e in self.encoded:
            if e.kind != "float":
                out[e.name] = e.vocab_size
        return out


def encode_features(
    items: Sequence[str], schema: FeatureSchema, raw: dict[str, dict[str, str | None]]
) -> ItemFeatures:
    """Encode every explicit feature for ``items`` (internal index i+1 for items[i]).

    Vocabularies are built over ``items`` in order.  Floats are z-scored with
    the population mean and deviation over items that have a value; missing
    floats encode to 0.0 (the mean).
    """
    n = len(items)
    encoded = []
    for spec in schema.explicit:
        cells = [raw.get(it, {}).get(spec.name) for it in items]
        enc = EncodedFeature(spec.name, spec.kind)
        if spec.kind == "token":
            vocab = Vocabulary(c for c in cells if c is not None)
            enc.vocab = vocab
            enc.index = np.zeros(n + 1, dtype=np.int64)
            enc.index[1:] = [vocab.encode(c) for c in cells]
        elif spec.kind == "token_sequence":
            vocab = Vocabulary()
            split = []
            for c in cells:
                toks = [t for t in c.split(TOKEN_SEPARATOR) if t] if c is not None else []
                split.append([vocab.add(t) for t in toks])
            width = max([len(t) for t in split] + [1])
            enc.vocab = vocab
            enc.tokens = np.zeros((n + 1, width), dtype=np.int64)
            enc.counts = np.zeros(n + 1, dtype=np.int64)
            for i, toks in enumerate(split, start=1):
                enc.tokens[i, : len(toks)] = toks
                enc.counts[i] = len(toks)
        elif spec.kind == "float":
            vals = np.full(n, np.nan)
            for i, c in enumerate(cells):
                if c is not None:
                    try:
                        vals[i] = float(c)
                    except ValueError:
                        raise DataError(f"feature {spec.name!r}: {c!r} is not a float") from None
            present = vals[~np.isnan(vals)]
            mean = float(present.mean()) if present.size else 0.0
            std = float(present.std()) if present.size else 1.0
            enc.mean, enc.std = mean, (std if std > 0 else 1.0)
            enc.value = np.zeros(n + 1)
            enc.value[1:] = np.where(np.isnan(vals), 0.0, (vals - mean) / enc.std)
        encoded.append(enc)
    return ItemFeatures(schema, n, encoded)


def encode_value(feature: EncodedFeature, value):
    """Encode one raw value with an existing feature encoding (unseen -> 0)."""
    if feature.kind == "token":
        return feature.vocab.encode(value)
    if feature.kind == "token_sequence":
        toks = value if isinstance(value, (list, tuple)) else (value or "").split(TOKEN_SEPARATOR)
        return [feature.vocab.encode(t) for t in toks if t]
    if feature.kind == "float":
        if value is None or value == "":
            return 0.0
        return (float(value) - feature.mean) / feature.std
    raise SchemaError(f"cannot encode feature kind {feature.kind!r}")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SequenceDataset:
    """Prepared leave-one-out data in internal indices.

    ``train[u]`` is the chronologically ordered training item array of user
    ``u``; ``valid[u]`` and ``test[u]`` are the held-out items.  Padding to the
    model length ``max_len`` happens when contexts are built.
    """

    users: list[str]
    item_vocab: Vocabulary
    train: list[np.ndarray]
    valid: np.ndarray
    test: np.ndarray
    features: ItemFeatures
    max_len: int = 50
    stats: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)

    @property
    def schema(self) -> FeatureSchema:
        return self.features.schema

    def history(self, u: int) -> np.ndarray:
        return np.concatenate([self.train[u], [self.valid[u], self.test[u]]])

    def item_frequency(self) -> np.ndarray:
        """Training-split interaction count per internal item (index 0 is 0)."""
        counts = np.zeros(self.n_items + 1, dtype=np.int64)
        for seq in self.train:
            np.add.at(counts, seq, 1)
        return counts

    def context(self, split: str, users: Sequence[int] | None = None):
        """Padded input contexts and targets for ``split``.

        ``train`` predicts the last training item from the preceding ones,
        ``validation`` predicts the validation item from the training items and
        ``test`` predicts the test item from training items plus the
        validation item.  Returns ``(user_indices, contexts, targets)``; users
        without a target for the split are omitted.
        """
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        users = range(self.n_users) if users is None else users
        keep, seqs, targets = [], [], []
        for u in users:
            tr = self.train[u]
            if split == "train":
                if tr.size < 2:
                    continue
                seq, tgt = tr[:-1], tr[-1]
            elif split == "validation":
                if tr.size < 1:
                    continue
                seq, tgt = tr, self.valid[u]
            else:
                seq, tgt = np.append(tr, self.valid[u]), self.test[u]
            keep.append(u)
            seqs.append(seq)
            targets.append(tgt)
        return np.asarray(keep, dtype=np.int64), pad_batch(seqs, self.max_len), np.asarray(targets, dtype=np.int64)

    # -- persistence ---------------------------------------------------------

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        lengths = np.array([t.size for t in self.train], dtype=np.int64)
        arrays = {
            "train.items": np.concatenate(self.train) if self.train else np.zeros(0, np.int64),
            "train.offsets": np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
            "valid": np.asarray(self.valid, dtype=np.int64),
            "test": np.asarray(self.test, dtype=np.int64),
        }
        feats = []
        for e in self.features.encoded:
            entry = {"name": e.name, "kind": e.kind}
            if e.kind == "token":
                arrays[f"feat.{e.name}.index"] = e.index
            elif e.kind == "token_sequence":
                arrays[f"feat.{e.name}.tokens"] = e.tokens
                arrays[f"feat.{e.name}.counts"] = e.counts
            else:
                arrays[f"feat.{e.name}.value"] = e.value
                entry.update(mean=e.mean, std=e.std)
            if e.vocab is not None:
                entry["vocab"] = e.vocab.values
            feats.append(entry)
        meta = {
            "schema": self.schema.to_json(),
            "users": self.users,
            "items": self.item_vocab.values,
            "features": feats,
            "max_len": self.max_len,
            "stats": self.stats,
        }
        return arrays, meta

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays, meta = self.to_arrays()
        if extra_meta:
            meta.update(extra_meta)
        write_container(path, arrays, meta, kind="dataset")

    @classmethod
    def load(cls, path) -> SequenceDataset:
        arrays, meta = read_container(path, kind="dataset")
        schema = FeatureSchema.from_json(meta["schema"])
        offsets = arrays["train.offsets"]
        flat = arrays["train.items"]
        train = [flat[offsets[i] : offsets[i + 1]].copy() for i in range(len(offsets) - 1)]
        items = Vocabulary(meta["items"])
        encoded = []
        for entry in meta["features"]:
            e = EncodedFeature(entry["name"], entry["kind"])
            if "vocab" in entry:
                e.vocab = Vocabulary(entry["vocab"])
            if e.kind == "token":
                e.index = arrays[f"feat.{e.name}.index"]
            elif e.kind == "token_sequence":
                e.tokens = arrays[f"feat.{e.name}.tokens"]
                e.counts = arrays[f"feat.{e.name}.counts"]
            else:
                e.value = arrays[f"feat.{e.name}.value"]
                e.mean, e.std = entry["mean"], entry["std"]
            encoded.append(e)
        return cls(
            users=list(meta["users"]),
            item_vocab=items,
            train=train,
            valid=arrays["valid"],
            test=arrays["test"],
            features=ItemFeatures(schema, len(items), encoded),
            max_len=int(meta["max_len"]),
            stats=meta.get("stats", {}),
        )


def record_stats(records: Sequence[InteractionRecord]) -> dict:
    users = Counter(r.user_id for r in records)
    items = {r.item_id for r in records}
    return {
        "interactions": len(records),
        "users": len(users),
        "items": len(items),
        "avg_length": (len(records) / len(users)) if users else 0.0,
    }


def assemble_dataset(
    records: Sequence[InteractionRecord],
    raw_features: dict,
    schema: FeatureSchema,
    max_len: int = 50,
    k: int = 5,
) -> SequenceDataset:
    """Run the full preparation chain on parsed records."""
    before = record_stats(records)
    filtered = k_core_filter(records, k) if k > 1 else list(records)
    after = record_stats(filtered)
    sequences = build_sequences(filtered)
    split = split_leave_one_out(sequences)
    if not split.users:
        raise EmptyDatasetError("no user has the three interactions leave-one-out needs")
    item_vocab = Vocabulary()
    for seq in split.train:
        for it in seq:
            item_vocab.add(it)
    for it in list(split.valid) + list(split.test):
        item_vocab.add(it)
    enc = item_vocab.encode
    features = encode_features(item_vocab.values, schema, raw_features)
    return SequenceDataset(
        users=list(split.users),
        item_vocab=item_vocab,
        train=[np.array([enc(i) for i in seq], dtype=np.int64) for seq in split.train],
        valid=np.array([enc(i) for i in split.valid], dtype=np.int64),
        test=np.array([enc(i) for i in split.test], dtype=np.int64),
        features=features,
        max_len=max_len,
        stats={"raw": before, "filtered": after, "dropped_short_users": split.dropped, "k_core": k},
    )


def prepare(interactions_path, features_path, schema: FeatureSchema, max_len: int = 50, k: int = 5) -> SequenceDataset:
    for p in (interactions_path, features_path):
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")
    records, raw = ingest(interactions_path, features_path, schema)
    return assemble_dataset(records, raw, schema, max_len=max_len, k=k)


# ---------------------------------------------------------------------------
# evaluation candidates


def sample_eval_negatives(history, item_count: int, n: int = 100, rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` distinct items from ``1..item_count`` drawn uniformly outside ``history``."""
    rng = rng if rng is not None else np.random.default_rng()
    seen = np.unique(np.asarray(history, dtype=np.int64))
    seen = seen[(seen >= 1) & (seen <= item_count)]
    available = item_count - seen.size
    if available < n:
        raise ProtocolError(f"only {available} items outside the history, {n} negatives requested")
    if available <= 4 * n:
        pool = np.setdiff1d(np.arange(1, item_count + 1), seen, assume_unique=True)
        return rng.choice(pool, size=n, replace=False)
    blocked = set(seen.tolist())
    out: list[int] = []
    while len(out) < n:
        for x in rng.integers(1, item_count + 1, size=2 * (n - len(out))).tolist():
            if x not in blocked:
                blocked.add(x)
                out.append(x)
                if len(out) == n:
                    break
    return np.asarray(out, dtype=np.int64)


@dataclass
class EvalCandidates:
    """Ground-truth item in column 0 followed by ``n`` sampled negatives."""

    split: str
    seed: int
    users: np.ndarray
    contexts: np.ndarray
    candidates: np.ndarray

    @property
    def targets(self) -> np.ndarray:
        return self.candidates[:, 0]


def build_eval_candidates(dataset: SequenceDataset, split: str, n: int = 100, seed: int = 0) -> EvalCandidates:
    """Candidate sets for every user with a ``split`` target.

    Each user draws from an independent generator keyed by ``(seed, split,
    user)`` so results do not depend on iteration order or sharding.
    """
    users, contexts, targets = dataset.context(split)
    code = SPLITS.index(split)
    cands = np.empty((users.size, n + 1), dtype=np.int64)
    cands[:, 0] = targets
    for row, u in enumerate(users):
        rng = np.random.default_rng([seed, code, int(u)])
        cands[row, 1:] = sample_eval_negatives(dataset.history(u), dataset.n_items, n, rng)
    return EvalCandidates(split, seed, users, contexts, cands)


def describe(stats: dict) -> str:
    """Aligned statistics block: interactions, users, items and average length."""
    rows = [("# interactions", "interactions"), ("# users", "users"), ("# items", "items"), ("# avg. length", "avg_length")]
    cols = [c for c in ("raw", "filtered") if c in stats]
    lines = [f"{'':16s}" + "".join(f"{c:>14s}" for c in cols)]
    for label, key in rows:
        vals = []
        for c in cols:
            v = stats[c][key]
            vals.append(f"{v:>14,.1f}" if isinstance(v, float) and not float(v).is_integer() else f"{int(v):>14,d}")
        lines.append(f"{label:16s}" + "".join(vals))
    return "\n".join(lines)
