"""Tri-directional MLP mixing network for next-item prediction.

Activations live in a hidden table of shape ``(batch, K, s, C)``: K item
features, s sequence positions, C channels.  One layer applies, in order,

* a sequence mixer per feature: LayerNorm over C, then a two-layer MLP along
  the s axis for every channel, added residually;
* a channel mixer per feature: LayerNorm over C, then a two-layer MLP along C
  for every position, added residually;
* one feature mixer shared by all features: LayerNorm over C, then a
  two-layer MLP along the K axis for every (position, channel), added
  residually.

All L layers reuse one parameter set.  The hidden state of position t is the
item-id slice of the final table; candidates are scored by a dot product with
the (tied) item embedding table.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .data import ItemFeatures
from .errors import CheckpointError, ConfigError
from .tensor import Tensor

VARIANTS = (
    "full",
    "linear_feature_mixer",
    "simple_final_mix",
    "no_sequence_mixer",
    "no_channel_mixer",
    "no_feature_mixer",
    "mlp_mixer_plus",
    "pop_rec",
)

# (name, kind, vocabulary size); kind "id" is the item table itself
FeatureLayout = Sequence[tuple[str, str, int]]


def layout_of(features: ItemFeatures) -> list[tuple[str, str, int]]:
    out = [(features.schema.features[0].name, "id", features.n_items)]
    for e in features.encoded:
        out.append((e.name, e.kind, e.vocab_size))
    return out


@dataclass
class ModelConfig:
    max_len: int = 50
    embed_dim: int = 128
    n_layers: int = 4
    hidden_ratio: float = 4.0
    seq_hidden: int | None = None
    channel_hidden: int | None = None
    feature_hidden: int | None = None
    dropout: float = 0.4
    variant: str = "full"
    init_std: float = 0.02
    ln_eps: float = 1e-12
    dtype: str = "float64"
    # start with zeroed second-layer mixer weights, making forward the identity
    zero_residual_init: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for name in ("max_len", "embed_dim", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("seq_hidden", "channel_hidden", "feature_hidden"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_ratio <= 0:
            raise ConfigError("hidden_ratio must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    def hidden_sizes(self, n_features: int) -> tuple[int, int, int]:
        """Resolved ``(r_s, r_C, r_K)``; explicit sizes win over the ratio."""
        width = self.embed_dim * (n_features if self.variant == "mlp_mixer_plus" else 1)
        scale = lambda n: max(1, int(round(self.hidden_ratio * n)))
        r_s = self.seq_hidden or scale(self.max_len)
        r_c = self.channel_hidden or scale(width)
        r_k = self.feature_hidden or scale(n_features)
        return r_s, r_c, r_k

    @property
    def has_sequence_mixer(self) -> bool:
        return self.variant != "no_sequence_mixer"

    @property
    def has_channel_mixer(self) -> bool:
        return self.variant != "no_channel_mixer"

    @property
    def feature_step(self) -> str | None:
        """``"mlp"``, ``"linear"`` or None."""
        if self.variant in ("no_feature_mixer", "mlp_mixer_plus", "pop_rec"):
            return None
        return "linear" if self.variant == "linear_feature_mixer" else "mlp"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter_shapes(config: ModelConfig, layout: FeatureLayout) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learnable tensor for ``config.variant``."""
    K = len(layout)
    s, C = config.max_len, config.embed_dim
    r_s, r_c, r_k = config.hidden_sizes(K)
    shapes: dict[str, tuple[int, ...]] = {}
    if config.variant == "pop_rec":
        return shapes
    for name, kind, vocab in layout:
        if kind == "float":
            shapes[f"emb.{name}.weight"] = (1, C)
            shapes[f"emb.{name}.bias"] = (C,)
        else:
            shapes[f"emb.{name}"] = (vocab + 1, C)
    if config.variant == "mlp_mixer_plus":
        K, C = 1, K * C
    if config.has_sequence_mixer:
        shapes.update({
            "seq.ln.gain": (K, 1, C), "seq.ln.bias": (K, 1, C),
            "seq.w1": (K, r_s, s), "seq.b1": (K, 1, r_s),
            "seq.w2": (K, s, r_s), "seq.b2": (K, 1, s),
        })
    if config.has_channel_mixer:
        shapes.update({
            "chan.ln.gain": (K, 1, C), "chan.ln.bias": (K, 1, C),
            "chan.w1": (K, r_c, C), "chan.b1": (K, 1, r_c),
            "chan.w2": (K, C, r_c), "chan.b2": (K, 1, C),
        })
    if config.feature_step == "mlp":
        shapes.update({
            "feat.ln.gain": (C,), "feat.ln.bias": (C,),
            "feat.w1": (r_k, K), "feat.b1": (r_k,),
            "feat.w2": (K, r_k), "feat.b2": (K,),
        })
    elif config.feature_step == "linear":
        shapes.update({"feat.lin.w": (K, K), "feat.lin.b": (K,)})
    return shapes


def padding_tables(layout: FeatureLayout) -> list[str]:
    return [f"emb.{name}" for name, kind, _ in layout if kind != "float"]


def is_decayed(name: str) -> bool:
    """Weight decay applies to mixer weight matrices only."""
    return not name.startswith("emb.") and ".ln." not in name and (name.endswith((".w1", ".w2")) or name == "feat.lin.w")


RESIDUAL_OUTPUTS = ("seq.w2", "seq.b2", "chan.w2", "chan.b2", "feat.w2", "feat.b2")


def init_params(
    config: ModelConfig, layout: FeatureLayout, rng: np.random.Generator, zero_residual: bool = False
) -> dict[str, Tensor]:
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in parameter_shapes(config, layout).items():
        if ".ln.gain" in name:
            arr = np.ones(shape)
        elif ".ln.bias" in name or name.endswith((".b1", ".b2", ".bias", "lin.b")):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, config.init_std)
        if zero_residual and name in RESIDUAL_OUTPUTS:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    for name in padding_tables(layout):
        if name in params:
            params[name].data[0] = 0.0
    return params


def count_params(config: ModelConfig, layout: FeatureLayout) -> dict:
    """Closed-form parameter count, itemized.  Independent of ``n_layers``."""
    K = len(layout)
    s, C = config.max_len, config.embed_dim
    r_s, r_c, r_k = config.hidden_sizes(K)
    report = {"mixers": 0, "layernorm": 0, "embeddings": 0, "tables": {}}
    if config.variant == "pop_rec":
        report["total"] = 0
        return report
    for name, kind, vocab in layout:
        n = 2 * C if kind == "float" else (vocab + 1) * C
        report["tables"][name] = n
        report["embeddings"] += n
    k_mix, width = (1, K * C) if config.variant == "mlp_mixer_plus" else (K, C)
    ln_instances = 0
    if config.has_sequence_mixer:
        report["mixers"] += k_mix * (2 * s * r_s + r_s + s)
        ln_instances += k_mix
    if config.has_channel_mixer:
        report["mixers"] += k_mix * (2 * width * r_c + r_c + width)
        ln_instances += k_mix
    if config.feature_step == "mlp":
        report["mixers"] += 2 * K * r_k + r_k + K
        ln_instances += 1
    elif config.feature_step == "linear":
        report["mixers"] += K * K + K
    report["layernorm"] = ln_instances * 2 * width
    report["total"] = report["mixers"] + report["layernorm"] + report["embeddings"]
    report["hidden"] = {"seq": r_s, "channel": r_c, "feature": r_k}
    return report


def space_complexity_note(config: ModelConfig, K: int) -> str:
    s, C = config.max_len, config.embed_dim
    return f"mixer space complexity O(K(s + C + 1)) with K={K}, s={s}, C={C}: K(s+C+1) = {K * (s + C + 1)}"


# ---------------------------------------------------------------------------
# mixer blocks


def _mlp(x: Tensor, w1, b1, w2, b2, p: float, training: bool, rng) -> Tensor:
    """``drop(W2 . drop(gelu(W1 . x + b1)) + b2)`` on the last axis of ``x``."""
    h = T.add(T.matmul(x, T.swapaxes(w1, -1, -2)), b1)
    h = T.dropout(T.gelu(h), p, training, rng)
    out = T.add(T.matmul(h, T.swapaxes(w2, -1, -2)), b2)
    return T.dropout(out, p, training, rng)


def sequence_mix(x: Tensor, w: dict, p: float = 0.0, training: bool = False, rng=None, eps: float = 1e-12) -> Tensor:
    """Mix along the sequence axis, per feature and channel. ``x``: (..., K, s, C)."""
    u = T.layer_norm(x, w["seq.ln.gain"], w["seq.ln.bias"], eps)
    out = _mlp(T.swapaxes(u, -1, -2), w["seq.w1"], w["seq.b1"], w["seq.w2"], w["seq.b2"], p, training, rng)
    return T.add(x, T.swapaxes(out, -1, -2))


def channel_mix(x: Tensor, w: dict, p: float = 0.0, training: bool = False, rng=None, eps: float = 1e-12) -> Tensor:
    """Mix along the channel axis, per feature and position. ``x``: (..., K, s, C)."""
    v = T.layer_norm(x, w["chan.ln.gain"], w["chan.ln.bias"], eps)
    return T.add(x, _mlp(v, w["chan.w1"], w["chan.b1"], w["chan.w2"], w["chan.b2"], p, training, rng))


def _features_last(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 1, n - 3)
    return T.transpose(x, axes), tuple(np.argsort(axes))


def feature_mix(x: Tensor, w: dict, p: float = 0.0, training: bool = False, rng=None, eps: float = 1e-12) -> Tensor:
    """Shared MLP along the feature axis for every (position, channel)."""
    v = T.layer_norm(x, w["feat.ln.gain"], w["feat.ln.bias"], eps)
    vt, back = _features_last(v)
    out = _mlp(vt, w["feat.w1"], w["feat.b1"], w["feat.w2"], w["feat.b2"], p, training, rng)
    return T.add(x, T.transpose(out, back))


def linear_feature_mix(x: Tensor, w: dict) -> Tensor:
    """Plain ``W x + b`` over the feature axis (no norm, activation or residual)."""
    xt, back = _features_last(x)
    out = T.add(T.matmul(xt, T.swapaxes(w["feat.lin.w"], -1, -2)), w["feat.lin.b"])
    return T.transpose(out, back)


# ---------------------------------------------------------------------------
# models


class MLP4Rec:
    """The mixing network plus its embedding layer.

    ``features`` supplies the per-item feature encodings that the embedding
    layer gathers; ``params`` maps names to gradient-requiring tensors.
    """

    def __init__(self, config: ModelConfig, features: ItemFeatures, seed: int = 0,
                 params: dict[str, Tensor] | None = None, zero_residual: bool = False):
        config.validate()
        if config.variant == "pop_rec":
            raise ConfigError("use PopRec for the popularity baseline")
        self.config = config
        self.features = features
        self.layout = layout_of(features)
        self.K = len(self.layout)
        if params is None:
            zero = zero_residual or config.zero_residual_init
            params = init_params(config, self.layout, np.random.default_rng(seed), zero_residual=zero)
        self.params = params
        self._check_shapes()

    def _check_shapes(self) -> None:
        want = parameter_shapes(self.config, self.layout)
        if set(want) != set(self.params):
            missing = sorted(set(want) - set(self.params))
            extra = sorted(set(self.params) - set(want))
            raise CheckpointError(f"parameter names disagree with config (missing {missing}, unexpected {extra})")
        for name, shape in want.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise CheckpointError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def embed(self, items: np.ndarray) -> Tensor:
        """Hidden table ``(..., K, s, C)`` for padded item indices ``(..., s)``."""
        items = np.asarray(items, dtype=np.int64)
        p = self.params
        parts = [T.embedding_lookup(p[f"emb.{self.layout[0][0]}"], items, padding_idx=0)]
        for enc in self.features.encoded:
            if enc.kind == "token":
                parts.append(T.embedding_lookup(p[f"emb.{enc.name}"], enc.index[items], padding_idx=0))
            elif enc.kind == "token_sequence":
                rows = T.embedding_lookup(p[f"emb.{enc.name}"], enc.tokens[items], padding_idx=0)
                parts.append(T.mean_pool(rows, enc.counts[items]))
            else:
                value = Tensor(enc.value[items][..., None].astype(self.dtype))
                parts.append(T.add(T.mul(value, p[f"emb.{enc.name}.weight"]), p[f"emb.{enc.name}.bias"]))
        if self.config.variant == "mlp_mixer_plus":
            wide = T.concat(parts, axis=-1)
            return T.reshape(wide, wide.shape[:-2] + (1,) + wide.shape[-2:])
        return T.stack(parts, axis=-3)

    def mix(self, x: Tensor, training: bool = False, rng=None, layer_weights: Sequence[dict] | None = None) -> Tensor:
        cfg = self.config
        L = cfg.n_layers
        layers = layer_weights if layer_weights is not None else [self.params] * L
        if len(layers) != L:
            raise ConfigError(f"expected {L} layer weight sets, got {len(layers)}")
        p, eps = cfg.dropout, cfg.ln_eps
        for depth, w in enumerate(layers):
            if cfg.has_sequence_mixer:
                x = sequence_mix(x, w, p, training, rng, eps)
            if cfg.has_channel_mixer:
                x = channel_mix(x, w, p, training, rng, eps)
            if cfg.feature_step == "linear":
                x = linear_feature_mix(x, w)
            elif cfg.feature_step == "mlp" and (cfg.variant != "simple_final_mix" or depth == L - 1):
                x = feature_mix(x, w, p, training, rng, eps)
        return x

    def forward(self, items: np.ndarray, training: bool = False, rng=None,
                layer_weights: Sequence[dict] | None = None) -> Tensor:
        """Hidden states ``(..., s, C)`` for padded item indices ``(..., s)``."""
        x = self.mix(self.embed(items), training, rng, layer_weights)
        if self.config.variant == "mlp_mixer_plus":
            return x[..., 0, :, : self.config.embed_dim]
        return x[..., 0, :, :]

    def item_embeddings(self, items: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.params[f"emb.{self.layout[0][0]}"], items, padding_idx=0)

    def score(self, hidden: Tensor, candidates: np.ndarray) -> Tensor:
        """Dot products of ``hidden (..., C)`` with candidate embeddings ``(..., n)``."""
        e = self.item_embeddings(candidates)
        h = T.reshape(hidden, hidden.shape[:-1] + (1, hidden.shape[-1]))
        return T.tsum(T.mul(e, h), axis=-1)

    def score_candidates(self, contexts: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        """Inference scores using the hidden state at the last position."""
        h = self.forward(contexts, training=False)[..., -1, :]
        return self.score(h, candidates).data

    def count_params(self) -> dict:
        return count_params(self.config, self.layout)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_padding_rows(self) -> None:
        for name in padding_tables(self.layout):
            self.params[name].data[0] = 0.0


class PopRec:
    """Scores every candidate by its training-split interaction count."""

    def __init__(self, config: ModelConfig, features: ItemFeatures, frequency: np.ndarray | None = None):
        self.config = replace(config, variant="pop_rec")
        self.features = features
        self.layout = layout_of(features)
        self.params: dict[str, Tensor] = {}
        self.frequency = (np.zeros(features.n_items + 1, dtype=np.int64) if frequency is None
                          else np.asarray(frequency, dtype=np.int64))

    def fit(self, dataset) -> PopRec:
        self.frequency = dataset.item_frequency()
        return self

    def score_candidates(self, contexts: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        return self.frequency[np.asarray(candidates)].astype(np.float64)

    def count_params(self) -> dict:
        return count_params(self.config, self.layout)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"pop.frequency": self.frequency}


def make_variant(config: ModelConfig, features: ItemFeatures, seed: int = 0, zero_residual: bool = False):
    """Instantiate the model named by ``config.variant``."""
    config.validate()
    if config.variant == "pop_rec":
        return PopRec(config, features)
    return MLP4Rec(config, features, seed=seed, zero_residual=zero_residual)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, extra_meta: dict | None = None) -> None:
    meta = {"config": model.config.to_json(), "layout": [list(x) for x in model.layout]}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, model.state_arrays(), meta, kind="checkpoint")


def load_checkpoint(path, features: ItemFeatures):
    """Rebuild a model; fails if shapes or the feature layout disagree."""
    arrays, meta = read_container(path, kind="checkpoint")
    try:
        config = ModelConfig.from_json(meta["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing or bad config") from exc
    stored = [tuple(x) for x in meta.get("layout", [])]
    if stored != [tuple(x) for x in layout_of(features)]:
        raise CheckpointError(f"{path}: feature layout {stored} does not match the dataset")
    config.validate()
    if config.variant == "pop_rec":
        if "pop.frequency" not in arrays or arrays["pop.frequency"].shape != (features.n_items + 1,):
            raise CheckpointError(f"{path}: bad popularity table")
        return PopRec(config, features, arrays["pop.frequency"]), meta
    dtype = np.dtype(config.dtype)
    params = {k: Tensor(np.ascontiguousarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in arrays.items()}
    return MLP4Rec(config, features, params=params), meta
