import numpy as np
import pytest

from mixrec.data import FeatureSchema, encode_features
from mixrec.synthetic import SynthConfig, synth_generate


def make_features(n_items, kinds=(), seed=0):
    """Random item features; ``kinds`` lists the explicit feature kinds."""
    rng = np.random.default_rng(seed)
    pairs = [(f"f{j}", kind) for j, kind in enumerate(kinds)]
    items = [f"i{m}" for m in range(n_items)]
    raw = {}
    for it in items:
        row = {}
        for name, kind in pairs:
            if kind == "token":
                row[name] = f"t{rng.integers(4)}"
            elif kind == "token_sequence":
                row[name] = "|".join(f"g{x}" for x in rng.choice(5, size=rng.integers(1, 4), replace=False))
            else:
                row[name] = str(rng.normal())
        raw[it] = row
    return encode_features(items, FeatureSchema.from_pairs(pairs), raw)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(n_items=150, n_users=300, min_len=6, max_len=30, seq_len=20, seed=2))
