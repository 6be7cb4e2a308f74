import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from conftest import make_features
from mixrec import tensor as T
from mixrec.errors import CheckpointError, ConfigError
from mixrec.model import (
    MLP4Rec,
    ModelConfig,
    PopRec,
    VARIANTS,
    channel_mix,
    count_params,
    feature_mix,
    init_params,
    is_decayed,
    layout_of,
    load_checkpoint,
    make_variant,
    parameter_shapes,
    save_checkpoint,
    sequence_mix,
    space_complexity_note,
)
from mixrec.tensor import Tensor, finite_diff_check


def small_config(**kw):
    base = dict(max_len=5, embed_dim=8, n_layers=2, hidden_ratio=2.0, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_items(rng, n_items, shape, pad=1):
    items = rng.integers(1, n_items + 1, size=shape)
    items[..., :pad] = 0
    return items


def perturb(model, rng, scale=0.3):
    """Push every parameter away from its init so gradients are not degenerate."""
    for p in model.params.values():
        p.data += rng.normal(scale=scale, size=p.shape)
    model.zero_padding_rows()


def enumerate_params(config, layout):
    return sum(int(np.prod(s)) for s in parameter_shapes(config, layout).values())


# independent MLP-Mixer reference (plain numpy, one sequence at a time)


def ref_layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d * (1.0 / np.sqrt(var + eps)) * g + b


def ref_gelu(x):
    return x * (0.5 * (1.0 + special.erf(x * (1.0 / math.sqrt(2.0)))))


def ref_mixer(x, w, n_layers, eps=1e-12):
    """Token mixing then channel mixing, ``n_layers`` times with tied weights. ``x``: (s, C)."""
    for _ in range(n_layers):
        y = ref_layer_norm(x, w["seq.ln.gain"][0, 0], w["seq.ln.bias"][0, 0], eps).T
        y = ref_gelu(y @ w["seq.w1"][0].T + w["seq.b1"][0, 0]) @ w["seq.w2"][0].T + w["seq.b2"][0, 0]
        x = x + y.T
        y = ref_layer_norm(x, w["chan.ln.gain"][0, 0], w["chan.ln.bias"][0, 0], eps)
        y = ref_gelu(y @ w["chan.w1"][0].T + w["chan.b1"][0, 0]) @ w["chan.w2"][0].T + w["chan.b2"][0, 0]
        x = x + y
    return x


class TestConfig:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown variant"):
            ModelConfig(variant="transformer").validate()

    @pytest.mark.parametrize("kw", [{"embed_dim": 0}, {"dropout": 1.0}, {"dropout": -0.1}, {"seq_hidden": 0}])
    def test_invalid_sizes(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw).validate()

    def test_hidden_sizes_from_ratio(self):
        cfg = ModelConfig(max_len=50, embed_dim=128, hidden_ratio=4)
        assert cfg.hidden_sizes(3) == (200, 512, 12)
        assert ModelConfig(hidden_ratio=0.1).hidden_sizes(2)[2] == 1

    def test_explicit_hidden_sizes_win(self):
        cfg = ModelConfig(seq_hidden=7, channel_hidden=9, feature_hidden=2)
        assert cfg.hidden_sizes(5) == (7, 9, 2)

    def test_json_round_trip(self):
        cfg = small_config(variant="simple_final_mix", dtype="float32")
        assert ModelConfig.from_json(cfg.to_json()) == cfg


class TestInit:
    def test_padding_rows_zero_and_truncation(self):
        feats = make_features(30, ("token", "token_sequence"))
        params = init_params(small_config(), layout_of(feats), np.random.default_rng(0))
        for name in ("emb.item_id", "emb.f0", "emb.f1"):
            assert not params[name].data[0].any()
        for name, p in params.items():
            if not name.endswith(("gain", "bias", "b1", "b2")):
                assert np.abs(p.data).max() <= 0.04
        assert (params["seq.ln.gain"].data == 1).all() and not params["chan.ln.bias"].data.any()

    def test_decay_groups(self):
        assert is_decayed("seq.w1") and is_decayed("feat.w2") and is_decayed("feat.lin.w")
        for name in ("emb.item_id", "seq.b1", "chan.ln.gain", "feat.ln.bias", "emb.x.weight"):
            assert not is_decayed(name)


class TestEmbedding:
    def test_all_padding_row(self):
        feats = make_features(20, ("token", "token_sequence", "float"))
        model = MLP4Rec(small_config(), feats)
        x = model.embed(np.zeros((2, 5), dtype=int)).data
        assert x.shape == (2, 4, 5, 8)
        assert not x[:, :3].any()
        bias = model.params["emb.f2.bias"].data
        np.testing.assert_array_equal(x[:, 3], np.broadcast_to(bias, (2, 5, 8)))

    def test_single_feature_is_item_rows(self):
        feats = make_features(20)
        model = MLP4Rec(small_config(), feats)
        items = np.array([[0, 3, 7, 7, 19]])
        x = model.embed(items).data
        np.testing.assert_array_equal(x[0, 0], model.params["emb.item_id"].data[items[0]])

    def test_token_sequence_mean(self):
        feats = make_features(20, ("token_sequence",))
        model = MLP4Rec(small_config(), feats)
        enc = feats.encoded[0]
        table = model.params["emb.f0"].data
        x = model.embed(np.arange(1, 6)[None]).data
        for t, item in enumerate(range(1, 6)):
            toks = enc.tokens[item, : enc.counts[item]]
            np.testing.assert_allclose(x[0, 1, t], table[toks].mean(axis=0), rtol=0, atol=1e-15)

    def test_float_projection(self):
        feats = make_features(10, ("float",))
        model = MLP4Rec(small_config(), feats, seed=3)
        perturb(model, np.random.default_rng(1))
        x = model.embed(np.array([[4]])).data
        w, b = model.params["emb.f0.weight"].data, model.params["emb.f0.bias"].data
        np.testing.assert_allclose(x[0, 1, 0], feats.encoded[0].value[4] * w[0] + b, atol=1e-15)

    def test_out_of_range_index(self):
        model = MLP4Rec(small_config(), make_features(10))
        with pytest.raises(IndexError):
            model.embed(np.array([[1, 2, 3, 4, 11]]))


class TestMixers:
    def setup_method(self):
        self.feats = make_features(20, ("token", "float"))
        self.model = MLP4Rec(small_config(), self.feats, seed=1)
        perturb(self.model, np.random.default_rng(2))
        self.w = self.model.params
        self.x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 5, 8)))

    def zeroed(self, *names):
        w = dict(self.w)
        for n in names:
            w[n] = Tensor(np.zeros(self.w[n].shape))
        return w

    def test_sequence_residual_identity(self):
        out = sequence_mix(self.x, self.zeroed("seq.w2", "seq.b2"))
        np.testing.assert_array_equal(out.data, self.x.data)

    def test_channel_residual_identity(self):
        out = channel_mix(self.x, self.zeroed("chan.w2", "chan.b2"))
        np.testing.assert_array_equal(out.data, self.x.data)

    def test_feature_residual_identity(self):
        out = feature_mix(self.x, self.zeroed("feat.w2", "feat.b2"))
        np.testing.assert_array_equal(out.data, self.x.data)

    def test_shapes_preserved(self):
        for fn in (sequence_mix, channel_mix, feature_mix):
            assert fn(self.x, self.w).shape == self.x.shape

    def test_sequence_mix_order_sensitive(self):
        x2 = self.x.data.copy()
        x2[..., [1, 3], :] = x2[..., [3, 1], :]
        a = sequence_mix(self.x, self.w).data
        b = sequence_mix(Tensor(x2), self.w).data
        assert not np.array_equal(a[..., [3, 1], :], b[..., [1, 3], :])

    def test_channel_mix_row_local(self):
        x2 = self.x.data.copy()
        x2[:, :, 4] += 1.0
        a = channel_mix(self.x, self.w).data
        b = channel_mix(Tensor(x2), self.w).data
        np.testing.assert_array_equal(a[:, :, :4], b[:, :, :4])
        assert not np.array_equal(a[:, :, 4], b[:, :, 4])

    def test_feature_mix_per_slot(self):
        # position and channel mixing happens elsewhere: a change at (t, c) stays at t
        x2 = self.x.data.copy()
        x2[:, 1, 2, :] += 1.0
        a = feature_mix(self.x, self.w).data
        b = feature_mix(Tensor(x2), self.w).data
        mask = np.ones(5, bool)
        mask[2] = False
        np.testing.assert_array_equal(a[:, :, mask], b[:, :, mask])

    def test_feature_mix_degenerate_k1(self):
        cfg = small_config(feature_hidden=1)
        model = MLP4Rec(cfg, make_features(10), seed=0)
        out = feature_mix(Tensor(np.random.default_rng(0).normal(size=(1, 5, 8))), model.params)
        assert out.shape == (1, 5, 8) and np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("fn,prefix", [(sequence_mix, "seq"), (channel_mix, "chan"), (feature_mix, "feat")])
    def test_gradients(self, fn, prefix):
        x = Tensor(self.x.data.copy(), requires_grad=True)
        params = [p for n, p in self.w.items() if n.startswith(prefix)]
        wts = np.random.default_rng(5).normal(size=self.x.shape)
        err = finite_diff_check(lambda: T.tsum(T.mul(fn(x, self.w), wts)), params + [x], per_param=True)
        assert max(err) < 1e-6, err

    def test_dropout_gradients_with_replayed_masks(self):
        x = Tensor(self.x.data.copy(), requires_grad=True)
        params = [p for n, p in self.w.items() if n.startswith("chan")]

        def f():
            return T.tsum(channel_mix(x, self.w, p=0.3, training=True, rng=np.random.default_rng(9)))

        assert finite_diff_check(f, params + [x]) < 1e-6


class TestForward:
    def test_full_identity_with_zero_residuals(self):
        feats = make_features(30, ("token", "token_sequence", "float"))
        model = MLP4Rec(small_config(n_layers=3), feats, seed=4, zero_residual=True)
        items = random_items(np.random.default_rng(0), 30, (4, 5), pad=2)
        h = model.forward(items).data
        np.testing.assert_array_equal(h, model.params["emb.item_id"].data[items])

    def test_layers_change_output_not_count(self):
        feats = make_features(20, ("token",))
        m1 = MLP4Rec(small_config(n_layers=1), feats, seed=0)
        m2 = MLP4Rec(small_config(n_layers=2), feats, params=m1.params)
        items = random_items(np.random.default_rng(1), 20, (3, 5))
        assert not np.allclose(m1.forward(items).data, m2.forward(items).data)
        assert m1.count_params()["total"] == m2.count_params()["total"] == m1.num_parameters()

    def test_unbatched_input(self):
        model = MLP4Rec(small_config(), make_features(20, ("token",)), seed=0)
        items = random_items(np.random.default_rng(2), 20, (3, 5))
        batched = model.forward(items).data
        np.testing.assert_allclose(model.forward(items[1]).data, batched[1], rtol=0, atol=1e-14)

    def test_batch_rows_independent(self):
        model = MLP4Rec(small_config(), make_features(20, ("token",)), seed=0)
        items = random_items(np.random.default_rng(2), 20, (3, 5))
        a = model.forward(items).data
        items[2] = 0
        np.testing.assert_array_equal(model.forward(items).data[:2], a[:2])

    def test_weight_sharing_two_copy_oracle(self):
        feats = make_features(20, ("token", "float"))
        model = MLP4Rec(small_config(), feats, seed=0)
        perturb(model, np.random.default_rng(3))
        items = random_items(np.random.default_rng(4), 20, (3, 5))
        wts = np.random.default_rng(5).normal(size=(3, 5, 8))
        mixer = [n for n in model.params if not n.startswith("emb.")]
        copies = [{n: Tensor(model.params[n].data.copy(), requires_grad=True) for n in mixer} for _ in range(2)]
        for c in copies:
            c.update({n: p for n, p in model.params.items() if n.startswith("emb.")})

        with T.GradTape() as tape:
            shared = T.tsum(T.mul(model.forward(items), wts))
        g_shared = T.backward(tape, shared)
        with T.GradTape() as tape:
            unrolled = T.tsum(T.mul(model.forward(items, layer_weights=copies), wts))
        g_unrolled = T.backward(tape, unrolled)

        assert shared.item() == unrolled.item()
        for n in mixer:
            summed = g_unrolled[copies[0][n]] + g_unrolled[copies[1][n]]
            np.testing.assert_allclose(g_shared[model.params[n]], summed, rtol=1e-12, atol=1e-14)

    def test_full_model_gradient(self):
        feats = make_features(20, ("token", "token_sequence"))
        model = MLP4Rec(small_config(dropout=0.2), feats, seed=0)
        perturb(model, np.random.default_rng(6))
        items = random_items(np.random.default_rng(7), 20, (3, 5))
        cands = np.random.default_rng(8).integers(1, 21, size=(3, 4))

        def f():
            h = model.forward(items, training=True, rng=np.random.default_rng(1))
            return T.tsum(model.score(h[:, -1], cands))

        errs = finite_diff_check(f, model.params.values(), max_coords=60, per_param=True)
        assert max(errs) < 1e-4, dict(zip(model.params, errs))

    @settings(max_examples=20, deadline=None)
    @given(
        s=st.integers(1, 6),
        c=st.integers(1, 6),
        kinds=st.lists(st.sampled_from(["token", "token_sequence", "float"]), max_size=3),
        layers=st.integers(1, 3),
        variant=st.sampled_from([v for v in VARIANTS if v != "pop_rec"]),
        b=st.integers(1, 3),
    )
    def test_shape_sweep(self, s, c, kinds, layers, variant, b):
        feats = make_features(8, tuple(kinds))
        cfg = ModelConfig(max_len=s, embed_dim=c, n_layers=layers, hidden_ratio=1.5, dropout=0.0, variant=variant)
        model = make_variant(cfg, feats, seed=0)
        items = np.random.default_rng(0).integers(0, 9, size=(b, s))
        x = model.embed(items)
        mixed = model.mix(x)
        assert mixed.shape == x.shape
        h = model.forward(items)
        assert h.shape == (b, s, c) and np.all(np.isfinite(h.data))


class TestVariants:
    def test_degenerates_to_mlp_mixer(self):
        feats = make_features(25)
        cfg = small_config(max_len=6, embed_dim=5, n_layers=3, hidden_ratio=1.5, variant="no_feature_mixer")
        for seed in range(5):
            model = MLP4Rec(cfg, feats, seed=seed)
            perturb(model, np.random.default_rng(seed))
            items = random_items(np.random.default_rng(seed + 10), 25, (4, 6))
            h = model.forward(items).data
            w = {k: v.data for k, v in model.params.items()}
            for row in range(4):
                ref = ref_mixer(w["emb.item_id"][items[row]], w, cfg.n_layers)
                assert np.array_equal(h[row], ref)

    def test_no_feature_mixer_equals_full_with_zero_feature_mlp(self):
        feats = make_features(20)
        full = MLP4Rec(small_config(), feats, seed=0)
        perturb(full, np.random.default_rng(0))
        full.params["feat.w2"].data[...] = 0
        full.params["feat.b2"].data[...] = 0
        ablated_params = {k: v for k, v in full.params.items() if not k.startswith("feat.")}
        ablated = MLP4Rec(small_config(variant="no_feature_mixer"), feats, params=ablated_params)
        items = random_items(np.random.default_rng(1), 20, (3, 5))
        np.testing.assert_array_equal(full.forward(items).data, ablated.forward(items).data)

    def test_mlp_mixer_plus_width(self):
        feats = make_features(20, ("token", "float"))
        model = make_variant(small_config(variant="mlp_mixer_plus"), feats)
        assert model.params["chan.w1"].shape == (1, 48, 24)
        assert model.params["chan.ln.gain"].shape == (1, 1, 24)
        x = model.embed(random_items(np.random.default_rng(0), 20, (2, 5)))
        assert x.shape == (2, 1, 5, 24)
        assert model.forward(np.zeros((2, 5), dtype=int)).shape == (2, 5, 8)

    def test_mlp_mixer_plus_uses_first_channels(self):
        feats = make_features(20, ("token",))
        model = make_variant(small_config(variant="mlp_mixer_plus"), feats, zero_residual=True)
        items = random_items(np.random.default_rng(0), 20, (2, 5))
        np.testing.assert_array_equal(model.forward(items).data, model.params["emb.item_id"].data[items])

    def test_linear_feature_mixer(self):
        feats = make_features(20, ("token",))
        model = make_variant(small_config(variant="linear_feature_mixer", n_layers=1), feats, seed=0)
        assert "feat.ln.gain" not in model.params and model.params["feat.lin.w"].shape == (2, 2)
        for n in ("seq.w2", "seq.b2", "chan.w2", "chan.b2"):
            model.params[n].data[...] = 0
        model.params["feat.lin.w"].data[...] = [[0.5, 2.0], [1.0, -1.0]]
        model.params["feat.lin.b"].data[...] = [0.25, 0.0]
        items = random_items(np.random.default_rng(0), 20, (2, 5))
        x = model.embed(items).data
        np.testing.assert_allclose(model.forward(items).data, 0.5 * x[:, 0] + 2.0 * x[:, 1] + 0.25, atol=1e-15)

    def test_simple_final_mix_only_last_layer(self):
        feats = make_features(20, ("token",))
        simple = make_variant(small_config(variant="simple_final_mix", n_layers=3), feats, seed=0)
        perturb(simple, np.random.default_rng(0))
        items = random_items(np.random.default_rng(1), 20, (2, 5))
        x = simple.embed(items)
        w, eps = simple.params, simple.config.ln_eps
        for depth in range(3):
            x = channel_mix(sequence_mix(x, w, eps=eps), w, eps=eps)
            if depth == 2:
                x = feature_mix(x, w, eps=eps)
        np.testing.assert_array_equal(simple.forward(items).data, x.data[:, 0])

    def test_pop_rec_ranks_most_frequent_first(self, small_synth):
        model = make_variant(small_config(variant="pop_rec"), small_synth.features).fit(small_synth)
        freq = small_synth.item_frequency()
        cands = np.array([[3, 10, 40, 77]])
        scores = model.score_candidates(None, cands)
        assert cands[0, np.argmax(scores[0])] == cands[0, np.argmax(freq[cands[0]])]
        assert model.count_params()["total"] == 0

    def test_pop_rec_rejected_by_network_class(self):
        with pytest.raises(ConfigError):
            MLP4Rec(small_config(variant="pop_rec"), make_features(5))


class TestCountParams:
    def test_hand_computed_example(self):
        feats = make_features(10, ("token",))
        feats.encoded[0].vocab = type(feats.encoded[0].vocab)([f"v{j}" for j in range(5)])
        cfg = ModelConfig(max_len=4, embed_dim=3, seq_hidden=8, channel_hidden=6, feature_hidden=4)
        report = count_params(cfg, layout_of(feats))
        # mixers 152 + 90 + 22, layernorm 5 * 6, embeddings 11 * 3 + 6 * 3
        assert (report["mixers"], report["layernorm"], report["embeddings"]) == (264, 30, 51)
        assert report["total"] == 345 == enumerate_params(cfg, layout_of(feats))
        model = MLP4Rec(cfg, feats)
        assert model.num_parameters() == 345

    @settings(max_examples=50, deadline=None)
    @given(
        s=st.integers(1, 12),
        c=st.integers(1, 12),
        ratio=st.floats(0.1, 4.0),
        kinds=st.lists(st.sampled_from(["token", "token_sequence", "float"]), max_size=4),
        layers=st.integers(1, 6),
        variant=st.sampled_from(VARIANTS),
    )
    def test_matches_enumeration(self, s, c, ratio, kinds, layers, variant):
        feats = make_features(12, tuple(kinds))
        cfg = ModelConfig(max_len=s, embed_dim=c, n_layers=layers, hidden_ratio=ratio, variant=variant)
        layout = layout_of(feats)
        report = count_params(cfg, layout)
        assert report["total"] == enumerate_params(cfg, layout)
        assert count_params(replace(cfg, n_layers=layers + 3), layout) == report
        if variant != "pop_rec":
            assert make_variant(cfg, feats).num_parameters() == report["total"]

    def test_complexity_note(self):
        note = space_complexity_note(ModelConfig(max_len=50, embed_dim=128), 3)
        assert "O(K(s + C + 1))" in note and "537" in note


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        feats = make_features(20, ("token_sequence", "float"))
        model = MLP4Rec(small_config(variant="simple_final_mix"), feats, seed=3)
        path = tmp_path / "m.mxrd"
        save_checkpoint(path, model, {"note": "x"})
        loaded, meta = load_checkpoint(path, feats)
        assert meta["note"] == "x" and loaded.config == model.config
        items = random_items(np.random.default_rng(0), 20, (2, 5))
        cands = np.arange(1, 9).reshape(2, 4)
        np.testing.assert_array_equal(loaded.score_candidates(items, cands), model.score_candidates(items, cands))

    def test_pop_rec_round_trip(self, tmp_path, small_synth):
        model = PopRec(small_config(), small_synth.features).fit(small_synth)
        save_checkpoint(tmp_path / "p.mxrd", model)
        loaded, _ = load_checkpoint(tmp_path / "p.mxrd", small_synth.features)
        np.testing.assert_array_equal(loaded.frequency, model.frequency)

    def test_shape_mismatch_fails_closed(self, tmp_path):
        feats = make_features(20)
        model = MLP4Rec(small_config(), feats)
        model.params["seq.w1"] = Tensor(np.zeros((1, 3, 5)))
        save_checkpoint(tmp_path / "bad.mxrd", model)
        with pytest.raises(CheckpointError, match="seq.w1"):
            load_checkpoint(tmp_path / "bad.mxrd", feats)

    def test_missing_tensor_fails_closed(self, tmp_path):
        feats = make_features(20)
        model = MLP4Rec(small_config(), feats)
        del model.params["feat.b2"]
        save_checkpoint(tmp_path / "bad.mxrd", model)
        with pytest.raises(CheckpointError, match="feat.b2"):
            load_checkpoint(tmp_path / "bad.mxrd", feats)

    def test_layout_mismatch(self, tmp_path):
        model = MLP4Rec(small_config(), make_features(20))
        save_checkpoint(tmp_path / "m.mxrd", model)
        with pytest.raises(CheckpointError, match="layout"):
            load_checkpoint(tmp_path / "m.mxrd", make_features(21))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"nope")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, make_features(5))
