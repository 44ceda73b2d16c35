"""Encoder, decoder and input preparation."""

import math
import warnings

import numpy as np
import pytest

import oracles
from conftest import T0, checkins, random_model
from poiaug import autodiff as ad
from poiaug.data import FeatureStats, build_vocabulary, grid_align
from poiaug.decoder import (DecoderState, attention_window, decode_step, distribution, impute_sequence,
                            initial_state, local_attention, run_seq2seq)
from poiaug.encoder import encode_sequence
from poiaug.errors import ContractViolation, ShapeError
from poiaug.model import NO_ZONEOUT, ModelConfig, Seq2SeqModel, Zoneout, embed_sequence, embed_step, prepare_inputs
from poiaug.numerics import ParameterStore


def as_lists(store, prefix):
    return [store[f"{prefix}.{k}"].tolist() for k in "WUb"]


class TestInputs:
    def test_embed_step_layout(self):
        model = random_model(vocab_size=6)
        x = embed_step(None, model, 6, [0.25, -1.5])
        assert x.value.shape == (32,)
        np.testing.assert_array_equal(x.value[:16], model.store["embedding"][6])
        np.testing.assert_array_equal(x.value[16:24], 0.25)
        np.testing.assert_array_equal(x.value[24:], -1.5)

    def test_zero_embeddings_pass_features(self):
        model = random_model(vocab_size=6)
        model.store["embedding"][...] = 0.0
        x = embed_step(None, model, 2, [1.0, 2.0])
        np.testing.assert_array_equal(x.value[:16], 0.0)

    def test_token_out_of_vocabulary(self):
        model = random_model(vocab_size=6)
        with pytest.raises(ContractViolation):
            embed_step(None, model, 7, [0.0, 0.0])
        with pytest.raises(ContractViolation):
            embed_sequence(None, model, [0, -1], np.zeros((2, 2)))

    def test_prepare_inputs_masks_and_missing(self):
        cs = checkins("u", [8, 10, 19, 22], pois=["a", "b", "c", "a"])
        seq = grid_align(cs, 3 * 3600)
        vocab = build_vocabulary(cs)
        x = prepare_inputs(seq, vocab, FeatureStats(), mask=[1])
        miss = vocab.missing_token_index
        assert x.tokens.tolist() == [vocab.lookup("a"), miss, miss, miss, vocab.lookup("c"), vocab.lookup("a")]
        assert x.visible.tolist() == [True, False, False, False, True, True]
        assert x.targets[1] == vocab.lookup("b") and x.targets[2] == -1
        with pytest.raises(ContractViolation):
            prepare_inputs(seq, vocab, FeatureStats(), mask=[0])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ModelConfig(vocab_size=5, enc_hidden=8).validate()

    def test_parameter_groups(self):
        model = random_model(vocab_size=5)
        uni, bi, s2s = (set(model.parameter_names(g)) for g in ("uni", "bi", "seq2seq"))
        assert "dec.l1.W" in uni and "lm.uni.out.W" in uni and "enc.fw.W" not in uni
        assert "enc.bw.U" in bi and "dec.l1.W" not in bi
        assert not any(n.startswith("lm.") for n in s2s)
        assert {"embedding"} == uni & bi
        rebuilt = Seq2SeqModel.from_store(model.store.copy())
        assert rebuilt.cfg == model.cfg

    def test_zoneout_masks(self):
        z = Zoneout(0.25, 0.5, "train", np.random.default_rng(0))
        kh, kc = z.masks(400, 32)
        assert set(np.unique(kh)) <= {0.0, 1.0}
        assert abs(kh.mean() - 0.25) < 0.02 and abs(kc.mean() - 0.5) < 0.02
        eh, ec = Zoneout(0.25, 0.5, "eval").masks(3, 4)
        np.testing.assert_array_equal(eh, 0.25)
        assert NO_ZONEOUT.masks(3, 4) == (None, None)


def toy_encoder_model():
    cfg = ModelConfig(vocab_size=3, embed_dim=2, feature_block=0, enc_hidden=1, hidden=2)
    store = ParameterStore()
    gen = iter(np.linspace(-0.9, 0.9, 200) * np.tile([1, -1, 0.5, -0.7], 50))
    for prefix, n_in, hd in (("enc.fw", 2, 1), ("enc.bw", 2, 1), ("enc.l2", 2, 2)):
        for k, shape in (("W", (4 * hd, n_in)), ("U", (4 * hd, hd)), ("b", (4 * hd,))):
            store.add(f"{prefix}.{k}", np.array([next(gen) for _ in range(int(np.prod(shape)))]).reshape(shape))
    return Seq2SeqModel(cfg, store)


class TestEncoder:
    def test_scalar_oracle(self):
        model = toy_encoder_model()
        X = [[0.3, -0.2], [1.1, 0.4], [-0.5, 0.9]]
        ann = encode_sequence(None, model, ad.constant(X))
        params = {k: as_lists(model.store, f"enc.{k}") for k in ("fw", "bw", "l2")}
        h2, c2 = oracles.encoder(params, X)
        np.testing.assert_allclose(ann.states.value, h2, rtol=0, atol=1e-10)
        np.testing.assert_allclose(ann.h_last.value, h2[-1], atol=1e-10)
        np.testing.assert_allclose(ann.c_last.value, c2[-1], atol=1e-10)

    def test_single_step(self):
        model = random_model(vocab_size=4)
        X = ad.constant(np.random.default_rng(1).normal(size=(1, 32)))
        ann = encode_sequence(None, model, X)
        assert len(ann) == 1
        fw = oracles.lstm_run(*as_lists(model.store, "enc.fw"), X.value.tolist())[0][0]
        bw = oracles.lstm_run(*as_lists(model.store, "enc.bw"), X.value.tolist())[0][0]
        np.testing.assert_allclose(ann.h_bilstm.value[0], fw + bw, atol=1e-13)

    def test_zero_layer_two_gives_zero_annotations(self):
        model = random_model(vocab_size=4)
        for k in "WUb":
            model.store[f"enc.l2.{k}"][...] = 0.0
        X = ad.constant(np.random.default_rng(2).normal(size=(5, 32)))
        ann = encode_sequence(None, model, X)
        np.testing.assert_array_equal(ann.states.value, 0.0)
        assert np.isfinite(ann.h_bilstm.value).all()

    def test_reversal_swaps_directions(self):
        model = random_model(vocab_size=4, seed=3)
        swapped = model.store.copy()
        for k in "WUb":
            swapped.values[f"enc.fw.{k}"], swapped.values[f"enc.bw.{k}"] = \
                swapped.values[f"enc.bw.{k}"], swapped.values[f"enc.fw.{k}"]
        X = np.random.default_rng(4).normal(size=(6, 32))
        a = encode_sequence(None, model, ad.constant(X)).h_bilstm.value
        b = encode_sequence(None, Seq2SeqModel(model.cfg, swapped), ad.constant(X[::-1].copy())).h_bilstm.value
        np.testing.assert_array_equal(a[:, :16], b[::-1, 16:])
        np.testing.assert_array_equal(a[:, 16:], b[::-1, :16])

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            encode_sequence(None, random_model(vocab_size=4), ad.constant(np.zeros((3, 30))))


class TestAttentionWindow:
    def test_examples(self):
        w = attention_window(3, 6, [True, True, False, False, True, True])
        assert w.center == 1
        w = attention_window(1, 5, [True] * 5)
        assert (w.center, w.lo, w.hi) == (0, 0, 4)
        w = attention_window(11, 30, [True] * 30)
        assert (w.lo, w.hi, w.size, w.sigma) == (0, 20, 21, 5.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            attention_window(5, 5, [True] * 5)
        with pytest.raises(ContractViolation):
            attention_window(0, 3, [True] * 3)
        with pytest.raises(ContractViolation):
            attention_window(2, 3, [False] * 3)


def attend(Wa, h, A, lo, hi, center, sigma=5.0):
    store = ParameterStore()
    store.add("Wa", Wa)
    return ad.local_attention(None, store, "Wa", ad.constant(h), ad.constant(A), lo, hi, center, sigma)


class TestLocalAttention:
    def test_uniform_scores_give_gaussian(self):
        A = np.random.default_rng(0).normal(size=(25, 4))
        ctx, w = attend(np.zeros((4, 4)), np.ones(4), A, 2, 22, 12)
        s = np.arange(2, 23)
        g = np.exp(-((s - 12) ** 2) / 50.0)
        np.testing.assert_allclose(w, g / g.sum(), rtol=0, atol=1e-12)
        assert w.argmax() == 10
        np.testing.assert_allclose(w[15] / w[10], math.exp(-0.5), rtol=0, atol=1e-12)
        np.testing.assert_allclose(w[5] / w[10], math.exp(-0.5), rtol=0, atol=1e-12)

    def test_window_of_one(self):
        A = np.random.default_rng(1).normal(size=(5, 4))
        ctx, w = attend(np.eye(4), np.ones(4), A, 3, 3, 3)
        np.testing.assert_array_equal(w, [1.0])
        np.testing.assert_array_equal(ctx.value, A[3])

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        Wa, h, A = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=(9, 4))
        ctx, w = attend(Wa, h, A, 1, 7, 3, 2.0)
        want_ctx, want_w = oracles.attention(h.tolist(), A.tolist(), Wa.tolist(), 1, 7, 3, 2.0)
        np.testing.assert_allclose(w, want_w, atol=1e-13)
        np.testing.assert_allclose(ctx.value, want_ctx, atol=1e-13)

    def test_additive_shift_leaves_weights(self):
        rng = np.random.default_rng(3)
        Wa, h, A = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=(9, 4))
        # adding u to every annotation adds the same h^T Wa u to every score
        _, w1 = attend(Wa, h, A, 0, 8, 4)
        _, w2 = attend(Wa, h, A + rng.normal(size=4), 0, 8, 4)
        np.testing.assert_allclose(w1, w2, atol=1e-12)

    def test_wide_window_is_global(self):
        model = random_model(vocab_size=4)
        A = ad.constant(np.random.default_rng(4).normal(size=(6, 32)))
        win = attention_window(3, 6, [True] * 6, half_width=10)
        assert (win.lo, win.hi) == (0, 5)
        _, w = local_attention(None, model, ad.constant(np.ones(32)), A, win)
        assert w.shape == (6,) and abs(w.sum() - 1) < 1e-12


class TestDecoder:
    def test_distribution_never_picks_missing(self):
        logits = np.array([0.1, 0.3, 0.2, 9.0])
        d = distribution(logits, 3)
        assert d.argmax == 1
        assert abs(d.probs.sum() - 1) < 1e-12 and (d.probs > 0).all()

    def test_decode_step_scalar_oracle(self):
        cfg = ModelConfig(vocab_size=3, embed_dim=2, feature_block=1, enc_hidden=2, hidden=4)
        model = Seq2SeqModel.initialize(cfg, seed=5)
        gen = np.random.default_rng(6)
        for v in model.store.values.values():
            v[...] = gen.uniform(-0.7, 0.7, v.shape)
        S = model.store
        ann_states = gen.normal(size=(5, 4))
        h0, c0 = gen.normal(size=4), gen.normal(size=4)
        state = DecoderState(ad.constant(h0), ad.constant(c0), ad.constant(h0), ad.constant(c0))
        win = attention_window(3, 5, [True, True, True, False, True], half_width=2, sigma=1.0)
        feat = [0.4, -0.8]
        dist, _, new = decode_step(None, model, 1, feat, state, ad.constant(ann_states), win)

        x = S["embedding"][1].tolist() + [feat[0], feat[1]]
        h1, c1 = oracles.lstm_step(*as_lists(S, "dec.l1"), x, h0.tolist(), c0.tolist())
        h2, c2 = oracles.lstm_step(*as_lists(S, "dec.l2"), [a + b for a, b in zip(h1, x)], h0.tolist(), c0.tolist())
        ctx, _ = oracles.attention(h2, ann_states.tolist(), S["dec.attn.Wa"].tolist(), win.lo, win.hi, 2, 1.0)
        att = [math.tanh(v) for v in oracles.linear(S["dec.combine.W"].tolist(), S["dec.combine.b"].tolist(), ctx + h2)]
        probs = oracles.softmax(oracles.linear(S["dec.out.W"].tolist(), S["dec.out.b"].tolist(), att))
        np.testing.assert_allclose(new.h2.value, h2, atol=1e-13)
        np.testing.assert_allclose(dist.probs, probs, atol=1e-13)
        assert dist.argmax == int(np.argmax(probs[:3]))

    def test_hidden_slots_feed_predictions(self):
        model = random_model(vocab_size=6, seed=7, scale=0.5)
        cs = checkins("u", [0, 3, 12, 15, 18], pois=["a", "b", "c", "d", "e"])
        seq = grid_align(cs, 3 * 3600)
        vocab = build_vocabulary(cs + checkins("v", [0], pois=["f"]))
        x = prepare_inputs(seq, vocab, FeatureStats(), mask=[3])
        result = run_seq2seq(None, model, x, predict_all=True)
        # replay step by step with the public pieces
        X0 = embed_sequence(None, model, x.tokens, x.feats)
        ann = encode_sequence(None, model, X0)
        state = initial_state(ann)
        prev = int(x.tokens[0])
        for t in range(1, len(x)):
            win = attention_window(t, len(x), x.visible)
            dist, _, state = decode_step(None, model, prev, x.feats[t - 1], state, ann.states, win)
            assert dist.argmax == result.predictions[t]
            prev = int(x.tokens[t]) if x.visible[t] else dist.argmax


class TestImpute:
    def setup_method(self):
        self.cs = checkins("u", [8, 10, 19], pois=["a", "b", "c"], step_km=1.0)
        self.vocab = build_vocabulary(self.cs)
        self.model = random_model(vocab_size=3, seed=8)

    def test_two_slot_gap(self):
        seq = grid_align(self.cs, 3 * 3600)
        out = impute_sequence(seq, self.model, self.vocab, FeatureStats())
        assert [s.timestamp for s in out.slots] == [s.timestamp for s in seq.slots]
        for t in (2, 3):
            assert out.slots[t].imputed and out.slots[t].checkin.poi_id in self.vocab.index
            assert out.slots[t].checkin.timestamp == T0 + (13 if t == 2 else 16) * 3600
            lat, lng = self.vocab.coords[self.vocab.lookup(out.slots[t].checkin.poi_id)]
            assert (out.slots[t].checkin.latitude, out.slots[t].checkin.longitude) == (lat, lng)
        for t in (0, 1, 4):
            assert out.slots[t] is seq.slots[t]
        again = impute_sequence(seq, self.model, self.vocab, FeatureStats())
        assert again == out

    def test_no_missing_is_identity(self):
        seq = grid_align(checkins("u", [0, 3, 6], pois=["a", "b", "c"]), 3 * 3600)
        assert impute_sequence(seq, self.model, self.vocab, FeatureStats()) == seq

    def test_all_zero_model_warns(self):
        for v in self.model.store.values.values():
            v[...] = 0.0
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = impute_sequence(grid_align(self.cs, 3 * 3600), self.model, self.vocab, FeatureStats())
        assert any("untrained" in str(w.message) for w in caught)
        assert all(s.observed for s in out.slots)

    def test_vocabulary_mismatch(self):
        with pytest.raises(ContractViolation):
            impute_sequence(grid_align(self.cs, 3 * 3600), random_model(vocab_size=5), self.vocab, FeatureStats())
