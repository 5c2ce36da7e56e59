import numpy as np
import pytest

from discorel import encoder, kernels
from discorel.encoder import EncoderConfig, init_params, param_count
from discorel.errors import ConfigError, DataError


def toy_cfg(**kw):
    base = dict(vocab_size=30, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=16, seed=3)
    base.update(kw)
    return EncoderConfig(**base)


def rand_batch(cfg, b=3, l=10, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab_size, size=(b, l))
    attn = np.ones((b, l))
    attn[1, l - 3 :] = 0.0
    ids[1, l - 3 :] = 0
    return ids, attn


class TestInit:
    def test_same_seed_bit_identical(self):
        cfg = toy_cfg()
        a, b = init_params(cfg), init_params(cfg)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_divisibility_invariant(self):
        with pytest.raises(ConfigError):
            EncoderConfig(vocab_size=30, d_model=130, n_heads=4)

    def test_param_count_closed_form(self):
        # independent hand count for d=128, L=4, h=4, ff=512, V=8000, len=64:
        #   embeddings: 8000*128 + 64*128
        #   per layer:  2*(2*128) + 4*(128*128+128) + (128*512+512) + (512*128+128)
        #   final norm: 2*128 ; tied-head bias: 8000
        d, L, ff, V, mlen = 128, 4, 512, 8000, 64
        per_layer = 2 * (2 * d) + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d)
        expected = V * d + mlen * d + L * per_layer + 2 * d + V
        assert expected == 1_833_536
        cfg = EncoderConfig(vocab_size=V, d_model=d, n_layers=L, n_heads=4, d_ff=ff, max_len=mlen)
        assert param_count(cfg) == expected
        params = init_params(cfg)
        assert sum(v.size for v in params.values()) == expected

    def test_weights_scaled_biases_zero_gains_one(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        assert abs(float(p["tok_emb"].std()) - 0.02) < 0.005
        assert not p["layers.0.attn.bq"].any()
        assert (p["layers.0.ln1.g"] == 1).all()


class TestForward:
    def test_eval_deterministic(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        ids, attn = rand_batch(cfg)
        h1, _ = encoder.forward(p, cfg, ids, attn)
        h2, _ = encoder.forward(p, cfg, ids, attn)
        assert np.array_equal(h1, h2)

    def test_attention_rows_sum_to_one(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        ids, attn = rand_batch(cfg)
        _, cache = encoder.forward(p, cfg, ids, attn)
        for lc in cache.layers:
            sums = lc.probs.sum(axis=-1)
            assert np.allclose(sums, 1.0, atol=1e-6)
            # padded keys carry zero weight
            pad = attn == 0.0
            assert lc.probs[1, :, :, pad[1]].max() == 0.0

    def test_pad_tail_extension_no_effect(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        rng = np.random.default_rng(1)
        ids = rng.integers(0, cfg.vocab_size, size=(2, 8))
        attn = np.ones((2, 8))
        h_short, _ = encoder.forward(p, cfg, ids, attn)
        ids_long = np.concatenate([ids, np.zeros((2, 4), dtype=np.int64)], axis=1)
        attn_long = np.concatenate([attn, np.zeros((2, 4))], axis=1)
        h_long, _ = encoder.forward(p, cfg, ids_long, attn_long)
        assert np.allclose(h_short, h_long[:, :8], atol=1e-6)

    def test_positional_permutation_equivariance(self):
        cfg = toy_cfg(dropout_p=0.0)
        p = init_params(cfg, dtype=np.float64)
        rng = np.random.default_rng(2)
        l = 9
        ids = rng.integers(0, cfg.vocab_size, size=(2, l))
        attn = np.ones((2, l))
        perm = rng.permutation(l)
        p2 = {k: v.copy() for k, v in p.items()}
        p2["pos_emb"][:l] = p["pos_emb"][perm]
        h1, _ = encoder.forward(p, cfg, ids, attn)
        h2, _ = encoder.forward(p2, cfg, ids[:, perm], attn)
        assert np.allclose(h1[:, perm], h2, atol=1e-9)

    def test_id_out_of_range_errors(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        ids = np.full((1, 5), cfg.vocab_size)
        with pytest.raises(DataError):
            encoder.forward(p, cfg, ids, np.ones((1, 5)))

    def test_too_long_errors(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        ids = np.zeros((1, cfg.max_len + 1), dtype=np.int64)
        with pytest.raises(DataError):
            encoder.forward(p, cfg, ids, np.ones((1, cfg.max_len + 1)))

    def test_no_nonfinite_over_many_random_batches(self):
        cfg = toy_cfg(d_model=8, n_layers=1, n_heads=2, d_ff=16)
        p = init_params(cfg)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            l = int(rng.integers(6, cfg.max_len + 1))
            ids = rng.integers(0, cfg.vocab_size, size=(2, l))
            attn = np.ones((2, l))
            cut = int(rng.integers(5, l + 1))
            attn[0, cut:] = 0.0
            h, _ = encoder.forward(p, cfg, ids, attn)
            assert np.isfinite(h).all()

    def test_dropout_train_vs_eval(self):
        cfg = toy_cfg(dropout_p=0.3)
        p = init_params(cfg)
        ids, attn = rand_batch(cfg)
        h_eval, _ = encoder.forward(p, cfg, ids, attn, train=False)
        h_tr1, _ = encoder.forward(p, cfg, ids, attn, train=True, rng=np.random.default_rng(5))
        h_tr2, _ = encoder.forward(p, cfg, ids, attn, train=True, rng=np.random.default_rng(5))
        assert np.array_equal(h_tr1, h_tr2)
        assert not np.allclose(h_eval, h_tr1)


class TestLayerNormInvariant:
    def test_normalized_stats(self):
        rng = np.random.default_rng(0)
        x = rng.normal(2.0, 3.0, size=(32, 24))
        _, xhat, _ = kernels.layer_norm_fwd(x, np.ones(24), np.zeros(24), 1e-5)
        assert np.abs(xhat.mean(axis=1)).max() < 1e-5
        assert np.abs(xhat.var(axis=1) - 1.0).max() < 1e-3


class TestMlmHead:
    def test_softmax_rows_sum_to_one(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        ids, attn = rand_batch(cfg)
        h, _ = encoder.forward(p, cfg, ids, attn)
        logits = encoder.mlm_logits(p, h[:, 2])
        probs = kernels.softmax_fwd(logits)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_params_uniform(self):
        cfg = toy_cfg()
        p = init_params(cfg)
        p["tok_emb"][:] = 0.0
        p["mlm_bias"][:] = 0.0
        logits = encoder.mlm_logits(p, np.ones((4, cfg.d_model)))
        probs = kernels.softmax_fwd(logits)
        assert np.allclose(probs, 1.0 / cfg.vocab_size, atol=1e-9)

    def test_tied_weight_perturbation_probe(self):
        # finite-difference: nudging embedding row t moves logit channel t
        # at every position, leaving other channels untouched (fixed H)
        cfg = toy_cfg()
        p = init_params(cfg, dtype=np.float64)
        rng = np.random.default_rng(3)
        h = rng.normal(size=(5, cfg.d_model))
        base = encoder.mlm_logits(p, h)
        t = 11
        p2 = {k: v.copy() for k, v in p.items()}
        p2["tok_emb"][t] += 1e-4 * rng.normal(size=cfg.d_model)
        moved = encoder.mlm_logits(p2, h)
        delta = np.abs(moved - base)
        assert (delta[:, t] > 0).all()
        mask = np.ones(cfg.vocab_size, dtype=bool)
        mask[t] = False
        assert delta[:, mask].max() == 0.0


class TestGradcheck:
    def test_suite_all_under_threshold(self):
        from discorel.gradcheck import run_suite

        res = run_suite()
        assert set(res) == {"encoder", "mhca", "discriminator", "losses"}
        for module, err in res.items():
            assert err < 1e-4, f"{module}: {err}"

    def test_quadratic_probe_closed_form(self):
        from discorel.gradcheck import grad_check

        def loss_fn(p):
            loss = sum(float((v * v).sum()) for v in p.values())
            return loss, {k: 2.0 * v for k, v in p.items()}

        params = {"theta": np.random.default_rng(0).normal(size=(7, 5))}
        assert grad_check(loss_fn, params, eps=1e-3) < 1e-8

    def test_mutation_detected(self, monkeypatch):
        # corrupt one backward component; the harness must flag it
        from discorel import gradcheck as gc

        orig = kernels.gelu_bwd
        monkeypatch.setattr(kernels, "gelu_bwd", lambda x, dy: 1.05 * orig(x, dy))
        res = gc.run_suite(modules=("encoder",))
        assert res["encoder"] > 1e-2
