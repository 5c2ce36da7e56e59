import json
import math

import numpy as np
import pytest

from discorel import checkpoint, encoder, train
from discorel.codec import Vocab, build_vocab
from discorel.encoder import EncoderConfig
from discorel.errors import ConfigError, DivergenceError
from discorel.losses import VerbalizerIndex
from discorel.optim import AdamW, clip_global_norm, lr_at
from discorel.train import (
    TrainConfig,
    assemble_pretrain_batch,
    encode_pretrain_records,
    encode_tune_rows,
    pretrain,
    pretrain_batch_loss,
    tune,
)

WORDS = [f"w{i}" for i in range(40)]
CONNS = ["because", "however", "meanwhile", "instead"]


def make_vocab():
    return Vocab(WORDS + CONNS)


def fake_records(n=80, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        conn = CONNS[int(rng.integers(len(CONNS)))]
        a1 = " ".join(rng.choice(WORDS, size=int(rng.integers(3, 7))))
        a2 = " ".join(rng.choice(WORDS, size=int(rng.integers(3, 7))))
        recs.append({"arg1": a1, "arg2": a2, "conn": conn})
    return recs


def toy_enc_cfg(vocab, **kw):
    base = dict(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2,
                d_ff=32, max_len=24, seed=1)
    base.update(kw)
    return EncoderConfig(**base)


def toy_tcfg(**kw):
    base = dict(phase="pretrain", batch_size=8, learning_rate=1e-3, epochs=2,
                warmup_ratio=0.1, seed=5, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_warmup_peak_position(self):
        # warmup_ratio 0.1 over 1000 steps peaks exactly at step 100
        lrs = [lr_at(s, 1000, 0.1, 1.0) for s in range(1, 1001)]
        assert lrs.index(max(lrs)) + 1 == 100
        assert lrs[99] == pytest.approx(1.0)
        assert lrs[98] < 1.0
        assert lrs[-1] == pytest.approx(0.0)

    def test_linear_shape(self):
        assert lr_at(50, 1000, 0.1, 2.0) == pytest.approx(1.0)
        assert lr_at(550, 1000, 0.1, 2.0) == pytest.approx(1.0)

    def test_clip(self):
        grads = {"a": np.full(4, 3.0), "b": np.full(9, 4.0)}
        norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(math.sqrt(4 * 9 + 9 * 16))
        total = sum(float((g * g).sum()) for g in grads.values())
        assert math.sqrt(total) == pytest.approx(1.0, rel=1e-6)

    def test_adamw_minimizes_quadratic(self):
        params = {"x": np.array([5.0, -3.0])}
        opt = AdamW(params, weight_decay=0.0)
        for _ in range(400):
            opt.step(params, {"x": 2 * params["x"]}, lr=0.05)
        assert np.abs(params["x"]).max() < 1e-3


class TestConfig:
    def test_invalid_warmup(self):
        with pytest.raises(ConfigError):
            TrainConfig(phase="pretrain", warmup_ratio=1.0)

    def test_mtl_requires_glsl_off(self):
        with pytest.raises(ConfigError):
            TrainConfig(phase="pretrain", mtl_variant="cls", glsl=True)
        TrainConfig(phase="pretrain", mtl_variant="mean", glsl=False)

    def test_paper_defaults(self):
        pt = TrainConfig.pretrain_defaults()
        assert (pt.batch_size, pt.learning_rate, pt.epochs, pt.warmup_ratio) == (64, 5e-6, 2, 0.1)
        tu = TrainConfig.tune_defaults()
        assert (tu.batch_size, tu.learning_rate, tu.epochs) == (64, 1e-5, 10)


class TestLossAssembly:
    def _setup(self, **tkw):
        vocab = make_vocab()
        enc_cfg = toy_enc_cfg(vocab)
        tcfg = toy_tcfg(**tkw)
        insts = encode_pretrain_records(fake_records(12), vocab, enc_cfg.max_len)
        model = train.init_model(enc_cfg, tcfg)
        batch = assemble_pretrain_batch(insts, range(6), tcfg, len(vocab),
                                        np.random.default_rng(3))
        return model, enc_cfg, tcfg, batch

    def test_cm_only_total_equals_cm(self):
        model, enc_cfg, tcfg, batch = self._setup(mlm=False, glsl=False)
        terms, _ = pretrain_batch_loss(model, enc_cfg, tcfg, batch, np.random.default_rng(0))
        assert set(terms) == {"cm", "total"}
        assert terms["total"] == pytest.approx(terms["cm"], abs=1e-12)

    def test_all_terms_sum(self):
        model, enc_cfg, tcfg, batch = self._setup()
        terms, _ = pretrain_batch_loss(model, enc_cfg, tcfg, batch, np.random.default_rng(0))
        assert terms["total"] == pytest.approx(
            terms["cm"] + terms["mlm"] + terms["glsl"], abs=1e-12
        )
        assert all(v >= 0 for k, v in terms.items())

    def test_terms_match_standalone_heads(self):
        from discorel import logic_mi, losses

        model, enc_cfg, tcfg, batch = self._setup()
        rng = np.random.default_rng(0)
        terms, _ = pretrain_batch_loss(model, enc_cfg, tcfg, batch, rng)
        H, _ = encoder.forward(model["enc"], enc_cfg, batch.ids, batch.attn)
        rows = np.arange(batch.size)
        cm_logits = encoder.mlm_logits(model["enc"], H[rows, batch.cmask_pos])
        want_cm, _ = losses.cm_loss(cm_logits, batch.cm_targets)
        assert terms["cm"] == pytest.approx(want_cm, abs=1e-9)
        mlm_logits = encoder.mlm_logits(model["enc"], H[batch.mlm_inst, batch.mlm_pos])
        want_mlm, _, _ = losses.mlm_loss(mlm_logits, batch.mlm_tgt, batch.mlm_inst, batch.size)
        assert terms["mlm"] == pytest.approx(want_mlm, abs=1e-9)
        want_glsl = logic_mi.glsl_loss(
            model["mi"], tcfg.mhca_heads, H, batch.cmask_pos,
            batch.arg1_spans, batch.arg2_spans, np.random.default_rng(0),
        )
        assert terms["glsl"] == pytest.approx(want_glsl, abs=1e-9)

    def test_mtl_variants(self):
        for variant in ("cls", "mean"):
            model, enc_cfg, tcfg, batch = self._setup(glsl=False, mtl_variant=variant)
            terms, grads = pretrain_batch_loss(model, enc_cfg, tcfg, batch,
                                               np.random.default_rng(0))
            assert "mtl" in terms and terms["mtl"] > 0
            assert grads["aux"]["w"].any()


def _run_pretrain(tmp_path, name, seed=5, epochs=2, resume=None, checkpoint_every=0):
    vocab = make_vocab()
    enc_cfg = toy_enc_cfg(vocab)
    tcfg = toy_tcfg(seed=seed, epochs=epochs, checkpoint_every=checkpoint_every)
    insts = encode_pretrain_records(fake_records(60), vocab, enc_cfg.max_len)
    return pretrain(insts, len(vocab), enc_cfg, tcfg, tmp_path / name, resume=resume)


class TestPretrainLoop:
    def test_deterministic_loss_curves(self, tmp_path):
        r1 = _run_pretrain(tmp_path, "a")
        r2 = _run_pretrain(tmp_path, "b")
        rows1 = [json.loads(l) for l in open(r1.metrics_path)]
        rows2 = [json.loads(l) for l in open(r2.metrics_path)]
        assert rows1 == rows2
        _, a1 = checkpoint.load_checkpoint(r1.final_path)
        _, a2 = checkpoint.load_checkpoint(r2.final_path)
        assert all(np.array_equal(a1[k], a2[k]) for k in a1)

    def test_checkpoints_byte_identical(self, tmp_path):
        r1 = _run_pretrain(tmp_path, "a")
        r2 = _run_pretrain(tmp_path, "b")
        assert r1.final_path.read_bytes() == r2.final_path.read_bytes()
        assert r1.best_path.read_bytes() == r2.best_path.read_bytes()

    def test_resume_reproduces_suffix(self, tmp_path):
        full = _run_pretrain(tmp_path, "full", epochs=2, checkpoint_every=7)
        mid = tmp_path / "full" / "checkpoint_step7.dckpt"
        assert mid.exists()
        resumed = _run_pretrain(tmp_path, "resumed", epochs=2, resume=mid)
        _, a_full = checkpoint.load_checkpoint(full.final_path)
        _, a_res = checkpoint.load_checkpoint(resumed.final_path)
        model_keys = [k for k in a_full if k.startswith("model.")]
        assert model_keys
        for k in model_keys:
            assert np.array_equal(a_full[k], a_res[k]), k

    def test_divergence_aborts_with_dump(self, tmp_path, monkeypatch):
        real_init = train.init_model

        def poisoned(enc_cfg, tcfg, dtype=np.float32):
            model = real_init(enc_cfg, tcfg, dtype)
            model["enc"]["tok_emb"][0, 0] = np.nan
            return model

        monkeypatch.setattr(train, "init_model", poisoned)
        with pytest.raises(DivergenceError) as exc:
            _run_pretrain(tmp_path, "bad")
        assert exc.value.dump_path is not None and exc.value.dump_path.exists()

    def test_cm_loss_decreases(self, tmp_path):
        vocab = make_vocab()
        enc_cfg = toy_enc_cfg(vocab, d_model=32, d_ff=64)
        tcfg = toy_tcfg(epochs=6, learning_rate=3e-3, glsl=False, mlm=False)
        insts = encode_pretrain_records(fake_records(120), vocab, enc_cfg.max_len)
        res = pretrain(insts, len(vocab), enc_cfg, tcfg, tmp_path / "learn")
        rows = [json.loads(l) for l in open(res.metrics_path) if "cm" in l]
        cms = [r["cm"] for r in rows if "cm" in r]
        assert cms[-1] < cms[0]


class TestTuneLoop:
    def _rows(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        rows = []
        for _ in range(n):
            lab = ["L0", "L1"][int(rng.integers(2))]
            conn = {"L0": "because", "L1": "however"}[lab]
            a1 = " ".join(rng.choice(WORDS[:20], size=4)) + " " + conn
            a2 = conn + " " + " ".join(rng.choice(WORDS[:20], size=4))
            rows.append((a1, a2, lab))
        return rows

    def test_tune_learns_and_is_deterministic(self, tmp_path):
        vocab = make_vocab()
        enc_cfg = toy_enc_cfg(vocab, d_model=32, d_ff=64)
        tcfg = TrainConfig(phase="tune", batch_size=8, learning_rate=3e-3,
                           epochs=6, seed=3, glsl=False, mlm=False)
        vindex = VerbalizerIndex(["L0", "L1"], [[vocab.id("because")], [vocab.id("however")]])
        insts = encode_tune_rows(self._rows(), vocab, enc_cfg.max_len, vindex.labels)
        r1 = tune(insts, vindex, enc_cfg, tcfg, tmp_path / "t1")
        r2 = tune(insts, vindex, enc_cfg, tcfg, tmp_path / "t2")
        assert r1.best_path.read_bytes() == r2.best_path.read_bytes()
        assert r1.best_metric >= 0.75  # the cue word determines the label

    def test_unknown_label_errors(self):
        vocab = make_vocab()
        with pytest.raises(Exception, match="label"):
            encode_tune_rows([("a b c", "d e f", "nope")], vocab, 24, ["L0"])


class TestCheckpointContainer:
    def test_roundtrip(self, tmp_path):
        arrays = {"model.enc.w": np.arange(6, dtype=np.float32).reshape(2, 3),
                  "opt.m.x": np.ones(4)}
        man = {"phase": "pretrain", "step": 3}
        path = tmp_path / "c.dckpt"
        checkpoint.save_checkpoint(path, man, arrays)
        man2, arrays2 = checkpoint.load_checkpoint(path)
        assert man2["phase"] == "pretrain" and man2["step"] == 3
        for k in arrays:
            assert np.array_equal(arrays[k], arrays2[k])

    def test_identical_state_identical_bytes(self, tmp_path):
        arrays = {"a": np.ones((3, 3), dtype=np.float32)}
        checkpoint.save_checkpoint(tmp_path / "x.dckpt", {"step": 1}, arrays)
        checkpoint.save_checkpoint(tmp_path / "y.dckpt", {"step": 1}, arrays)
        assert (tmp_path / "x.dckpt").read_bytes() == (tmp_path / "y.dckpt").read_bytes()

    def test_corruption_detected(self, tmp_path):
        import zipfile

        path = tmp_path / "c.dckpt"
        checkpoint.save_checkpoint(path, {"step": 1}, {"a": np.ones(3)})
        with zipfile.ZipFile(path) as zf:
            man = zf.read("manifest.json")
            blob = bytearray(zf.read("arrays/a.npy"))
        blob[-1] ^= 0xFF
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", man)
            zf.writestr("arrays/a.npy", bytes(blob))
        with pytest.raises(Exception, match="corrupt"):
            checkpoint.load_checkpoint(path)
