"""Implementations behind the CLI subcommands. Each writes a run manifest
before touching outputs and finalizes it with output hashes on success."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import encoder, gradcheck, harness, shards, synth, train
from .codec import Vocab, build_vocab
from .config import apply_overrides, load_config, section, take_fields
from .datasets import (
    dataset_statistics,
    expand_for_training,
    load_labeled_jsonl,
    load_pdtb,
)
from .errors import ConfigError, DataError
from .extract import ExtractionRules, load_lexicon, run_extraction
from .harness import PipelineData, evaluate
from .runmeta import RunContext
from .train import TrainConfig
from .util import stable_json
from .verbalizer import SCHEMES, Verbalizer, builtin_verbalizer

log = logging.getLogger(__name__)


def _config_from(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    return apply_overrides(cfg, getattr(args, "set", None))


def _encoder_config(cfg: dict, vocab_size: int, seed: int) -> encoder.EncoderConfig:
    fields = take_fields(section(cfg, "encoder"), encoder.EncoderConfig.__dataclass_fields__, "encoder")
    fields.setdefault("seed", seed)
    return encoder.EncoderConfig(vocab_size=vocab_size, **fields)


def _train_config(cfg: dict, phase: str, seed: int) -> TrainConfig:
    base = (
        TrainConfig.pretrain_defaults() if phase == "pretrain" else TrainConfig.tune_defaults()
    )
    fields = take_fields(
        section(cfg, phase), set(TrainConfig.__dataclass_fields__) - {"phase"}, phase
    )
    fields.setdefault("seed", seed)
    return replace(base, **fields)


def _load_verbalizer(spec: str) -> Verbalizer:
    if spec in SCHEMES:
        return builtin_verbalizer(spec)
    return Verbalizer.load(spec)


def _load_labeled(args, split: str):
    """Labeled instances from --data (jsonl) or --pdtb/--level exports."""
    if getattr(args, "pdtb", None):
        labels = _load_verbalizer(args.verbalizer).labels
        splits = load_pdtb(args.pdtb, args.level, labels)
        return splits[split]
    if not args.data:
        raise ConfigError("provide --data <jsonl> or --pdtb <csv>")
    return load_labeled_jsonl(args.data)


def cmd_extract(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("extract", sys.argv[1:], args.out, cfg, args.seed)
    try:
        lexicon = load_lexicon(args.lexicon)
        ctx.add_input(args.lexicon)
        ctx.add_input(args.corpus)
        fields = take_fields(
            section(cfg, "extract"),
            {"min_arg_tokens", "max_arg_tokens", "per_connective_cap", "shard_size"},
            "extract",
        )
        shard_size = fields.pop("shard_size", 10000)
        rules = ExtractionRules(**fields)
        report = run_extraction(
            args.corpus, lexicon, rules, Path(args.out) / "shards",
            seed=args.seed, threads=args.threads, shard_size=shard_size,
        )
        with open(Path(args.out) / "extraction_report.json", "w", encoding="utf-8") as fh:
            fh.write(stable_json(report.to_json()) + "\n")
        print(
            f"extracted {report.instances_emitted} instances "
            f"from {report.documents_seen} documents"
        )
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_synth(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("synth", sys.argv[1:], args.out, cfg, args.seed)
    try:
        fields = take_fields(section(cfg, "synth"), synth.SynthSpec.__dataclass_fields__, "synth")
        fields.setdefault("seed", args.seed)
        spec = synth.SynthSpec(**fields)
        gt = synth.generate(spec, args.out)
        print(
            f"generated {gt['explicit_records']} explicit / "
            f"{spec.implicit_train_n}+{spec.implicit_test_n} implicit instances "
            f"({spec.cue_placement})"
        )
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_vocab(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("vocab", sys.argv[1:], args.out, cfg, args.seed)
    try:
        ctx.add_input(args.data)
        texts = []
        forced = set()
        for rec in shards.read_shards(args.data):
            texts.append(rec["arg1"])
            texts.append(rec["arg2"])
            forced.add(rec["conn"])
        if args.lexicon:
            ctx.add_input(args.lexicon)
            forced.update(load_lexicon(args.lexicon).canonical_tokens)
        vocab = build_vocab(texts, min_freq=args.min_freq, max_size=args.max_size,
                            forced=sorted(forced))
        vocab.save(Path(args.out) / "vocab.tsv")
        print(f"vocabulary of {len(vocab)} tokens ({len(forced)} forced)")
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_pretrain(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("pretrain", sys.argv[1:], args.out, cfg, args.seed)
    try:
        ctx.add_input(args.data)
        ctx.add_input(args.vocab)
        vocab = Vocab.load(args.vocab)
        tcfg = _train_config(cfg, "pretrain", args.seed)
        enc_cfg = _encoder_config(cfg, len(vocab), args.seed)
        records = list(shards.read_shards(args.data, limit=args.limit))
        insts = train.encode_pretrain_records(records, vocab, enc_cfg.max_len)
        res = train.pretrain(insts, len(vocab), enc_cfg, tcfg, args.out, resume=args.resume)
        print(
            f"pretrained {tcfg.epochs} epochs on {len(insts)} instances; "
            f"best valid loss {res.best_metric:.4f} -> {res.best_path.name}"
        )
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_tune(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("tune", sys.argv[1:], args.out, cfg, args.seed)
    try:
        vocab = Vocab.load(args.vocab)
        ctx.add_input(args.vocab)
        verb = _load_verbalizer(args.verbalizer)
        vindex = verb.to_index(vocab)
        tcfg = _train_config(cfg, "tune", args.seed)
        if args.ckpt:
            ctx.add_input(args.ckpt)
            enc_cfg, init_enc = train.load_encoder_from_checkpoint(args.ckpt)
        else:
            log.warning("no --ckpt given: tuning from random initialization")
            enc_cfg = _encoder_config(cfg, len(vocab), args.seed)
            init_enc = None
        if getattr(args, "pdtb", None):
            splits = load_pdtb(args.pdtb, args.level, verb.labels)
            train_rows = expand_for_training(splits["train"])
            valid_rows = expand_for_training(splits["valid"])
        else:
            ctx.add_input(args.data)
            train_rows = expand_for_training(load_labeled_jsonl(args.data))
            valid_rows = (
                expand_for_training(load_labeled_jsonl(args.valid)) if args.valid else None
            )
        insts = train.encode_tune_rows(train_rows, vocab, enc_cfg.max_len, vindex.labels)
        valid_insts = (
            train.encode_tune_rows(valid_rows, vocab, enc_cfg.max_len, vindex.labels)
            if valid_rows
            else None
        )
        res = train.tune(insts, vindex, enc_cfg, tcfg, args.out,
                         init_encoder=init_enc, valid_instances=valid_insts)
        print(
            f"tuned {tcfg.epochs} epochs on {len(insts)} rows; "
            f"best valid accuracy {res.best_metric:.4f} -> {res.best_path.name}"
        )
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("eval", sys.argv[1:], args.out, cfg, args.seed)
    try:
        vocab = Vocab.load(args.vocab)
        ctx.add_input(args.vocab)
        ctx.add_input(args.ckpt)
        verb = _load_verbalizer(args.verbalizer)
        vindex = verb.to_index(vocab)
        enc_cfg, enc_params = train.load_encoder_from_checkpoint(args.ckpt)
        instances = _load_labeled(args, args.split)
        report, preds = evaluate(enc_cfg, enc_params, instances, vindex, vocab,
                                 batch_size=args.batch_size)
        out = Path(args.out)
        with open(out / "eval_report.json", "w", encoding="utf-8") as fh:
            fh.write(stable_json(report.to_json()) + "\n")
        (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
        with open(out / "predictions.txt", "w", encoding="utf-8") as fh:
            fh.writelines(p + "\n" for p in preds)
        print(f"accuracy {report.accuracy:.4f}  macro_f1 {report.macro_f1:.4f}  "
              f"n={report.n_instances}")
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def _pipeline_inputs(args, cfg):
    data = PipelineData.from_synth_dir(args.data_dir)
    vocab = harness.build_pipeline_vocab(data)
    enc_cfg = _encoder_config(cfg, len(vocab), args.seed)
    pre_cfg = _train_config(cfg, "pretrain", args.seed)
    tune_cfg = _train_config(cfg, "tune", args.seed)
    return data, vocab, enc_cfg, pre_cfg, tune_cfg


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("ablate", sys.argv[1:], args.out, cfg, args.seed)
    try:
        ctx.add_input(args.data_dir)
        data, vocab, enc_cfg, pre_cfg, tune_cfg = _pipeline_inputs(args, cfg)
        variants = args.variants.split(",") if args.variants else ["full", "-GLSL"]
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
        rows = harness.ablation_harness(
            data, vocab, enc_cfg, pre_cfg, tune_cfg, args.out,
            variants=variants, seeds=seeds,
        )
        for agg in harness.aggregate_by(rows, "variant"):
            print(
                f"{agg['variant']:14s} acc {agg['accuracy_mean']:.4f}±{agg['accuracy_std']:.4f} "
                f"f1 {agg['macro_f1_mean']:.4f}±{agg['macro_f1_std']:.4f} (n={agg['n']})"
            )
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_fewshot(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("fewshot", sys.argv[1:], args.out, cfg, args.seed)
    try:
        ctx.add_input(args.data_dir)
        data, vocab, enc_cfg, pre_cfg, tune_cfg = _pipeline_inputs(args, cfg)
        fractions = [float(f) for f in args.fractions.split(",")]
        rows = harness.few_shot_harness(
            data, vocab, enc_cfg, pre_cfg, tune_cfg, args.out, fractions=fractions
        )
        for row in rows:
            print(
                f"{row['condition']:12s} frac {row['fraction']:.2f} "
                f"acc {row['accuracy']:.4f} f1 {row['macro_f1']:.4f}"
            )
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_datascale(args) -> int:
    cfg = _config_from(args)
    ctx = RunContext("datascale", sys.argv[1:], args.out, cfg, args.seed)
    try:
        ctx.add_input(args.data_dir)
        data, vocab, enc_cfg, pre_cfg, tune_cfg = _pipeline_inputs(args, cfg)
        scales = [int(s) for s in args.scales.split(",")]
        rows = harness.data_scale_harness(
            data, vocab, enc_cfg, pre_cfg, tune_cfg, args.out, scales=scales
        )
        for row in rows:
            print(f"scale {row['scale']:>8d} acc {row['accuracy']:.4f} f1 {row['macro_f1']:.4f}")
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def cmd_gradcheck(args) -> int:
    modules = gradcheck.GRADCHECK_MODULES if args.module == "all" else (args.module,)
    results = gradcheck.run_suite(modules)
    ok = True
    for name, err in results.items():
        status = "PASS" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"{name:14s} max_rel_err {err:.3e}  {status}")
    if args.out:
        ctx = RunContext("gradcheck", sys.argv[1:], args.out, {}, args.seed)
        with open(Path(args.out) / "gradcheck.json", "w", encoding="utf-8") as fh:
            fh.write(stable_json({k: float(v) for k, v in results.items()}) + "\n")
        ctx.finalize("ok" if ok else "failed")
    return 0 if ok else 2


def cmd_report(args) -> int:
    ctx = RunContext("report", sys.argv[1:], args.out, {}, args.seed)
    try:
        out = Path(args.out)
        if args.pdtb:
            verb = _load_verbalizer(args.verbalizer)
            splits = load_pdtb(args.pdtb, args.level, verb.labels)
            stats = dataset_statistics(splits, verb.labels)
            with open(out / "dataset_stats.json", "w", encoding="utf-8") as fh:
                fh.write(stable_json(stats) + "\n")
            print(f"{'split':8s} {'total':>7s}  per-class")
            for split in ("train", "valid", "test"):
                s = stats["splits"][split]
                per = " ".join(f"{k.split('.')[0][:4]}={v}" for k, v in s["per_class"].items())
                print(f"{split:8s} {s['total']:>7d}  {per}")
        for csv_path in args.csv or ():
            ctx.add_input(csv_path)
            rows = harness.read_rows_csv(csv_path)
            stem = Path(csv_path).stem
            (out / f"{stem}.md").write_text(harness.rows_to_markdown(rows), encoding="utf-8")
            numeric = [
                k for k in rows[0]
                if k not in ("variant", "condition") and _is_number(rows[0][k])
            ]
            if len(numeric) >= 2:
                group = "condition" if "condition" in rows[0] else (
                    "variant" if "variant" in rows[0] else None
                )
                harness.plot_curves(
                    out / f"{stem}.svg", rows, x=numeric[0],
                    ys=[n for n in numeric[1:] if n not in ("seed", "n_train")],
                    group=group, title=stem,
                )
            print(f"rendered {stem}.md" + (f" and {stem}.svg" if len(numeric) >= 2 else ""))
        ctx.finalize("ok")
        return 0
    except BaseException:
        ctx.finalize("failed")
        raise


def _is_number(s) -> bool:
    try:
        float(s)
        return True
    except (TypeError, ValueError):
        return False
