"""Experiment orchestration: evaluation, the ablation matrix, few-shot and
data-scale curves, and report rendering (markdown tables, SVG plots)."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import encoder, shards, train
from .codec import Vocab, build_vocab
from .datasets import LabeledInstance, expand_for_training
from .errors import DataError
from .losses import VerbalizerIndex
from .metrics import EvalReport, score
from .train import TrainConfig, assemble_tune_batch, encode_tune_rows, tune_batch_loss
from .verbalizer import Verbalizer, predict

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "full": {},
    "-GLSL": {"glsl": False},
    "-CM": {"cm": False},
    "-MLM": {"mlm": False},
    "-GLSL-CM": {"glsl": False, "cm": False},
    "-GLSL-MLM": {"glsl": False, "mlm": False},
    "-GLSL-CM-MLM": {"glsl": False, "cm": False, "mlm": False},
    "MTL_cls": {"glsl": False, "mtl_variant": "cls"},
    "MTL_mean": {"glsl": False, "mtl_variant": "mean"},
}


# ------------------------------------------------------------------ evaluate

def evaluate(
    enc_cfg: encoder.EncoderConfig,
    enc_params: dict,
    instances: list[LabeledInstance],
    vindex: VerbalizerIndex,
    vocab: Vocab,
    batch_size: int = 64,
) -> tuple[EvalReport, list[str]]:
    """Predict through the mask slot and score against (multi-)gold labels."""
    rows = [(inst.arg1, inst.arg2, inst.gold_labels[0], inst.gold_labels) for inst in instances]
    encoded = encode_tune_rows(rows, vocab, enc_cfg.max_len, vindex.labels)
    model = {"enc": enc_params}
    preds: list[str] = []
    for s in range(0, len(encoded), batch_size):
        idxs = range(s, min(s + batch_size, len(encoded)))
        batch = assemble_tune_batch(encoded, idxs)
        H, _ = encoder.forward(enc_params, enc_cfg, batch.ids, batch.attn, train=False)
        slot_logits = encoder.mlm_logits(
            enc_params, H[np.arange(batch.size), batch.cmask_pos]
        )
        labels, _ = predict(slot_logits, vindex)
        preds.extend(labels)
    golds = [inst.gold_labels for inst in instances]
    del model
    return score(preds, golds, vindex.labels), preds


# ------------------------------------------------------ synthetic pipelines

@dataclass
class PipelineData:
    """Paths produced by `synth` (or assembled from real exports)."""

    explicit_dir: Path
    train_rows: list  # (arg1, arg2, label, gold set) rows for tuning
    test_instances: list[LabeledInstance]
    verbalizer: Verbalizer

    @classmethod
    def from_synth_dir(cls, data_dir) -> "PipelineData":
        from .datasets import load_labeled_jsonl

        data_dir = Path(data_dir)
        train = load_labeled_jsonl(data_dir / "implicit_train.jsonl")
        test = load_labeled_jsonl(data_dir / "implicit_test.jsonl")
        return cls(
            explicit_dir=data_dir / "explicit",
            train_rows=expand_for_training(train),
            test_instances=test,
            verbalizer=Verbalizer.load(data_dir / "verbalizer.tsv"),
        )


def build_pipeline_vocab(data: PipelineData, max_size: int | None = None) -> Vocab:
    texts = []
    for rec in shards.read_shards(data.explicit_dir):
        texts.append(rec["arg1"])
        texts.append(rec["arg2"])
    forced = [w for lab in data.verbalizer.labels for w in data.verbalizer.answer_words[lab]]
    return build_vocab(texts, min_freq=1, max_size=max_size, forced=forced)


def run_pipeline(
    data: PipelineData,
    vocab: Vocab,
    enc_cfg: encoder.EncoderConfig,
    pre_cfg: TrainConfig,
    tune_cfg: TrainConfig,
    out_dir,
    explicit_limit: int | None = None,
    train_rows_override: list | None = None,
) -> EvalReport:
    """Pretrain (unless every objective is switched off), tune, evaluate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vindex = data.verbalizer.to_index(vocab)
    skip_pretrain = not (pre_cfg.cm or pre_cfg.mlm or pre_cfg.glsl or pre_cfg.mtl_variant != "none")
    init_enc = None
    if skip_pretrain:
        log.info("all pre-training objectives disabled: random init straight to tuning")
    else:
        records = list(shards.read_shards(data.explicit_dir, limit=explicit_limit))
        insts = train.encode_pretrain_records(records, vocab, enc_cfg.max_len)
        pre_res = train.pretrain(insts, len(vocab), enc_cfg, pre_cfg, out_dir / "pretrain")
        _, init_enc = train.load_encoder_from_checkpoint(pre_res.best_path)
    rows = train_rows_override if train_rows_override is not None else data.train_rows
    tune_insts = encode_tune_rows(rows, vocab, enc_cfg.max_len, vindex.labels)
    tune_res = train.tune(
        tune_insts, vindex, enc_cfg, tune_cfg, out_dir / "tune", init_encoder=init_enc
    )
    _, best_enc = train.load_encoder_from_checkpoint(tune_res.best_path)
    report, _ = evaluate(enc_cfg, best_enc, data.test_instances, vindex, vocab)
    return report


# -------------------------------------------------------------- ablation

def ablation_harness(
    data: PipelineData,
    vocab: Vocab,
    enc_cfg: encoder.EncoderConfig,
    pre_cfg: TrainConfig,
    tune_cfg: TrainConfig,
    out_dir,
    variants=("full", "-GLSL"),
    seeds=(1,),
) -> list[dict]:
    """One pretrain+tune+eval per (variant, seed) with shared seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unknown = sorted(set(variants) - set(ABLATION_VARIANTS))
    if unknown:
        raise DataError(f"unknown ablation variants {unknown}; pick from {sorted(ABLATION_VARIANTS)}")
    rows = []
    for variant in variants:
        switches = ABLATION_VARIANTS[variant]
        for seed in seeds:
            pcfg = replace(pre_cfg, seed=seed, **switches)
            tcfg = replace(tune_cfg, seed=seed)
            ecfg = replace(enc_cfg, seed=seed)
            run_dir = out_dir / f"{_slug(variant)}_seed{seed}"
            report = run_pipeline(data, vocab, ecfg, pcfg, tcfg, run_dir)
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "accuracy": report.accuracy,
                    "macro_f1": report.macro_f1,
                }
            )
            log.info("ablation %s seed %d: acc=%.4f f1=%.4f",
                     variant, seed, report.accuracy, report.macro_f1)
    write_rows_csv(out_dir / "ablation.csv", rows, ["variant", "seed", "accuracy", "macro_f1"])
    agg = aggregate_by(rows, "variant", ("accuracy", "macro_f1"))
    write_rows_csv(
        out_dir / "ablation_summary.csv",
        agg,
        ["variant", "n", "accuracy_mean", "accuracy_std", "macro_f1_mean", "macro_f1_std"],
    )
    (out_dir / "ablation.md").write_text(rows_to_markdown(agg))
    return rows


def _slug(name: str) -> str:
    return name.replace("-", "no").replace("_", "").lower() or "full"


# ----------------------------------------------------- few-shot / data-scale

def stratified_subsample(rows, fraction: float, seed: int):
    """Per-label subsample of (arg1, arg2, label, golds) rows; fraction 1.0
    returns the rows unchanged."""
    if fraction >= 1.0:
        return list(rows)
    if fraction <= 0.0:
        raise DataError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    by_label: dict[str, list] = {}
    for row in rows:
        by_label.setdefault(row[2], []).append(row)
    out = []
    for lab in sorted(by_label):
        group = by_label[lab]
        k = int(round(fraction * len(group)))
        if k == 0:
            log.warning("fraction %.3f leaves label %r empty", fraction, lab)
            continue
        picked = rng.permutation(len(group))[:k]
        out.extend(group[i] for i in sorted(picked))
    return out


def few_shot_harness(
    data: PipelineData,
    vocab: Vocab,
    enc_cfg: encoder.EncoderConfig,
    pre_cfg: TrainConfig,
    tune_cfg: TrainConfig,
    out_dir,
    fractions=(0.1, 0.2, 0.5, 1.0),
    with_pretrain: bool = True,
) -> list[dict]:
    """Tune on stratified fractions of the labeled data, with and without
    the pre-trained initialization, and plot the curves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise DataError(f"fractions must lie in (0,1], got {f}")
    rows = []
    conditions = [("pretrained", pre_cfg)] if with_pretrain else []
    conditions.append(
        ("random_init", replace(pre_cfg, cm=False, mlm=False, glsl=False, mtl_variant="none"))
    )
    for cond_name, pcfg in conditions:
        for frac in fractions:
            sub = stratified_subsample(data.train_rows, frac, seed=tune_cfg.seed)
            run_dir = out_dir / f"{cond_name}_f{int(round(frac * 100)):03d}"
            report = run_pipeline(
                data, vocab, enc_cfg, pcfg, tune_cfg, run_dir, train_rows_override=sub
            )
            rows.append(
                {
                    "condition": cond_name,
                    "fraction": frac,
                    "n_train": len(sub),
                    "accuracy": report.accuracy,
                    "macro_f1": report.macro_f1,
                }
            )
    write_rows_csv(
        out_dir / "fewshot.csv", rows, ["condition", "fraction", "n_train", "accuracy", "macro_f1"]
    )
    plot_curves(
        out_dir / "fewshot.svg",
        rows,
        x="fraction",
        ys=("accuracy", "macro_f1"),
        group="condition",
        title="few-shot tuning",
    )
    return rows


def data_scale_harness(
    data: PipelineData,
    vocab: Vocab,
    enc_cfg: encoder.EncoderConfig,
    pre_cfg: TrainConfig,
    tune_cfg: TrainConfig,
    out_dir,
    scales=(1000, 5000, 20000),
) -> list[dict]:
    """Pretrain at increasing explicit-data scales and track test metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if list(scales) != sorted(scales):
        raise DataError("scales must be ascending")
    rows = []
    for scale in scales:
        run_dir = out_dir / f"scale{scale}"
        report = run_pipeline(
            data, vocab, enc_cfg, pre_cfg, tune_cfg, run_dir, explicit_limit=int(scale)
        )
        rows.append(
            {"scale": int(scale), "accuracy": report.accuracy, "macro_f1": report.macro_f1}
        )
        log.info("scale %d: acc=%.4f f1=%.4f", scale, report.accuracy, report.macro_f1)
    write_rows_csv(out_dir / "datascale.csv", rows, ["scale", "accuracy", "macro_f1"])
    plot_curves(
        out_dir / "datascale.svg",
        rows,
        x="scale",
        ys=("accuracy", "macro_f1"),
        title="explicit data scale",
    )
    return rows


# ------------------------------------------------------------------ reports

def write_rows_csv(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def aggregate_by(rows: list[dict], key: str, metrics=("accuracy", "macro_f1")) -> list[dict]:
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    out = []
    for name, grp in groups.items():
        agg = {key: name, "n": len(grp)}
        for m in metrics:
            vals = np.asarray([g[m] for g in grp], dtype=float)
            agg[f"{m}_mean"] = float(vals.mean())
            agg[f"{m}_std"] = float(vals.std(ddof=0))
        out.append(agg)
    return out


def rows_to_markdown(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)\n"
    fields = list(rows[0])
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    for row in rows:
        lines.append("| " + " | ".join(str(_fmt(row.get(f))) for f in fields) + " |")
    return "\n".join(lines) + "\n"


def read_rows_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def plot_curves(out_path, rows: list[dict], x: str, ys, group: str | None = None, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "discorel"
    fig, ax = plt.subplots(figsize=(5, 3.4))
    groups = sorted({row[group] for row in rows}) if group else [None]
    for g in groups:
        sub = [r for r in rows if group is None or r[group] == g]
        sub.sort(key=lambda r: float(r[x]))
        xs = [float(r[x]) for r in sub]
        for y in ys:
            label = y if g is None else f"{g}:{y}"
            ax.plot(xs, [float(r[y]) for r in sub], marker="o", label=label)
    ax.set_xlabel(x)
    ax.set_ylabel("metric")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
