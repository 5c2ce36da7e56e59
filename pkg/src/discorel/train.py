"""Loss assembly and the optimization loop for both training phases.

Pre-training sums the enabled objectives (slot connective prediction,
masked-LM, MI maximization) per step; prompt-tuning optimizes the
verbalizer-aggregated label loss through the same template. Both loops are
fully deterministic given a seed, resumable from checkpoints, and retain
the best-on-validation model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, encoder, logic_mi, losses
from .codec import (
    MASK_ID,
    PAD_ID,
    MaskedEncoding,
    PromptEncoding,
    Vocab,
    apply_connective_mask,
    apply_universal_mask,
    templatize,
)
from .errors import ConfigError, DataError, DivergenceError
from .extract import split_train_valid
from .losses import VerbalizerIndex
from .optim import AdamW, clip_global_norm, lr_at

log = logging.getLogger(__name__)

MTL_VARIANTS = ("none", "cls", "mean")


@dataclass
class TrainConfig:
    phase: str  # pretrain | tune
    batch_size: int = 64
    learning_rate: float = 5e-6
    epochs: int = 2
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    cm: bool = True
    mlm: bool = True
    glsl: bool = True
    mtl_variant: str = "none"
    mask_p: float = 0.9
    mlm_select_p: float = 0.15
    valid_ratio: float = 0.1
    mhca_heads: int = 4
    log_every: int = 25
    checkpoint_every: int = 0  # steps; 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.phase not in ("pretrain", "tune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0,1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mtl_variant not in MTL_VARIANTS:
            raise ConfigError(f"mtl_variant must be one of {MTL_VARIANTS}")
        if self.mtl_variant != "none" and self.glsl:
            raise ConfigError("the auxiliary-classifier variants replace the MI loss; disable glsl")

    @classmethod
    def pretrain_defaults(cls) -> "TrainConfig":
        return cls(phase="pretrain", batch_size=64, learning_rate=5e-6, epochs=2)

    @classmethod
    def tune_defaults(cls) -> "TrainConfig":
        return cls(phase="tune", batch_size=64, learning_rate=1e-5, epochs=10)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ------------------------------------------------------------ data plumbing

@dataclass
class PretrainInstance:
    enc: PromptEncoding
    conn_id: int


@dataclass
class TuneInstance:
    masked: MaskedEncoding
    label_idx: int
    gold_labels: tuple[str, ...] = ()


def encode_pretrain_records(records, vocab: Vocab, max_len: int) -> list[PretrainInstance]:
    out = []
    skipped = 0
    for rec in records:
        conn_id = vocab.id(rec["conn"])
        if vocab.id_to_token[conn_id] != rec["conn"]:
            skipped += 1
            continue
        try:
            enc = templatize(rec["arg1"], rec["arg2"], vocab, max_len)
        except DataError:
            skipped += 1
            continue
        out.append(PretrainInstance(enc=enc, conn_id=conn_id))
    if skipped:
        log.warning("skipped %d records (connective missing from vocab or empty args)", skipped)
    if not out:
        raise DataError("no usable pre-training instances")
    return out


def encode_tune_rows(rows, vocab: Vocab, max_len: int, label_order: Sequence[str]):
    """rows: (arg1, arg2, label) or (arg1, arg2, label, gold_labels)."""
    label_idx = {lab: i for i, lab in enumerate(label_order)}
    out = []
    for row in rows:
        arg1, arg2, label = row[0], row[1], row[2]
        golds = tuple(row[3]) if len(row) > 3 else (label,)
        if label not in label_idx:
            raise DataError(f"label {label!r} missing from the verbalizer label set")
        enc = templatize(arg1, arg2, vocab, max_len)
        masked = apply_connective_mask(enc, None, np.random.default_rng(0))
        out.append(TuneInstance(masked=masked, label_idx=label_idx[label], gold_labels=golds))
    if not out:
        raise DataError("no usable tuning instances")
    return out


@dataclass
class Batch:
    ids: np.ndarray  # (B, L)
    attn: np.ndarray  # (B, L) float
    cmask_pos: np.ndarray  # (B,)
    arg1_spans: np.ndarray  # (B, 2)
    arg2_spans: np.ndarray  # (B, 2)
    cm_targets: Optional[np.ndarray] = None  # (B,)
    mlm_inst: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    mlm_pos: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    mlm_tgt: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    label_idx: Optional[np.ndarray] = None  # (B,) tune phase

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def _pad_stack(masked_list: list[MaskedEncoding], dtype) -> tuple[np.ndarray, np.ndarray]:
    lmax = max(len(m) for m in masked_list)
    ids = np.full((len(masked_list), lmax), PAD_ID, dtype=np.int64)
    attn = np.zeros((len(masked_list), lmax), dtype=dtype)
    for i, m in enumerate(masked_list):
        ids[i, : len(m)] = m.token_ids
        attn[i, : len(m)] = 1.0
    return ids, attn


def assemble_pretrain_batch(
    instances: Sequence[PretrainInstance],
    idxs: Sequence[int],
    cfg: TrainConfig,
    vocab_size: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> Batch:
    masked_list = []
    targets = []
    for i in idxs:
        inst = instances[i]
        gold = inst.conn_id if cfg.cm else None
        m = apply_connective_mask(inst.enc, gold, rng, cfg.mask_p)
        if cfg.mlm:
            m = apply_universal_mask(m, rng, vocab_size, cfg.mlm_select_p)
        masked_list.append(m)
        targets.append(inst.conn_id)
    ids, attn = _pad_stack(masked_list, dtype)
    mlm_inst, mlm_pos, mlm_tgt = [], [], []
    for bi, m in enumerate(masked_list):
        for p, t in zip(m.mlm_positions, m.mlm_targets):
            mlm_inst.append(bi)
            mlm_pos.append(int(p))
            mlm_tgt.append(int(t))
    return Batch(
        ids=ids,
        attn=attn,
        cmask_pos=np.asarray([m.base.cmask_pos for m in masked_list], dtype=np.int64),
        arg1_spans=np.asarray([m.base.arg1_span for m in masked_list], dtype=np.int64),
        arg2_spans=np.asarray([m.base.arg2_span for m in masked_list], dtype=np.int64),
        cm_targets=np.asarray(targets, dtype=np.int64),
        mlm_inst=np.asarray(mlm_inst, dtype=np.int64),
        mlm_pos=np.asarray(mlm_pos, dtype=np.int64),
        mlm_tgt=np.asarray(mlm_tgt, dtype=np.int64),
    )


def assemble_tune_batch(
    instances: Sequence[TuneInstance], idxs: Sequence[int], dtype=np.float32
) -> Batch:
    masked_list = [instances[i].masked for i in idxs]
    ids, attn = _pad_stack(masked_list, dtype)
    return Batch(
        ids=ids,
        attn=attn,
        cmask_pos=np.asarray([m.base.cmask_pos for m in masked_list], dtype=np.int64),
        arg1_spans=np.asarray([m.base.arg1_span for m in masked_list], dtype=np.int64),
        arg2_spans=np.asarray([m.base.arg2_span for m in masked_list], dtype=np.int64),
        label_idx=np.asarray([instances[i].label_idx for i in idxs], dtype=np.int64),
    )


# ------------------------------------------------------------- model bundle

def init_model(enc_cfg: encoder.EncoderConfig, tcfg: TrainConfig, dtype=np.float32) -> dict:
    model = {"enc": encoder.init_params(enc_cfg, dtype=dtype)}
    if tcfg.glsl:
        model["mi"] = logic_mi.init_mi_params(
            enc_cfg.d_model, tcfg.mhca_heads, seed=enc_cfg.seed + 1, dtype=dtype
        )
    if tcfg.mtl_variant != "none":
        rng = np.random.default_rng(enc_cfg.seed + 2)
        model["aux"] = {
            "w": rng.normal(0.0, 0.02, size=(enc_cfg.d_model, enc_cfg.vocab_size)).astype(dtype),
            "b": np.zeros(enc_cfg.vocab_size, dtype=dtype),
        }
    return model


def flatten_model(model: dict) -> dict[str, np.ndarray]:
    return {f"{ns}.{k}": arr for ns, group in model.items() for k, arr in group.items()}


def unflatten_model(flat: dict[str, np.ndarray]) -> dict:
    model: dict = {}
    for key, arr in flat.items():
        ns, name = key.split(".", 1)
        model.setdefault(ns, {})[name] = arr
    return model


def zero_like(group: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in group.items()}


# ---------------------------------------------------------------- loss step

def pretrain_batch_loss(
    model: dict,
    enc_cfg: encoder.EncoderConfig,
    tcfg: TrainConfig,
    batch: Batch,
    rng: np.random.Generator,
    train: bool = True,
    want_grads: bool = True,
    detach_encoder_from_mi: bool = False,
):
    """Sum of the enabled pre-training objectives on one batch.

    Returns (loss_dict, grads_by_namespace or None). Gradients from every
    head merge into a single dH before one encoder backward pass.
    """
    enc_params = model["enc"]
    H, cache = encoder.forward(
        enc_params, enc_cfg, batch.ids, batch.attn, train=train, rng=rng
    )
    grads = {ns: zero_like(group) for ns, group in model.items()} if want_grads else None
    dH = np.zeros_like(H) if want_grads else None
    rows = np.arange(batch.size)
    terms: dict[str, float] = {}

    if tcfg.cm:
        h_slots = H[rows, batch.cmask_pos]
        logits = encoder.mlm_logits(enc_params, h_slots)
        loss_cm, cache_cm = losses.cm_loss(logits, batch.cm_targets)
        terms["cm"] = loss_cm
        if want_grads:
            dlogits = losses.cm_loss_bwd(cache_cm)
            drows = encoder.mlm_logits_bwd(enc_params, h_slots, dlogits, grads["enc"])
            np.add.at(dH, (rows, batch.cmask_pos), drows)

    if tcfg.mlm:
        h_pos = H[batch.mlm_inst, batch.mlm_pos]
        logits = encoder.mlm_logits(enc_params, h_pos)
        loss_mlm, cache_mlm, empty = losses.mlm_loss(
            logits, batch.mlm_tgt, batch.mlm_inst, batch.size
        )
        terms["mlm"] = loss_mlm
        if want_grads and not empty:
            dlogits = losses.mlm_loss_bwd(cache_mlm)
            drows = encoder.mlm_logits_bwd(enc_params, h_pos, dlogits, grads["enc"])
            np.add.at(dH, (batch.mlm_inst, batch.mlm_pos), drows)

    if tcfg.glsl:
        terms["glsl"] = logic_mi.glsl_loss(
            model["mi"],
            tcfg.mhca_heads,
            H,
            batch.cmask_pos,
            batch.arg1_spans,
            batch.arg2_spans,
            rng,
            grads_mi=grads["mi"] if want_grads else None,
            dH=dH,
            detach_encoder=detach_encoder_from_mi,
        )

    if tcfg.mtl_variant != "none":
        aux = model["aux"]
        if tcfg.mtl_variant == "cls":
            rep = H[:, 0]
        else:
            denom = batch.attn.sum(axis=1, keepdims=True)
            rep = (H * batch.attn[:, :, None]).sum(axis=1) / denom
        logits = rep @ aux["w"] + aux["b"]
        loss_mtl, cache_mtl = losses.cm_loss(logits, batch.cm_targets)
        terms["mtl"] = loss_mtl
        if want_grads:
            dlogits = losses.cm_loss_bwd(cache_mtl)
            grads["aux"]["w"] += rep.T @ dlogits
            grads["aux"]["b"] += dlogits.sum(axis=0)
            drep = dlogits @ aux["w"].T
            if tcfg.mtl_variant == "cls":
                dH[:, 0] += drep
            else:
                dH += (drep[:, None, :] / denom[:, :, None]) * batch.attn[:, :, None]

    if want_grads:
        encoder.backward(enc_params, enc_cfg, cache, dH, grads["enc"])
    terms["total"] = float(sum(terms.values()))
    return terms, grads


def tune_batch_loss(
    model: dict,
    enc_cfg: encoder.EncoderConfig,
    tcfg: TrainConfig,
    batch: Batch,
    vindex: VerbalizerIndex,
    rng: np.random.Generator,
    train: bool = True,
    want_grads: bool = True,
):
    enc_params = model["enc"]
    H, cache = encoder.forward(
        enc_params, enc_cfg, batch.ids, batch.attn, train=train, rng=rng
    )
    rows = np.arange(batch.size)
    h_slots = H[rows, batch.cmask_pos]
    logits = encoder.mlm_logits(enc_params, h_slots)
    loss, lcache = losses.tune_loss(logits, vindex, batch.label_idx)
    grads = None
    if want_grads:
        grads = {"enc": zero_like(enc_params)}
        dlogits = losses.tune_loss_bwd(lcache, vindex)
        drows = encoder.mlm_logits_bwd(enc_params, h_slots, dlogits, grads["enc"])
        dH = np.zeros_like(H)
        np.add.at(dH, (rows, batch.cmask_pos), drows)
        encoder.backward(enc_params, enc_cfg, cache, dH, grads["enc"])
    return {"tune": loss, "total": loss}, grads, logits


# -------------------------------------------------------------- the trainer

@dataclass
class TrainResult:
    best_path: Path
    final_path: Path
    metrics_path: Path
    best_metric: float
    history: list[dict]


def _dump_divergence(out_dir: Path, step: int, batch: Batch) -> Path:
    path = out_dir / f"divergence_step{step}.npz"
    np.savez(
        path,
        ids=batch.ids,
        attn=batch.attn,
        cmask_pos=batch.cmask_pos,
        arg1_spans=batch.arg1_spans,
        arg2_spans=batch.arg2_spans,
    )
    return path


def _model_manifest(enc_cfg, tcfg, step, epoch, seed, rng_state, extra=None) -> dict:
    man = {
        "phase": tcfg.phase,
        "encoder_config": enc_cfg.to_json(),
        "train_config": tcfg.to_json(),
        "step": step,
        "epoch": epoch,
        "seed": seed,
        "rng_state": rng_state,
    }
    if extra:
        man.update(extra)
    return man


class _MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        self.rows: list[dict] = []

    def add(self, **row):
        self.rows.append(row)

    def write(self):
        with open(self.path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic shuffle independent of the master rng stream, so a
    resumed run can rebuild the order for any epoch."""
    return np.random.default_rng((seed + 1) * 1_000_003 + epoch).permutation(n)


def _epoch_batches(n: int, batch_size: int, min_batch: int) -> list[tuple[int, int]]:
    bounds = [
        (s, min(s + batch_size, n))
        for s in range(0, n, batch_size)
    ]
    return [(a, b) for a, b in bounds if b - a >= min_batch]


def pretrain(
    instances: list[PretrainInstance],
    vocab_size: int,
    enc_cfg: encoder.EncoderConfig,
    tcfg: TrainConfig,
    out_dir,
    resume: Optional[str] = None,
) -> TrainResult:
    """Optimize the pre-training objectives; keeps the best-on-validation
    checkpoint (lowest total validation loss)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(tcfg.seed)

    start_step = 0
    best_metric = math.inf
    if resume is not None:
        man, arrays = checkpoint.load_checkpoint(resume)
        enc_cfg = encoder.EncoderConfig(**man["encoder_config"])
        tcfg = TrainConfig(**man["train_config"])
        model = unflatten_model(
            {k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")}
        )
        opt = AdamW(flatten_model(model), weight_decay=tcfg.weight_decay)
        opt.load_state_arrays(
            {k[len("opt.") :]: v for k, v in arrays.items() if k.startswith("opt.")},
            t=man["step"],
        )
        rng.bit_generator.state = json.loads(man["rng_state"])
        start_step = man["step"]
        best_metric = man.get("best_valid", math.inf)
    else:
        model = init_model(enc_cfg, tcfg)
        opt = AdamW(flatten_model(model), weight_decay=tcfg.weight_decay)

    if tcfg.valid_ratio > 0 and len(instances) > 1:
        train_insts, valid_insts = split_train_valid(
            instances, 1.0 - tcfg.valid_ratio, seed=tcfg.seed
        )
        if not valid_insts:
            valid_insts = train_insts[:1]
    else:
        train_insts, valid_insts = instances, instances[: max(1, len(instances) // 10)]

    min_batch = 2 if tcfg.glsl else 1
    batches = _epoch_batches(len(train_insts), tcfg.batch_size, min_batch)
    steps_per_epoch = len(batches)
    if steps_per_epoch == 0:
        raise DataError("not enough training instances for a single batch")
    total_steps = steps_per_epoch * tcfg.epochs

    def valid_loss() -> float:
        vrng = np.random.default_rng(tcfg.seed + 7919)
        total, n = 0.0, 0
        for s in range(0, len(valid_insts), tcfg.batch_size):
            idxs = range(s, min(s + tcfg.batch_size, len(valid_insts)))
            batch = assemble_pretrain_batch(valid_insts, idxs, tcfg, vocab_size, vrng)
            if tcfg.glsl and batch.size < 2:
                continue
            terms, _ = pretrain_batch_loss(
                model, enc_cfg, tcfg, batch, vrng, train=False, want_grads=False
            )
            total += terms["total"] * batch.size
            n += batch.size
        return total / max(n, 1)

    metrics = _MetricsLog(out_dir / "metrics.jsonl")
    best_flat: dict[str, np.ndarray] = {
        k: v.copy() for k, v in flatten_model(model).items()
    }
    history = []
    step = start_step
    start_epoch = start_step // steps_per_epoch
    for epoch in range(start_epoch, tcfg.epochs):
        order = _epoch_order(tcfg.seed, epoch, len(train_insts))
        first = start_step % steps_per_epoch if epoch == start_epoch else 0
        for a, b in batches[first:]:
            step += 1
            idxs = order[a:b]
            batch = assemble_pretrain_batch(instances=train_insts, idxs=idxs, cfg=tcfg,
                                            vocab_size=vocab_size, rng=rng)
            terms, grads = pretrain_batch_loss(model, enc_cfg, tcfg, batch, rng)
            if not math.isfinite(terms["total"]):
                dump = _dump_divergence(out_dir, step, batch)
                raise DivergenceError(
                    f"non-finite loss {terms} at step {step}", dump_path=dump
                )
            flat_g = flatten_model(grads)
            clip_global_norm(flat_g, tcfg.grad_clip)
            lr = lr_at(step, total_steps, tcfg.warmup_ratio, tcfg.learning_rate)
            opt.step(flatten_model(model), flat_g, lr)
            if step % tcfg.log_every == 0 or step == total_steps:
                metrics.add(step=step, lr=lr, **{k: round(v, 6) for k, v in terms.items()})
            if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                _save_full(out_dir / f"checkpoint_step{step}.dckpt", model, opt,
                           enc_cfg, tcfg, step, epoch, rng,
                           extra={"best_valid": best_metric})
        vloss = valid_loss()
        history.append({"epoch": epoch + 1, "step": step, "valid_total": vloss})
        metrics.add(step=step, valid_metric=round(vloss, 6))
        log.info("epoch %d: valid total loss %.4f", epoch + 1, vloss)
        if vloss < best_metric:
            best_metric = vloss
            best_flat = {k: v.copy() for k, v in flatten_model(model).items()}

    best_path = out_dir / "checkpoint_best.dckpt"
    final_path = out_dir / "checkpoint_final.dckpt"
    man = _model_manifest(
        enc_cfg, tcfg, step, tcfg.epochs, tcfg.seed,
        json.dumps(rng.bit_generator.state),
        extra={"valid_history": history, "best_valid": best_metric},
    )
    checkpoint.save_checkpoint(
        best_path, man, {f"model.{k}": v for k, v in best_flat.items()}
    )
    _save_full(final_path, model, opt, enc_cfg, tcfg, step, tcfg.epochs, rng,
               extra={"valid_history": history, "best_valid": best_metric})
    metrics.write()
    return TrainResult(best_path, final_path, metrics.path, best_metric, history)


def _save_full(path, model, opt, enc_cfg, tcfg, step, epoch, rng, extra=None):
    arrays = {f"model.{k}": v for k, v in flatten_model(model).items()}
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    man = _model_manifest(
        enc_cfg, tcfg, step, epoch, tcfg.seed, json.dumps(rng.bit_generator.state), extra
    )
    checkpoint.save_checkpoint(path, man, arrays)


def load_encoder_from_checkpoint(path) -> tuple[encoder.EncoderConfig, dict]:
    man, arrays = checkpoint.load_checkpoint(path)
    enc_cfg = encoder.EncoderConfig(**man["encoder_config"])
    enc = {
        k[len("model.enc.") :]: v
        for k, v in arrays.items()
        if k.startswith("model.enc.")
    }
    if not enc:
        raise DataError(f"{path} holds no encoder parameters")
    return enc_cfg, enc


def tune(
    instances: list[TuneInstance],
    vindex: VerbalizerIndex,
    enc_cfg: encoder.EncoderConfig,
    tcfg: TrainConfig,
    out_dir,
    init_encoder: Optional[dict] = None,
    valid_instances: Optional[list[TuneInstance]] = None,
) -> TrainResult:
    """Prompt-tune (optionally from a pre-trained encoder); keeps the model
    with the best validation accuracy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if valid_instances is None:
        if tcfg.valid_ratio > 0 and len(instances) > 1:
            instances, valid_instances = split_train_valid(
                instances, 1.0 - tcfg.valid_ratio, seed=tcfg.seed
            )
        if not valid_instances:
            valid_instances = instances[:1]

    model = {"enc": init_encoder if init_encoder is not None
             else encoder.init_params(enc_cfg)}
    opt = AdamW(flatten_model(model), weight_decay=tcfg.weight_decay)
    batches = _epoch_batches(len(instances), tcfg.batch_size, 1)
    steps_per_epoch = len(batches)
    total_steps = steps_per_epoch * tcfg.epochs
    rng = np.random.default_rng(tcfg.seed)

    def valid_accuracy() -> float:
        hits = 0
        for s in range(0, len(valid_instances), tcfg.batch_size):
            idxs = range(s, min(s + tcfg.batch_size, len(valid_instances)))
            batch = assemble_tune_batch(valid_instances, idxs)
            _, _, logits = tune_batch_loss(
                model, enc_cfg, tcfg, batch, vindex, rng, train=False, want_grads=False
            )
            probs = np.asarray(logits, dtype=np.float64)
            probs -= probs.max(axis=1, keepdims=True)
            e = np.exp(probs)
            masses, _ = vindex.label_masses(e / e.sum(axis=1, keepdims=True))
            pred = masses.argmax(axis=1)
            hits += int((pred == batch.label_idx).sum())
        return hits / max(len(valid_instances), 1)

    metrics = _MetricsLog(out_dir / "metrics.jsonl")
    best_metric = -math.inf
    best_flat = {k: v.copy() for k, v in flatten_model(model).items()}
    history = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = _epoch_order(tcfg.seed, epoch, len(instances))
        for a, b in batches:
            step += 1
            idxs = order[a:b]
            batch = assemble_tune_batch(instances, idxs)
            terms, grads, _ = tune_batch_loss(model, enc_cfg, tcfg, batch, vindex, rng)
            if not math.isfinite(terms["total"]):
                dump = _dump_divergence(out_dir, step, batch)
                raise DivergenceError(
                    f"non-finite loss {terms} at step {step}", dump_path=dump
                )
            flat_g = flatten_model(grads)
            clip_global_norm(flat_g, tcfg.grad_clip)
            lr = lr_at(step, total_steps, tcfg.warmup_ratio, tcfg.learning_rate)
            opt.step(flatten_model(model), flat_g, lr)
            if step % tcfg.log_every == 0 or step == total_steps:
                metrics.add(step=step, lr=lr, **{k: round(v, 6) for k, v in terms.items()})
        acc = valid_accuracy()
        history.append({"epoch": epoch + 1, "step": step, "valid_accuracy": acc})
        metrics.add(step=step, valid_metric=round(acc, 6))
        log.info("epoch %d: valid accuracy %.4f", epoch + 1, acc)
        if acc > best_metric:
            best_metric = acc
            best_flat = {k: v.copy() for k, v in flatten_model(model).items()}

    best_path = out_dir / "checkpoint_best.dckpt"
    final_path = out_dir / "checkpoint_final.dckpt"
    man = _model_manifest(
        enc_cfg, tcfg, step, tcfg.epochs, tcfg.seed,
        json.dumps(rng.bit_generator.state),
        extra={"valid_history": history, "best_valid": best_metric,
               "labels": vindex.labels},
    )
    checkpoint.save_checkpoint(best_path, man, {f"model.{k}": v for k, v in best_flat.items()})
    _save_full(final_path, model, opt, enc_cfg, tcfg, step, tcfg.epochs, rng,
               extra={"valid_history": history, "best_valid": best_metric,
                      "labels": vindex.labels})
    metrics.write()
    return TrainResult(best_path, final_path, metrics.path, best_metric, history)
