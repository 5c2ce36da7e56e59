"""Loss heads over token logits: connective prediction at the slot,
masked-LM over argument tokens, and verbalizer-aggregated label loss."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DataError


def cm_loss(logits: np.ndarray, targets: np.ndarray):
    """Batch-mean cross entropy of the gold connective at the slot.

    Returns (loss, cache) where cache backs ``cm_loss_bwd``.
    """
    losses, probs = kernels.ce_fwd(logits, targets)
    return float(losses.mean()), (probs, targets)


def cm_loss_bwd(cache) -> np.ndarray:
    probs, targets = cache
    n = probs.shape[0]
    weights = np.full(n, 1.0 / n, dtype=probs.dtype)
    return kernels.ce_bwd(probs, targets, weights)


def mlm_loss(logits: np.ndarray, targets: np.ndarray, inst_idx: np.ndarray, batch_size: int):
    """Two-level mean: per-instance mean over masked positions, then mean
    over instances that had at least one masked position.

    Returns (loss, cache, all_empty_flag); positions may be empty.
    """
    if logits.shape[0] == 0:
        return 0.0, None, True
    losses, probs = kernels.ce_fwd(logits, targets)
    counts = np.bincount(inst_idx, minlength=batch_size)
    nonempty = int((counts > 0).sum())
    weights = (1.0 / (counts[inst_idx] * nonempty)).astype(probs.dtype)
    loss = float((losses * weights).sum())
    return loss, (probs, targets, weights), False


def mlm_loss_bwd(cache) -> np.ndarray:
    probs, targets, weights = cache
    return kernels.ce_bwd(probs, targets, weights)


class VerbalizerIndex:
    """Vocabulary-side view of a verbalizer: answer ids grouped by label."""

    def __init__(self, labels: list[str], answer_ids: list[list[int]]):
        if any(len(g) == 0 for g in answer_ids):
            raise DataError("every label needs at least one in-vocabulary answer word")
        flat = [i for grp in answer_ids for i in grp]
        if len(set(flat)) != len(flat):
            raise DataError("answer-word id sets must be pairwise disjoint")
        self.labels = list(labels)
        self.answer_ids = np.asarray(flat, dtype=np.int64)
        self.group = np.asarray(
            [gi for gi, grp in enumerate(answer_ids) for _ in grp], dtype=np.int64
        )
        self.n_labels = len(labels)

    def label_masses(self, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(per-label softmax mass (B, n_labels), union mass (B,))."""
        sel = probs[:, self.answer_ids]
        masses = np.zeros((probs.shape[0], self.n_labels), dtype=probs.dtype)
        np.add.at(masses.T, self.group, sel.T)
        return masses, sel.sum(axis=1)


def tune_loss(logits: np.ndarray, vindex: VerbalizerIndex, gold_label_idx: np.ndarray):
    """Eq.-style label loss: softmax mass summed per label, renormalized
    over the union of all answer words; batch-mean -log P(gold).

    Returns (loss, cache).
    """
    if (gold_label_idx < 0).any() or (gold_label_idx >= vindex.n_labels).any():
        raise DataError("gold label outside the verbalizer's label set")
    probs = kernels.softmax_fwd(logits)
    masses, union = vindex.label_masses(probs)
    rows = np.arange(logits.shape[0])
    gold_mass = masses[rows, gold_label_idx]
    loss = float(np.mean(np.log(union) - np.log(gold_mass)))
    return loss, (probs, masses, union, gold_label_idx)


def tune_loss_bwd(cache, vindex: VerbalizerIndex) -> np.ndarray:
    probs, masses, union, gold = cache
    b, v = probs.shape
    rows = np.arange(b)
    dmass = np.zeros_like(masses)
    dmass[rows, gold] = -1.0 / (b * masses[rows, gold])
    dunion = 1.0 / (b * union)
    # d loss / d probs: union term over all answer words, gold term over its group
    dprobs = np.zeros_like(probs)
    dprobs[:, vindex.answer_ids] = dunion[:, None] + dmass[:, vindex.group]
    return kernels.softmax_bwd(probs, dprobs)
