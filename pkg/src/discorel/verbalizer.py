"""Bidirectional connective<->label mappings and slot-logit prediction.

Three built-in schemes cover the standard discourse-relation label sets:
the four top-level PDTB classes, the 11 major second-level PDTB types, and
the 14 cross-level CoNLL16 senses. Answer-word sets are pairwise disjoint,
so the word->label map is a function.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import Vocab
from .errors import DataError, ParseError
from .losses import VerbalizerIndex

_PDTB_SECOND = {
    "Comparison.Concession": ["however", "although", "though"],
    "Comparison.Contrast": ["but"],
    "Contingency.Cause": ["because", "so", "thus", "consequently", "therefore"],
    "Contingency.Pragmatic cause": ["as", "since"],
    "Expansion.Alternative": ["instead", "rather"],
    "Expansion.Conjunction": ["and", "also", "fact", "furthermore"],
    "Expansion.Instantiation": ["instance", "example"],
    "Expansion.List": ["finally"],
    "Expansion.Restatement": ["specifically", "indeed", "particular"],
    "Temporal.Asynchronous": ["then", "after", "before"],
    "Temporal.Synchrony": ["meanwhile", "when"],
}

_CONLL_CROSS = {
    "Comp.Concession": ["although", "however"],
    "Comp.Contrast": ["but"],
    "Cont.Cause.Reason": ["because"],
    "Cont.Cause.Result": ["so", "consequently", "thus", "therefore"],
    "Cont.Condition": ["if"],
    "Exp.Alternative": ["unless"],
    "Exp.Alternative.Chosen alternative": ["instead", "rather"],
    "Exp.Conjunction": ["and", "also", "fact", "furthermore"],
    "Exp.Exception": ["except"],
    "Exp.Instantiation": ["instance", "example"],
    "Exp.Restatement": ["particular", "indeed", "specifically"],
    "Temp.Asynchronous.Precedence": ["then", "before"],
    "Temp.Asynchronous.Succession": ["after"],
    "Temp.Synchrony": ["meanwhile", "when"],
}

SCHEMES = ("pdtb_top4", "pdtb_second11", "conll14")


class Verbalizer:
    """Label set plus per-label answer words; derives the word->label map."""

    def __init__(self, mapping: dict[str, list[str]]):
        if not mapping:
            raise DataError("verbalizer needs at least one label")
        self.labels: list[str] = list(mapping)
        self.answer_words: dict[str, list[str]] = {
            lab: list(words) for lab, words in mapping.items()
        }
        self.word_to_label: dict[str, str] = {}
        for lab, words in self.answer_words.items():
            if not words:
                raise DataError(f"label {lab!r} has no answer words")
            for w in words:
                if w in self.word_to_label:
                    raise DataError(
                        f"answer word {w!r} appears under both "
                        f"{self.word_to_label[w]!r} and {lab!r}"
                    )
                self.word_to_label[w] = lab

    def label_of(self, word: str) -> str | None:
        return self.word_to_label.get(word)

    def to_index(self, vocab: Vocab) -> VerbalizerIndex:
        groups = []
        for lab in self.labels:
            ids = []
            for w in self.answer_words[lab]:
                if w not in vocab:
                    raise DataError(f"answer word {w!r} missing from vocabulary")
                ids.append(vocab.id(w))
            groups.append(ids)
        return VerbalizerIndex(self.labels, groups)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for lab in self.labels:
                fh.write(f"{lab}\t{','.join(self.answer_words[lab])}\n")

    @classmethod
    def load(cls, path) -> "Verbalizer":
        mapping: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for n, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError("expected 'label<TAB>word,word'", path=str(path), line=n)
                mapping[parts[0]] = [w.strip() for w in parts[1].split(",") if w.strip()]
        return cls(mapping)


def builtin_verbalizer(scheme: str) -> Verbalizer:
    if scheme == "pdtb_second11":
        return Verbalizer(dict(_PDTB_SECOND))
    if scheme == "conll14":
        return Verbalizer(dict(_CONLL_CROSS))
    if scheme == "pdtb_top4":
        merged: dict[str, list[str]] = {}
        for sense, words in _PDTB_SECOND.items():
            top = sense.split(".")[0]
            merged.setdefault(top, []).extend(words)
        return Verbalizer(merged)
    raise DataError(f"unknown verbalizer scheme {scheme!r} (expected one of {SCHEMES})")


def predict(mask_logits: np.ndarray, vindex: VerbalizerIndex):
    """(label, per-label distribution) for one or a batch of logit rows.

    The distribution renormalizes softmax mass over the union of answer
    words; exact ties break toward the lexicographically first label.
    """
    logits = np.atleast_2d(np.asarray(mask_logits, dtype=np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    masses, union = vindex.label_masses(probs)
    dist = masses / union[:, None]
    order = np.argsort(np.asarray(vindex.labels, dtype=object), kind="stable")
    # argmax over labels sorted lexicographically, so ties pick the first
    best = order[dist[:, order].argmax(axis=1)]
    labels = [vindex.labels[i] for i in best]
    if np.asarray(mask_logits).ndim == 1:
        return labels[0], dist[0]
    return labels, dist
