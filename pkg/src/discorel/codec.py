"""Word-level vocabulary, cloze templating and the two masking procedures.

The template lays an argument pair out as

    [CLS] arg1 [SEP] [MASK] arg2 [SEP]

where the [MASK] position (the "slot") is reserved for the connective. A
word-level tokenizer keeps every connective a single vocabulary item, which
the slot mechanism requires.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, ParseError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Bijective token<->id map with the five specials at fixed low ids."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(SPECIALS) + [
            t for t in tokens if t not in SPECIALS
        ]
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)
        }
        if len(self.token_to_id) != len(self.id_to_token):
            dupes = [t for t, c in Counter(self.id_to_token).items() if c > 1]
            raise DataError(f"duplicate vocabulary tokens: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{i}\t{tok}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        toks = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[0].isdigit():
                    raise ParseError("expected 'id<TAB>token'", path=str(path), line=n)
                if int(parts[0]) != len(toks):
                    raise ParseError("non-contiguous ids", path=str(path), line=n)
                toks.append(parts[1])
        if toks[: len(SPECIALS)] != list(SPECIALS):
            raise ParseError(f"vocab must begin with specials {SPECIALS}", path=str(path))
        return cls(toks[len(SPECIALS) :])


def build_vocab(
    texts: Iterable[str],
    min_freq: int = 1,
    max_size: Optional[int] = None,
    forced: Iterable[str] = (),
) -> Vocab:
    """Frequency vocabulary over tokenized texts.

    Tokens below ``min_freq`` fall back to [UNK]; ``forced`` tokens (lexicon
    canonical forms, connectives) are always kept regardless of frequency.
    """
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    forced_set = {t for t in forced if t not in SPECIALS}
    if max_size is not None and max_size < len(SPECIALS) + len(forced_set):
        raise DataError(
            f"max_size={max_size} cannot hold {len(SPECIALS)} specials "
            f"plus {len(forced_set)} forced tokens"
        )
    kept = sorted(forced_set)
    budget = None if max_size is None else max_size - len(SPECIALS) - len(kept)
    rest = [
        t
        for t, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if c >= min_freq and t not in forced_set
    ]
    if budget is not None:
        rest = rest[:budget]
    return Vocab(kept + rest)


@dataclass
class PromptEncoding:
    """Tokenized cloze template, unpadded (pad at batch assembly)."""

    token_ids: np.ndarray  # int64, starts with CLS, ends with SEP
    cmask_pos: int
    arg1_span: tuple[int, int]  # [start, end)
    arg2_span: tuple[int, int]
    attn_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.attn_mask is None:
            self.attn_mask = np.ones(len(self.token_ids), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class MaskedEncoding:
    """A PromptEncoding after connective and/or universal masking."""

    base: PromptEncoding
    token_ids: np.ndarray  # corrupted copy
    cm_target: Optional[int] = None  # gold connective id, absent for implicit data
    cm_masked: bool = True
    mlm_positions: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64)
    )
    mlm_targets: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64)
    )

    def __len__(self) -> int:
        return len(self.token_ids)


def _truncate_lengths(n1: int, n2: int, budget: int) -> tuple[int, int]:
    if n1 + n2 <= budget:
        return n1, n2
    if budget < 2:
        raise DataError(
            f"max_len leaves a {budget}-token budget; an argument would be "
            "truncated to zero tokens"
        )
    k1 = int(round(budget * n1 / (n1 + n2)))
    k1 = min(max(k1, 1), budget - 1)
    return k1, budget - k1


def templatize(arg1: str, arg2: str, vocab: Vocab, max_len: int) -> PromptEncoding:
    """Encode an argument pair into the cloze layout.

    Over-long pairs are truncated from each argument's tail, proportionally
    to their lengths; specials and the slot are never dropped.
    """
    t1 = tokenize(arg1)
    t2 = tokenize(arg2)
    if not t1 or not t2:
        raise DataError("both arguments must be non-empty after tokenization")
    n1, n2 = _truncate_lengths(len(t1), len(t2), max_len - 4)
    t1, t2 = t1[:n1], t2[:n2]
    ids = (
        [CLS_ID]
        + vocab.encode(t1)
        + [SEP_ID, MASK_ID]
        + vocab.encode(t2)
        + [SEP_ID]
    )
    return PromptEncoding(
        token_ids=np.asarray(ids, dtype=np.int64),
        cmask_pos=n1 + 2,
        arg1_span=(1, 1 + n1),
        arg2_span=(n1 + 3, n1 + 3 + n2),
    )


def apply_connective_mask(
    enc: PromptEncoding,
    gold_conn_id: Optional[int],
    rng: np.random.Generator,
    mask_p: float = 0.9,
) -> MaskedEncoding:
    """Fill the slot: [MASK] with probability ``mask_p``, else the gold token.

    With no gold connective (implicit data) the slot is always [MASK] and
    no target is recorded.
    """
    ids = enc.token_ids.copy()
    if gold_conn_id is None:
        ids[enc.cmask_pos] = MASK_ID
        return MaskedEncoding(base=enc, token_ids=ids, cm_target=None, cm_masked=True)
    masked = bool(rng.random() < mask_p)
    ids[enc.cmask_pos] = MASK_ID if masked else gold_conn_id
    return MaskedEncoding(
        base=enc, token_ids=ids, cm_target=int(gold_conn_id), cm_masked=masked
    )


def apply_universal_mask(
    enc,
    rng: np.random.Generator,
    vocab_size: int,
    select_p: float = 0.15,
    sub: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> MaskedEncoding:
    """Masked-LM corruption restricted to the argument spans.

    ``enc`` may be a PromptEncoding or an already connective-masked
    MaskedEncoding; substitution follows ``sub`` = (mask, random, keep).
    Random replacements are drawn from non-special ids only.
    """
    if isinstance(enc, MaskedEncoding):
        base, ids = enc.base, enc.token_ids.copy()
        cm_target, cm_masked = enc.cm_target, enc.cm_masked
    else:
        base, ids = enc, enc.token_ids.copy()
        cm_target, cm_masked = None, True
    span_positions = np.concatenate(
        [
            np.arange(base.arg1_span[0], base.arg1_span[1]),
            np.arange(base.arg2_span[0], base.arg2_span[1]),
        ]
    )
    picked = span_positions[rng.random(len(span_positions)) < select_p]
    targets = base.token_ids[picked].copy()
    n_special = len(SPECIALS)
    for pos in picked:
        r = rng.random()
        if r < sub[0]:
            ids[pos] = MASK_ID
        elif r < sub[0] + sub[1]:
            ids[pos] = int(rng.integers(n_special, vocab_size))
        # else: keep the original token
    return MaskedEncoding(
        base=base,
        token_ids=ids,
        cm_target=cm_target,
        cm_masked=cm_masked,
        mlm_positions=picked.astype(np.int64),
        mlm_targets=targets.astype(np.int64),
    )


def canonicalize_connective(phrase, lexicon) -> Optional[str]:
    """Map a 1-2 word surface phrase to its canonical single token, if any."""
    return lexicon.canonical(phrase)
