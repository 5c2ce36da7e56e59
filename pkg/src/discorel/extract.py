"""Mine explicit-connective argument pairs from raw text.

Two patterns are recognized:

  inter-sentential   "S1. <Conn>[,] S2"   - the connective heads a sentence
  intra-sentential   "S1, <conn> S2"      - the connective follows a comma

Connective surfaces are one or two words; the lexicon canonicalizes each to
a single vocabulary token, and three-word phrases are rejected outright at
lexicon load.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import shards
from .errors import DataError, ParseError
from .util import sha256_bytes

log = logging.getLogger(__name__)

INTER = "inter_sentential"
INTRA = "intra_sentential"
_PATTERN_FLAGS = {"inter": INTER, "intra": INTRA, INTER: INTER, INTRA: INTRA}

# words whose trailing period does not end a sentence
DEFAULT_ABBREVIATIONS = frozenset(
    """mr mrs ms dr prof st no vs etc e.g i.e cf al inc co corp ltd
    jan feb mar apr jun jul aug sep sept oct nov dec fig vol u.s u.k""".split()
)


@dataclass(frozen=True)
class LexiconEntry:
    surface: tuple[str, ...]  # lowercase words, length 1-2
    canonical: str
    patterns: frozenset[str]


class ConnectiveLexicon:
    def __init__(self, entries: Sequence[LexiconEntry]):
        self.entries = list(entries)
        self._by_surface: dict[tuple[str, ...], LexiconEntry] = {}
        for e in self.entries:
            if e.surface in self._by_surface:
                raise DataError(f"duplicate lexicon surface phrase {' '.join(e.surface)!r}")
            self._by_surface[e.surface] = e
        self.canonical_tokens = sorted({e.canonical for e in self.entries})

    def lookup(self, words) -> Optional[LexiconEntry]:
        key = tuple(w.lower() for w in words)
        if len(key) > 2:
            return None
        return self._by_surface.get(key)

    def canonical(self, phrase) -> Optional[str]:
        words = phrase.split() if isinstance(phrase, str) else list(phrase)
        entry = self.lookup(words)
        return entry.canonical if entry else None

    def __len__(self) -> int:
        return len(self.entries)


def load_lexicon(path) -> ConnectiveLexicon:
    """Parse a tab-separated lexicon: ``surface phrase<TAB>canonical<TAB>flags``."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"expected 3 tab-separated fields, got {len(parts)}",
                    path=str(path),
                    line=n,
                )
            surface = tuple(parts[0].lower().split())
            if len(surface) == 0:
                raise ParseError("empty surface phrase", path=str(path), line=n)
            if len(surface) > 2:
                raise ParseError(
                    f"three-word connective {' '.join(surface)!r} is not supported "
                    "(single-token prediction)",
                    path=str(path),
                    line=n,
                )
            canonical = parts[1].strip().lower()
            if not canonical or len(canonical.split()) != 1:
                raise ParseError(
                    f"canonical token must be one word, got {parts[1]!r}",
                    path=str(path),
                    line=n,
                )
            flags = frozenset(
                _PATTERN_FLAGS.get(f.strip().lower(), "") for f in parts[2].split(",")
            )
            if "" in flags or not flags:
                raise ParseError(
                    f"pattern flags must be drawn from inter,intra: {parts[2]!r}",
                    path=str(path),
                    line=n,
                )
            entries.append(LexiconEntry(surface, canonical, flags))
    return ConnectiveLexicon(entries)


@dataclass
class ExtractionRules:
    min_arg_tokens: int = 3
    max_arg_tokens: int = 100
    abbreviations: frozenset[str] = DEFAULT_ABBREVIATIONS
    per_connective_cap: Optional[int] = None


@dataclass
class ExplicitInstance:
    arg1: str
    arg2: str
    connective: str
    pattern: str
    source_id: str
    offset: int

    def record(self) -> dict:
        return {
            "arg1": self.arg1,
            "arg2": self.arg2,
            "conn": self.connective,
            "pattern": self.pattern,
            "source_id": self.source_id,
            "offset": self.offset,
        }


@dataclass
class ExtractionReport:
    documents_seen: int = 0
    instances_emitted: int = 0
    per_connective_counts: Counter = field(default_factory=Counter)
    rejected_counts: Counter = field(default_factory=Counter)

    def to_json(self) -> dict:
        return {
            "documents_seen": self.documents_seen,
            "instances_emitted": self.instances_emitted,
            "per_connective_counts": dict(sorted(self.per_connective_counts.items())),
            "rejected_counts": dict(sorted(self.rejected_counts.items())),
        }


_SENT_END = re.compile(r"[.?!]+")


def split_sentences(text: str, abbreviations=DEFAULT_ABBREVIATIONS) -> list[tuple[int, int]]:
    """Character spans of sentences, split on [.?!] with an abbreviation blocklist."""
    spans = []
    start = 0
    for m in _SENT_END.finditer(text):
        end = m.end()
        if end < len(text) and not text[end].isspace():
            continue  # e.g. decimals "3.5in", file.txt
        prev = re.search(r"(\S+)$", text[start : m.start()])
        if prev:
            word = prev.group(1).lower().rstrip(".").lstrip("(\"'")
            if word in abbreviations or (len(word) == 1 and word.isalpha()):
                continue
        piece = text[start:end].strip()
        if piece:
            spans.append((start + text[start:end].index(piece[0]), end))
        start = end
    tail = text[start:].strip()
    if tail:
        spans.append((start + text[start:].index(tail[0]), len(text)))
    return spans


_WORDS_AT = re.compile(r"^\W*(\w+)(?:[ \t]+(\w+))?")


def _match_connective(text: str, lexicon: ConnectiveLexicon, pattern: str):
    """Try a 2-word then 1-word surface match at the start of ``text``.

    Returns (entry, end_of_surface_index) or None.
    """
    m = _WORDS_AT.match(text)
    if not m:
        return None
    w1, w2 = m.group(1), m.group(2)
    if w2 is not None:
        entry = lexicon.lookup((w1, w2))
        if entry is not None and pattern in entry.patterns:
            return entry, m.end(2)
    entry = lexicon.lookup((w1,))
    if entry is not None and pattern in entry.patterns:
        return entry, m.end(1)
    return None


def _strip_lead(text: str) -> str:
    return text.lstrip(" \t,").strip()


def extract_from_document(
    doc: str,
    lexicon: ConnectiveLexicon,
    rules: ExtractionRules,
    source_id: str = "doc",
    report: ExtractionReport | None = None,
) -> list[ExplicitInstance]:
    """All pattern matches in document order; unmatchable text yields []."""
    out = []
    sents = split_sentences(doc, rules.abbreviations)
    candidates = []  # (offset, pattern, arg1, arg2, canonical)
    for i, (s, e) in enumerate(sents):
        sent = doc[s:e]
        # inter-sentential: connective heads this sentence, previous sentence is arg1
        if i > 0:
            hit = _match_connective(sent, lexicon, INTER)
            if hit is not None:
                entry, conn_end = hit
                p_s, p_e = sents[i - 1]
                candidates.append(
                    (s, INTER, doc[p_s:p_e].strip(), _strip_lead(sent[conn_end:]), entry.canonical)
                )
        # intra-sentential: first ", <conn> " inside the sentence
        for m in re.finditer(r",", sent):
            hit = _match_connective(sent[m.end() :], lexicon, INTRA)
            if hit is None:
                continue
            entry, conn_end = hit
            arg1 = sent[: m.start()].strip()
            arg2 = _strip_lead(sent[m.end() + conn_end :])
            candidates.append((s + m.end(), INTRA, arg1, arg2, entry.canonical))
            break
    candidates.sort(key=lambda c: c[0])
    for offset, pattern, arg1, arg2, canonical in candidates:
        n1, n2 = len(arg1.split()), len(arg2.split())
        if n1 < rules.min_arg_tokens or n2 < rules.min_arg_tokens:
            if report is not None:
                report.rejected_counts["arg_too_short"] += 1
            continue
        if n1 > rules.max_arg_tokens or n2 > rules.max_arg_tokens:
            if report is not None:
                report.rejected_counts["arg_too_long"] += 1
            continue
        out.append(ExplicitInstance(arg1, arg2, canonical, pattern, source_id, offset))
    return out


def _split_documents(text: str) -> list[str]:
    blocks = re.split(r"\n\s*\n", text)
    return [b for b in (blk.strip() for blk in blocks) if b]


def _dedup_key(inst: ExplicitInstance) -> str:
    norm = "\x1f".join(
        " ".join(part.lower().split()) for part in (inst.arg1, inst.arg2, inst.connective)
    )
    return sha256_bytes(norm.encode("utf-8"))


def run_extraction(
    corpus_dir,
    lexicon: ConnectiveLexicon,
    rules: ExtractionRules,
    out_dir,
    seed: int = 0,
    threads: int = 1,
    shard_size: int = 10000,
) -> ExtractionReport:
    """Mine a directory of plain-text files into deduplicated record shards.

    Deterministic: files are processed in path order (workers may run in
    parallel but results merge in that order), duplicates drop by content
    hash, and an optional per-connective cap keeps the earliest matches.
    """
    corpus_dir = Path(corpus_dir)
    report = ExtractionReport()
    files = sorted(p for p in corpus_dir.rglob("*") if p.is_file())
    if not files:
        raise DataError(f"no input files under {corpus_dir}")

    def work(path: Path):
        local = ExtractionReport()
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable file %s: %s", path, exc)
            return None, local
        docs = _split_documents(text)
        rel = path.relative_to(corpus_dir).as_posix()
        results = []
        for k, docu in enumerate(docs):
            sid = rel if len(docs) == 1 else f"{rel}#{k}"
            local.documents_seen += 1
            results.append(extract_from_document(docu, lexicon, rules, sid, local))
        return results, local

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(work, files))
    else:
        outputs = [work(p) for p in files]

    seen: set[str] = set()
    kept: list[ExplicitInstance] = []
    for results, local in outputs:
        report.documents_seen += local.documents_seen
        report.rejected_counts.update(local.rejected_counts)
        if results is None:
            report.rejected_counts["unreadable_file"] += 1
            continue
        for doc_insts in results:
            for inst in doc_insts:
                key = _dedup_key(inst)
                if key in seen:
                    report.rejected_counts["duplicate"] += 1
                    continue
                cap = rules.per_connective_cap
                if cap is not None and report.per_connective_counts[inst.connective] >= cap:
                    report.rejected_counts["over_cap"] += 1
                    continue
                seen.add(key)
                report.per_connective_counts[inst.connective] += 1
                kept.append(inst)
    report.instances_emitted = len(kept)
    shards.write_shards(
        (inst.record() for inst in kept),
        out_dir,
        shard_size=shard_size,
        extra_manifest={"seed": seed, "kind": "explicit"},
    )
    return report


def split_train_valid(instances: Sequence, ratio: float, seed: int):
    """Disjoint (train, valid) split; ``ratio`` is the train fraction."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0,1), got {ratio}")
    n = len(instances)
    if n == 0:
        raise DataError("cannot split an empty instance list")
    n_valid = int(round((1.0 - ratio) * n))
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = set(perm[:n_valid].tolist())
    train = [instances[i] for i in range(n) if i not in valid_idx]
    valid = [instances[i] for i in range(n) if i in valid_idx]
    if not valid or not train:
        log.warning(
            "degenerate split: %d train / %d valid from %d instances", len(train), len(valid), n
        )
    return train, valid
