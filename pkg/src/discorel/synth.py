"""Controllable synthetic corpora with a known relation->connective map.

Each latent relation owns a disjoint cue-token set. In ``local`` mode one
cue from the relation's set sits on each side of the slot (last token of
arg1, first of arg2), so a window classifier solves the task. In
``long_range`` mode the far end of each argument carries one true cue and
one decoy cue from a different relation, in random order; the true
relation is the unique one whose cues appear in BOTH arguments. Either
argument alone is a 50/50 toss-up and the slot window is cue-free, so only
a model that combines information across the whole pair can solve it.

The explicit set writes (arg1, arg2, connective) shards in the extractor's
record format; the implicit sets drop the connective and keep the label.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import shards
from .datasets import LabeledInstance, write_labeled_jsonl
from .errors import ConfigError, DataError
from .util import stable_json
from .verbalizer import Verbalizer

MANIFEST_NAME = "synth_manifest.json"
VERBALIZER_NAME = "verbalizer.tsv"


@dataclass
class SynthSpec:
    n_relations: int = 4
    connectives_per_relation: int = 1
    cues_per_relation: int = 4
    vocab_size: int = 300
    arg_len_min: int = 6
    arg_len_max: int = 12
    cue_placement: str = "local"  # local | long_range
    cue_noise: float = 0.0
    explicit_n: int = 20000
    implicit_train_n: int = 2000
    implicit_test_n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_relations < 2:
            raise ConfigError("need at least 2 relations")
        if not 0.0 <= self.cue_noise < 0.5:
            raise ConfigError("cue_noise must lie in [0, 0.5)")
        if self.cue_placement not in ("local", "long_range"):
            raise ConfigError(f"unknown cue placement {self.cue_placement!r}")
        if self.cue_placement == "long_range":
            if self.n_relations < 3:
                raise ConfigError("long_range mode needs >= 3 relations for decoys")
            if self.arg_len_min < 5:
                raise ConfigError(
                    "long_range mode needs arg_len_min >= 5 to keep the slot window cue-free"
                )
        if self.arg_len_min < 2 or self.arg_len_max < self.arg_len_min:
            raise ConfigError("bad argument length range")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _letters(i: int) -> str:
    out = string.ascii_lowercase[i % 26]
    while i >= 26:
        i //= 26
        out = string.ascii_lowercase[i % 26] + out
    return out


class _Inventory:
    def __init__(self, spec: SynthSpec):
        k = spec.n_relations
        self.connectives = [
            [f"conn{r}{_letters(j)}" for j in range(spec.connectives_per_relation)]
            for r in range(k)
        ]
        self.cues = [
            [f"cue{r}{_letters(i)}" for i in range(spec.cues_per_relation)]
            for r in range(k)
        ]
        reserved = sum(len(c) for c in self.connectives) + sum(len(c) for c in self.cues)
        n_filler = spec.vocab_size - reserved
        if n_filler < 20:
            raise DataError(
                f"vocab_size={spec.vocab_size} too small for {reserved} disjoint "
                "cue/connective tokens plus a usable filler pool"
            )
        self.filler = [f"w{i:04d}" for i in range(n_filler)]
        flat = [t for group in self.cues for t in group]
        if len(set(flat)) != len(flat):
            raise DataError("cue-token sets overlap across relations")

    def label(self, r: int) -> str:
        return f"rel{r}"


def _make_pair(spec: SynthSpec, inv: _Inventory, rng: np.random.Generator):
    k = spec.n_relations
    r = int(rng.integers(k))
    n1 = int(rng.integers(spec.arg_len_min, spec.arg_len_max + 1))
    n2 = int(rng.integers(spec.arg_len_min, spec.arg_len_max + 1))
    arg1 = [inv.filler[i] for i in rng.integers(0, len(inv.filler), size=n1)]
    arg2 = [inv.filler[i] for i in rng.integers(0, len(inv.filler), size=n2)]

    def pick(group):
        return group[int(rng.integers(len(group)))]

    if spec.cue_placement == "local":
        arg1[-1] = pick(inv.cues[r])
        arg2[0] = pick(inv.cues[r])
    else:
        others = [x for x in range(k) if x != r]
        d1 = others[int(rng.integers(len(others)))]
        remaining = [x for x in others if x != d1]
        d2 = remaining[int(rng.integers(len(remaining)))]
        first = [pick(inv.cues[r]), pick(inv.cues[d1])]
        if rng.random() < 0.5:
            first.reverse()
        arg1[0], arg1[1] = first
        second = [pick(inv.cues[r]), pick(inv.cues[d2])]
        if rng.random() < 0.5:
            second.reverse()
        arg2[-2], arg2[-1] = second
    return " ".join(arg1), " ".join(arg2), r


def generate(spec: SynthSpec, out_dir) -> dict:
    """Write explicit shards, implicit train/test sets, the ground-truth
    manifest and the synthetic verbalizer. Deterministic given the seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inv = _Inventory(spec)
    rng = np.random.default_rng(spec.seed)
    k = spec.n_relations
    conn_cycle = [0] * k

    def connective_for(r: int) -> str:
        conns = inv.connectives[r]
        c = conns[conn_cycle[r] % len(conns)]
        conn_cycle[r] += 1
        return c

    def explicit_records():
        for i in range(spec.explicit_n):
            arg1, arg2, r = _make_pair(spec, inv, rng)
            r_conn = r
            if spec.cue_noise > 0.0 and rng.random() < spec.cue_noise:
                others = [x for x in range(k) if x != r]
                r_conn = others[int(rng.integers(len(others)))]
            yield {
                "arg1": arg1,
                "arg2": arg2,
                "conn": connective_for(r_conn),
                "pattern": "inter_sentential",
                "source_id": "synth",
                "offset": i,
            }

    explicit_dir = out_dir / "explicit"
    manifest = shards.write_shards(
        explicit_records(), explicit_dir, extra_manifest={"seed": spec.seed, "kind": "synthetic"}
    )

    def implicit(n):
        out = []
        for _ in range(n):
            arg1, arg2, r = _make_pair(spec, inv, rng)
            out.append(LabeledInstance(arg1, arg2, (inv.label(r),)))
        return out

    train = implicit(spec.implicit_train_n)
    test = implicit(spec.implicit_test_n)
    write_labeled_jsonl(out_dir / "implicit_train.jsonl", train)
    write_labeled_jsonl(out_dir / "implicit_test.jsonl", test)

    verbalizer = Verbalizer({inv.label(r): inv.connectives[r] for r in range(k)})
    verbalizer.save(out_dir / VERBALIZER_NAME)

    ground_truth = {
        "spec": spec.to_json(),
        "labels": [inv.label(r) for r in range(k)],
        "connectives": {inv.label(r): inv.connectives[r] for r in range(k)},
        "cues": {inv.label(r): inv.cues[r] for r in range(k)},
        "n_filler": len(inv.filler),
        "explicit_records": manifest["n_records"],
        "bayes_connective_accuracy": 1.0 - spec.cue_noise,
        "bayes_label_accuracy": 1.0,
    }
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        fh.write(stable_json(ground_truth) + "\n")
    return ground_truth


# ------------------------------------------------------------ window oracle

def _window_features(inst: LabeledInstance) -> list[str]:
    a = inst.arg1.split()[-2:]
    c = inst.arg2.split()[:2]
    toks = a + ["<SLOT>"] + c
    return [f"{x}~{y}" for x, y in zip(toks, toks[1:])]


def window_probe_accuracy(
    train: list[LabeledInstance], test: list[LabeledInstance]
) -> float:
    """Accuracy of a naive-Bayes bigram classifier over the 5-token window
    around the slot. Certifies that long_range data is locally uninformative
    (score near chance) while local data is not."""
    labels = sorted({lab for inst in train for lab in inst.gold_labels})
    counts = {lab: {} for lab in labels}
    totals = {lab: 0 for lab in labels}
    priors = {lab: 0 for lab in labels}
    vocab = set()
    for inst in train:
        lab = inst.gold_labels[0]
        priors[lab] += 1
        for f in _window_features(inst):
            counts[lab][f] = counts[lab].get(f, 0) + 1
            totals[lab] += 1
            vocab.add(f)
    v = max(len(vocab), 1)
    hits = 0
    for inst in test:
        best_lab, best_score = None, -np.inf
        for lab in labels:
            s = np.log(priors[lab] / len(train))
            for f in _window_features(inst):
                s += np.log((counts[lab].get(f, 0) + 1.0) / (totals[lab] + v))
            if s > best_score:
                best_lab, best_score = lab, s
        if best_lab in inst.gold_labels:
            hits += 1
    return hits / len(test)


def load_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no synthetic manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
