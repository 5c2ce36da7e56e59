"""Loaders for user-exported labeled corpora and synthetic labeled sets.

Licensed corpora are not shipped; the loaders consume documented flat
exports. PDTB: CSV with columns {section, arg1, arg2, conn_list, sense_list}
("|"-separated lists), split by WSJ section into train 2-20 / valid 0-1 /
test 21-22. CoNLL-style sets: line-delimited JSON {arg1, arg2, senses[]}.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, ParseError
from .util import stable_json

PDTB_SPLITS = {
    "train": tuple(range(2, 21)),
    "valid": (0, 1),
    "test": (21, 22),
}
PDTB_SECTIONS = tuple(range(0, 23))


@dataclass
class LabeledInstance:
    arg1: str
    arg2: str
    gold_labels: tuple[str, ...]
    gold_connectives: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.gold_labels:
            raise DataError("labeled instance without gold labels")


def expand_for_training(instances: Iterable[LabeledInstance]):
    """Multi-sense instances become one row per sense (training only)."""
    rows = []
    for inst in instances:
        for lab in inst.gold_labels:
            rows.append((inst.arg1, inst.arg2, lab, inst.gold_labels))
    return rows


def _map_sense(sense: str, level: str, label_set: set[str]) -> str | None:
    parts = sense.split(".")
    if level == "top":
        cand = parts[0]
    elif level == "second":
        cand = ".".join(parts[:2])
    else:
        raise DataError(f"unknown PDTB level {level!r} (expected top|second)")
    return cand if cand in label_set else None


def load_pdtb(csv_path, level: str, label_set: Sequence[str]) -> dict[str, list[LabeledInstance]]:
    """Load a PDTB export and split by section. ``csv_path`` may be a file
    or a directory of CSVs. Senses outside ``label_set`` are dropped; an
    instance with no remaining sense is skipped."""
    csv_path = Path(csv_path)
    files = sorted(csv_path.glob("*.csv")) if csv_path.is_dir() else [csv_path]
    if not files:
        raise DataError(f"no CSV files under {csv_path}")
    labels = set(label_set)
    splits: dict[str, list[LabeledInstance]] = {k: [] for k in PDTB_SPLITS}
    sections_seen: set[int] = set()
    for path in files:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"section", "arg1", "arg2", "conn_list", "sense_list"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise ParseError(
                    f"expected columns {sorted(need)}, got {reader.fieldnames}",
                    path=str(path),
                )
            for n, row in enumerate(reader, start=2):
                try:
                    section = int(row["section"])
                except (TypeError, ValueError):
                    raise ParseError(
                        f"bad section {row['section']!r}", path=str(path), line=n
                    ) from None
                sections_seen.add(section)
                senses = [s.strip() for s in row["sense_list"].split("|") if s.strip()]
                mapped = []
                for s in senses:
                    lab = _map_sense(s, level, labels)
                    if lab is not None and lab not in mapped:
                        mapped.append(lab)
                if not mapped:
                    continue
                conns = tuple(
                    c.strip() for c in row["conn_list"].split("|") if c.strip()
                )
                inst = LabeledInstance(row["arg1"], row["arg2"], tuple(mapped), conns)
                for split, sections in PDTB_SPLITS.items():
                    if section in sections:
                        splits[split].append(inst)
                        break
    missing = sorted(set(PDTB_SECTIONS) - sections_seen)
    if missing:
        raise DataError(f"PDTB export is missing sections {missing}")
    return splits


def load_labeled_jsonl(path) -> list[LabeledInstance]:
    """Line-delimited {arg1, arg2, senses[], conn?} records."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), path=str(path), line=n) from exc
            senses = rec.get("senses") or []
            if not senses:
                raise ParseError("record without senses", path=str(path), line=n)
            conns = tuple(rec.get("conn", "").split("|")) if rec.get("conn") else ()
            out.append(LabeledInstance(rec["arg1"], rec["arg2"], tuple(senses), conns))
    if not out:
        raise DataError(f"no labeled records in {path}")
    return out


def write_labeled_jsonl(path, instances: Iterable[LabeledInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {"arg1": inst.arg1, "arg2": inst.arg2, "senses": list(inst.gold_labels)}
            if inst.gold_connectives:
                rec["conn"] = "|".join(inst.gold_connectives)
            fh.write(stable_json(rec) + "\n")


def load_conll(json_dir, split: str) -> list[LabeledInstance]:
    """CoNLL-style export: <split>.jsonl under ``json_dir``; split is one of
    train, dev, test, blind."""
    if split not in ("train", "dev", "test", "blind"):
        raise DataError(f"unknown CoNLL split {split!r}")
    path = Path(json_dir) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing CoNLL export {path}")
    return load_labeled_jsonl(path)


def dataset_statistics(splits: dict[str, list[LabeledInstance]], labels: Sequence[str]):
    """Distinct-instance totals plus per-class sense-occurrence counts.

    Multi-sense instances count once in the total and once per sense in the
    class rows, so class columns may sum to more than the total.
    """
    stats = {"labels": list(labels), "splits": {}}
    for split, instances in splits.items():
        per_class = {lab: 0 for lab in labels}
        for inst in instances:
            for lab in inst.gold_labels:
                if lab in per_class:
                    per_class[lab] += 1
        stats["splits"][split] = {"total": len(instances), "per_class": per_class}
    return stats
