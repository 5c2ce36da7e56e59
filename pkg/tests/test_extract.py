from pathlib import Path

import pytest

from discorel.errors import DataError, ParseError
from discorel.extract import (
    ConnectiveLexicon,
    ExtractionRules,
    extract_from_document,
    load_lexicon,
    run_extraction,
    split_sentences,
    split_train_valid,
)
from discorel.shards import read_shards

LEXICON_TEXT = """\
however\thowever\tinter
therefore\ttherefore\tinter
meanwhile\tmeanwhile\tinter
for example\texample\tinter
because\tbecause\tinter,intra
"""


@pytest.fixture
def lexicon(tmp_path) -> ConnectiveLexicon:
    p = tmp_path / "lexicon.tsv"
    p.write_text(LEXICON_TEXT)
    return load_lexicon(p)


class TestLoadLexicon:
    def test_two_word_canonicalization(self, lexicon):
        assert lexicon.canonical("for example") == "example"

    def test_three_word_phrase_rejected(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("as soon as\tsoon\tinter\n")
        with pytest.raises(ParseError, match="as soon as"):
            load_lexicon(p)

    def test_identity_single_word(self, lexicon):
        assert lexicon.canonical("because") == "because"

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("because\tbecause\tinter\nnot enough fields\n")
        with pytest.raises(ParseError, match="2"):
            load_lexicon(p)

    def test_duplicate_surface_rejected(self, tmp_path):
        p = tmp_path / "dup.tsv"
        p.write_text("because\tbecause\tinter\nbecause\tsince\tintra\n")
        with pytest.raises(DataError, match="duplicate"):
            load_lexicon(p)

    def test_multiword_canonical_rejected(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("because\tbe cause\tinter\n")
        with pytest.raises(ParseError, match="one word"):
            load_lexicon(p)


class TestSentenceSplit:
    def test_basic(self):
        spans = split_sentences("Interest rates fell. However, exporters still struggled.")
        assert len(spans) == 2

    def test_abbreviation_not_boundary(self):
        text = "Mr. Smith arrived early. The meeting started."
        spans = split_sentences(text)
        assert len(spans) == 2
        assert text[spans[0][0] : spans[0][1]] == "Mr. Smith arrived early."


class TestExtractFromDocument:
    def test_inter_sentential_example(self, lexicon):
        doc = "Interest rates fell. However, exporters still struggled."
        out = extract_from_document(doc, lexicon, ExtractionRules())
        assert len(out) == 1
        inst = out[0]
        assert inst.arg1 == "Interest rates fell."
        assert inst.arg2 == "exporters still struggled."
        assert inst.connective == "however"
        assert inst.pattern == "inter_sentential"

    def test_intra_sentential_example(self, lexicon):
        doc = "He left, because the meeting ended early."
        out = extract_from_document(doc, lexicon, ExtractionRules(min_arg_tokens=2))
        assert len(out) == 1
        assert out[0].connective == "because"
        assert out[0].pattern == "intra_sentential"
        assert out[0].arg1 == "He left"
        assert out[0].arg2 == "the meeting ended early."

    def test_mid_clause_connective_no_match(self, lexicon):
        doc = "The exporters however struggled to gain ground."
        assert extract_from_document(doc, lexicon, ExtractionRules()) == []

    def test_case_insensitive_surface(self, lexicon):
        doc = "Rates fell hard. HOWEVER, exporters still struggled."
        out = extract_from_document(doc, lexicon, ExtractionRules())
        assert len(out) == 1 and out[0].connective == "however"

    def test_two_word_connective(self, lexicon):
        doc = "Trade kept shifting north. For example, exporters moved inland."
        out = extract_from_document(doc, lexicon, ExtractionRules())
        assert len(out) == 1 and out[0].connective == "example"
        assert out[0].arg2 == "exporters moved inland."

    def test_length_bounds_reject(self, lexicon):
        doc = "Rates fell. However, exporters still struggled badly."
        rules = ExtractionRules(min_arg_tokens=3)
        assert extract_from_document(doc, lexicon, rules) == []  # arg1 too short

    def test_connective_not_prefix_of_arg2(self, lexicon):
        docs = [
            "Interest rates fell. However, exporters still struggled.",
            "He left early today, because the meeting ended early.",
            "Trade kept shifting north. For example, exporters moved inland.",
        ]
        for doc in docs:
            for inst in extract_from_document(doc, lexicon, ExtractionRules(min_arg_tokens=2)):
                head = " ".join(inst.arg2.lower().split()[:2])
                assert not head.startswith(inst.connective + " ")
                assert inst.arg2.lower().split()[0] != inst.connective


DOC1 = "Prices rose sharply. However, demand kept climbing."
DOC2 = DOC1 + "\n\nRain kept falling. Meanwhile, crews kept working."
DOC3 = (
    "Exports fell last month. Therefore, factories cut output. "
    "The company waited, because orders kept shrinking."
)


def _write_corpus(root: Path):
    (root / "corpus").mkdir()
    (root / "corpus" / "doc1.txt").write_text(DOC1)
    (root / "corpus" / "doc2.txt").write_text(DOC2)
    (root / "corpus" / "doc3.txt").write_text(DOC3)
    return root / "corpus"


class TestRunExtraction:
    def test_dedup_fixture(self, tmp_path, lexicon):
        corpus = _write_corpus(tmp_path)
        report = run_extraction(corpus, lexicon, ExtractionRules(), tmp_path / "out", seed=0)
        # 5 matches, 1 exact duplicate
        assert report.instances_emitted == 4
        assert report.rejected_counts["duplicate"] == 1
        assert report.documents_seen == 4
        assert sum(report.per_connective_counts.values()) == report.instances_emitted

    def test_rerun_byte_identical(self, tmp_path, lexicon):
        corpus = _write_corpus(tmp_path)
        for name in ("a", "b"):
            run_extraction(corpus, lexicon, ExtractionRules(), tmp_path / name, seed=0)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_threads_match_serial(self, tmp_path, lexicon):
        corpus = _write_corpus(tmp_path)
        run_extraction(corpus, lexicon, ExtractionRules(), tmp_path / "s", seed=0, threads=1)
        run_extraction(corpus, lexicon, ExtractionRules(), tmp_path / "p", seed=0, threads=4)
        for f in sorted((tmp_path / "s").iterdir()):
            assert f.read_bytes() == (tmp_path / "p" / f.name).read_bytes()

    def test_per_connective_cap(self, tmp_path, lexicon):
        corpus = tmp_path / "caps"
        corpus.mkdir()
        for i in range(5):
            corpus.joinpath(f"doc{i}.txt").write_text(
                f"The plant number {i} closed, because orders kept falling fast."
            )
        rules = ExtractionRules(per_connective_cap=2)
        report = run_extraction(corpus, lexicon, rules, tmp_path / "out", seed=0)
        assert report.per_connective_counts["because"] == 2
        assert report.rejected_counts["over_cap"] == 3
        kept = [r["source_id"] for r in read_shards(tmp_path / "out")]
        assert kept == ["doc0.txt", "doc1.txt"]  # earliest in scan order

    def test_record_fields(self, tmp_path, lexicon):
        corpus = _write_corpus(tmp_path)
        run_extraction(corpus, lexicon, ExtractionRules(), tmp_path / "out", seed=0)
        recs = list(read_shards(tmp_path / "out"))
        assert {"arg1", "arg2", "conn", "pattern", "source_id", "offset"} == set(recs[0])
        assert [r["source_id"] for r in recs] == sorted(r["source_id"] for r in recs)


class TestSplitTrainValid:
    def test_nine_to_one(self):
        train, valid = split_train_valid(list(range(10)), 0.9, seed=0)
        assert len(train) == 9 and len(valid) == 1

    def test_single_instance_warns(self, caplog):
        import logging

        with caplog.at_level(logging.WARNING):
            train, valid = split_train_valid([42], 0.9, seed=0)
        assert train == [42] and valid == []
        assert any("degenerate" in r.message for r in caplog.records)

    def test_seed_changes_membership_not_sizes(self):
        items = list(range(40))
        t1, v1 = split_train_valid(items, 0.9, seed=1)
        t2, v2 = split_train_valid(items, 0.9, seed=2)
        assert len(v1) == len(v2) == 4
        assert set(v1) != set(v2)

    def test_disjoint_cover(self):
        items = list(range(37))
        train, valid = split_train_valid(items, 0.8, seed=5)
        assert sorted(train + valid) == items
        assert not set(train) & set(valid)

    def test_empty_errors(self):
        with pytest.raises(DataError):
            split_train_valid([], 0.9, seed=0)

    def test_bad_ratio_errors(self):
        with pytest.raises(DataError):
            split_train_valid([1, 2], 1.5, seed=0)
