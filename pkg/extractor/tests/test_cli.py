"""Extractor command-line surface."""

import json

from pairjoint_extractor import read_records
from pairjoint_extractor.cli import main


def run(*args):
    return main([str(a) for a in args])


class TestExtractCommand:
    def test_extract_writes_records_and_manifest(self, tmp_path, tiny_bert_dir,
                                                 english_corpus):
        out = tmp_path / "out"
        code = run("extract", "--model", tiny_bert_dir, "--corpus", english_corpus,
                   "--out", out, "--count", "3", "--seed", "1", "--batch-size", "8")
        assert code == 0
        records, _ = read_records(out / "records.pjr")
        assert len(records) == 3
        manifest = (out / "manifest.txt").read_text()
        assert "scheme: contiguous_pairs" in manifest
        assert "param.count: 3" in manifest

    def test_exhausted_corpus_is_an_input_error(self, tmp_path, tiny_bert_dir):
        corpus = tmp_path / "tiny.txt"
        corpus.write_text("the man\n")
        assert run("extract", "--model", tiny_bert_dir, "--corpus", corpus,
                   "--out", tmp_path / "o", "--count", "50") == 2

    def test_unknown_scheme_rejected(self, tmp_path, tiny_bert_dir, english_corpus):
        assert run("extract", "--model", tiny_bert_dir, "--corpus", english_corpus,
                   "--out", tmp_path / "o", "--scheme", "windows") == 2


class TestAnnotateCommand:
    def test_annotate_round_trip(self, tmp_path, tiny_bert_dir):
        corpus = tmp_path / "c.txt"
        corpus.write_text("the man was at the casino\n")
        out = tmp_path / "out"
        assert run("extract", "--model", tiny_bert_dir, "--corpus", corpus,
                   "--out", out, "--count", "1", "--seed", "4",
                   "--scheme", "random_pairs") == 0
        parses = tmp_path / "parses.jsonl"
        parses.write_text(json.dumps({
            "words": ["the", "man", "was", "at", "the", "casino"],
            "heads": [1, 2, -1, 2, 5, 3]}) + "\n")
        annotated = tmp_path / "annotated.pjr"
        assert run("annotate-syntax", "--records", out / "records.pjr",
                   "--parses", parses, "--model", tiny_bert_dir,
                   "--out", annotated) == 0
        records, _ = read_records(annotated)
        assert records[0].syntactic_distance is not None

    def test_no_alignment_is_an_error(self, tmp_path, tiny_bert_dir, english_corpus):
        out = tmp_path / "out"
        assert run("extract", "--model", tiny_bert_dir, "--corpus", english_corpus,
                   "--out", out, "--count", "1") == 0
        parses = tmp_path / "parses.jsonl"
        parses.write_text(json.dumps({"words": ["t0"], "heads": [-1]}) + "\n")
        assert run("annotate-syntax", "--records", out / "records.pjr",
                   "--parses", parses, "--model", tiny_bert_dir,
                   "--out", tmp_path / "x.pjr") == 2
