import random

import pytest

from drsynth import fixtures
from drsynth.records import (
    Adjacency,
    ArgumentPair,
    CorpusFormatError,
    CrowdAnnotatedInstance,
    DEFAULT_SPLIT,
    RawDocument,
    SplitSpec,
    frequency_table_from_instances,
    gold_label_set,
    ingest_raw_corpus,
    ingest_source_corpus,
    ingest_target_corpus,
    majority_label,
    make_adjacent_pairs,
    source_record,
    target_record,
    write_records,
)
from drsynth.taxonomy import LabelError, resolve_label


def _votes(**kwargs):
    return {resolve_label(name.replace("_", "-")): n for name, n in kwargs.items()}


def _crowd(votes, domain="EP"):
    pair = ArgumentPair(arg1="First span.", arg2="Second span.", doc_id="d1")
    return CrowdAnnotatedInstance.from_votes(pair, votes, domain)


class TestGoldLabelSet:
    def test_two_labels_reach_threshold(self):
        inst = _crowd(_votes(cause=5, concession=4, conjunction=1))
        assert gold_label_set(inst) == {resolve_label("cause"), resolve_label("concession")}

    def test_unanimous(self):
        inst = _crowd(_votes(cause=10))
        assert gold_label_set(inst) == {resolve_label("cause")}

    def test_only_majority_reaches_threshold(self):
        inst = _crowd(_votes(cause=4, concession=3, conjunction=3))
        assert gold_label_set(inst) == {resolve_label("cause")}

    def test_exact_forty_percent_included(self):
        inst = _crowd(_votes(cause=4, concession=6))
        assert resolve_label("cause") in gold_label_set(inst)

    def test_no_relation_never_in_gold_set(self):
        inst = _crowd({**_votes(cause=6), resolve_label("no-relation"): 4})
        assert gold_label_set(inst) == {resolve_label("cause")}

    def test_majority_always_included_at_half_threshold(self):
        rng = random.Random(5)
        labels = [resolve_label(n) for n in ("cause", "concession", "conjunction", "contrast")]
        for _ in range(200):
            counts = [rng.randrange(0, 11) for _ in labels]
            total = sum(counts)
            if total == 0:
                continue
            votes = {l: c for l, c in zip(labels, counts) if c}
            pair = ArgumentPair(arg1="a", arg2="b")
            inst = CrowdAnnotatedInstance.from_votes(pair, votes, "EP", annotators=total)
            assert majority_label(inst) in gold_label_set(inst, threshold=0.5)

    def test_threshold_validation(self):
        inst = _crowd(_votes(cause=10))
        with pytest.raises(ValueError):
            gold_label_set(inst, threshold=0.0)


class TestMajority:
    def test_tie_breaks_by_global_label_order(self):
        inst = _crowd(_votes(cause=5, conjunction=5))
        assert majority_label(inst) == resolve_label("conjunction")

    def test_vote_sum_enforced(self):
        pair = ArgumentPair(arg1="a", arg2="b")
        with pytest.raises(ValueError, match="sum"):
            CrowdAnnotatedInstance.from_votes(pair, _votes(cause=7), "EP")


class TestAdjacentPairs:
    def test_three_sentences_two_pairs(self):
        doc = RawDocument(doc_id="d", domain="EP", sentences=("s one.", "s two.", "s three."))
        pairs = make_adjacent_pairs(doc)
        assert [(p.arg1, p.arg2) for p in pairs] == [
            ("s one.", "s two."),
            ("s two.", "s three."),
        ]
        assert all(p.adjacency is Adjacency.INTER for p in pairs)

    def test_single_sentence_yields_nothing(self, caplog):
        doc = RawDocument(doc_id="d", domain="EP", sentences=("only one.",))
        with caplog.at_level("WARNING"):
            assert make_adjacent_pairs(doc) == []
        assert any("fewer than 2" in m for m in caplog.messages)

    def test_large_document_count(self):
        doc = RawDocument(
            doc_id="big", domain="NV", sentences=tuple(f"sentence {i}." for i in range(4000))
        )
        assert len(make_adjacent_pairs(doc)) == 3999


class TestSplitSpec:
    def test_parse_ranges(self):
        split = SplitSpec.parse("2-20:0-1")
        assert split.train_sections == frozenset(range(2, 21))
        assert split.dev_sections == frozenset({0, 1})

    def test_overlap_resolved_dev_wins(self, caplog):
        with caplog.at_level("WARNING"):
            split = SplitSpec.parse("2-20:1-2")
        assert split.dev_sections == frozenset({1, 2})
        assert split.train_sections == frozenset(range(3, 21))
        assert not split.train_sections & split.dev_sections

    def test_default_split_is_disjoint(self):
        assert not DEFAULT_SPLIT.train_sections & DEFAULT_SPLIT.dev_sections
        assert DEFAULT_SPLIT.dev_sections == frozenset({1, 2})

    def test_comma_lists(self):
        split = SplitSpec.parse("2,4,6:1")
        assert split.train_sections == frozenset({2, 4, 6})


class TestSourceIngestion:
    def test_full_fixture_totals(self, tmp_path):
        path = tmp_path / "source.jsonl"
        fixtures.build_source_corpus(path, seed=0)
        result = ingest_source_corpus(path)
        assert len(result.train) == 17016
        assert len(result.dev) == 1641
        assert result.dropped == 0

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        result = ingest_source_corpus(path)
        assert result == ([], [], 0)

    def test_out_of_set_label_dropped(self, tmp_path):
        records = [
            {"arg1": "a", "arg2": "b", "doc_id": "d", "domain": "SRC",
             "label": "cause", "section": 5},
            {"arg1": "a", "arg2": "b", "doc_id": "d", "domain": "SRC",
             "label": "conjunction", "section": 5},
            {"arg1": "a", "arg2": "b", "doc_id": "d", "domain": "SRC",
             "label": "disjunction", "section": 5},
        ]
        path = tmp_path / "three.jsonl"
        write_records(records, path)
        result = ingest_source_corpus(path)
        assert len(result.train) == 2
        assert result.dropped == 1

    def test_first_sense_field_wins(self, tmp_path):
        records = [
            {"arg1": "a", "arg2": "b", "doc_id": "d", "domain": "SRC",
             "label": "cause|concession", "section": 5},
        ]
        path = tmp_path / "multi.jsonl"
        write_records(records, path)
        result = ingest_source_corpus(path)
        assert result.train[0].label == resolve_label("cause")

    def test_malformed_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"arg1": "a"}\nnot json at all\n')
        with pytest.raises(CorpusFormatError, match=":1"):
            ingest_source_corpus(path)

    def test_unknown_label_named(self, tmp_path):
        records = [
            {"arg1": "a", "arg2": "b", "doc_id": "d", "domain": "SRC",
             "label": "totally-made-up", "section": 5},
        ]
        path = tmp_path / "unknown.jsonl"
        write_records(records, path)
        with pytest.raises(LabelError, match="totally-made-up"):
            ingest_source_corpus(path)


class TestTargetIngestion:
    def test_full_fixture_domain_totals(self, tmp_path):
        path = tmp_path / "target.jsonl"
        fixtures.build_target_corpus(path, seed=1)
        instances = ingest_target_corpus(path)
        per_domain = {}
        for inst in instances:
            per_domain[inst.domain] = per_domain.get(inst.domain, 0) + 1
        assert per_domain == {"EP": 2704, "WK": 615, "NV": 2884}
        assert len(instances) == 6203

    def test_unanimous_record(self, tmp_path):
        inst = _crowd(_votes(cause=10))
        path = tmp_path / "one.jsonl"
        write_records([target_record(inst)], path)
        loaded = ingest_target_corpus(path)
        assert len(loaded) == 1
        assert majority_label(loaded[0]) == resolve_label("cause")

    def test_no_relation_majority_excluded(self, tmp_path):
        votes = {**_votes(cause=4), resolve_label("no-relation"): 6}
        inst = _crowd(votes)
        path = tmp_path / "norel.jsonl"
        write_records([target_record(inst)], path)
        assert ingest_target_corpus(path) == []

    def test_vote_sum_error(self, tmp_path):
        record = {
            "arg1": "a", "arg2": "b", "doc_id": "d", "domain": "EP",
            "votes": {"cause": 3},
        }
        path = tmp_path / "badvotes.jsonl"
        write_records([record], path)
        with pytest.raises(CorpusFormatError, match="sum"):
            ingest_target_corpus(path)


class TestRoundTrip:
    def test_source_round_trip(self, tiny_corpus_dir, tmp_path):
        first = ingest_source_corpus(tiny_corpus_dir / "source.jsonl")
        out = tmp_path / "rewritten.jsonl"
        write_records(
            [source_record(i, section=5) for i in first.train]
            + [source_record(i, section=1) for i in first.dev],
            out,
        )
        second = ingest_source_corpus(out)
        assert second.train == first.train
        assert second.dev == first.dev

    def test_target_round_trip(self, tiny_corpus_dir, tmp_path):
        first = ingest_target_corpus(tiny_corpus_dir / "target.jsonl")
        out = tmp_path / "rewritten.jsonl"
        write_records([target_record(i) for i in first], out)
        assert ingest_target_corpus(out) == first

    def test_fixture_build_is_byte_deterministic(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        fixtures.build_source_corpus(a, counts=fixtures.tiny_source_counts(), seed=3)
        fixtures.build_source_corpus(b, counts=fixtures.tiny_source_counts(), seed=3)
        assert a.read_bytes() == b.read_bytes()


class TestRawIngestion:
    def test_documents_group_by_doc_id(self, tmp_path):
        records = [
            {"doc_id": "d1", "domain": "EP", "sentence": "one."},
            {"doc_id": "d1", "domain": "EP", "sentence": "two."},
            {"doc_id": "d2", "domain": "WK", "sentence": "three."},
        ]
        path = tmp_path / "raw.jsonl"
        write_records(records, path)
        docs = ingest_raw_corpus(path)
        assert [(d.doc_id, len(d.sentences)) for d in docs] == [("d1", 2), ("d2", 1)]
        assert docs[0].sentences == ("one.", "two.")

    def test_empty_sentence_rejected(self):
        with pytest.raises(ValueError, match="empty sentence"):
            RawDocument(doc_id="d", domain="EP", sentences=("ok.", "   "))


class TestArgumentPair:
    def test_whitespace_normalized(self):
        pair = ArgumentPair(arg1="  a   b  ", arg2="c\t d")
        assert pair.arg1 == "a b"
        assert pair.arg2 == "c d"

    def test_empty_span_rejected(self):
        with pytest.raises(ValueError):
            ArgumentPair(arg1="  ", arg2="b")


def test_frequency_scope_filters_intra_sentential(tiny_source):
    table_all = frequency_table_from_instances(tiny_source.train, scope="all")
    table_inter = frequency_table_from_instances(tiny_source.train)
    assert table_all.total == len(tiny_source.train)
    assert table_inter.total <= table_all.total
    assert table_inter.scope == "inter-sentential-only"
    with pytest.raises(ValueError):
        frequency_table_from_instances(tiny_source.train, scope="bogus")
