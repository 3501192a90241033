import json
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoedit.corpus import (
    CF_ORGS,
    ENTITY_POOL_SIZE,
    EditInstance,
    Rank,
    RankedQuery,
    Tokenizer,
    TRUE_ORGS,
    build_tokenizer,
    load_jsonl,
    save_jsonl,
    synth_corpus,
    synth_pretrain_texts,
    true_fact,
)
from evoedit.errors import ConfigError, DataError


def _valid_instance(i=0):
    return EditInstance(
        id=f"x-{i}",
        edit_text="alpha beta gamma delta epsilon zeta eta theta iota kappa lambda",
        queries=[RankedQuery(rank, f"q{rank.value}", f"a{rank.value}") for rank in Rank],
    )


class TestSchema:
    def test_missing_rank_rejected(self):
        queries = [RankedQuery(r, "q", "a") for r in Rank if r != Rank.R3_constrained]
        with pytest.raises(DataError, match="R3_constrained"):
            EditInstance(id="bad", edit_text="w " * 12, queries=queries)

    def test_short_edit_text_rejected(self):
        with pytest.raises(DataError, match="fewer than"):
            EditInstance(id="short", edit_text="too short",
                         queries=[RankedQuery(r, "q", "a") for r in Rank])

    def test_empty_query_rejected(self):
        with pytest.raises(DataError):
            RankedQuery(Rank.R1_memory, "", "a")


class TestJsonl:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_jsonl(path) == []

    def test_round_trip(self, tmp_path):
        instances = synth_corpus(seed=3, n=7)
        path = tmp_path / "c.jsonl"
        save_jsonl(path, instances)
        loaded = load_jsonl(path)
        assert [i.to_dict() for i in loaded] == [i.to_dict() for i in instances]
        # a second save of the loaded corpus is byte-identical
        path2 = tmp_path / "c2.jsonl"
        save_jsonl(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_parse_error_names_line_and_id(self, tmp_path):
        good = _valid_instance().to_dict()
        bad = _valid_instance(1).to_dict()
        bad["queries"] = [q for q in bad["queries"] if q["rank"] != "R3_constrained"]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(DataError) as err:
            load_jsonl(path)
        assert "line 2" in str(err.value)
        assert "x-1" in str(err.value)

    def test_malformed_json_reported_with_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps(_valid_instance().to_dict()) + "\n{not json\n")
        with pytest.raises(DataError, match="line 2"):
            load_jsonl(path)


class TestSynth:
    def test_deterministic(self):
        a = synth_corpus(seed=11, n=20)
        b = synth_corpus(seed=11, n=20)
        assert [i.to_dict() for i in a] == [i.to_dict() for i in b]

    def test_different_seed_differs(self):
        a = synth_corpus(seed=1, n=10)
        b = synth_corpus(seed=2, n=10)
        assert [i.to_dict() for i in a] != [i.to_dict() for i in b]

    def test_counts(self):
        instances = synth_corpus(seed=0, n=100)
        assert len(instances) == 100
        assert sum(len(i.queries) for i in instances) == 800
        for inst in instances:
            for rank in Rank:
                assert len(inst.queries_for(rank)) == 2

    def test_duration_answers_consistent(self):
        for inst in synth_corpus(seed=5, n=40):
            meta = inst.metadata
            duration = meta["end_year"] - meta["start_year"]
            for q in inst.queries_for(Rank.R4_reasoning):
                assert q.answer == f"{duration} years"

    def test_rank1_answers_are_verbatim_spans(self):
        for inst in synth_corpus(seed=9, n=30):
            for q in inst.queries_for(Rank.R1_memory):
                assert q.answer in inst.edit_text

    def test_entities_unique_within_corpus(self):
        instances = synth_corpus(seed=4, n=60)
        entities = [i.metadata["entity"] for i in instances]
        assert len(set(entities)) == len(entities)

    def test_counterfactuals_disjoint_from_true_facts(self):
        cf_words = {w.lower() for org in CF_ORGS for w in org.split()}
        true_words = {w.lower() for org in TRUE_ORGS for w in org.split()}
        assert not cf_words & true_words
        pretrain_words = {w.lower() for t in synth_pretrain_texts(0) for w in t.split()}
        assert not cf_words & {w.rstrip(".") for w in pretrain_words}
        # and the counterfactual span differs from the entity's true fact
        for inst in synth_corpus(seed=2, n=25):
            meta = inst.metadata
            assert meta["counterfactual_object"] != meta["true_object"]

    def test_pool_bounds(self):
        with pytest.raises(DataError):
            synth_corpus(seed=0, n=0)
        with pytest.raises(DataError):
            synth_corpus(seed=0, n=ENTITY_POOL_SIZE + 1)

    @given(st.integers(min_value=0, max_value=10 ** 6))
    @settings(max_examples=1000, deadline=None)
    def test_every_seed_yields_valid_instances(self, seed):
        for inst in synth_corpus(seed=seed, n=2):
            assert len(inst.edit_text.split()) >= 10
            for rank in Rank:
                assert inst.queries_for(rank)

    def test_true_facts_stable(self):
        assert true_fact(3) == true_fact(3)
        assert true_fact(3)["end"] > true_fact(3)["start"]


class TestByteTokenizer:
    def test_fixed_vocab_and_specials(self):
        tok = Tokenizer(mode="byte")
        assert tok.vocab_size == 259
        assert tok.specials == {"bos": 256, "eos": 257, "pad": 258}

    def test_byte_identity(self):
        assert Tokenizer(mode="byte").encode("ab") == [97, 98]

    @given(st.text(alphabet=string.printable, min_size=1, max_size=80))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_printable(self, text):
        tok = Tokenizer(mode="byte")
        assert tok.decode(tok.encode(text)) == text

    def test_decode_skips_specials(self):
        tok = Tokenizer(mode="byte")
        assert tok.decode([tok.bos_id, 104, 105, tok.eos_id]) == "hi"


class TestBpeTokenizer:
    def test_compression_sanity(self):
        texts = ["aaaa aaaa aaaa aaaa"] * 4
        tok = build_tokenizer(texts, mode="bpe", vocab_size=300)
        assert len(tok.encode("aaaa aaaa")) < len("aaaa aaaa")

    def test_round_trip_full_corpus(self):
        texts = synth_pretrain_texts(1)[:200]
        tok = build_tokenizer(texts, mode="bpe", vocab_size=400)
        for t in texts:
            assert tok.decode(tok.encode(t)) == t
        # unseen counterfactual text still round-trips via byte fallback
        for inst in synth_corpus(seed=0, n=5):
            assert tok.decode(tok.encode(inst.edit_text)) == inst.edit_text

    def test_merges_never_cross_words(self):
        texts = ["the cat the cat the cat", "cat the cat the"] * 3
        tok = build_tokenizer(texts, mode="bpe", vocab_size=280)
        for i, piece in tok.vocab().items():
            if i >= 259 and len(piece) > 1:
                assert " " not in piece[1:], f"merge crosses a word boundary: {piece!r}"

    def test_deterministic_training(self):
        texts = synth_pretrain_texts(2)[:100]
        a = build_tokenizer(texts, mode="bpe", vocab_size=320)
        b = build_tokenizer(texts, mode="bpe", vocab_size=320)
        assert a.merges == b.merges

    def test_min_vocab_enforced(self):
        with pytest.raises(ConfigError):
            build_tokenizer(["abc"], mode="bpe", vocab_size=259)

    def test_save_load_round_trip(self, tmp_path):
        texts = synth_pretrain_texts(3)[:80]
        tok = build_tokenizer(texts, mode="bpe", vocab_size=300)
        path = tmp_path / "tok.json"
        tok.save(path)
        loaded = Tokenizer.load(path)
        assert loaded.merges == tok.merges
        assert loaded.vocab_size == tok.vocab_size
        sample = texts[0]
        assert loaded.encode(sample) == tok.encode(sample)
        assert loaded.content_hash() == tok.content_hash()
