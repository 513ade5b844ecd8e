import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stepcrs.dialogue_corpus import (CLS_ID, EOS_ID, ITEM, ITEM_ID, UNK_ID, CorpusError, Dialogue, FrozenTextEncoder,
                                     Turn, Vocabulary, build_vocabulary, context_token_ids, detokenize,
                                     dialogue_samples, generate_synthetic_corpus, kg_item_neighbourhood, mask_items,
                                     read_jsonl, split_words, tokenize, validate_dialogue, write_jsonl)
from stepcrs.knowledge_graph import KnowledgeGraph, generate_synthetic_kg


@pytest.fixture(scope="module")
def kg():
    return generate_synthetic_kg(200, 4, 64, seed=0)


@pytest.fixture(scope="module")
def corpus(kg):
    return generate_synthetic_corpus(kg, 200, seed=0)


def test_mask_items_by_name_and_span():
    assert mask_items("Have you seen Heat or heat 2?", ["Heat"]) == f"Have you seen {ITEM} or heat 2?"
    assert mask_items("Heat and Heat", ["Heat", "Heat"]) == f"{ITEM} and {ITEM}"
    assert mask_items("see Alien now", [(4, 9)]) == f"see {ITEM} now"
    # the name is gone after the first pass, so masking again is a no-op
    once = mask_items("try Jaws", ["Jaws"])
    assert mask_items(once, ["Jaws"]) == once
    with pytest.raises(ValueError):
        mask_items("abc", [(0, 2), (1, 3)])


def test_split_words_keeps_item_token():
    assert split_words(f"How about {ITEM} ?") == ["how", "about", ITEM, "?"]


def test_vocabulary_round_trip_and_unknowns():
    v = Vocabulary.build(["a b", "c"], extra=["Zed"])
    assert tokenize(v, "a zed q") == [v.index["a"], v.index["zed"], UNK_ID]
    assert tokenize(v, ITEM) == [ITEM_ID]
    assert Vocabulary.from_json(v.to_json()).tokens == v.tokens
    with pytest.raises(CorpusError):
        Vocabulary.from_json(["x"] * 7)
    assert detokenize(v, [v.index["a"], EOS_ID, v.index["c"]]) == "a c"


def test_context_left_truncation():
    v = Vocabulary.build(["a b c d"])
    ids = context_token_ids(v, [Turn("user", "a b"), Turn("recommender", "c d")], max_len=3)
    assert ids == [EOS_ID, v.index["c"], v.index["d"]]


def test_samples_are_recommender_turns_up_to_target():
    d = Dialogue("x", [Turn("user", "hi"), Turn("recommender", "how about A", [0]), Turn("user", "ok"),
                       Turn("recommender", "bye"), Turn("user", "after target")], target_turn=3)
    s = dialogue_samples(d)
    assert [x.id for x in s] == ["x:1", "x:3"]
    assert len(s[1].context) == 3 and s[0].gold_items == [0]


def test_validate_dialogue_errors(kg):
    item = kg.item_ids[0]
    with pytest.raises(CorpusError):
        validate_dialogue(Dialogue("a", [Turn("user", "x")], 0), kg)
    with pytest.raises(CorpusError):
        validate_dialogue(Dialogue("a", [Turn("bot", "x"), Turn("recommender", "y")], 1), kg)
    non_item = next(e for e in range(kg.num_entities) if e not in set(kg.item_ids))
    with pytest.raises(CorpusError):
        validate_dialogue(Dialogue("a", [Turn("user", "x"), Turn("recommender", "y", [non_item])], 1), kg)
    validate_dialogue(Dialogue("a", [Turn("user", "x"), Turn("recommender", "y", [item])], 1), kg)


def test_jsonl_round_trip_and_errors(tmp_path, corpus, kg):
    p = tmp_path / "c.jsonl"
    write_jsonl(corpus.train[:10], p)
    back = read_jsonl(p, kg)
    assert [d.to_json() for d in back] == [d.to_json() for d in corpus.train[:10]]
    p.write_text('{"id": 1}\n')
    with pytest.raises(CorpusError):
        read_jsonl(p)
    p.write_text("not json\n")
    with pytest.raises(CorpusError, match=":1:"):
        read_jsonl(p)


def test_corpus_deterministic_and_split(kg, corpus):
    again = generate_synthetic_corpus(kg, 200, seed=0)
    assert [d.to_json() for d in again.all] == [d.to_json() for d in corpus.all]
    assert (len(corpus.train), len(corpus.valid), len(corpus.test)) == (160, 20, 20)
    assert len({d.id for d in corpus.all}) == 200
    for d in corpus.all:
        validate_dialogue(d, kg)


def test_full_signal_gold_items_in_neighbourhood(kg):
    c = generate_synthetic_corpus(kg, 100, seed=3, p_signal=1.0)
    adj = kg.undirected_adjacency()
    for d in c.all:
        seeds = d.turns[0].entities
        hood = kg_item_neighbourhood(kg, seeds, adjacency=adj)
        for t in d.turns:
            if t.speaker == "recommender" and t.items:
                assert t.items[0] in hood


def test_neighbourhood_bfs_small():
    g = KnowledgeGraph.from_named_triples([("I1", "r", "a"), ("I2", "r", "a"), ("I3", "r", "b")],
                                          ["I1", "I2", "I3"])
    a = g.entity_index["a"]
    assert kg_item_neighbourhood(g, [a]) == {g.entity_index["I1"], g.entity_index["I2"]}


def test_small_graph_rejected():
    with pytest.raises(CorpusError):
        generate_synthetic_corpus(generate_synthetic_kg(30, 2, 10), 5)


def test_vocabulary_covers_entity_names(kg, corpus):
    v = build_vocabulary(corpus.train, kg)
    for name in kg.entity_names[:20]:
        assert UNK_ID not in tokenize(v, name)


class TestEncoder:
    def test_shapes_frozen_and_cls_row(self):
        enc = FrozenTextEncoder(30, 16, seed=1)
        out, cls = enc.encode([7, 8, 9])
        assert out.shape == (4, 16) and cls.shape == (16,)
        assert np.all(enc.params["tok_emb"][CLS_ID] == 0)
        with pytest.raises(ValueError):
            enc.params["w_q"][0, 0] = 1.0
        assert not cls.requires_grad

    def test_deterministic_hash(self):
        assert FrozenTextEncoder(30, 16, seed=1).parameter_hash() == FrozenTextEncoder(30, 16, seed=1).parameter_hash()
        assert FrozenTextEncoder(30, 16, seed=1).parameter_hash() != FrozenTextEncoder(30, 16, seed=2).parameter_hash()

    def test_empty_context_rejected(self):
        with pytest.raises(CorpusError):
            FrozenTextEncoder(10, 4).encode([])

    @given(st.lists(st.integers(6, 29), min_size=1, max_size=12))
    def test_output_scale(self, ids):
        enc = FrozenTextEncoder(30, 16, seed=0, out_scale=0.125)
        _, cls = enc.encode(ids)
        # layer-normed rows have norm sqrt(D) before scaling
        assert np.linalg.norm(cls.data) == pytest.approx(0.125 * 4.0, rel=1e-3)
