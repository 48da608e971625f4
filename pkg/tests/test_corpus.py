import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advfusion.corpus import (Corpus, Example, gen_synthetic, load_jsonl, mask_method_name, masked_text, save_jsonl,
                              split, subtokenize)
from advfusion.errors import ConfigError, DataError
from advfusion.tokenizer import NAME_MASK, SPECIALS, Vocabulary, train_bpe


@pytest.fixture(scope="module")
def vocab():
    c = gen_synthetic(seed=0)
    return train_bpe([e.code for e in c.examples] + [e.doc for e in c.examples], 500)


def write_lines(tmp_path, lines):
    p = tmp_path / "c.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


# -- jsonl -------------------------------------------------------------------


def test_load_three(tmp_path):
    rows = [{"lang": "go", "code": "func a() {}", "doc": "a"}, {"lang": "go", "code": "func b() {}", "doc": "b"},
            {"lang": "ruby", "code": "def c end", "doc": "c", "name": "c"}]
    c = load_jsonl(write_lines(tmp_path, [json.dumps(r) for r in rows]))
    assert len(c) == 3 and c.counts == {"go": 2, "ruby": 1}
    assert c.examples[2].name == "c"


def test_missing_code_names_line(tmp_path):
    lines = [json.dumps({"lang": "go", "code": "x", "doc": "d"}), json.dumps({"lang": "go", "doc": "d"})]
    with pytest.raises(DataError, match=":2:.*code"):
        load_jsonl(write_lines(tmp_path, lines))


def test_invalid_json_line(tmp_path):
    with pytest.raises(DataError, match=":1:"):
        load_jsonl(write_lines(tmp_path, ["{nope"]))


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(DataError):
        load_jsonl(p)


def test_duplicates_kept(tmp_path):
    line = json.dumps({"lang": "go", "code": "x", "doc": "d"})
    assert len(load_jsonl(write_lines(tmp_path, [line, line]))) == 2


def test_jsonl_round_trip(tmp_path):
    c = gen_synthetic(seed=3, per_lang_counts=[5, 5, 2])
    save_jsonl(c, tmp_path / "x.jsonl")
    assert load_jsonl(tmp_path / "x.jsonl").examples == c.examples


# -- tokenizer ---------------------------------------------------------------


def test_bpe_single_merge():
    v = train_bpe(["aaaa"], 263)
    assert v.merges == [(b"a", b"a")]


def test_bpe_tie_breaks_lexicographically():
    # "ab" and "cd" both occur once; the smaller pair wins
    v = train_bpe(["cd", "ab"], 263)
    assert v.merges[0] == (b"a", b"b")


def test_bpe_too_small():
    with pytest.raises(ConfigError):
        train_bpe(["abc"], 262)


def test_bpe_deterministic(vocab):
    c = gen_synthetic(seed=0)
    again = train_bpe([e.code for e in c.examples] + [e.doc for e in c.examples], 500)
    assert again.merges == vocab.merges


def test_specials_reserved(vocab):
    assert [vocab.token_text(i) for i in range(6)] == list(SPECIALS)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_round_trip_any_text(vocab, text):
    assert vocab.decode(vocab.encode(text)) == text


def test_encode_decode_ids(vocab):
    ids = vocab.encode("def get_user_name(ctx) ctx.user end")
    assert vocab.encode(vocab.decode(ids)) == ids


def test_vocab_file_round_trip(vocab, tmp_path):
    vocab.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text().splitlines()
    assert lines[:6] == list(SPECIALS)
    again = Vocabulary.load(tmp_path / "v.txt")
    assert again.merges == vocab.merges and again.encode("return x") == vocab.encode("return x")


# -- method names ------------------------------------------------------------


def test_whole_token_masking(vocab):
    ex = Example("js", "fn add(a,b){add2(a)}", "adds", "add")
    assert masked_text(ex) == "fn <name>(a,b){add2(a)}"
    m = mask_method_name(ex, vocab)
    assert m.input_ids.count(NAME_MASK) == 1


def test_name_twice(vocab):
    ex = Example("py", "def fact(n): return n * fact(n - 1)", "factorial", "fact")
    assert mask_method_name(ex, vocab).input_ids.count(NAME_MASK) == 2


def test_subtoken_target(vocab):
    assert subtokenize("getUserName") == ["get", "user", "name"]
    assert subtokenize("parse_HTTPRequest2") == ["parse", "http", "request", "2"]
    m = mask_method_name(Example("java", "void getUserName() {}", "d", "getUserName"), vocab)
    assert m.subtokens == ["get", "user", "name"] and vocab.decode(m.target_ids) == "get user name"


def test_name_absent(vocab):
    with pytest.raises(DataError):
        mask_method_name(Example("go", "func a() {}", "d", "b"), vocab)
    with pytest.raises(DataError):
        mask_method_name(Example("go", "func a() {}", "d", None), vocab)


def test_masked_input_never_contains_name(vocab):
    for ex in gen_synthetic(seed=1).examples:
        m = mask_method_name(ex, vocab)
        text = vocab.decode(m.input_ids, skip_specials=False)
        assert not re.search(r"(?<![A-Za-z0-9_])" + re.escape(ex.name) + r"(?![A-Za-z0-9_])", text)
        assert "<name>" in text


# -- synthetic corpus and splits --------------------------------------------


def test_low_resource():
    c = gen_synthetic(3, [200, 200, 40], seed=0)
    assert c.counts == {"go": 200, "java": 200, "ruby": 40}
    assert c.low_resource() == ["ruby"]


def test_same_seed_same_corpus():
    assert gen_synthetic(seed=4).examples == gen_synthetic(seed=4).examples
    assert gen_synthetic(seed=4).examples != gen_synthetic(seed=5).examples


@pytest.mark.parametrize("seed", range(5))
def test_generator_names_always_maskable(vocab, seed):
    for ex in gen_synthetic(6, [30] * 6, seed=seed).examples:
        mask_method_name(ex, vocab)


def test_gen_needs_two_languages():
    with pytest.raises(ConfigError):
        gen_synthetic(1)


def test_split_80_10_10():
    c = Corpus(tuple(Example("go", f"c{i}", "d") for i in range(100)))
    s = split(c)
    assert {k: len(v) for k, v in s.splits.items()} == {"train": 80, "valid": 10, "test": 10}


def test_split_disjoint_exhaustive_stratified():
    c = gen_synthetic(3, [57, 33, 11], seed=2)
    s = split(c, (0.7, 0.2, 0.1), seed=9)
    idx = [i for v in s.splits.values() for i in v]
    assert sorted(idx) == list(range(len(c)))
    for name, ratio in zip(("train", "valid", "test"), (0.7, 0.2, 0.1)):
        for lang, n in c.counts.items():
            got = sum(1 for i in s.splits[name] if c.examples[i].lang == lang)
            assert abs(got - ratio * n) <= 1


def test_split_deterministic():
    c = gen_synthetic(seed=0)
    assert split(c, seed=3).splits == split(c, seed=3).splits


def test_split_errors():
    c = gen_synthetic(2, [5, 2], seed=0)
    with pytest.raises(ConfigError):
        split(c, (0.5, 0.6))
    with pytest.raises(DataError):
        split(c, (0.4, 0.3, 0.3))
