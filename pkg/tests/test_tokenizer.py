import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factlab import tokenizer


def test_empty_string():
    assert tokenizer.encode("") == []


def test_single_ascii_byte_identity():
    assert tokenizer.encode("A") == [65]


def test_decode_simple():
    assert tokenizer.decode([65, 66]) == "AB"


def test_eos_terminates():
    assert tokenizer.decode([tokenizer.EOS]) == ""
    assert tokenizer.decode([65, tokenizer.EOS, 66]) == "A"


def test_bos_pad_skipped():
    assert tokenizer.decode([tokenizer.BOS, 65, tokenizer.PAD, 66]) == "AB"


def test_length_equals_byte_length():
    s = "Übergröße 企業 ok"
    assert len(tokenizer.encode(s)) == len(s.encode("utf-8"))


def test_out_of_vocab_token_rejected():
    with pytest.raises(ValueError):
        tokenizer.decode([300])


@given(st.text(max_size=200))
@settings(max_examples=300, deadline=None)
def test_round_trip(s):
    assert tokenizer.decode(tokenizer.encode(s)) == s


@given(st.lists(st.integers(min_value=0, max_value=255), max_size=64))
@settings(max_examples=300, deadline=None)
def test_byte_soup_never_crashes_and_reencodes_when_valid(tokens):
    text, replaced = tokenizer.decode_ex(tokens)
    if not replaced:
        assert tokenizer.encode(text) == tokens


def test_invalid_utf8_flagged():
    text, replaced = tokenizer.decode_ex([0xFF, 0xFE])
    assert replaced
    assert tokenizer.REPLACEMENT_CHAR in text
