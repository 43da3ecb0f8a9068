import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import EncodingError
from fedsim.keys import SEPARATOR, decode_key, encode_key


def test_two_values_join_with_unit_separator():
    assert encode_key(["Paris", "Mon"]) == "ParisMon"


def test_empty_list_is_global_bucket():
    assert encode_key([]) == ""
    assert decode_key("") == []


def test_empty_string_value_distinct_from_empty_list():
    key = encode_key([""])
    assert key != ""
    assert decode_key(key) == [""]


def test_separator_inside_value_is_escaped():
    values = [f"a{SEPARATOR}b", "c"]
    key = encode_key(values)
    assert decode_key(key) == values


def test_backslash_values_roundtrip():
    for values in (["\\"], ["\\e"], ["\\\\e"], ["a\\", "\\b"]):
        assert decode_key(encode_key(values)) == values


def test_non_string_rejected():
    with pytest.raises(EncodingError):
        encode_key([1, "a"])


def test_malformed_escape_rejected():
    with pytest.raises(EncodingError):
        decode_key("a\\")
    with pytest.raises(EncodingError):
        decode_key("a\\x")


@given(st.lists(st.text(max_size=8), max_size=4))
@settings(max_examples=300, deadline=None)
def test_roundtrip_property(values):
    assert decode_key(encode_key(values)) == values


def test_injective_over_many_random_lists():
    # 10^5 random value lists: distinct inputs never collide after encoding
    import random

    rng = random.Random(42)
    alphabet = "ab\\" + SEPARATOR
    seen = {}
    for _ in range(100_000):
        values = tuple(
            "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 4)))
            for _ in range(rng.randrange(0, 4))
        )
        key = encode_key(list(values))
        if key in seen:
            assert seen[key] == values
        else:
            seen[key] = values
