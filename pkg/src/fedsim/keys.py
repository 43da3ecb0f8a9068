"""Canonical encoding of dimension-value lists into histogram bucket keys.

Values are joined with the unit separator U+001F after escaping, so the
encoding is injective and decodes back to the original list. The empty list
encodes to "" (the single global bucket of a zero-dimension query); an empty
string value is represented by the escape sequence ``\\e`` so it cannot
collide with the empty list.
"""

from __future__ import annotations

from .errors import EncodingError

SEPARATOR = ""

_ESCAPES = {"\\": "\\\\", SEPARATOR: "\\s"}
_UNESCAPES = {"\\": "\\", "s": SEPARATOR, "e": ""}


def _escape(value: str) -> str:
    if value == "":
        return "\\e"
    out = []
    for ch in value:
        out.append(_ESCAPES.get(ch, ch))
    return "".join(out)


def _unescape(token: str) -> str:
    if token == "\\e":
        return ""
    out = []
    i = 0
    while i < len(token):
        ch = token[i]
        if ch == "\\":
            if i + 1 >= len(token):
                raise EncodingError(f"dangling escape in token {token!r}")
            nxt = token[i + 1]
            if nxt not in _UNESCAPES or nxt == "e":
                raise EncodingError(f"unknown escape \\{nxt} in token {token!r}")
            out.append(_UNESCAPES[nxt])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def encode_key(values: list[str] | tuple[str, ...]) -> str:
    """Encode an ordered list of dimension values into a bucket key."""
    for v in values:
        if not isinstance(v, str):
            raise EncodingError(f"dimension values must be strings, got {type(v)!r}")
    return SEPARATOR.join(_escape(v) for v in values)


def decode_key(key: str) -> list[str]:
    """Recover the dimension-value list from a bucket key."""
    if key == "":
        return []
    return [_unescape(tok) for tok in key.split(SEPARATOR)]
