"""Fixed synthetic vocabulary shared by the model, generators and annotators.

Ids below ``FIRST_WORD`` are control tokens and numeric glyphs; the rest are
word families ("w.." filler, "k.." keys, "q.." query words, "t.." titles,
"s.." source words). Coordinate strings are expressible as digit/punct token
runs, and yes/no answers as single tokens, so a next-token model can emit
every label format the tasks need.
"""

from __future__ import annotations

PAD = 0
BOS = 1
EOS = 2
YES = 3
NO = 4
ASK_QUERY = 5
ASK_DESCRIBE = 6
ASK_YESNO = 7
ASK_TITLE = 8
ASK_SOURCE = 9
LOC_ALL = 10
LOC_OBJECT = 11
LOC_CAPTION = 12
LOC_SOURCE = 13
KEY_MARK = 14

DIGIT_0 = 16  # ids 16..25 are the digits "0".."9"
DOT = 26
COMMA = 27

N_KEYS = 32
N_FILLER = 200
N_QUERY_WORDS = 50
N_TITLE_WORDS = 50
N_SOURCE_WORDS = 20

KEY_BASE = 28
FILLER_BASE = KEY_BASE + N_KEYS
QUERY_BASE = FILLER_BASE + N_FILLER
TITLE_BASE = QUERY_BASE + N_QUERY_WORDS
SOURCE_BASE = TITLE_BASE + N_TITLE_WORDS
FIRST_FREE = SOURCE_BASE + N_SOURCE_WORDS  # 380; ids beyond are unassigned "u.." tokens

MIN_VOCAB_SIZE = FIRST_FREE

_CONTROL = {
    PAD: "<pad>",
    BOS: "<s>",
    EOS: "</s>",
    YES: "yes",
    NO: "no",
    ASK_QUERY: "<ask-query>",
    ASK_DESCRIBE: "<ask-describe>",
    ASK_YESNO: "<ask-yesno>",
    ASK_TITLE: "<ask-title>",
    ASK_SOURCE: "<ask-source>",
    LOC_ALL: "<locate-all>",
    LOC_OBJECT: "<locate-object>",
    LOC_CAPTION: "<locate-caption>",
    LOC_SOURCE: "<locate-source>",
    KEY_MARK: "<key>",
    15: "<res15>",
}

_NUMERIC_SURFACES = {DIGIT_0 + d: str(d) for d in range(10)}
_NUMERIC_SURFACES[DOT] = "."
_NUMERIC_SURFACES[COMMA] = ","


def surface(token_id: int) -> str:
    """Printable form of a token id."""
    if token_id in _CONTROL:
        return _CONTROL[token_id]
    if token_id in _NUMERIC_SURFACES:
        return _NUMERIC_SURFACES[token_id]
    if KEY_BASE <= token_id < FILLER_BASE:
        return f"k{token_id - KEY_BASE}"
    if FILLER_BASE <= token_id < QUERY_BASE:
        return f"w{token_id - FILLER_BASE}"
    if QUERY_BASE <= token_id < TITLE_BASE:
        return f"q{token_id - QUERY_BASE}"
    if TITLE_BASE <= token_id < SOURCE_BASE:
        return f"t{token_id - TITLE_BASE}"
    if SOURCE_BASE <= token_id < FIRST_FREE:
        return f"s{token_id - SOURCE_BASE}"
    return f"u{token_id}"


_SURFACE_TO_ID: dict[str, int] = {}
for _i in range(FIRST_FREE):
    _SURFACE_TO_ID.setdefault(surface(_i), _i)

_NUMERIC_CHARS = set("0123456789.,")


def key_token(index: int) -> int:
    if not 0 <= index < N_KEYS:
        raise ValueError(f"key index {index} out of range")
    return KEY_BASE + index


def decode(ids) -> str:
    """Render ids as text; numeric glyph runs are joined without spaces."""
    out: list[str] = []
    prev_numeric = False
    for i in ids:
        s = surface(int(i))
        numeric = s in _NUMERIC_CHARS
        if out and not (numeric and prev_numeric):
            out.append(" ")
        out.append(s)
        prev_numeric = numeric
    return "".join(out)


def encode(text: str, strict: bool = True) -> list[int]:
    """Tokenize text back to ids; numeric runs split into per-glyph tokens.

    Unknown words raise KeyError when strict, otherwise they are dropped.
    """
    ids: list[int] = []
    for piece in text.split():
        if piece in _SURFACE_TO_ID:
            ids.append(_SURFACE_TO_ID[piece])
        elif all(ch in _NUMERIC_CHARS for ch in piece):
            ids.extend(_SURFACE_TO_ID[ch] for ch in piece)
        elif piece.startswith("u") and piece[1:].isdigit():
            ids.append(int(piece[1:]))
        elif strict:
            raise KeyError(f"unknown token surface {piece!r}")
    return ids


def digit_string_tokens(text: str) -> list[int]:
    """Ids for a string made only of digits, '.' and ','."""
    return [_SURFACE_TO_ID[ch] for ch in text if ch in _NUMERIC_CHARS]
