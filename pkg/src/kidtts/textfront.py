"""Text frontend: language-tagged byte-level token sequences for the LM."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass

from .errors import DataError

# id layout: 0-255 raw UTF-8 bytes, then specials
LANG_TOKENS = {"zh": 256, "ma": 257, "ta": 258}
BOS_SPEECH = 259
INPUT_VOCAB = 260
MAX_TEXT_BYTES = 512

_TOKEN_TO_LANG = {v: k for k, v in LANG_TOKENS.items()}


@dataclass(frozen=True)
class TextTokenSeq:
    """Language identifier followed by the UTF-8 bytes of NFC text."""

    tokens: tuple
    language: str

    def __post_init__(self):
        if self.language not in LANG_TOKENS:
            raise DataError(f"unknown language code {self.language!r}")
        if not self.tokens or self.tokens[0] != LANG_TOKENS[self.language]:
            raise DataError("language identifier must lead the sequence")
        for t in self.tokens[1:]:
            if not (0 <= t < 256):
                raise DataError(f"token {t} out of byte range after the identifier")

    def __len__(self) -> int:
        return len(self.tokens)


def encode_text(text: str, lang: str) -> TextTokenSeq:
    """Tokenize text as [lang_id] + UTF-8 bytes of its NFC normalization.

    Raises DataError for empty text, unknown language, or text longer than
    512 bytes.
    """
    if lang not in LANG_TOKENS:
        raise DataError(f"unknown language code {lang!r}")
    if not text:
        raise DataError("empty text")
    data = unicodedata.normalize("NFC", text).encode("utf-8")
    if len(data) > MAX_TEXT_BYTES:
        raise DataError(f"text is {len(data)} bytes; limit is {MAX_TEXT_BYTES}")
    return TextTokenSeq(tokens=(LANG_TOKENS[lang],) + tuple(data), language=lang)


def decode_text(seq: TextTokenSeq):
    """Inverse of encode_text: returns (text, language code)."""
    body = bytes(seq.tokens[1:])
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"invalid UTF-8 byte run in token sequence: {exc}") from exc
    return text, seq.language


def decode_token_ids(tokens) -> tuple:
    """Parse raw id list into a TextTokenSeq, validating the layout."""
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise DataError("empty token sequence")
    lang = _TOKEN_TO_LANG.get(tokens[0])
    if lang is None:
        raise DataError("language identifier must lead")
    for t in tokens[1:]:
        if t >= 256:
            raise DataError("duplicated language identifier or special token in body")
    return TextTokenSeq(tokens=tokens, language=lang)
