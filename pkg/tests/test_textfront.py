"""Byte-level text tokenization with leading language identifiers."""

import pytest
from hypothesis import given, settings, strategies as st

from kidtts import textfront
from kidtts.errors import DataError


class TestEncodeText:
    def test_ascii_char_under_ma(self):
        seq = textfront.encode_text("a", "ma")
        assert list(seq.tokens) == [257, 97]
        assert seq.language == "ma"

    def test_cjk_char_under_zh(self):
        seq = textfront.encode_text("一", "zh")
        assert list(seq.tokens) == [256, 228, 184, 128]

    def test_ta_language_id(self):
        seq = textfront.encode_text("a", "ta")
        assert list(seq.tokens) == [258, 97]

    def test_empty_text_rejected(self):
        with pytest.raises(DataError, match="empty text"):
            textfront.encode_text("", "ta")

    def test_unknown_language_rejected(self):
        with pytest.raises(DataError):
            textfront.encode_text("a", "en")

    def test_over_512_bytes_rejected(self):
        with pytest.raises(DataError):
            textfront.encode_text("a" * 513, "ma")

    def test_512_bytes_accepted(self):
        seq = textfront.encode_text("a" * 512, "ma")
        assert len(seq.tokens) == 513

    def test_nfc_normalization_applied(self):
        # e + combining acute composes to a single scalar before encoding.
        composed = textfront.encode_text("é", "ma")
        decomposed = textfront.encode_text("é", "ma")
        assert list(composed.tokens) == list(decomposed.tokens)


class TestDecodeText:
    def test_inverse_of_encode(self):
        text, lang = textfront.decode_text(textfront.encode_text("一人", "zh"))
        assert (text, lang) == ("一人", "zh")

    def test_explicit_token_list(self):
        text, lang = textfront.decode_text(
            textfront.TextTokenSeq(tokens=(257, 97), language="ma"))
        assert (text, lang) == ("a", "ma")

    def test_language_id_must_lead(self):
        with pytest.raises(DataError, match="language identifier must lead"):
            textfront.decode_token_ids([97, 257])

    def test_duplicate_language_id_rejected(self):
        with pytest.raises(DataError):
            textfront.decode_token_ids([257, 97, 258])

    def test_invalid_utf8_run_rejected(self):
        # 0xE4 opens a three-byte sequence that never completes.
        with pytest.raises(DataError, match="invalid UTF-8"):
            textfront.decode_text(textfront.decode_token_ids([256, 228, 97]))


ALPHABET_CHARS = {"zh": "一人", "ma": "ab", "ta": "அச"}


@given(lang=st.sampled_from(["zh", "ma", "ta"]), data=st.data())
@settings(max_examples=60, deadline=None)
def test_round_trip_property(lang, data):
    text = data.draw(st.text(alphabet=ALPHABET_CHARS[lang], min_size=1,
                             max_size=20))
    seq = textfront.encode_text(text, lang)
    assert textfront.decode_text(seq) == (text, lang)
