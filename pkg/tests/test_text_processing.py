import pytest

from errors import ContractError
from text_processing import Language, TokenSequence, normalize_arabic, tokenize, truncate


def test_english_is_lowercased_and_split_on_punctuation():
    seq = tokenize("Hello, World! It's (finally) here.", Language.EN)
    assert seq.tokens == ("hello", "world", "it", "s", "finally", "here")
    assert seq.lang == Language.EN


def test_arabic_diacritics_are_stripped():
    # أَحْمَد -> احمد (hamza-alef folded, fatha and sukun removed)
    assert normalize_arabic("أَحْمَد") == "احمد"


@pytest.mark.parametrize("raw, expected", [
    ("إسلام", "اسلام"),  # alef with hamza below
    ("آمن", "امن"),  # alef madda
    ("مدرسة", "مدرسه"),  # ta marbuta
    ("على", "علي"),  # alef maqsura
    ("كـتاب", "كتاب"),  # tatweel
])
def test_arabic_letter_folding(raw, expected):
    assert normalize_arabic(raw) == expected


def test_normalization_is_idempotent():
    text = "أَحْمَد مدرسة كـتاب"
    once = normalize_arabic(text)
    assert normalize_arabic(once) == once


def test_normalization_leaves_english_alone():
    assert normalize_arabic("Cross-lingual") == "Cross-lingual"


def test_lone_diacritic_token_is_dropped():
    seq = tokenize("َ كتاب", Language.AR)
    assert seq.tokens == ("كتاب",)


def test_arabic_comma_splits_tokens():
    seq = tokenize("كتاب،قلم", Language.AR)
    assert seq.tokens == ("كتاب", "قلم")


def test_empty_text_gives_empty_sequence():
    assert len(tokenize("  ... ", Language.EN)) == 0


def test_truncate_keeps_prefix():
    seq = TokenSequence(("a", "b", "c", "d"), Language.EN)
    assert truncate(seq, 2).tokens == ("a", "b")
    assert truncate(seq, 10) is seq


def test_truncate_rejects_non_positive_length():
    with pytest.raises(ContractError):
        truncate(TokenSequence(("a",), Language.EN), 0)
