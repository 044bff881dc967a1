"""
Tokenization and Arabic normalization
Shared by corpus documents, query components, embeddings and the lexicon
"""
import unicodedata
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Tuple

from errors import ContractError


class Language(Enum):
    EN = "en"
    AR = "ar"


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tuple[str, ...]
    lang: Language

    def __post_init__(self):
        # lists are accepted for convenience
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, item):
        return self.tokens[item]


_ALEF_VARIANTS = "أإآٱ"  # أ إ آ ٱ
_TATWEEL = "ـ"

_DIACRITIC_RANGES = [
    (0x0610, 0x061A),  # honorific marks
    (0x064B, 0x065F),  # tashkeel
    (0x0670, 0x0670),  # superscript alef
    (0x06D6, 0x06ED),  # Quranic annotation marks
]


def _build_normalization_table() -> dict:
    """Character table for str.translate: folds variants, strips marks"""
    table = {ord(ch): "ا" for ch in _ALEF_VARIANTS}
    table[ord("ة")] = "ه"  # ة → ه
    table[ord("ى")] = "ي"  # ى → ي
    table[ord(_TATWEEL)] = None
    for start, end in _DIACRITIC_RANGES:
        for code in range(start, end + 1):
            table[code] = None
    return table


_ARABIC_NORMALIZE = _build_normalization_table()


def normalize_arabic(token: str) -> str:
    """Strip tashkeel and tatweel; fold alef variants, ta marbuta and alef maqsura.

    Every other character is returned unchanged, so the function is idempotent
    and harmless on English tokens.
    """
    return token.translate(_ARABIC_NORMALIZE)


def _is_delimiter(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch).startswith("P")


def _split(text: str) -> Iterable[str]:
    current: List[str] = []
    for ch in text:
        if _is_delimiter(ch):
            if current:
                yield "".join(current)
                current = []
        else:
            current.append(ch)
    if current:
        yield "".join(current)


def normalize_token(token: str) -> str:
    """Token-level normalization applied by tokenize, the embedding loader and the lexicon"""
    return normalize_arabic(token.lower())


def tokenize(text: str, lang: Language) -> TokenSequence:
    """Split on whitespace and Unicode punctuation, lowercase, normalize Arabic"""
    lang = Language(lang)
    tokens = []
    for raw in _split(text):
        token = raw.lower()
        if lang == Language.AR:
            token = normalize_arabic(token)
        # a lone diacritic or tatweel normalizes to nothing
        if token:
            tokens.append(token)
    return TokenSequence(tuple(tokens), lang)


def truncate(seq: TokenSequence, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise ContractError(f"truncate: max_len must be >= 1, got {max_len}")
    if len(seq) <= max_len:
        return seq
    return TokenSequence(seq.tokens[:max_len], seq.lang)
