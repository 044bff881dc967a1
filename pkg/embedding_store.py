"""
Shared English-Arabic embedding space and word-level translation lexicon
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ContractError, ParseError
from text_processing import Language, TokenSequence, normalize_token

logger = logging.getLogger(__name__)

# lookup() returns this for tokens outside the vocabulary
OOV = None

_LANGUAGE_PREFIXES = ("en:", "ar:")


@dataclass
class EmbeddingTable:
    vocab: Dict[str, int]
    matrix: np.ndarray
    dim: int
    duplicates_skipped: int = 0

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != self.dim:
            raise ContractError(f"EmbeddingTable: matrix shape {self.matrix.shape} does not match dim {self.dim}")
        if len(self.vocab) != self.matrix.shape[0]:
            raise ContractError(f"EmbeddingTable: {len(self.vocab)} tokens for {self.matrix.shape[0]} rows")
        self.matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, token: str) -> bool:
        return lookup(self, token) is not OOV


@dataclass
class Lexicon:
    entries: Dict[str, List[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def _strip_prefix(token: str) -> str:
    for prefix in _LANGUAGE_PREFIXES:
        if token.startswith(prefix) and len(token) > len(prefix):
            return token[len(prefix):]
    return token


def load_embeddings(path: str) -> EmbeddingTable:
    """Load a word2vec text file ("V D" header, then V rows of "token v1 ... vD")"""
    vocab: Dict[str, int] = {}
    rows: List[np.ndarray] = []
    duplicates = 0

    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ParseError("header must be 'V D'", path, 1)
        try:
            expected_rows, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError(f"header must hold two integers, got {' '.join(header)!r}", path, 1)
        if expected_rows < 0 or dim < 1:
            raise ParseError(f"invalid header sizes V={expected_rows} D={dim}", path, 1)

        seen_rows = 0
        for line_number, line in enumerate(f, start=2):
            parts = line.rstrip("\n").rstrip("\r").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            seen_rows += 1
            if len(parts) != dim + 1:
                raise ParseError(f"expected {dim} values, found {len(parts) - 1}", path, line_number)
            try:
                values = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric embedding value", path, line_number)

            token = normalize_token(_strip_prefix(parts[0]))
            if token in vocab:
                duplicates += 1
                continue
            vocab[token] = len(rows)
            rows.append(values)

    if seen_rows != expected_rows:
        raise ParseError(f"header announces {expected_rows} rows, file has {seen_rows}", path, 1)
    if duplicates:
        logger.warning(f"{path}: ignored {duplicates} duplicate embedding token(s)")

    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float64)
    return EmbeddingTable(vocab=vocab, matrix=matrix, dim=dim, duplicates_skipped=duplicates)


def lookup(table: EmbeddingTable, token: str) -> Optional[np.ndarray]:
    """Stored row for the token, or OOV. Never fabricates a zero row."""
    index = table.vocab.get(token)
    if index is None:
        index = table.vocab.get(normalize_token(_strip_prefix(token)))
    if index is None:
        return OOV
    return table.matrix[index]


def embed_tokens(table: EmbeddingTable, seq: TokenSequence) -> Tuple[np.ndarray, List[str]]:
    """Stack the rows of in-vocabulary tokens; OOV tokens are skipped"""
    kept: List[str] = []
    rows: List[np.ndarray] = []
    for token in seq:
        row = lookup(table, token)
        if row is OOV:
            continue
        kept.append(token)
        rows.append(row)
    if not rows:
        return np.zeros((0, table.dim), dtype=np.float64), kept
    return np.vstack(rows), kept


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractError(f"cosine: dimension mismatch {u.shape} vs {v.shape}")
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def load_lexicon(path: str) -> Lexicon:
    """Load an "english<TAB>arabic" TSV; translations keep file order per key"""
    entries: "OrderedDict[str, List[str]]" = OrderedDict()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if line.count("\t") != 1:
                raise ParseError("expected exactly one tab", path, line_number)
            english, arabic = (normalize_token(part.strip()) for part in line.split("\t"))
            if not english or not arabic:
                raise ParseError("empty lexicon field", path, line_number)
            entries.setdefault(english, []).append(arabic)
    return Lexicon(entries=dict(entries))


def translate_tokens(lex: Lexicon, seq: TokenSequence) -> TokenSequence:
    """Word-by-word translation: first lexicon entry wins, untranslatable tokens are dropped"""
    if seq.lang != Language.EN:
        raise ContractError(f"translate_tokens: expected an English sequence, got {seq.lang.value}")
    translated = []
    for token in seq:
        candidates = lex.entries.get(token)
        if candidates:
            translated.append(candidates[0])
    return TokenSequence(tuple(translated), Language.AR)
