"""
Inverted index over the Arabic corpus with BM25 scoring and top-k pre-selection
"""
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

import config
from atomic_io import atomic_write_text
from errors import ContractError, IndexBuildError, ParseError
from rank_fusion import Component, RankedEntry, RankedList, Stage
from text_processing import Language, TokenSequence, tokenize

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Document:
    id: str
    tokens: TokenSequence


@dataclass(frozen=True)
class BM25Params:
    k1: float = config.BM25_K1
    b: float = config.BM25_B

    def __post_init__(self):
        if not self.k1 > 0:
            raise ContractError(f"BM25Params: k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ContractError(f"BM25Params: b must lie in [0, 1], got {self.b}")


class InvertedIndex:
    """Immutable once built; safe for concurrent scoring"""

    def __init__(self, postings: Dict[str, List[Tuple[str, int]]], doc_len: Dict[str, int],
                 params: BM25Params):
        self.postings = postings
        self.doc_len = doc_len
        self.params = params
        self.N = len(doc_len)
        self.avgdl = sum(doc_len.values()) / self.N if self.N else 0.0
        self._tf: Dict[str, Dict[str, int]] = {
            term: dict(entries) for term, entries in postings.items()
        }

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def _term_weight(self, tf: int, dl: int) -> float:
        k1, b = self.params.k1, self.params.b
        return tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avgdl))

    def score(self, query: Sequence[str], doc_id: str) -> float:
        if doc_id not in self.doc_len:
            raise ContractError(f"bm25_score: unknown document id {doc_id!r}")
        dl = self.doc_len[doc_id]
        total = 0.0
        for term in query:
            tf = self._tf.get(term, {}).get(doc_id, 0)
            if tf:
                total += self.idf(term) * self._term_weight(tf, dl)
        return total

    def score_all(self, query: Sequence[str]) -> Dict[str, float]:
        """Term-at-a-time accumulation over postings; only matching docs appear"""
        scores: Dict[str, float] = {}
        # bag semantics: a repeated query term counts once per occurrence
        for term, count in Counter(query).items():
            entries = self.postings.get(term)
            if not entries:
                continue
            idf = self.idf(term)
            for doc_id, tf in entries:
                contribution = idf * self._term_weight(tf, self.doc_len[doc_id])
                scores[doc_id] = scores.get(doc_id, 0.0) + count * contribution
        return scores

    def preselect(self, query: Sequence[str], threshold: int, topic_id: str = "",
                  component: Component = Component.TITLE) -> RankedList:
        if threshold < 1:
            raise ContractError(f"preselect: threshold must be >= 1, got {threshold}")
        scores = self.score_all(query)
        ranked = sorted(
            ((doc_id, s) for doc_id, s in scores.items() if s > 0.0),
            key=lambda item: (-item[1], item[0]),
        )[:threshold]
        entries = [RankedEntry(doc_id, rank, s) for rank, (doc_id, s) in enumerate(ranked, start=1)]
        return RankedList(topic_id=topic_id, component=component, stage=Stage.BM25, entries=entries)


def _count_terms(doc: Document) -> Tuple[str, Counter, int]:
    return doc.id, Counter(doc.tokens.tokens), len(doc.tokens)


def build_index(docs: Sequence[Document], params: Optional[BM25Params] = None,
                workers: int = 1) -> InvertedIndex:
    """Build postings in corpus order; term counting may fan out over workers"""
    params = params or BM25Params()
    seen = set()
    for doc in docs:
        if doc.id in seen:
            raise IndexBuildError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)

    postings: Dict[str, List[Tuple[str, int]]] = {}
    doc_len: Dict[str, int] = {}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            # map() yields in input order, so the merge below is deterministic
            counted = list(executor.map(_count_terms, docs))
    else:
        counted = [_count_terms(doc) for doc in docs]

    for doc_id, counts, length in tqdm(counted, desc="Indexing", disable=len(counted) < 10000):
        doc_len[doc_id] = length
        for term, tf in counts.items():
            postings.setdefault(term, []).append((doc_id, tf))

    index = InvertedIndex(postings, doc_len, params)
    logger.info(f"Built index: N={index.N}, avgdl={index.avgdl:.2f}, terms={len(postings)}")
    return index


def bm25_score(ix: InvertedIndex, query: TokenSequence, doc: str) -> float:
    return ix.score(query.tokens, doc)


def preselect(ix: InvertedIndex, query: TokenSequence, threshold: int, topic_id: str = "",
              component: Component = Component.TITLE) -> RankedList:
    return ix.preselect(query.tokens, threshold, topic_id=topic_id, component=component)


def load_corpus(path: str) -> Tuple[List[Document], Dict[str, str]]:
    """Read a JSON-lines corpus of {"id", "text"} objects; returns documents and raw texts"""
    documents: List[Document] = []
    texts: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", path, line_number)
            if not isinstance(record, dict) or not isinstance(record.get("id"), str) \
                    or not isinstance(record.get("text"), str):
                raise ParseError("expected an object with string fields 'id' and 'text'", path, line_number)
            documents.append(Document(record["id"], tokenize(record["text"], Language.AR)))
            texts[record["id"]] = record["text"]
    return documents, texts


def save_index(ix: InvertedIndex, path: str):
    payload = {
        "format_version": INDEX_FORMAT_VERSION,
        "params": asdict(ix.params),
        "doc_len": ix.doc_len,
        "postings": {term: [[doc_id, tf] for doc_id, tf in entries] for term, entries in ix.postings.items()},
    }
    atomic_write_text(path, json.dumps(payload, ensure_ascii=False, sort_keys=True))


def load_index(path: str) -> InvertedIndex:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid index JSON: {e.msg}", path, e.lineno)
    if payload.get("format_version") != INDEX_FORMAT_VERSION:
        raise ParseError(f"unsupported index format {payload.get('format_version')!r}", path)
    postings = {term: [(doc_id, int(tf)) for doc_id, tf in entries] for term, entries in payload["postings"].items()}
    doc_len = {doc_id: int(n) for doc_id, n in payload["doc_len"].items()}
    return InvertedIndex(postings, doc_len, BM25Params(**payload["params"]))
