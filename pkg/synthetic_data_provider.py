"""
Synthetic bilingual collections for tests and demos
Planted topic clusters, a word-level lexicon, and aligned English-Arabic embeddings
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from atomic_io import atomic_write_text
from errors import ConfigError
from retrieval_pipeline import Topic, save_topics

logger = logging.getLogger(__name__)

# letters that Arabic normalization leaves untouched
ARABIC_LETTERS = "بتثجحخدذرزسشصضطظعغفقكلمنهوي"
LATIN_LETTERS = "abcdefghijklmnopqrstuvwxyz"

TRANSLATION_NOISE = 0.15


@dataclass
class SyntheticSpec:
    docs: int = 1000
    topics: int = 5
    relevant_per_topic: int = 20
    examples_per_topic: int = 3
    dim: int = 32
    background_vocab: int = 400
    common_vocab: int = 30
    cluster_size: int = 12
    doc_length: Tuple[int, int] = (60, 120)
    topic_token_rate: float = 0.3
    common_token_rate: float = 0.08
    list_size: int = 50
    seed: int = 7

    def validate(self):
        if self.topics < 1:
            raise ConfigError(f"synthetic spec: topics must be >= 1, got {self.topics}")
        if self.examples_per_topic < 1:
            raise ConfigError(f"synthetic spec: examples_per_topic must be >= 1, got {self.examples_per_topic}")
        if self.relevant_per_topic < self.examples_per_topic + 1:
            raise ConfigError(f"synthetic spec: relevant_per_topic must be >= examples_per_topic + 1 "
                              f"({self.examples_per_topic + 1}), got {self.relevant_per_topic}")
        minimum_docs = self.topics * self.relevant_per_topic + self.list_size + 1
        if self.docs < minimum_docs:
            raise ConfigError(f"synthetic spec: docs must be >= topics * relevant_per_topic + list_size + 1 "
                              f"({minimum_docs}), got {self.docs}")
        if self.dim < 2:
            raise ConfigError(f"synthetic spec: dim must be >= 2, got {self.dim}")
        if self.cluster_size < 3 or self.common_vocab < 1 or self.background_vocab < 1:
            raise ConfigError("synthetic spec: cluster_size must be >= 3 and vocabularies non-empty")
        low, high = self.doc_length
        if low < 1 or high < low:
            raise ConfigError(f"synthetic spec: invalid doc_length range {self.doc_length}")
        if not 0.0 < self.topic_token_rate < 1.0 or not 0.0 <= self.common_token_rate < 1.0 \
                or self.topic_token_rate + self.common_token_rate >= 1.0:
            raise ConfigError("synthetic spec: token rates must be fractions summing below 1")


@dataclass
class SyntheticCorpus:
    documents: List[Tuple[str, str]]
    topics: List[Topic]
    lexicon: List[Tuple[str, str]]
    embeddings: Dict[str, np.ndarray]
    qrels: Dict[str, List[str]]
    clusters: Dict[str, List[Tuple[str, str]]] = field(default_factory=dict)


class _WordFactory:
    """Unique random words per alphabet"""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used = set()

    def make(self, alphabet: str, low: int, high: int) -> str:
        while True:
            length = int(self.rng.integers(low, high + 1))
            word = "".join(alphabet[i] for i in self.rng.integers(0, len(alphabet), size=length))
            if word not in self.used:
                self.used.add(word)
                return word

    def pairs(self, count: int) -> List[Tuple[str, str]]:
        return [(self.make(LATIN_LETTERS, 4, 8), self.make(ARABIC_LETTERS, 3, 6)) for _ in range(count)]


def _translation_pair(v: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """English/Arabic vectors v + e and v - e with e orthogonal to v, |e| = 0.15 |v|.

    Their cosine is (1 - 0.15^2) / (1 + 0.15^2), about 0.956, for every pair.
    """
    noise = rng.normal(size=v.shape)
    noise -= (noise @ v) / (v @ v) * v
    noise *= TRANSLATION_NOISE * np.linalg.norm(v) / np.linalg.norm(noise)
    return v + noise, v - noise


def _sentence_text(tokens: List[str], rng: np.random.Generator) -> str:
    words, sentence = [], 0
    for token in tokens:
        words.append(token)
        sentence += 1
        if sentence >= 8 and rng.random() < 0.15:
            words[-1] += "."
            sentence = 0
    return " ".join(words)


def make_synthetic_corpus(spec: Optional[SyntheticSpec] = None) -> SyntheticCorpus:
    """Bilingual fixture fully determined by spec.seed"""
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = _WordFactory(rng)

    background = words.pairs(spec.background_vocab)
    common = words.pairs(spec.common_vocab)
    clusters = {f"T{t + 1}": words.pairs(spec.cluster_size) for t in range(spec.topics)}

    embeddings: Dict[str, np.ndarray] = {}
    for english, arabic in background + common:
        embeddings[english], embeddings[arabic] = _translation_pair(rng.normal(size=spec.dim), rng)
    for pairs in clusters.values():
        centroid = rng.normal(size=spec.dim)
        for english, arabic in pairs:
            concept = centroid + 0.5 * rng.normal(size=spec.dim)
            embeddings[english], embeddings[arabic] = _translation_pair(concept, rng)

    # disjoint relevant sets; examples are the first relevant docs of each topic
    doc_ids = [f"d{i:05d}" for i in range(spec.docs)]
    shuffled = rng.permutation(spec.docs)
    relevant: Dict[str, List[str]] = {}
    topic_of: Dict[str, str] = {}
    for t, topic_id in enumerate(clusters):
        chosen = sorted(doc_ids[i] for i in shuffled[t * spec.relevant_per_topic:(t + 1) * spec.relevant_per_topic])
        relevant[topic_id] = chosen
        for doc_id in chosen:
            topic_of[doc_id] = topic_id

    background_ar = [arabic for _, arabic in background]
    common_ar = [arabic for _, arabic in common]
    documents = []
    for doc_id in doc_ids:
        length = int(rng.integers(spec.doc_length[0], spec.doc_length[1] + 1))
        cluster_ar = [arabic for _, arabic in clusters[topic_of[doc_id]]] if doc_id in topic_of else None
        tokens = []
        for _ in range(length):
            draw = rng.random()
            if cluster_ar is not None and draw < spec.topic_token_rate:
                tokens.append(cluster_ar[int(rng.integers(len(cluster_ar)))])
            elif draw > 1.0 - spec.common_token_rate:
                tokens.append(common_ar[int(rng.integers(len(common_ar)))])
            else:
                tokens.append(background_ar[int(rng.integers(len(background_ar)))])
        documents.append((doc_id, _sentence_text(tokens, rng)))

    topics, qrels = [], {}
    for topic_id, pairs in clusters.items():
        english = [en for en, _ in pairs]
        common_en = [common[int(i)][0] for i in rng.choice(len(common), size=min(4, len(common)), replace=False)]
        title = " ".join(english[:3]).capitalize()
        background_text = " ".join(english[3:9] + common_en[:2]).capitalize() + "."
        event_text = " ".join(english[6:] + common_en[2:]).capitalize() + "."
        examples = relevant[topic_id][:spec.examples_per_topic]
        topics.append(Topic(topic_id, title, background_text, event_text, tuple(examples)))
        qrels[topic_id] = relevant[topic_id][spec.examples_per_topic:]

    lexicon = background + common + [pair for pairs in clusters.values() for pair in pairs]
    logger.info(f"Synthetic corpus: {spec.docs} docs, {spec.topics} topics, {len(lexicon)} translation pairs")
    return SyntheticCorpus(documents, topics, lexicon, embeddings, qrels, clusters)


def write_synthetic_corpus(corpus: SyntheticCorpus, out_dir: str) -> Dict[str, str]:
    """Write corpus.jsonl, topics.json, lexicon.tsv, embeddings.txt and qrels.txt"""
    paths = {name: os.path.join(out_dir, filename) for name, filename in (
        ("corpus", "corpus.jsonl"), ("topics", "topics.json"), ("lexicon", "lexicon.tsv"),
        ("embeddings", "embeddings.txt"), ("qrels", "qrels.txt"))}

    atomic_write_text(paths["corpus"], "".join(
        json.dumps({"id": doc_id, "text": text}, ensure_ascii=False) + "\n" for doc_id, text in corpus.documents))
    save_topics(paths["topics"], corpus.topics)
    atomic_write_text(paths["lexicon"], "".join(f"{en}\t{ar}\n" for en, ar in corpus.lexicon))

    dim = len(next(iter(corpus.embeddings.values())))
    rows = [f"{len(corpus.embeddings)} {dim}\n"]
    english = {en for en, _ in corpus.lexicon}
    for token, vector in corpus.embeddings.items():
        prefix = "en:" if token in english else "ar:"
        rows.append(prefix + token + " " + " ".join(f"{value:.8f}" for value in vector) + "\n")
    atomic_write_text(paths["embeddings"], "".join(rows))

    atomic_write_text(paths["qrels"], "".join(
        f"{topic_id} 0 {doc_id} 1\n" for topic_id in sorted(corpus.qrels) for doc_id in corpus.qrels[topic_id]))
    return paths
