"""
Rank fusion: RRF, CombSUM, CombMNZ, ISR and the two-step BM25/neural topology
Also reads and writes TREC run files
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set

import config
from atomic_io import atomic_write_text
from errors import ContractError, ParseError

logger = logging.getLogger(__name__)


class Component(Enum):
    TITLE = "title"
    BACKGROUND = "background"
    EVENT_KNOWLEDGE = "event_knowledge"
    EXAMPLE = "example"
    FUSED = "fused"


QUERY_COMPONENTS = [Component.TITLE, Component.BACKGROUND, Component.EVENT_KNOWLEDGE, Component.EXAMPLE]


class Stage(Enum):
    BM25 = "bm25"
    NEURAL = "neural"
    BM25_FUSED = "bm25_fused"
    NEURAL_FUSED = "neural_fused"
    FINAL = "final"


class FusionMethod(Enum):
    RRF = "rrf"
    COMBSUM = "combsum"
    COMBMNZ = "combmnz"
    ISR = "isr"


@dataclass(frozen=True)
class RankedEntry:
    doc_id: str
    rank: int
    score: float


@dataclass
class RankedList:
    topic_id: str
    component: Component
    stage: Stage
    entries: List[RankedEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def doc_ids(self) -> List[str]:
        return [entry.doc_id for entry in self.entries]

    def ranks(self) -> Dict[str, int]:
        return {entry.doc_id: entry.rank for entry in self.entries}

    def scores(self) -> Dict[str, float]:
        return {entry.doc_id: entry.score for entry in self.entries}

    def validate(self):
        seen = set()
        previous = math.inf
        for position, entry in enumerate(self.entries, start=1):
            if entry.rank != position:
                raise ContractError(f"RankedList {self.topic_id}: rank {entry.rank} at position {position}")
            if entry.doc_id in seen:
                raise ContractError(f"RankedList {self.topic_id}: duplicate doc id {entry.doc_id!r}")
            if entry.score > previous:
                raise ContractError(f"RankedList {self.topic_id}: scores increase at rank {entry.rank}")
            seen.add(entry.doc_id)
            previous = entry.score

    def without(self, excluded: Set[str]) -> "RankedList":
        """Drop the given docs and reassign ranks 1..n"""
        kept = [entry for entry in self.entries if entry.doc_id not in excluded]
        return RankedList(
            self.topic_id, self.component, self.stage,
            [RankedEntry(entry.doc_id, rank, entry.score) for rank, entry in enumerate(kept, start=1)],
        )

    def head(self, k: int) -> "RankedList":
        return RankedList(self.topic_id, self.component, self.stage, list(self.entries[:k]))


def ranked_from_scores(scores: Dict[str, float], topic_id: str, component: Component,
                       stage: Stage, tiebreak: Optional[Dict[str, int]] = None) -> RankedList:
    """Sort by descending score, ties by `tiebreak` order when given, then by ascending doc id; ranks 1..n"""
    tiebreak = tiebreak or {}
    ordered = sorted(scores.items(), key=lambda item: (-item[1], tiebreak.get(item[0], math.inf), item[0]))
    entries = [RankedEntry(doc_id, rank, score) for rank, (doc_id, score) in enumerate(ordered, start=1)]
    return RankedList(topic_id, component, stage, entries)


def _topic_of(lists: Sequence[RankedList]) -> str:
    topics = {ranked.topic_id for ranked in lists}
    if len(topics) > 1:
        raise ContractError(f"fusion: lists span several topics {sorted(topics)}")
    return topics.pop() if topics else ""


def rrf(lists: Sequence[RankedList], k: float = config.RRF_K, component: Component = Component.FUSED,
        stage: Stage = Stage.FINAL) -> RankedList:
    """Reciprocal rank fusion: S_d = sum over lists containing d of 1 / (rank + k)"""
    if not lists:
        raise ContractError("rrf: at least one list is required")
    if not k > 0:
        raise ContractError(f"rrf: k must be > 0, got {k}")
    scores: Dict[str, float] = defaultdict(float)
    for ranked in lists:
        for entry in ranked.entries:
            scores[entry.doc_id] += 1.0 / (entry.rank + k)
    return ranked_from_scores(dict(scores), _topic_of(lists), component, stage)


def minmax_normalize(ranked: RankedList) -> Dict[str, float]:
    """Min-max over finite scores; a constant list maps to 0.5 and non-finite scores to 0"""
    finite = [entry.score for entry in ranked.entries if math.isfinite(entry.score)]
    if not finite:
        return {entry.doc_id: 0.0 for entry in ranked.entries}
    low, high = min(finite), max(finite)
    normalized = {}
    for entry in ranked.entries:
        if not math.isfinite(entry.score):
            normalized[entry.doc_id] = 0.0
        elif high == low:
            normalized[entry.doc_id] = 0.5
        else:
            normalized[entry.doc_id] = (entry.score - low) / (high - low)
    return normalized


_NORMALIZERS: Dict[str, Callable[[RankedList], Dict[str, float]]] = {
    "minmax": minmax_normalize,
}


def _combsum_scores(lists: Sequence[RankedList], normalization: str):
    if normalization not in _NORMALIZERS:
        raise ContractError(f"combsum: unknown normalization {normalization!r}")
    normalize = _NORMALIZERS[normalization]
    sums: Dict[str, float] = defaultdict(float)
    hits: Dict[str, int] = defaultdict(int)
    for ranked in lists:
        for doc_id, value in normalize(ranked).items():
            sums[doc_id] += value
            hits[doc_id] += 1
    return sums, hits


def combsum(lists: Sequence[RankedList], normalization: str = "minmax",
            component: Component = Component.FUSED, stage: Stage = Stage.FINAL) -> RankedList:
    if not lists:
        raise ContractError("combsum: at least one list is required")
    sums, _ = _combsum_scores(lists, normalization)
    return ranked_from_scores(dict(sums), _topic_of(lists), component, stage)


def combmnz(lists: Sequence[RankedList], normalization: str = "minmax",
            component: Component = Component.FUSED, stage: Stage = Stage.FINAL) -> RankedList:
    if not lists:
        raise ContractError("combmnz: at least one list is required")
    sums, hits = _combsum_scores(lists, normalization)
    scores = {doc_id: total * hits[doc_id] for doc_id, total in sums.items()}
    return ranked_from_scores(scores, _topic_of(lists), component, stage)


def isr(lists: Sequence[RankedList], component: Component = Component.FUSED,
        stage: Stage = Stage.FINAL) -> RankedList:
    """Inverse square rank: S_d = n_d * sum 1 / r^2, n_d = number of lists containing d"""
    if not lists:
        raise ContractError("isr: at least one list is required")
    sums: Dict[str, float] = defaultdict(float)
    hits: Dict[str, int] = defaultdict(int)
    for ranked in lists:
        for entry in ranked.entries:
            sums[entry.doc_id] += 1.0 / (entry.rank * entry.rank)
            hits[entry.doc_id] += 1
    scores = {doc_id: hits[doc_id] * total for doc_id, total in sums.items()}
    return ranked_from_scores(scores, _topic_of(lists), component, stage)


def fuse(lists: Sequence[RankedList], method: FusionMethod, k: float = config.RRF_K,
         component: Component = Component.FUSED, stage: Stage = Stage.FINAL) -> RankedList:
    method = FusionMethod(method)
    if method == FusionMethod.RRF:
        return rrf(lists, k=k, component=component, stage=stage)
    if method == FusionMethod.COMBSUM:
        return combsum(lists, component=component, stage=stage)
    if method == FusionMethod.COMBMNZ:
        return combmnz(lists, component=component, stage=stage)
    return isr(lists, component=component, stage=stage)


def fuse_family(lists: Sequence[RankedList], method: FusionMethod, stage: Stage,
                k: float = config.RRF_K) -> Optional[RankedList]:
    """First fusion step over one family (BM25 or neural); None when the family is empty"""
    if not lists:
        return None
    return fuse(lists, method, k=k, component=Component.FUSED, stage=stage)


def fuse_families(bm25_fused: Optional[RankedList], neural_fused: Optional[RankedList],
                  method: FusionMethod, k: float = config.RRF_K) -> RankedList:
    """Second fusion step: the two family lists are fused symmetrically"""
    present = [ranked for ranked in (bm25_fused, neural_fused) if ranked is not None]
    if not present:
        raise ContractError("two_step_fuse: both families are empty")
    if len(present) == 1:
        survivor = present[0]
        logger.warning(f"Topic {survivor.topic_id}: one fusion family is empty, "
                       f"final list is the {survivor.stage.value} list")
        return RankedList(survivor.topic_id, Component.FUSED, Stage.FINAL, list(survivor.entries))
    return fuse(present, method, k=k, component=Component.FUSED, stage=Stage.FINAL)


def two_step_fuse(bm25_lists: Sequence[RankedList], neural_lists: Sequence[RankedList],
                  method: FusionMethod = FusionMethod.RRF, k: float = config.RRF_K) -> RankedList:
    """Fuse each family's component lists, then fuse the two family lists with the same method"""
    bm25_fused = fuse_family(bm25_lists, method, Stage.BM25_FUSED, k=k)
    neural_fused = fuse_family(neural_lists, method, Stage.NEURAL_FUSED, k=k)
    return fuse_families(bm25_fused, neural_fused, method, k=k)


# TREC run files: "topic_id Q0 doc_id rank score tag"

def format_run(lists: Iterable[RankedList], tag: str) -> str:
    lines = []
    for ranked in sorted(lists, key=lambda r: r.topic_id):
        for entry in ranked.entries:
            lines.append(f"{ranked.topic_id} Q0 {entry.doc_id} {entry.rank} {entry.score!r} {tag}\n")
    return "".join(lines)


def write_run(path: str, lists: Iterable[RankedList], tag: str):
    atomic_write_text(path, format_run(lists, tag))


def read_run(path: str, component: Component = Component.FUSED,
             stage: Stage = Stage.FINAL) -> Dict[str, RankedList]:
    """Parse a run file into one RankedList per topic, ordered by the file's ranks"""
    per_topic: Dict[str, List[RankedEntry]] = defaultdict(list)
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(f"expected 6 fields, found {len(parts)}", path, line_number)
            topic_id, _, doc_id, rank, score, _ = parts
            try:
                per_topic[topic_id].append(RankedEntry(doc_id, int(rank), float(score)))
            except ValueError:
                raise ParseError("rank must be an integer and score a number", path, line_number)

    runs = {}
    for topic_id, entries in per_topic.items():
        entries.sort(key=lambda entry: (entry.rank, entry.doc_id))
        unique, seen = [], set()
        for entry in entries:
            if entry.doc_id in seen:
                logger.warning(f"{path}: topic {topic_id} repeats doc {entry.doc_id}, keeping its best rank")
                continue
            seen.add(entry.doc_id)
            unique.append(entry)
        # renumber so that gaps in external runs still give 1..n
        ranked = RankedList(topic_id, component, stage,
                            [RankedEntry(e.doc_id, rank, e.score) for rank, e in enumerate(unique, start=1)])
        runs[topic_id] = ranked
    return runs


def fuse_run_files(paths: Sequence[str], method: FusionMethod, k: float = config.RRF_K) -> List[RankedList]:
    """Flat per-topic fusion of several run files (the fuse subcommand)"""
    runs = [read_run(path) for path in paths]
    topics = sorted(set().union(*(run.keys() for run in runs)))
    fused = []
    for topic_id in topics:
        members = [run[topic_id] for run in runs if topic_id in run]
        fused.append(fuse(members, method, k=k))
    return fused
