"""
Evaluation: Precision@k, Recall@k and nDCG@k with trec_eval conventions
Per-topic tables, macro averages and the stage-by-threshold comparison report
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

import config
from atomic_io import atomic_write_text
from errors import ContractError, ParseError, UndefinedMetricError
from rank_fusion import RankedList, Stage, read_run

logger = logging.getLogger(__name__)

STAGE_LABELS = {
    Stage.BM25_FUSED: "BM25 Pre-Selection",
    Stage.NEURAL_FUSED: "Neural Retrieval",
    Stage.FINAL: "Final Fusion",
}

Ranking = Union[RankedList, Sequence[str]]


@dataclass
class Qrels:
    judgments: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def topics(self) -> List[str]:
        return sorted(self.judgments)

    def grade(self, topic_id: str, doc_id: str) -> int:
        return self.judgments.get(topic_id, {}).get(doc_id, 0)

    def relevant(self, topic_id: str) -> Set[str]:
        return {doc_id for doc_id, grade in self.judgments.get(topic_id, {}).items() if grade > 0}


def load_qrels(path: str) -> Qrels:
    """Read "topic_id 0 doc_id rel" lines; grades above 1 count as relevant"""
    judgments: Dict[str, Dict[str, int]] = defaultdict(dict)
    graded = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, found {len(parts)}", path, line_number)
            topic_id, _, doc_id, rel = parts
            try:
                grade = int(rel)
            except ValueError:
                raise ParseError(f"relevance must be an integer, got {rel!r}", path, line_number)
            if grade < 0:
                raise ParseError(f"relevance must be non-negative, got {grade}", path, line_number)
            if grade > 1:
                graded += 1
            judgments[topic_id][doc_id] = grade
    if graded:
        logger.warning(f"{path}: {graded} graded judgment(s) treated as binary relevant")
    return Qrels(dict(judgments))


def _doc_ids(ranking: Ranking) -> List[str]:
    return ranking.doc_ids() if isinstance(ranking, RankedList) else list(ranking)


def _check_depth(k: int):
    if k < 1:
        raise ContractError(f"metric depth k must be >= 1, got {k}")


def precision_at_k(ranking: Ranking, relevant: Set[str], k: int = config.METRIC_DEPTH) -> float:
    """Relevant docs in the top k over k, even when fewer than k docs were returned"""
    _check_depth(k)
    hits = sum(1 for doc_id in _doc_ids(ranking)[:k] if doc_id in relevant)
    return hits / k


def recall_at_k(ranking: Ranking, relevant: Set[str], k: int = config.METRIC_DEPTH) -> float:
    _check_depth(k)
    if not relevant:
        raise UndefinedMetricError("recall is undefined without relevant documents")
    hits = sum(1 for doc_id in _doc_ids(ranking)[:k] if doc_id in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranking: Ranking, relevant: Set[str], k: int = config.METRIC_DEPTH) -> float:
    """Binary-gain nDCG with rel / log2(rank + 1) discounts"""
    _check_depth(k)
    if not relevant:
        raise UndefinedMetricError("nDCG is undefined without relevant documents")
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, doc_id in enumerate(_doc_ids(ranking)[:k], start=1) if doc_id in relevant)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


def metric_names(k: int) -> List[str]:
    return [f"Precision@{k}", f"Recall@{k}", f"nDCG@{k}"]


@dataclass
class EvaluationReport:
    k: int
    per_topic: pd.DataFrame
    excluded: List[str] = field(default_factory=list)

    @property
    def means(self) -> pd.Series:
        if self.per_topic.empty:
            return pd.Series(0.0, index=metric_names(self.k))
        return self.per_topic.mean(axis=0)

    def to_text(self) -> str:
        table = pd.concat([self.per_topic, self.means.to_frame("all").T])
        table.index.name = "topic"
        return table.to_string(float_format=lambda value: f"{value:.5f}") + "\n"


def evaluate_lists(lists: Mapping[str, RankedList], qrels: Qrels, k: int = config.METRIC_DEPTH) -> EvaluationReport:
    """Score every judged topic; topics missing from the run score 0 and are still averaged"""
    _check_depth(k)
    extra = sorted(set(lists) - set(qrels.judgments))
    if extra:
        logger.warning(f"Ignoring {len(extra)} run topic(s) without judgments: {', '.join(extra)}")

    rows, index, excluded = [], [], []
    for topic_id in qrels.topics():
        relevant = qrels.relevant(topic_id)
        if not relevant:
            excluded.append(topic_id)
            logger.warning(f"Topic {topic_id} has no relevant documents; excluded from averages")
            continue
        ranking = lists.get(topic_id)
        if ranking is None:
            rows.append([0.0, 0.0, 0.0])
        else:
            rows.append([
                precision_at_k(ranking, relevant, k),
                recall_at_k(ranking, relevant, k),
                ndcg_at_k(ranking, relevant, k),
            ])
        index.append(topic_id)

    per_topic = pd.DataFrame(rows, index=pd.Index(index, name="topic"), columns=metric_names(k), dtype=float)
    return EvaluationReport(k=k, per_topic=per_topic, excluded=excluded)


def evaluate_run(run_path: str, qrels_path: str, k: int = config.METRIC_DEPTH) -> EvaluationReport:
    return evaluate_lists(read_run(run_path), load_qrels(qrels_path), k)


@dataclass
class TableRow:
    system: str
    threshold: int
    stages: Dict[Stage, EvaluationReport]


def table_report(rows: Iterable[TableRow], k: int = config.METRIC_DEPTH) -> pd.DataFrame:
    """Macro means with rows (system, threshold) and columns (stage, metric)"""
    columns = pd.MultiIndex.from_tuples(
        [(label, metric) for label in STAGE_LABELS.values() for metric in metric_names(k)],
        names=["stage", "metric"],
    )
    records, index = [], []
    for row in rows:
        values = []
        for stage in STAGE_LABELS:
            report = row.stages.get(stage)
            values.extend(report.means.tolist() if report is not None else [math.nan] * 3)
        records.append(values)
        index.append((row.system, row.threshold))
    return pd.DataFrame(records, index=pd.MultiIndex.from_tuples(index, names=["system", "threshold"]),
                        columns=columns)


def format_table(table: pd.DataFrame) -> str:
    return table.to_string(float_format=lambda value: f"{value:.5f}", na_rep="-") + "\n"


def write_table(table: pd.DataFrame, text_path: str, csv_path: Optional[str] = None):
    atomic_write_text(text_path, format_table(table))
    if csv_path:
        atomic_write_text(csv_path, table.to_csv(float_format="%.5f", lineterminator="\n"))


def random_baseline(qrels: Qrels, candidates: Mapping[str, Sequence[str]], k: int = config.METRIC_DEPTH,
                    shuffles: int = 100, seed: int = config.DEFAULT_SEED) -> Tuple[float, float]:
    """Mean and std of macro nDCG@k over random orderings of each topic's candidate set"""
    rng = np.random.default_rng(seed)
    topics = [topic_id for topic_id in qrels.topics() if qrels.relevant(topic_id)]
    if not topics:
        raise UndefinedMetricError("random_baseline: no topic has relevant documents")
    macro = []
    for _ in range(shuffles):
        scores = []
        for topic_id in topics:
            pool = sorted(candidates.get(topic_id, ()))
            order = [pool[i] for i in rng.permutation(len(pool))]
            scores.append(ndcg_at_k(order, qrels.relevant(topic_id), k))
        macro.append(float(np.mean(scores)))
    return float(np.mean(macro)), float(np.std(macro))
