"""
Query-by-example retrieval pipeline
BM25 pre-selection, neural re-ranking and two-step rank fusion, per topic and query component
"""
import itertools
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from atomic_io import atomic_write_text
from bm25_index import BM25Params, Document, InvertedIndex, build_index, load_corpus
from embedding_store import EmbeddingTable, Lexicon, embed_tokens, load_embeddings, load_lexicon, translate_tokens
from errors import ConfigError, ContractError, MissingCheckpointError, ParseError
from evaluation_metrics import (EvaluationReport, Qrels, TableRow, evaluate_lists, format_table, load_qrels,
                                table_report, write_table)
from listnet_trainer import TrainingGroup, select_checkpoint, train
from neural_rankers import Checkpoint, load_checkpoint, save_checkpoint
from pipeline_config import PipelineConfig, QueryMode
from rank_fusion import (Component, RankedList, Stage, fuse_families, fuse_family, ranked_from_scores, rrf,
                         write_run)
from text_processing import Language, TokenSequence, tokenize, truncate

logger = logging.getLogger(__name__)

_TEXT_FIELDS = {
    Component.TITLE: "title",
    Component.BACKGROUND: "background",
    Component.EVENT_KNOWLEDGE: "event_knowledge",
}


@dataclass
class Topic:
    id: str
    title: str = ""
    background: str = ""
    event_knowledge: str = ""
    example_doc_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        self.example_doc_ids = tuple(self.example_doc_ids)

    def text(self, component: Component) -> str:
        return getattr(self, _TEXT_FIELDS[component])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "background": self.background,
            "event_knowledge": self.event_knowledge,
            "example_doc_ids": list(self.example_doc_ids),
        }


def load_topics(path: str, corpus_ids: Optional[Set[str]] = None) -> List[Topic]:
    """Read a JSON array of topic objects; example ids must resolve when corpus ids are given"""
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid topics JSON: {e.msg}", path, e.lineno)
    if isinstance(payload, dict):
        payload = payload.get("topics")
    if not isinstance(payload, list):
        raise ParseError("expected a JSON array of topics", path)

    topics, seen = [], set()
    for position, record in enumerate(payload):
        if not isinstance(record, dict) or not isinstance(record.get("id"), str):
            raise ParseError(f"topic #{position} needs a string 'id'", path)
        try:
            topic = Topic(
                id=record["id"],
                title=record.get("title", "") or "",
                background=record.get("background", "") or "",
                event_knowledge=record.get("event_knowledge", "") or "",
                example_doc_ids=tuple(record.get("example_doc_ids", ())),
            )
        except TypeError:
            raise ParseError(f"topic {record['id']}: malformed fields", path)
        if topic.id in seen:
            raise ParseError(f"duplicate topic id {topic.id!r}", path)
        if not (topic.title.strip() or topic.background.strip() or topic.event_knowledge.strip()
                or topic.example_doc_ids):
            raise ParseError(f"topic {topic.id} has no non-empty component", path)
        if corpus_ids is not None:
            unknown = [doc_id for doc_id in topic.example_doc_ids if doc_id not in corpus_ids]
            if unknown:
                raise ContractError(f"topic {topic.id}: example docs not in corpus: {', '.join(unknown)}")
        seen.add(topic.id)
        topics.append(topic)
    return topics


def save_topics(path: str, topics: Sequence[Topic]):
    atomic_write_text(path, json.dumps([topic.to_dict() for topic in topics], ensure_ascii=False, indent=1) + "\n")


@dataclass
class QueryUnit:
    """A single BM25 + neural query; example documents each form their own unit"""
    key: str
    topic_id: str
    component: Component
    bm25_query: TokenSequence
    neural_query: TokenSequence
    source_doc: Optional[str] = None


def build_query_units(topic: Topic, components: Sequence[Component], mode: QueryMode, lexicon: Lexicon,
                      doc_tokens: Dict[str, TokenSequence], query_max_len: int) -> List[QueryUnit]:
    units = []
    for component in components:
        if component == Component.EXAMPLE:
            for doc_id in topic.example_doc_ids:
                tokens = truncate(doc_tokens[doc_id], query_max_len)
                units.append(QueryUnit(f"{topic.id}/example/{doc_id}", topic.id, component, tokens, tokens, doc_id))
            continue
        text = topic.text(component)
        if not text.strip():
            continue
        english = tokenize(text, Language.EN)
        arabic = translate_tokens(lexicon, english)
        neural = english if mode == QueryMode.ENGARA else arabic
        units.append(QueryUnit(f"{topic.id}/{component.value}", topic.id, component, arabic, neural))
    return units


def preselect_units(index: InvertedIndex, units: Sequence[QueryUnit], threshold: int) -> Dict[str, RankedList]:
    """BM25 pool per unit; units whose translated query is empty are skipped"""
    pools = {}
    for unit in units:
        if not len(unit.bm25_query):
            logger.warning(f"Skipping {unit.key}: no query token survives translation")
            continue
        pools[unit.key] = index.preselect(unit.bm25_query.tokens, threshold, topic_id=unit.topic_id,
                                          component=unit.component)
    return pools


def component_lists(units: Sequence[QueryUnit], per_unit: Dict[str, RankedList], stage: Stage,
                    rrf_k: float) -> Dict[str, Dict[Component, RankedList]]:
    """Group unit lists per topic and component; example lists are RRF-fused into one"""
    grouped: Dict[str, Dict[Component, List[RankedList]]] = defaultdict(lambda: defaultdict(list))
    for unit in units:
        if unit.key in per_unit:
            grouped[unit.topic_id][unit.component].append(per_unit[unit.key])

    lists: Dict[str, Dict[Component, RankedList]] = {}
    for topic_id, by_component in grouped.items():
        lists[topic_id] = {}
        for component, members in by_component.items():
            if component == Component.EXAMPLE:
                lists[topic_id][component] = rrf(members, k=rrf_k, component=component, stage=stage)
            else:
                lists[topic_id][component] = members[0]
    return lists


def training_groups(topics: Sequence[Topic], units: Sequence[QueryUnit],
                    pools: Dict[str, RankedList]) -> List[TrainingGroup]:
    """Non-example components train against every example; an example query against the other examples"""
    by_topic = {topic.id: topic for topic in topics}
    groups = []
    for unit in units:
        if unit.key not in pools:
            continue
        examples = frozenset(by_topic[unit.topic_id].example_doc_ids)
        if unit.component == Component.EXAMPLE:
            positives = tuple(sorted(examples - {unit.source_doc}))
            if not positives:
                continue
        else:
            positives = tuple(sorted(examples))
        groups.append(TrainingGroup(unit.topic_id, unit.component, unit.key, unit.neural_query,
                                    pools[unit.key], examples, positives))
    return groups


class NeuralReranker:
    """Scores BM25 pools with a frozen checkpoint"""

    def __init__(self, checkpoint: Checkpoint, embeddings: EmbeddingTable, doc_tokens: Dict[str, TokenSequence],
                 query_max_len: int, doc_max_len: int, workers: int = 1):
        self.checkpoint = checkpoint
        self.ranker = checkpoint.ranker()
        self.embeddings = embeddings
        self.doc_tokens = doc_tokens
        self.query_max_len = query_max_len
        self.doc_max_len = doc_max_len
        self.workers = workers
        self._doc_emb: Dict[str, np.ndarray] = {}

    def _embed_docs(self, doc_ids: Sequence[str]):
        for doc_id in doc_ids:
            if doc_id not in self._doc_emb:
                seq = truncate(self.doc_tokens[doc_id], self.doc_max_len)
                self._doc_emb[doc_id] = embed_tokens(self.embeddings, seq)[0]

    def rerank(self, unit: QueryUnit, pool: RankedList) -> Optional[RankedList]:
        q_emb, kept = embed_tokens(self.embeddings, truncate(unit.neural_query, self.query_max_len))
        if not kept:
            logger.warning(f"Skipping neural stage for {unit.key}: every query token is out of vocabulary")
            return None
        scores = {
            doc_id: self.ranker.score_pair(self.checkpoint.params, q_emb, self._doc_emb[doc_id])
            for doc_id in pool.doc_ids()
        }
        # equal scores, the sentinel included, keep their BM25 order
        bm25_order = {entry.doc_id: entry.rank for entry in pool.entries}
        return ranked_from_scores(scores, unit.topic_id, unit.component, Stage.NEURAL, tiebreak=bm25_order)

    def rerank_all(self, units: Sequence[QueryUnit], pools: Dict[str, RankedList]) -> Dict[str, RankedList]:
        work = [unit for unit in units if unit.key in pools]
        for unit in work:
            self._embed_docs(pools[unit.key].doc_ids())

        def score(unit):
            return unit.key, self.rerank(unit, pools[unit.key])

        progress = dict(desc="Re-ranking", total=len(work), disable=not logger.isEnabledFor(logging.INFO))
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                results = list(tqdm(executor.map(score, work), **progress))
        else:
            results = [score(unit) for unit in tqdm(work, **progress)]
        return {key: ranked for key, ranked in results if ranked is not None}


@dataclass
class CorpusBundle:
    documents: List[Document]
    doc_tokens: Dict[str, TokenSequence]
    index: InvertedIndex
    topics: List[Topic]
    lexicon: Lexicon
    embeddings: EmbeddingTable
    qrels: Optional[Qrels] = None


def load_bundle(cfg: PipelineConfig) -> CorpusBundle:
    cfg.check_paths()
    documents, _ = load_corpus(cfg.corpus)
    doc_tokens = {doc.id: doc.tokens for doc in documents}
    index = build_index(documents, BM25Params(cfg.k1, cfg.b), workers=cfg.workers)
    topics = load_topics(cfg.topics, set(doc_tokens))
    lexicon = load_lexicon(cfg.lexicon)
    embeddings = load_embeddings(cfg.embeddings)
    qrels = load_qrels(cfg.qrels) if cfg.qrels else None
    logger.info(f"Loaded {len(documents)} documents, {len(topics)} topics, {len(lexicon)} lexicon entries, "
                f"{len(embeddings)} embeddings (dim {embeddings.dim})")
    return CorpusBundle(documents, doc_tokens, index, topics, lexicon, embeddings, qrels)


@dataclass
class PipelineResult:
    system: str
    stage_lists: Dict[Stage, Dict[str, RankedList]]
    component_lists: Dict[Tuple[Stage, Component], Dict[str, RankedList]]
    run_paths: Dict[str, str] = field(default_factory=dict)
    checkpoint_path: Optional[str] = None
    stage_reports: Dict[Stage, EvaluationReport] = field(default_factory=dict)
    report: Optional[pd.DataFrame] = None


def _exclude(lists: Dict[str, Dict[Component, RankedList]], topics: Dict[str, Topic]):
    return {
        topic_id: {component: ranked.without(set(topics[topic_id].example_doc_ids))
                   for component, ranked in by_component.items()}
        for topic_id, by_component in lists.items()
    }


class RetrievalPipeline:
    """Runs the stages for one or more configs sharing the same input files.

    Pools, trained checkpoints and neural lists are cached, so config
    variants that differ only downstream reuse earlier stages.
    """

    def __init__(self, cfg: PipelineConfig, bundle: Optional[CorpusBundle] = None):
        self.cfg = cfg
        self.bundle = bundle or load_bundle(cfg)
        self._topics = {topic.id: topic for topic in self.bundle.topics}
        self._units: Dict[tuple, List[QueryUnit]] = {}
        self._pools: Dict[tuple, Dict[str, RankedList]] = {}
        self._checkpoints: Dict[tuple, Tuple[Checkpoint, Optional[str]]] = {}
        self._neural: Dict[tuple, Dict[str, RankedList]] = {}

    @staticmethod
    def _pool_key(cfg: PipelineConfig) -> tuple:
        return cfg.threshold, cfg.components, cfg.query_max_len

    def _neural_key(self, cfg: PipelineConfig) -> tuple:
        return (cfg.model, cfg.mode, cfg.checkpoint) + self._pool_key(cfg)

    def query_units(self, cfg: PipelineConfig) -> List[QueryUnit]:
        key = (cfg.mode, cfg.components, cfg.query_max_len)
        if key not in self._units:
            units = []
            for topic in self.bundle.topics:
                units.extend(build_query_units(topic, cfg.components, cfg.mode, self.bundle.lexicon,
                                               self.bundle.doc_tokens, cfg.query_max_len))
            self._units[key] = units
        return self._units[key]

    def pools(self, cfg: PipelineConfig) -> Dict[str, RankedList]:
        key = self._pool_key(cfg)
        if key not in self._pools:
            # BM25 queries are always the translated ones, so any mode's units will do
            self._pools[key] = preselect_units(self.bundle.index, self.query_units(cfg), cfg.threshold)
            logger.info(f"Pre-selected {len(self._pools[key])} pools at threshold {cfg.threshold}")
        return self._pools[key]

    def train_ranker(self, cfg: PipelineConfig) -> Tuple[Checkpoint, str]:
        units = self.query_units(cfg)
        groups = training_groups(self.bundle.topics, units, self.pools(cfg))
        checkpoint_dir = os.path.join(cfg.output_dir, "checkpoints")
        checkpoints = train(cfg.model, groups, self.bundle.embeddings, self.bundle.doc_tokens, cfg.train_config(),
                            ranker_options=cfg.ranker_options(),
                            log_path=os.path.join(cfg.output_dir, "training_log.jsonl"))
        for checkpoint in checkpoints:
            save_checkpoint(os.path.join(checkpoint_dir, f"epoch_{checkpoint.epoch:02d}.json"), checkpoint)
        best = select_checkpoint(checkpoints)
        path = os.path.join(checkpoint_dir, "best.json")
        save_checkpoint(path, best)
        logger.info(f"Selected checkpoint from epoch {best.epoch} (val_loss={best.val_loss})")
        return best, path

    def checkpoint(self, cfg: PipelineConfig) -> Tuple[Checkpoint, Optional[str]]:
        key = self._neural_key(cfg)
        if key in self._checkpoints:
            return self._checkpoints[key]
        if cfg.checkpoint:
            if not os.path.exists(cfg.checkpoint):
                raise MissingCheckpointError(
                    f"checkpoint not found: {cfg.checkpoint} (run the train subcommand first, "
                    f"or drop the checkpoint setting to train within the pipeline)")
            loaded = load_checkpoint(cfg.checkpoint)
            if loaded.architecture != cfg.model:
                raise ConfigError(f"checkpoint {cfg.checkpoint} holds a {loaded.architecture.value} model, "
                                  f"config asks for {cfg.model.value}")
            result = (loaded, cfg.checkpoint)
        else:
            result = self.train_ranker(cfg)
        self._checkpoints[key] = result
        return result

    def neural_unit_lists(self, cfg: PipelineConfig) -> Dict[str, RankedList]:
        key = self._neural_key(cfg)
        if key not in self._neural:
            checkpoint, _ = self.checkpoint(cfg)
            reranker = NeuralReranker(checkpoint, self.bundle.embeddings, self.bundle.doc_tokens,
                                      cfg.query_max_len, cfg.doc_max_len, workers=cfg.workers)
            self._neural[key] = reranker.rerank_all(self.query_units(cfg), self.pools(cfg))
        return self._neural[key]

    def bm25_component_lists(self, cfg: PipelineConfig) -> Dict[str, Dict[Component, RankedList]]:
        lists = component_lists(self.query_units(cfg), self.pools(cfg), Stage.BM25, cfg.rrf_k)
        return _exclude(lists, self._topics) if cfg.exclude_examples else lists

    def neural_component_lists(self, cfg: PipelineConfig) -> Dict[str, Dict[Component, RankedList]]:
        lists = component_lists(self.query_units(cfg), self.neural_unit_lists(cfg), Stage.NEURAL, cfg.rrf_k)
        return _exclude(lists, self._topics) if cfg.exclude_examples else lists

    def run(self, cfg: Optional[PipelineConfig] = None) -> PipelineResult:
        cfg = cfg or self.cfg
        logger.info(f"Running {cfg.name}: threshold={cfg.threshold}, fusion={cfg.fusion.value}, "
                    f"components={','.join(c.value for c in cfg.components)}")
        bm25 = self.bm25_component_lists(cfg)
        neural = self.neural_component_lists(cfg)
        _, checkpoint_path = self.checkpoint(cfg)

        stage_lists: Dict[Stage, Dict[str, RankedList]] = {Stage.BM25_FUSED: {}, Stage.NEURAL_FUSED: {},
                                                           Stage.FINAL: {}}
        component_runs: Dict[Tuple[Stage, Component], Dict[str, RankedList]] = defaultdict(dict)
        for topic in self.bundle.topics:
            bm25_members = [bm25.get(topic.id, {})[c] for c in cfg.components if c in bm25.get(topic.id, {})]
            neural_members = [neural.get(topic.id, {})[c] for c in cfg.components if c in neural.get(topic.id, {})]
            for ranked in bm25_members:
                component_runs[(Stage.BM25, ranked.component)][topic.id] = ranked
            for ranked in neural_members:
                component_runs[(Stage.NEURAL, ranked.component)][topic.id] = ranked
            bm25_fused = fuse_family(bm25_members, cfg.fusion, Stage.BM25_FUSED, k=cfg.rrf_k)
            neural_fused = fuse_family(neural_members, cfg.fusion, Stage.NEURAL_FUSED, k=cfg.rrf_k)
            if bm25_fused is None and neural_fused is None:
                logger.warning(f"Topic {topic.id}: no usable query component, nothing retrieved")
                continue
            if bm25_fused is not None:
                stage_lists[Stage.BM25_FUSED][topic.id] = bm25_fused
            if neural_fused is not None:
                stage_lists[Stage.NEURAL_FUSED][topic.id] = neural_fused
            stage_lists[Stage.FINAL][topic.id] = fuse_families(bm25_fused, neural_fused, cfg.fusion, k=cfg.rrf_k)

        result = PipelineResult(cfg.name, stage_lists, dict(component_runs), checkpoint_path=checkpoint_path)
        self.write_runs(cfg, result)
        if self.bundle.qrels is not None:
            self.evaluate(cfg, result)
        return result

    def write_runs(self, cfg: PipelineConfig, result: PipelineResult):
        for stage, lists in result.stage_lists.items():
            path = os.path.join(cfg.output_dir, f"{stage.value}.run")
            write_run(path, lists.values(), f"{cfg.name}_{stage.value}")
            result.run_paths[stage.value] = path
        for (stage, component), lists in sorted(result.component_lists.items(),
                                                key=lambda item: (item[0][0].value, item[0][1].value)):
            name = f"{stage.value}_{component.value}"
            path = os.path.join(cfg.output_dir, "components", f"{name}.run")
            write_run(path, lists.values(), f"{cfg.name}_{name}")
            result.run_paths[name] = path

    def evaluate(self, cfg: PipelineConfig, result: PipelineResult) -> pd.DataFrame:
        qrels = self.bundle.qrels
        for stage, lists in result.stage_lists.items():
            result.stage_reports[stage] = evaluate_lists(lists, qrels)
        rows = [TableRow(cfg.name, cfg.threshold, dict(result.stage_reports))]

        # one row per component: that component alone through both families and the final fusion
        for component in cfg.components:
            bm25_lists = result.component_lists.get((Stage.BM25, component), {})
            neural_lists = result.component_lists.get((Stage.NEURAL, component), {})
            if not bm25_lists and not neural_lists:
                continue
            final_lists = {}
            for topic_id in sorted(set(bm25_lists) | set(neural_lists)):
                final_lists[topic_id] = fuse_families(bm25_lists.get(topic_id), neural_lists.get(topic_id),
                                                      cfg.fusion, k=cfg.rrf_k)
            rows.append(TableRow(f"{cfg.model.label}_{component.value}", cfg.threshold, {
                Stage.BM25_FUSED: evaluate_lists(bm25_lists, qrels),
                Stage.NEURAL_FUSED: evaluate_lists(neural_lists, qrels),
                Stage.FINAL: evaluate_lists(final_lists, qrels),
            }))

        result.report = table_report(rows)
        write_table(result.report, os.path.join(cfg.output_dir, "report.txt"),
                    os.path.join(cfg.output_dir, "report.csv"))
        for stage, report in result.stage_reports.items():
            atomic_write_text(os.path.join(cfg.output_dir, f"eval_{stage.value}.txt"), report.to_text())
        logger.info("Evaluation report:\n" + format_table(result.report))
        return result.report


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    return RetrievalPipeline(cfg).run()


def run_sweep(base_cfg: PipelineConfig, models: Sequence, modes: Sequence, thresholds: Sequence[int],
              fusions: Sequence) -> pd.DataFrame:
    """Run every (model, mode, threshold, fusion) combination and stack the main report rows"""
    if not base_cfg.qrels:
        raise ConfigError("sweep needs a qrels file to build its report")
    pipeline = RetrievalPipeline(base_cfg)
    tables = []
    for model, mode, threshold, fusion in itertools.product(models, modes, thresholds, fusions):
        variant = base_cfg.with_overrides(model=model, mode=mode, threshold=threshold, fusion=fusion)
        suffix = f"_{variant.fusion.value.upper()}" if len(fusions) > 1 else ""
        variant = variant.with_overrides(
            system_name=f"{variant.model.label}_{variant.mode.label}{suffix}",
            output_dir=os.path.join(base_cfg.output_dir,
                                    f"{variant.model.value}_{variant.mode.value}_{threshold}_{variant.fusion.value}"),
        )
        result = pipeline.run(variant)
        tables.append(result.report.iloc[[0]])
    table = pd.concat(tables)
    write_table(table, os.path.join(base_cfg.output_dir, "sweep_report.txt"),
                os.path.join(base_cfg.output_dir, "sweep_report.csv"))
    return table
