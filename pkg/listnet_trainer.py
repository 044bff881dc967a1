"""
ListNet listwise training over BM25-pre-selected candidate pools
Samples single-positive candidate lists, runs Adam, keeps a checkpoint every few epochs
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.special import softmax as _softmax
from tqdm import tqdm

import autodiff_engine as ad
import config
from autodiff_engine import AdamState, Tape, Tensor
from embedding_store import EmbeddingTable, embed_tokens
from errors import ConfigError, ContractError, EmptyInputError, NumericError, TrainingError
from neural_rankers import Checkpoint, NeuralRanker, RankerArchitecture, build_ranker
from rank_fusion import Component, RankedList
from text_processing import TokenSequence, truncate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateList:
    topic_id: str
    component: Component
    query_key: str
    doc_ids: Tuple[str, ...]
    labels: Tuple[int, ...]

    def __post_init__(self):
        if len(self.doc_ids) != len(self.labels):
            raise ContractError(f"CandidateList: {len(self.doc_ids)} docs for {len(self.labels)} labels")
        if sum(self.labels) != 1 or any(label not in (0, 1) for label in self.labels):
            raise ContractError("CandidateList: exactly one positive label is required")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ContractError("CandidateList: duplicate doc ids")


@dataclass
class TrainConfig:
    list_size: int = config.LIST_SIZE
    epochs: int = config.EPOCHS
    checkpoint_every: int = config.CHECKPOINT_EVERY
    lr: float = config.LEARNING_RATE
    lists_per_example: int = config.LISTS_PER_EXAMPLE
    seed: int = config.DEFAULT_SEED
    query_max_len: int = config.QUERY_MAX_LEN
    doc_max_len: int = config.DOC_MAX_LEN
    validation_fraction: float = config.VALIDATION_FRACTION

    def __post_init__(self):
        for name in ("list_size", "epochs", "checkpoint_every", "lists_per_example", "query_max_len", "doc_max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"TrainConfig: {name} must be >= 1, got {getattr(self, name)}")
        if self.list_size < 2:
            raise ConfigError(f"TrainConfig: list_size must be >= 2, got {self.list_size}")
        if self.epochs % self.checkpoint_every:
            raise ConfigError(f"TrainConfig: epochs ({self.epochs}) must be a multiple of "
                              f"checkpoint_every ({self.checkpoint_every})")
        if self.lr < 0:
            raise ConfigError(f"TrainConfig: lr must be >= 0, got {self.lr}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"TrainConfig: validation_fraction must lie in (0, 1), got {self.validation_fraction}")


@dataclass
class TrainingGroup:
    """One query with its candidate pool; every list sampled from it shares the query"""
    topic_id: str
    component: Component
    query_key: str
    query: TokenSequence
    pool: RankedList
    examples: FrozenSet[str]
    positives: Tuple[str, ...] = ()

    def __post_init__(self):
        self.examples = frozenset(self.examples)
        if not self.positives:
            self.positives = tuple(sorted(self.examples))


def listnet_loss(scores: Union[Tensor, np.ndarray, Sequence[float]],
                 labels: Sequence[float]) -> Union[Tensor, float]:
    """Cross entropy between softmax(labels) and softmax(scores).

    A Tensor input is recorded on its tape; an array input returns a float.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n_scores = scores.shape[0] if isinstance(scores, Tensor) else len(scores)
    if labels.ndim != 1 or n_scores != labels.shape[0] or labels.shape[0] < 2:
        raise ContractError(f"listnet_loss: {n_scores} scores for {labels.shape[0]} labels (need >= 2)")
    target = _softmax(labels)

    if isinstance(scores, Tensor):
        tape = scores.tape
        log_q = ad.log(ad.softmax(scores))
        return ad.scale(ad.reduce_sum(ad.mul(tape.constant(target), log_q)), -1.0)

    q = _softmax(np.asarray(scores, dtype=np.float64))
    return float(-np.sum(target * np.log(np.maximum(q, config.LOG_CLAMP))))


def sample_lists(pool: RankedList, examples: Set[str], cfg: TrainConfig, rng: np.random.Generator,
                 positives: Optional[Sequence[str]] = None, query_key: str = "") -> List[CandidateList]:
    """Per positive: cfg.lists_per_example lists of the positive plus list_size - 1 sampled negatives.

    Negatives are pool documents outside `examples`, drawn uniformly without
    replacement. A pool with too few negatives yields no lists.
    """
    positives = sorted(examples) if positives is None else list(positives)
    negatives = [doc_id for doc_id in pool.doc_ids() if doc_id not in examples]
    label = f"topic {pool.topic_id} / {pool.component.value}"
    if not positives:
        logger.warning(f"Skipping {label}: no example documents to use as positives")
        return []
    if len(negatives) < cfg.list_size - 1:
        logger.warning(f"Skipping {label}: {len(negatives)} non-example candidates, "
                       f"need {cfg.list_size - 1}")
        return []

    labels = (1,) + (0,) * (cfg.list_size - 1)
    lists = []
    for positive in positives:
        for _ in range(cfg.lists_per_example):
            picked = rng.choice(len(negatives), size=cfg.list_size - 1, replace=False)
            doc_ids = (positive,) + tuple(negatives[i] for i in picked)
            lists.append(CandidateList(pool.topic_id, pool.component, query_key, doc_ids, labels))
    return lists


def _list_key(group: TrainingGroup, candidates: CandidateList) -> Tuple[str, FrozenSet[str]]:
    return group.query_key, frozenset(candidates.doc_ids)


def _finite_or_none(value: float) -> Optional[float]:
    # NaN is not valid JSON
    return value if math.isfinite(value) else None


def select_checkpoint(checkpoints: Sequence[Checkpoint],
                      validation_loss: Optional[Callable[[Checkpoint], float]] = None) -> Checkpoint:
    """Checkpoint with the lowest validation loss; ties go to the earliest"""
    if not checkpoints:
        raise ContractError("select_checkpoint: no checkpoints")
    best, best_loss = None, math.inf
    for checkpoint in checkpoints:
        loss = validation_loss(checkpoint) if validation_loss is not None else checkpoint.val_loss
        if loss is None:
            raise ContractError(f"select_checkpoint: epoch {checkpoint.epoch} has no validation loss")
        if math.isnan(loss):
            loss = math.inf
        if best is None or loss < best_loss:
            best, best_loss = checkpoint, loss
    return best


class ListNetTrainer:
    def __init__(self, ranker: NeuralRanker, embeddings: EmbeddingTable, documents: Dict[str, TokenSequence],
                 cfg: TrainConfig, log_path: Optional[str] = None):
        self.ranker = ranker
        self.embeddings = embeddings
        self.documents = documents
        self.cfg = cfg
        self.log_path = log_path
        self._query_emb: Dict[str, np.ndarray] = {}
        self._doc_emb: Dict[str, np.ndarray] = {}
        self._prepared: Dict[Tuple[str, str], object] = {}

    def _embed_query(self, group: TrainingGroup) -> np.ndarray:
        if group.query_key not in self._query_emb:
            seq = truncate(group.query, self.cfg.query_max_len)
            self._query_emb[group.query_key] = embed_tokens(self.embeddings, seq)[0]
        return self._query_emb[group.query_key]

    def _embed_doc(self, doc_id: str) -> np.ndarray:
        if doc_id not in self._doc_emb:
            if doc_id not in self.documents:
                raise ContractError(f"training: unknown document id {doc_id!r}")
            seq = truncate(self.documents[doc_id], self.cfg.doc_max_len)
            self._doc_emb[doc_id] = embed_tokens(self.embeddings, seq)[0]
        return self._doc_emb[doc_id]

    def _inputs(self, query_emb: np.ndarray, query_key: str, doc_id: str):
        key = (query_key, doc_id)
        if key not in self._prepared:
            try:
                self._prepared[key] = self.ranker.prepare(query_emb, self._embed_doc(doc_id))
            except EmptyInputError:
                self._prepared[key] = None
        return self._prepared[key]

    def _list_inputs(self, group: TrainingGroup, candidates: CandidateList):
        """Prepared inputs and labels for the usable candidates, or None if the list is unusable"""
        query_emb = self._embed_query(group)
        inputs, labels = [], []
        for doc_id, label in zip(candidates.doc_ids, candidates.labels):
            prepared = self._inputs(query_emb, group.query_key, doc_id)
            if prepared is None:
                if label:
                    return None
                continue
            inputs.append(prepared)
            labels.append(label)
        if len(inputs) < 2:
            return None
        return inputs, labels

    def _loss_fn(self, inputs, labels):
        def loss_fn(tape: Tape, tensors: Dict[str, Tensor]) -> Tensor:
            scores = ad.stack([self.ranker.forward(tape, tensors, prepared) for prepared in inputs])
            return listnet_loss(scores, labels)
        return loss_fn

    def _sample_epoch(self, groups: Sequence[TrainingGroup], rng: np.random.Generator):
        sampled = []
        for group in groups:
            for candidates in sample_lists(group.pool, group.examples, self.cfg, rng,
                                           positives=group.positives, query_key=group.query_key):
                sampled.append((group, candidates))
        order = rng.permutation(len(sampled))
        return [sampled[i] for i in order]

    def _split_lists(self, groups: Sequence[TrainingGroup], rng: np.random.Generator):
        """Sample once and hold out a fixed share for validation; the rest is the first epoch's training set"""
        sampled = self._sample_epoch(groups, rng)
        if not sampled:
            return [], [], []
        viable_keys = {group.query_key for group, _ in sampled}
        viable = [group for group in groups if group.query_key in viable_keys]
        size = max(1, int(round(self.cfg.validation_fraction * len(sampled))))
        held_out = set(rng.choice(len(sampled), size=size, replace=False).tolist())
        validation = [sampled[i] for i in sorted(held_out)]
        validation_keys = {_list_key(*item) for item in validation}
        first_epoch = [item for item in sampled if _list_key(*item) not in validation_keys]
        return validation, first_epoch, viable

    def validation_loss(self, params: Dict[str, np.ndarray], validation) -> float:
        losses = []
        for group, candidates in validation:
            prepared = self._list_inputs(group, candidates)
            if prepared is None:
                continue
            inputs, labels = prepared
            scores = [self.ranker.score(params, item) for item in inputs]
            losses.append(listnet_loss(np.asarray(scores), labels))
        return float(np.mean(losses)) if losses else math.nan

    def train(self, groups: Sequence[TrainingGroup]) -> List[Checkpoint]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        params = self.ranker.init_params(self.embeddings.dim, rng)
        state = AdamState.zeros_like(params)
        validation, first_epoch, groups = self._split_lists(groups, rng)
        if not validation:
            raise TrainingError("no candidate lists could be sampled from any topic pool")
        logger.info(f"Training {self.ranker.architecture.label}: {len(groups)} query groups, "
                    f"{len(validation)} validation lists")
        held_out = {_list_key(group, candidates) for group, candidates in validation}

        log_file = None
        if self.log_path:
            os.makedirs(os.path.dirname(os.path.abspath(self.log_path)), exist_ok=True)
            log_file = open(self.log_path, "w", encoding="utf-8")

        checkpoints: List[Checkpoint] = []
        try:
            for epoch in range(1, cfg.epochs + 1):
                started = time.perf_counter()
                losses = []
                if epoch == 1:
                    epoch_lists = first_epoch
                else:
                    epoch_lists = [item for item in self._sample_epoch(groups, rng)
                                   if _list_key(*item) not in held_out]
                progress = tqdm(epoch_lists, desc=f"Epoch {epoch}/{cfg.epochs}",
                                disable=not logger.isEnabledFor(logging.INFO), leave=False)
                for index, (group, candidates) in enumerate(progress):
                    prepared = self._list_inputs(group, candidates)
                    if prepared is None:
                        continue
                    inputs, labels = prepared
                    batch = (f"epoch {epoch}, list {index}, topic {candidates.topic_id}, "
                             f"component {candidates.component.value}")
                    try:
                        loss, grads = ad.value_and_grad(self._loss_fn(inputs, labels), params)
                    except NumericError as e:
                        raise TrainingError(f"non-finite value at {batch}: {e}") from e
                    if not math.isfinite(loss):
                        raise TrainingError(f"non-finite loss at {batch}")
                    params, state = ad.adam_step(params, grads, state, cfg.lr)
                    losses.append(loss)

                mean_loss = float(np.mean(losses)) if losses else math.nan
                val_loss = self.validation_loss(params, validation)
                wall_ms = int(round((time.perf_counter() - started) * 1000))
                logger.info(f"Epoch {epoch}: mean_loss={mean_loss:.5f} val_loss={val_loss:.5f} "
                            f"({len(losses)} lists, {wall_ms} ms)")
                if log_file:
                    log_file.write(json.dumps({"epoch": epoch, "mean_loss": _finite_or_none(mean_loss),
                                               "val_loss": _finite_or_none(val_loss), "wall_ms": wall_ms}) + "\n")
                    log_file.flush()

                if epoch % cfg.checkpoint_every == 0:
                    checkpoints.append(Checkpoint(
                        architecture=self.ranker.architecture,
                        epoch=epoch,
                        params={name: value.copy() for name, value in params.items()},
                        kernel_bank=self.ranker.bank,
                        hyperparameters=self.ranker.hyperparameters(),
                        val_loss=val_loss,
                    ))
        finally:
            if log_file:
                log_file.close()
        return checkpoints


def train(architecture: RankerArchitecture, groups: Sequence[TrainingGroup], embeddings: EmbeddingTable,
          documents: Dict[str, TokenSequence], cfg: TrainConfig, ranker_options: Optional[dict] = None,
          log_path: Optional[str] = None) -> List[Checkpoint]:
    ranker = build_ranker(architecture, hyperparameters=ranker_options)
    return ListNetTrainer(ranker, embeddings, documents, cfg, log_path=log_path).train(groups)
