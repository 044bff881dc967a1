"""
Pipeline configuration
Declarative key=value config files layered over environment defaults and CLI flags
"""
import os
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values

import config
from errors import ConfigError
from listnet_trainer import TrainConfig
from neural_rankers import RankerArchitecture
from rank_fusion import QUERY_COMPONENTS, Component, FusionMethod


class QueryMode(Enum):
    ENGARA = "engara"
    FULLARA = "fullara"

    @property
    def label(self) -> str:
        return {"engara": "EngAra", "fullara": "FullAra"}[self.value]


PATH_KEYS = ("corpus", "topics", "embeddings", "lexicon", "qrels", "checkpoint")
REQUIRED_KEYS = ("corpus", "topics", "embeddings", "lexicon")


def _enum(enum_cls, value, key: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).strip().lower())
    except ValueError:
        choices = ", ".join(member.value for member in enum_cls)
        raise ConfigError(f"{key}: unknown value {value!r} (choose from {choices})")


def parse_components(value) -> Tuple[Component, ...]:
    if isinstance(value, str):
        value = [part for part in value.replace(" ", "").split(",") if part]
    components = tuple(_enum(Component, item, "components") for item in value)
    if not components:
        raise ConfigError("components: at least one query component is required")
    for component in components:
        if component not in QUERY_COMPONENTS:
            raise ConfigError(f"components: {component.value!r} is not a query component")
    # keep the canonical component order
    return tuple(component for component in QUERY_COMPONENTS if component in components)


def _int_pair(value, key: str) -> Tuple[int, int]:
    if isinstance(value, str):
        value = value.lower().replace("x", ",").split(",")
    try:
        first, second = (int(part) for part in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected two integers like 150x400, got {value!r}")
    return first, second


def _int_tuple(value, key: str) -> Tuple[int, ...]:
    if isinstance(value, str):
        value = [part for part in value.replace(" ", "").split(",") if part]
    try:
        return tuple(int(part) for part in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected comma-separated integers, got {value!r}")


def _bool(value, key: str) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


@dataclass
class PipelineConfig:
    corpus: str
    topics: str
    embeddings: str
    lexicon: str
    qrels: Optional[str] = None
    threshold: int = config.DEFAULT_THRESHOLD
    model: RankerArchitecture = RankerArchitecture.KNRM
    mode: QueryMode = QueryMode.ENGARA
    fusion: FusionMethod = FusionMethod.RRF
    components: Tuple[Component, ...] = tuple(QUERY_COMPONENTS)
    seed: int = config.DEFAULT_SEED
    k1: float = config.BM25_K1
    b: float = config.BM25_B
    exclude_examples: bool = True
    rrf_k: float = config.RRF_K
    output_dir: str = config.OUTPUT_DIR
    checkpoint: Optional[str] = None
    epochs: int = config.EPOCHS
    checkpoint_every: int = config.CHECKPOINT_EVERY
    lr: float = config.LEARNING_RATE
    list_size: int = config.LIST_SIZE
    lists_per_example: int = config.LISTS_PER_EXAMPLE
    query_max_len: int = config.QUERY_MAX_LEN
    doc_max_len: int = config.DOC_MAX_LEN
    workers: int = config.DEFAULT_WORKERS
    convknrm_filters: int = config.CONVKNRM_FILTERS
    convknrm_orders: Tuple[int, ...] = config.CONVKNRM_ORDERS
    matchpyramid_canvas: Tuple[int, int] = config.MATCHPYRAMID_CANVAS
    system_name: Optional[str] = None

    def __post_init__(self):
        self.model = _enum(RankerArchitecture, self.model, "model")
        self.mode = _enum(QueryMode, self.mode, "mode")
        self.fusion = _enum(FusionMethod, self.fusion, "fusion")
        self.components = parse_components(self.components)
        self.exclude_examples = _bool(self.exclude_examples, "exclude_examples")
        self.convknrm_orders = _int_tuple(self.convknrm_orders, "convknrm_orders")
        self.matchpyramid_canvas = _int_pair(self.matchpyramid_canvas, "matchpyramid_canvas")
        try:
            for name in ("threshold", "seed", "epochs", "checkpoint_every", "list_size", "lists_per_example",
                         "query_max_len", "doc_max_len", "workers", "convknrm_filters"):
                setattr(self, name, int(getattr(self, name)))
            for name in ("k1", "b", "rrf_k", "lr"):
                setattr(self, name, float(getattr(self, name)))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid numeric setting: {e}")
        if self.threshold < 1:
            raise ConfigError(f"threshold must be >= 1, got {self.threshold}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.rrf_k > 0:
            raise ConfigError(f"rrf_k must be > 0, got {self.rrf_k}")

    @property
    def name(self) -> str:
        return self.system_name or f"{self.model.label}_{self.mode.label}"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            list_size=self.list_size,
            epochs=self.epochs,
            checkpoint_every=self.checkpoint_every,
            lr=self.lr,
            lists_per_example=self.lists_per_example,
            seed=self.seed,
            query_max_len=self.query_max_len,
            doc_max_len=self.doc_max_len,
        )

    def ranker_options(self) -> Dict[str, Any]:
        if self.model == RankerArchitecture.CONVKNRM:
            return {"orders": self.convknrm_orders, "filters": self.convknrm_filters}
        if self.model == RankerArchitecture.MATCHPYRAMID:
            return {"canvas": self.matchpyramid_canvas}
        return {}

    def check_paths(self):
        for key in PATH_KEYS:
            if key == "checkpoint":
                continue
            path = getattr(self, key)
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{key}: file not found: {path}")

    def with_overrides(self, **overrides) -> "PipelineConfig":
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})


CONFIG_KEYS = {f.name for f in fields(PipelineConfig)}


def read_config_file(path: str) -> Dict[str, str]:
    """Parse a key=value config file (dotenv syntax); relative paths resolve against the data directory"""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        name = key.strip().lower().replace("-", "_")
        if name not in CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if value is None or value == "":
            continue
        if name in PATH_KEYS and not os.path.isabs(value):
            value = os.path.join(config.data_dir(), value)
        values[name] = value
    return values


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Defaults < environment < config file < explicit overrides (None means not given)"""
    values: Dict[str, Any] = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown setting {key!r}")
        if value is not None:
            values[key] = value
    missing = [key for key in REQUIRED_KEYS if key not in values]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
    return PipelineConfig(**values)
