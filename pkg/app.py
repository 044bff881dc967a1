"""
Command-line interface for the query-by-example pipeline
Every stage is a subcommand reading and writing the documented file formats
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import config
from bm25_index import BM25Params, build_index, load_corpus, load_index, save_index
from embedding_store import load_lexicon
from errors import RetrievalError
from evaluation_metrics import evaluate_run, format_table
from neural_rankers import RankerArchitecture
from pipeline_config import REQUIRED_KEYS, PipelineConfig, QueryMode, load_pipeline_config, parse_components
from rank_fusion import QUERY_COMPONENTS, FusionMethod, Stage, format_run, fuse_run_files, write_run
from retrieval_pipeline import (RetrievalPipeline, build_query_units, component_lists, load_topics,
                                preselect_units, run_sweep)
from synthetic_data_provider import SyntheticSpec, make_synthetic_corpus, write_synthetic_corpus

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_MODELS = [member.value for member in RankerArchitecture]
_MODES = [member.value for member in QueryMode]
_FUSIONS = [member.value for member in FusionMethod]


def _add_override_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    group = parser.add_argument_group("overrides (take precedence over the config file)")
    group.add_argument("--corpus")
    group.add_argument("--topics")
    group.add_argument("--embeddings")
    group.add_argument("--lexicon")
    group.add_argument("--qrels")
    group.add_argument("--threshold", type=int)
    group.add_argument("--model", choices=_MODELS)
    group.add_argument("--mode", choices=_MODES)
    group.add_argument("--fusion", choices=_FUSIONS)
    group.add_argument("--components", help="comma-separated subset of " +
                       ",".join(c.value for c in QUERY_COMPONENTS))
    group.add_argument("--k1", type=float)
    group.add_argument("--b", type=float)
    group.add_argument("--rrf-k", dest="rrf_k", type=float)
    group.add_argument("--epochs", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--output-dir", dest="output_dir")
    group.add_argument("--checkpoint")
    group.add_argument("--workers", type=int)
    group.add_argument("--include-examples", action="store_true",
                       help="keep example documents in the written runs")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in ("corpus", "topics", "embeddings", "lexicon", "qrels", "threshold", "model", "mode", "fusion",
                    "components", "k1", "b", "rrf_k", "epochs", "lr", "output_dir", "checkpoint", "workers")
    }
    overrides["seed"] = args.seed
    if getattr(args, "include_examples", False):
        overrides["exclude_examples"] = False
    if not args.config:
        missing = [key for key in REQUIRED_KEYS if overrides.get(key) is None]
        if missing:
            args.parser.error(f"--config or --{' --'.join(missing)} required")
    return load_pipeline_config(args.config, overrides)


def cmd_synth(args) -> int:
    spec = SyntheticSpec(docs=args.docs, topics=args.topics, relevant_per_topic=args.relevant,
                         examples_per_topic=args.examples, dim=args.dim,
                         seed=args.seed if args.seed is not None else SyntheticSpec.seed)
    paths = write_synthetic_corpus(make_synthetic_corpus(spec), args.out_dir)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def cmd_index(args) -> int:
    documents, _ = load_corpus(args.corpus)
    index = build_index(documents, BM25Params(args.k1, args.b), workers=args.workers)
    save_index(index, args.out)
    logger.info(f"Wrote index to {args.out}")
    return 0


def cmd_preselect(args) -> int:
    index = load_index(args.index)
    documents, _ = load_corpus(args.corpus)
    doc_tokens = {doc.id: doc.tokens for doc in documents}
    topics = load_topics(args.topics, set(doc_tokens))
    lexicon = load_lexicon(args.lexicon)
    components = parse_components(args.components)

    units = []
    for topic in topics:
        units.extend(build_query_units(topic, components, QueryMode.ENGARA, lexicon, doc_tokens,
                                       args.query_max_len))
    lists = component_lists(units, preselect_units(index, units, args.threshold), Stage.BM25, args.rrf_k)
    examples = {topic.id: set(topic.example_doc_ids) for topic in topics}
    for component in components:
        members = []
        for topic_id in sorted(lists):
            ranked = lists[topic_id].get(component)
            if ranked is not None:
                members.append(ranked if args.include_examples else ranked.without(examples[topic_id]))
        path = os.path.join(args.out_dir, f"bm25_{component.value}.run")
        write_run(path, members, f"bm25_{component.value}")
        print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, path = RetrievalPipeline(cfg).train_ranker(cfg)
    print(path)
    return 0


def cmd_rerank(args) -> int:
    cfg = _load_config(args)
    if not cfg.checkpoint:
        args.parser.error("rerank needs --checkpoint (or a checkpoint key in the config file)")
    pipeline = RetrievalPipeline(cfg)
    lists = pipeline.neural_component_lists(cfg)
    for component in cfg.components:
        members = [by_component[component] for _, by_component in sorted(lists.items()) if component in by_component]
        path = os.path.join(cfg.output_dir, "components", f"neural_{component.value}.run")
        write_run(path, members, f"{cfg.name}_neural_{component.value}")
        print(path)
    return 0


def cmd_fuse(args) -> int:
    fused = fuse_run_files(args.runs, FusionMethod(args.method), k=args.k)
    tag = args.tag or f"fused_{args.method}"
    if args.out:
        write_run(args.out, fused, tag)
    else:
        sys.stdout.write(format_run(fused, tag))
    return 0


def cmd_eval(args) -> int:
    for path in args.runs:
        report = evaluate_run(path, args.qrels, k=args.k)
        if len(args.runs) > 1:
            sys.stdout.write(f"# {path}\n")
        sys.stdout.write(report.to_text())
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    result = RetrievalPipeline(cfg).run()
    for name, path in sorted(result.run_paths.items()):
        logger.info(f"{name}: {path}")
    if result.report is not None:
        sys.stdout.write(format_table(result.report))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    table = run_sweep(cfg, args.models, args.modes, args.thresholds, args.fusions)
    sys.stdout.write(format_table(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="Cross-lingual query-by-example retrieval")
    parser.add_argument("--log-level", default=config.LOG_LEVEL.upper(),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--seed", type=int, default=None, help=f"random seed (default {config.DEFAULT_SEED})")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(handler=handler, parser=sub)
        return sub

    sub = add("synth", cmd_synth, "write a synthetic bilingual collection")
    sub.add_argument("--out-dir", dest="out_dir", required=True)
    sub.add_argument("--docs", type=int, default=SyntheticSpec.docs)
    sub.add_argument("--topics", type=int, default=SyntheticSpec.topics)
    sub.add_argument("--relevant", type=int, default=SyntheticSpec.relevant_per_topic)
    sub.add_argument("--examples", type=int, default=SyntheticSpec.examples_per_topic)
    sub.add_argument("--dim", type=int, default=SyntheticSpec.dim)

    sub = add("index", cmd_index, "build and save the BM25 inverted index")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--k1", type=float, default=config.BM25_K1)
    sub.add_argument("--b", type=float, default=config.BM25_B)
    sub.add_argument("--workers", type=int, default=config.DEFAULT_WORKERS)

    sub = add("preselect", cmd_preselect, "write per-component BM25 candidate runs")
    sub.add_argument("--index", required=True)
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--topics", required=True)
    sub.add_argument("--lexicon", required=True)
    sub.add_argument("--threshold", type=int, default=config.DEFAULT_THRESHOLD)
    sub.add_argument("--out-dir", dest="out_dir", required=True)
    sub.add_argument("--components", default=",".join(c.value for c in QUERY_COMPONENTS))
    sub.add_argument("--rrf-k", dest="rrf_k", type=float, default=config.RRF_K)
    sub.add_argument("--query-max-len", dest="query_max_len", type=int, default=config.QUERY_MAX_LEN)
    sub.add_argument("--include-examples", action="store_true")

    sub = add("train", cmd_train, "train a ranker with ListNet and save its checkpoints")
    _add_override_flags(sub)

    sub = add("rerank", cmd_rerank, "re-rank BM25 pools with a trained checkpoint")
    _add_override_flags(sub)

    sub = add("fuse", cmd_fuse, "fuse TREC run files per topic")
    sub.add_argument("--method", choices=_FUSIONS, default=FusionMethod.RRF.value)
    sub.add_argument("--k", type=float, default=config.RRF_K)
    sub.add_argument("--out")
    sub.add_argument("--tag")
    sub.add_argument("runs", nargs="+")

    sub = add("eval", cmd_eval, "evaluate run files against qrels")
    sub.add_argument("--qrels", required=True)
    sub.add_argument("--k", type=int, default=config.METRIC_DEPTH)
    sub.add_argument("runs", nargs="+")

    sub = add("pipeline", cmd_pipeline, "run pre-selection, re-ranking, fusion and evaluation")
    _add_override_flags(sub)

    sub = add("sweep", cmd_sweep, "run the pipeline over a grid of settings")
    _add_override_flags(sub)
    sub.add_argument("--models", nargs="+", choices=_MODELS, default=[RankerArchitecture.KNRM.value])
    sub.add_argument("--modes", nargs="+", choices=_MODES, default=[QueryMode.ENGARA.value])
    sub.add_argument("--thresholds", nargs="+", type=int, default=[config.DEFAULT_THRESHOLD])
    sub.add_argument("--fusions", nargs="+", choices=_FUSIONS, default=[FusionMethod.RRF.value])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.handler(args)
    except (RetrievalError, OSError) as e:
        message = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
