import json
import os

import numpy as np
import pytest

from synthetic_data_provider import SyntheticSpec, make_synthetic_corpus, write_synthetic_corpus


def write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_files(tmp_path):
    """Three Arabic documents, a two-word lexicon and a 3-d embedding file"""
    corpus = write_text(tmp_path / "corpus.jsonl", "".join(json.dumps(record, ensure_ascii=False) + "\n" for record in [
        {"id": "d1", "text": "كتاب قلم كتاب"},
        {"id": "d2", "text": "قلم بيت"},
        {"id": "d3", "text": "كتاب بيت بيت شمس"},
    ]))
    embeddings = write_text(tmp_path / "embeddings.txt", "\n".join([
        "5 3",
        "en:book 1.0 0.0 0.0",
        "en:pen 0.0 1.0 0.0",
        "ar:كتاب 0.9 0.1 0.0",
        "ar:قلم 0.1 0.9 0.0",
        "ar:بيت 0.0 0.0 1.0",
    ]) + "\n")
    lexicon = write_text(tmp_path / "lexicon.tsv", "book\tكتاب\npen\tقلم\nhouse\tبيت\n")
    topics = write_text(tmp_path / "topics.json", json.dumps([
        {"id": "T1", "title": "Book", "background": "A book and a pen.", "event_knowledge": "",
         "example_doc_ids": ["d1"]},
    ]))
    return {"corpus": corpus, "embeddings": embeddings, "lexicon": lexicon, "topics": topics,
            "dir": str(tmp_path)}


SMALL_SPEC = dict(docs=240, topics=2, relevant_per_topic=10, examples_per_topic=3, dim=8,
                  background_vocab=120, common_vocab=12, cluster_size=10, doc_length=(20, 40),
                  list_size=10, seed=11)


@pytest.fixture(scope="session")
def small_collection(tmp_path_factory):
    """A small synthetic collection written to disk once per session"""
    out_dir = str(tmp_path_factory.mktemp("small_collection"))
    corpus = make_synthetic_corpus(SyntheticSpec(**SMALL_SPEC))
    paths = write_synthetic_corpus(corpus, out_dir)
    paths["dir"] = out_dir
    paths["corpus_obj"] = corpus
    return paths


@pytest.fixture
def small_config_overrides(small_collection, tmp_path):
    return {
        "corpus": small_collection["corpus"],
        "topics": small_collection["topics"],
        "embeddings": small_collection["embeddings"],
        "lexicon": small_collection["lexicon"],
        "qrels": small_collection["qrels"],
        "threshold": 100,
        "epochs": 3,
        "checkpoint_every": 3,
        "list_size": 10,
        "lists_per_example": 2,
        "lr": 0.01,
        "output_dir": os.path.join(str(tmp_path), "out"),
    }
