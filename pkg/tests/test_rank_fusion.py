import logging
import math

import numpy as np
import pytest

from errors import ContractError, ParseError
from evaluation_metrics import recall_at_k
from rank_fusion import (Component, FusionMethod, RankedEntry, RankedList, Stage, combmnz, combsum, format_run,
                         fuse, fuse_families, fuse_run_files, isr, minmax_normalize, ranked_from_scores, read_run,
                         rrf, two_step_fuse, write_run)


def _ranked(doc_ids, topic_id="T1", component=Component.TITLE, stage=Stage.BM25, scores=None):
    if scores is None:
        scores = [float(len(doc_ids) - i) for i in range(len(doc_ids))]
    entries = [RankedEntry(doc_id, rank, score) for rank, (doc_id, score) in enumerate(zip(doc_ids, scores), start=1)]
    return RankedList(topic_id, component, stage, entries)


def test_rrf_literal_value():
    fused = rrf([_ranked(["d", "x"]), _ranked(["a", "b", "d"])], k=10)
    assert fused.scores()["d"] == 1 / 11 + 1 / 13
    assert fused.doc_ids()[0] == "d"
    assert fused.component == Component.FUSED
    fused.validate()


def _oracle_scores(lists, method, k):
    """Straightforward per-document loops over every list"""
    docs = sorted({doc_id for ranked in lists for doc_id in ranked.doc_ids()})
    scores = {}
    for doc_id in docs:
        total, hits = 0.0, 0
        for ranked in lists:
            entry = next((e for e in ranked.entries if e.doc_id == doc_id), None)
            if entry is None:
                continue
            hits += 1
            if method == FusionMethod.RRF:
                total += 1.0 / (entry.rank + k)
            elif method == FusionMethod.ISR:
                total += 1.0 / (entry.rank * entry.rank)
            else:
                values = [e.score for e in ranked.entries]
                low, high = min(values), max(values)
                total += 0.5 if high == low else (entry.score - low) / (high - low)
        if method in (FusionMethod.ISR, FusionMethod.COMBMNZ):
            total *= hits
        scores[doc_id] = total
    return scores


def _random_lists(rng):
    vocab = [f"doc{i:02d}" for i in range(25)]
    lists = []
    for _ in range(int(rng.integers(1, 5))):
        size = int(rng.integers(1, 12))
        doc_ids = [str(doc_id) for doc_id in rng.choice(vocab, size=size, replace=False)]
        # coarse scores so that ties occur
        scores = sorted(np.round(rng.uniform(0.0, 5.0, size=size), 1).tolist(), reverse=True)
        lists.append(_ranked(doc_ids, scores=scores))
    return lists


@pytest.mark.parametrize("method", list(FusionMethod))
def test_fusion_matches_oracle(method):
    rng = np.random.default_rng(17)
    for _ in range(200):
        lists = _random_lists(rng)
        k = float(rng.choice([1.0, 10.0, 60.0]))
        fused = fuse(lists, method, k=k)
        expected = _oracle_scores(lists, method, k)
        assert set(fused.doc_ids()) == set(expected)
        fused.validate()
        for doc_id, value in fused.scores().items():
            if method in (FusionMethod.RRF, FusionMethod.ISR):
                assert value == expected[doc_id]
            else:
                assert value == pytest.approx(expected[doc_id], abs=1e-12)
        # descending score, ascending id among equal scores
        keys = [(-fused.scores()[d], d) for d in fused.doc_ids()]
        assert keys == sorted(keys)


def test_ties_break_by_doc_id():
    fused = rrf([_ranked(["b", "a"]), _ranked(["a", "b"])], k=60)
    assert fused.doc_ids() == ["a", "b"]
    assert fused.ranks() == {"a": 1, "b": 2}


def test_ties_follow_the_given_order_first():
    ranked = ranked_from_scores({"a": 1.0, "b": 1.0, "c": 2.0, "d": 1.0}, "T1", Component.TITLE, Stage.NEURAL,
                                tiebreak={"d": 1, "b": 2})
    assert ranked.doc_ids() == ["c", "d", "b", "a"]
    assert ranked.ranks() == {"c": 1, "d": 2, "b": 3, "a": 4}


def _continuous_lists(rng, transform=None):
    vocab = [f"doc{i:02d}" for i in range(25)]
    lists = []
    for component in (Component.TITLE, Component.BACKGROUND, Component.EXAMPLE):
        doc_ids = [str(doc_id) for doc_id in rng.choice(vocab, size=10, replace=False)]
        scores = rng.uniform(-2.0, 2.0, size=10)
        if transform is not None:
            scores = transform(scores)
        lists.append(ranked_from_scores(dict(zip(doc_ids, scores.tolist())), "T1", component, Stage.BM25))
    return lists


@pytest.mark.parametrize("method", [FusionMethod.COMBSUM, FusionMethod.COMBMNZ])
def test_score_fusion_ignores_positive_affine_maps(method):
    original = fuse(_continuous_lists(np.random.default_rng(4)), method)
    mapped = fuse(_continuous_lists(np.random.default_rng(4), lambda s: 3.5 * s - 2.0), method)
    assert mapped.doc_ids() == original.doc_ids()
    for doc_id, value in original.scores().items():
        assert mapped.scores()[doc_id] == pytest.approx(value, abs=1e-12)


@pytest.mark.parametrize("method", [FusionMethod.RRF, FusionMethod.ISR])
@pytest.mark.parametrize("transform", [np.exp, lambda s: s ** 3])
def test_rank_fusion_ignores_monotone_maps(method, transform):
    original = fuse(_continuous_lists(np.random.default_rng(8)), method)
    mapped = fuse(_continuous_lists(np.random.default_rng(8), transform), method)
    assert mapped.doc_ids() == original.doc_ids()
    assert mapped.scores() == original.scores()


def test_isr_rewards_agreement():
    fused = isr([_ranked(["a", "b"]), _ranked(["b", "c"])])
    scores = fused.scores()
    assert scores["b"] == 2 * (1 / 4 + 1)
    assert scores["a"] == 1.0
    assert fused.doc_ids()[0] == "b"


def test_combmnz_multiplies_by_hits():
    first = _ranked(["a", "b", "c"], scores=[3.0, 2.0, 1.0])
    second = _ranked(["b", "c"], scores=[4.0, 2.0])
    assert combsum([first, second]).scores()["b"] == pytest.approx(1.5)
    assert combmnz([first, second]).scores()["b"] == pytest.approx(3.0)
    assert combmnz([first, second]).scores()["a"] == pytest.approx(1.0)


def test_minmax_constant_and_non_finite_scores():
    assert minmax_normalize(_ranked(["a", "b"], scores=[2.0, 2.0])) == {"a": 0.5, "b": 0.5}
    normalized = minmax_normalize(_ranked(["a", "b", "c"], scores=[4.0, 2.0, -math.inf]))
    assert normalized == {"a": 1.0, "b": 0.0, "c": 0.0}


def test_fusion_input_errors():
    with pytest.raises(ContractError):
        rrf([])
    with pytest.raises(ContractError):
        rrf([_ranked(["a"])], k=0)
    with pytest.raises(ContractError):
        rrf([_ranked(["a"], topic_id="T1"), _ranked(["a"], topic_id="T2")])
    with pytest.raises(ContractError):
        combsum([_ranked(["a"])], normalization="zscore")


def test_two_step_fusion_recovers_complementary_relevance():
    relevant = {f"r{i}" for i in range(10)}
    bm25 = [_ranked([f"r{i}" for i in range(5)] + [f"a{i}" for i in range(10)], component=component)
            for component in (Component.TITLE, Component.BACKGROUND, Component.EVENT_KNOWLEDGE)]
    neural = [_ranked([f"r{i}" for i in range(5, 10)] + [f"b{i}" for i in range(10)], component=component,
                      stage=Stage.NEURAL)
              for component in (Component.TITLE, Component.BACKGROUND, Component.EVENT_KNOWLEDGE)]

    bm25_fused = fuse(bm25, FusionMethod.RRF, stage=Stage.BM25_FUSED)
    neural_fused = fuse(neural, FusionMethod.RRF, stage=Stage.NEURAL_FUSED)
    final = two_step_fuse(bm25, neural, FusionMethod.RRF)

    assert recall_at_k(bm25_fused, relevant, 10) == 0.5
    assert recall_at_k(neural_fused, relevant, 10) == 0.5
    assert recall_at_k(final, relevant, 10) == 1.0
    assert final.stage == Stage.FINAL


def test_one_empty_family_passes_the_other_through(caplog):
    bm25_fused = _ranked(["a", "b"], stage=Stage.BM25_FUSED, component=Component.FUSED)
    with caplog.at_level(logging.WARNING):
        final = fuse_families(bm25_fused, None, FusionMethod.RRF)
    assert final.doc_ids() == ["a", "b"]
    assert final.stage == Stage.FINAL
    assert "one fusion family is empty" in caplog.text
    with pytest.raises(ContractError):
        fuse_families(None, None, FusionMethod.RRF)


def test_without_renumbers():
    ranked = _ranked(["a", "b", "c", "d"]).without({"b"})
    assert ranked.doc_ids() == ["a", "c", "d"]
    assert ranked.ranks() == {"a": 1, "c": 2, "d": 3}
    ranked.validate()


def test_validate_catches_broken_lists():
    with pytest.raises(ContractError):
        RankedList("T1", Component.TITLE, Stage.BM25, [RankedEntry("a", 2, 1.0)]).validate()
    with pytest.raises(ContractError):
        _ranked(["a", "a"]).validate()
    with pytest.raises(ContractError):
        _ranked(["a", "b"], scores=[1.0, 2.0]).validate()


def test_run_file_format(tmp_path):
    lists = [ranked_from_scores({"d2": 0.1, "d1": 0.25}, "T2", Component.FUSED, Stage.FINAL),
             ranked_from_scores({"d9": 1.0}, "T1", Component.FUSED, Stage.FINAL)]
    assert format_run(lists, "tag") == "T1 Q0 d9 1 1.0 tag\nT2 Q0 d1 1 0.25 tag\nT2 Q0 d2 2 0.1 tag\n"
    path = str(tmp_path / "run.txt")
    write_run(path, lists, "tag")
    runs = read_run(path)
    assert runs["T2"].doc_ids() == ["d1", "d2"]
    assert runs["T2"].scores()["d2"] == 0.1


def test_read_run_keeps_best_rank_and_renumbers(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("T1 Q0 a 2 5.0 x\nT1 Q0 b 4 3.0 x\nT1 Q0 a 7 1.0 x\n\nT1 Q0 c 9 0.5 x\n", encoding="utf-8")
    ranked = read_run(str(path))["T1"]
    assert ranked.doc_ids() == ["a", "b", "c"]
    assert ranked.ranks() == {"a": 1, "b": 2, "c": 3}
    assert ranked.scores()["a"] == 5.0


@pytest.mark.parametrize("line", ["T1 Q0 a 1 0.5\n", "T1 Q0 a first 0.5 x\n"])
def test_read_run_bad_line(tmp_path, line):
    path = tmp_path / "run.txt"
    path.write_text("T1 Q0 z 1 1.0 x\n" + line, encoding="utf-8")
    with pytest.raises(ParseError) as info:
        read_run(str(path))
    assert info.value.line_number == 2


def test_fuse_run_files(tmp_path):
    first, second = tmp_path / "a.run", tmp_path / "b.run"
    first.write_text("T1 Q0 x 1 2.0 a\nT1 Q0 y 2 1.0 a\nT2 Q0 z 1 1.0 a\n", encoding="utf-8")
    second.write_text("T1 Q0 y 1 9.0 b\n", encoding="utf-8")
    fused = fuse_run_files([str(first), str(second)], FusionMethod.RRF, k=60)
    assert [ranked.topic_id for ranked in fused] == ["T1", "T2"]
    assert fused[0].doc_ids() == ["y", "x"]
    assert fused[0].scores()["y"] == 1 / 62 + 1 / 61
    assert fused[1].doc_ids() == ["z"]
