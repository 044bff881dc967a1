import logging
import math

import numpy as np
import pytest

from errors import ContractError, ParseError, UndefinedMetricError
from evaluation_metrics import (STAGE_LABELS, Qrels, TableRow, evaluate_lists, evaluate_run, format_table, load_qrels,
                                ndcg_at_k, precision_at_k, random_baseline, recall_at_k, table_report, write_table)
from rank_fusion import Component, Stage, ranked_from_scores, write_run


def _ranking(topic_id, doc_ids):
    return ranked_from_scores({doc_id: float(len(doc_ids) - i) for i, doc_id in enumerate(doc_ids)},
                              topic_id, Component.FUSED, Stage.FINAL)


def test_partial_ranking_values():
    relevant = {"d1", "d3", "d5"}
    ranking = ["d1", "d2", "d3"]
    assert precision_at_k(ranking, relevant, 10) == pytest.approx(0.2)
    assert recall_at_k(ranking, relevant, 10) == pytest.approx(2 / 3)
    ideal = 1 + 1 / math.log2(3) + 0.5
    assert ndcg_at_k(ranking, relevant, 10) == pytest.approx(1.5 / ideal, abs=1e-12)


def test_ndcg_with_gaps_and_unretrieved_relevant_docs():
    relevant = {"r1", "r2", "r3", "r4", "r5"}
    ranking = ["n1", "r1", "n2", "r2", "n3", "n4", "r3", "n5", "n6", "n7", "r4"]
    dcg = 1 / math.log2(3) + 1 / math.log2(5) + 1 / math.log2(8)
    idcg = 1 + 1 / math.log2(3) + 1 / math.log2(4) + 1 / math.log2(5) + 1 / math.log2(6)
    assert ndcg_at_k(ranking, relevant, 10) == pytest.approx(dcg / idcg, abs=1e-12)
    assert recall_at_k(ranking, relevant, 10) == pytest.approx(3 / 5)


def _reference_ndcg(ranking, relevant, k):
    gains = np.array([doc_id in relevant for doc_id in ranking[:k]], dtype=float)
    discounts = np.log2(np.arange(2, k + 2))
    ideal = np.zeros(k)
    ideal[:min(len(relevant), k)] = 1.0
    return float((gains / discounts[:len(gains)]).sum() / (ideal / discounts).sum())


def test_ndcg_agrees_with_a_vectorized_reference():
    rng = np.random.default_rng(21)
    docs = [f"d{i:02d}" for i in range(30)]
    for _ in range(200):
        relevant = {str(doc_id) for doc_id in rng.choice(docs, size=int(rng.integers(1, 12)), replace=False)}
        ranking = [str(doc_id) for doc_id in rng.permutation(docs)[:int(rng.integers(1, 30))]]
        k = int(rng.choice([1, 5, 10]))
        assert ndcg_at_k(ranking, relevant, k) == pytest.approx(_reference_ndcg(ranking, relevant, k), abs=1e-9)


def test_short_ranking_with_single_relevant_doc():
    assert precision_at_k(["x", "y"], {"y"}, 10) == pytest.approx(0.1)
    assert recall_at_k(["x", "y"], {"y"}, 10) == 1.0
    assert ndcg_at_k(["x", "y"], {"y"}, 10) == pytest.approx(1 / math.log2(3), abs=1e-12)


def test_ideal_ordering_scores_one():
    relevant = {f"r{i}" for i in range(4)}
    ranking = sorted(relevant) + [f"n{i}" for i in range(8)]
    assert ndcg_at_k(ranking, relevant, 10) == pytest.approx(1.0, abs=1e-12)
    # more relevant docs than the depth still normalizes to one
    many = {f"r{i}" for i in range(15)}
    assert ndcg_at_k(sorted(many), many, 10) == pytest.approx(1.0, abs=1e-12)


def test_promoting_a_relevant_doc_never_lowers_ndcg():
    rng = np.random.default_rng(3)
    for _ in range(100):
        docs = [f"d{i}" for i in range(12)]
        relevant = {str(doc_id) for doc_id in rng.choice(docs, size=int(rng.integers(1, 6)), replace=False)}
        ranking = [str(doc_id) for doc_id in rng.permutation(docs)]
        i = int(rng.integers(1, len(ranking)))
        if ranking[i] in relevant and ranking[i - 1] not in relevant:
            swapped = list(ranking)
            swapped[i - 1], swapped[i] = swapped[i], swapped[i - 1]
            assert ndcg_at_k(swapped, relevant, 10) >= ndcg_at_k(ranking, relevant, 10)
        value = ndcg_at_k(ranking, relevant, 10)
        assert 0.0 <= value <= 1.0 + 1e-12


def test_precision_divides_by_depth():
    assert precision_at_k(["a"], {"a"}, 10) == 0.1
    assert precision_at_k(["a"], {"a"}, 1) == 1.0


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        recall_at_k(["a"], set(), 10)
    with pytest.raises(UndefinedMetricError):
        ndcg_at_k(["a"], set(), 10)
    with pytest.raises(ContractError):
        precision_at_k(["a"], {"a"}, 0)


def test_evaluate_lists_topic_handling(caplog):
    qrels = Qrels({"T1": {"a": 1, "b": 0}, "T2": {"c": 1}, "T3": {"d": 0}})
    lists = {"T1": _ranking("T1", ["a", "b"]), "T9": _ranking("T9", ["z"])}
    with caplog.at_level(logging.WARNING):
        report = evaluate_lists(lists, qrels, 10)
    assert list(report.per_topic.index) == ["T1", "T2"]
    assert report.excluded == ["T3"]
    assert report.per_topic.loc["T2"].tolist() == [0.0, 0.0, 0.0]
    assert report.per_topic.loc["T1", "Recall@10"] == 1.0
    assert report.means["Recall@10"] == pytest.approx(0.5)
    assert "T9" in caplog.text


def test_load_qrels(tmp_path, caplog):
    path = tmp_path / "qrels.txt"
    path.write_text("T1 0 a 1\nT1 0 b 0\n\nT2 0 c 2\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        qrels = load_qrels(str(path))
    assert qrels.topics() == ["T1", "T2"]
    assert qrels.relevant("T1") == {"a"}
    assert qrels.relevant("T2") == {"c"}
    assert qrels.grade("T2", "c") == 2
    assert "graded" in caplog.text


@pytest.mark.parametrize("line", ["T1 0 a\n", "T1 0 a yes\n", "T1 0 a -1\n"])
def test_load_qrels_bad_line(tmp_path, line):
    path = tmp_path / "qrels.txt"
    path.write_text("T1 0 z 1\n" + line, encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_qrels(str(path))
    assert info.value.line_number == 2


def test_evaluate_run_file(tmp_path):
    run_path = str(tmp_path / "final.run")
    write_run(run_path, [_ranking("T1", ["d1", "d2", "d3"]), _ranking("T2", ["x", "y"])], "final")
    qrels_path = tmp_path / "qrels.txt"
    qrels_path.write_text("T1 0 d1 1\nT1 0 d3 1\nT1 0 d5 1\nT2 0 y 1\n", encoding="utf-8")
    report = evaluate_run(run_path, str(qrels_path), 10)
    assert report.per_topic.loc["T1", "Precision@10"] == pytest.approx(0.2)
    assert report.means["Precision@10"] == pytest.approx(0.15)
    text = report.to_text()
    assert "all" in text
    assert "nDCG@10" in text


def test_table_report_layout(tmp_path):
    qrels = Qrels({"T1": {"a": 1}})
    good = evaluate_lists({"T1": _ranking("T1", ["a"])}, qrels, 10)
    bad = evaluate_lists({"T1": _ranking("T1", ["b"])}, qrels, 10)
    rows = [
        TableRow("KNRM_EngAra", 100, {Stage.BM25_FUSED: bad, Stage.NEURAL_FUSED: good, Stage.FINAL: good}),
        TableRow("KNRM_EngAra", 1000, {Stage.BM25_FUSED: good}),
    ]
    table = table_report(rows, 10)
    assert table.shape == (2, 9)
    assert table.loc[("KNRM_EngAra", 100), (STAGE_LABELS[Stage.FINAL], "Recall@10")] == 1.0
    assert math.isnan(table.loc[("KNRM_EngAra", 1000), (STAGE_LABELS[Stage.FINAL], "nDCG@10")])
    text = format_table(table)
    assert "Final Fusion" in text and "-" in text
    write_table(table, str(tmp_path / "report.txt"), str(tmp_path / "report.csv"))
    assert (tmp_path / "report.txt").read_text(encoding="utf-8") == text
    assert (tmp_path / "report.csv").exists()


def test_random_baseline():
    qrels = Qrels({"T1": {f"r{i}": 1 for i in range(5)}, "T2": {}})
    candidates = {"T1": [f"r{i}" for i in range(5)] + [f"n{i}" for i in range(45)]}
    mean, std = random_baseline(qrels, candidates, 10, shuffles=50, seed=3)
    assert 0.0 < mean < 0.5
    assert std > 0.0
    assert random_baseline(qrels, candidates, 10, shuffles=50, seed=3) == (mean, std)
    # a pool of only relevant docs cannot be ordered badly
    assert random_baseline(qrels, {"T1": [f"r{i}" for i in range(5)]}, 10, shuffles=5)[0] == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        random_baseline(Qrels({"T1": {}}), candidates, 10)
