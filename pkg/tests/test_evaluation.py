import json
import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import efr_naive
from qtree.evaluation import (
    AlignmentError,
    EvalRecord,
    MissingField,
    QAExample,
    aggregate,
    aggregate_datasets,
    efr,
    exact_match,
    f1,
    load_dataset,
    normalize_answer,
    retrieval_efficiency,
)
from qtree.retrieval import ParseError


class TestExactMatch:
    def test_normalization_identity(self):
        assert exact_match("The Eiffel Tower", ["eiffel tower"]) == 1

    def test_strict_mismatch(self):
        assert exact_match("Paris, France", ["Paris"]) == 0

    def test_empty_prediction(self):
        assert exact_match("", ["x"]) == 0
        assert exact_match("", ["the"]) == 0

    def test_normalize(self):
        assert normalize_answer("  The  U.S.A.,  an ally! ") == "usa ally"


class TestF1:
    def test_identical(self):
        assert f1("norman walker", ["Norman Walker"]) == 1.0

    def test_half_overlap(self):
        # hand-computed: P = 1/2, R = 1/2
        assert f1("x b", ["b c"]) == pytest.approx(0.5)

    def test_article_stripped_before_overlap(self):
        # "a" is an article, so the prediction reduces to ["b"]: P = 1, R = 1/2
        assert f1("a b", ["b c"]) == pytest.approx(float(Fraction(2, 3)))

    def test_empty(self):
        assert f1("", ["x"]) == 0.0
        assert f1("the", ["a"]) == 1.0

    def test_max_over_golds(self):
        assert f1("barack", ["michelle obama", "barack obama"]) == pytest.approx(2 / 3)

    @given(st.text(max_size=20), st.lists(st.text(max_size=20), min_size=1, max_size=3))
    def test_em_implies_f1(self, pred, golds):
        if exact_match(pred, golds):
            assert f1(pred, golds) == 1.0
        assert 0.0 <= f1(pred, golds) <= 1.0


def ex(i, golds=("yes",), docs=("g1",)):
    return QAExample(id=str(i), question=f"q{i}", gold_answers=tuple(golds), gold_doc_ids=tuple(docs))


def rec(i, pred="yes", retrieved=("g1",), calls=1):
    return EvalRecord(id=str(i), predicted=pred, retrieved_ids=list(retrieved), retrieval_calls=calls)


class TestEFR:
    def test_all_correct(self):
        examples = [ex(i) for i in range(5)]
        assert efr([rec(i) for i in range(5)], examples) == 0.0

    def test_forty_percent(self):
        examples = [ex(i, docs=("g1", "g2")) for i in range(10)]
        records = (
            [rec(i, "no", ("g1", "g2", "x")) for i in range(4)]  # covered, wrong
            + [rec(i, "yes", ("g1", "g2")) for i in range(4, 6)]  # covered, right
            + [rec(i, "no", ("g1",)) for i in range(6, 9)]  # partial, wrong
            + [rec(9, "yes", ())]
        )
        assert efr(records, examples) == pytest.approx(0.4)

    def test_none_covered(self):
        examples = [ex(i) for i in range(4)]
        assert efr([rec(i, "no", ()) for i in range(4)], examples) == 0.0

    def test_not_applicable(self):
        examples = [ex(i, docs=()) for i in range(3)]
        assert efr([rec(i, "no") for i in range(3)], examples) is None

    def test_alignment(self):
        with pytest.raises(AlignmentError):
            efr([rec(1)], [ex(2)])

    def test_matches_naive(self):
        rng = random.Random(0)
        for _ in range(50):
            n = rng.randint(1, 40)
            examples, records, rows = [], [], []
            for i in range(n):
                gold = [f"g{j}" for j in rng.sample(range(6), rng.randint(1, 3))]
                got = [f"g{j}" for j in range(6) if rng.random() < 0.6]
                correct = rng.random() < 0.5
                examples.append(ex(i, docs=gold))
                records.append(rec(i, "yes" if correct else "no", got))
                rows.append((gold, got, correct))
            assert efr(records, examples) == efr_naive(rows)


class TestAggregate:
    def test_single_record(self):
        report = aggregate([rec(0)], [ex(0)])
        assert report.n == 1
        assert report.em == report.f1 == 100.0
        assert report.efr == 0.0
        assert report.rn == 1
        assert report.recall == report.full_coverage_rate == 100.0
        assert report.re == 100.0

    def test_macro_recall(self):
        examples = [ex(0, docs=("a", "b")), ex(1, docs=("c",))]
        records = [rec(0, retrieved=("a",), calls=2), rec(1, retrieved=("c",), calls=4)]
        report = aggregate(records, examples)
        assert report.recall == pytest.approx(75.0)
        assert report.full_coverage_rate == pytest.approx(50.0)
        assert report.rn == 3.0
        assert report.re == pytest.approx(25.0)

    def test_empty(self):
        report = aggregate([], [])
        assert report.n == 0 and report.efr is None

    def test_permutation_invariant(self):
        rng = random.Random(1)
        examples = [ex(i, docs=("g1", "g2")[: rng.randint(1, 2)]) for i in range(20)]
        records = [rec(i, rng.choice(["yes", "no"]), rng.sample(["g1", "g2", "z"], 2), rng.randint(1, 7)) for i in range(20)]
        base = aggregate(records, examples)
        for _ in range(5):
            order = list(range(20))
            rng.shuffle(order)
            other = aggregate([records[i] for i in order], [examples[i] for i in order[::-1]])
            for field in ("em", "f1", "recall", "full_coverage_rate", "rn", "efr"):
                assert getattr(other, field) == pytest.approx(getattr(base, field), rel=1e-12)

    @pytest.mark.parametrize(
        "pairs",
        [
            [(54.3, 1.89), (32.4, 1.96), (9.7, 1.92)],
            [(60.7, 2.06), (47.4, 3.40), (23.2, 3.39)],
        ],
    )
    def test_published_pairs_re(self, pairs):
        assert retrieval_efficiency(pairs) == pytest.approx(16.7, abs=0.1)

    def test_aggregate_datasets(self):
        reports = [aggregate([rec(0, calls=2)], [ex(0)]), aggregate([rec(0, retrieved=(), calls=4)], [ex(0)])]
        assert aggregate_datasets(reports) == pytest.approx((100 / 2 + 0 / 4) / 2)


class TestLoadDataset:
    def test_two_lines(self, tmp_path):
        path = tmp_path / "d.jsonl"
        rows = [
            {"id": "1", "question": "q1", "gold_answers": ["a"], "gold_doc_ids": ["d1"]},
            {"id": "2", "question": "q2", "gold_answers": ["b", "bb"]},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        got = load_dataset(path)
        assert [e.id for e in got] == ["1", "2"]
        assert got[1].gold_doc_ids == ()
        assert got[1].gold_answers == ("b", "bb")

    def test_missing_gold(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"id": "1", "question": "q"}) + "\n")
        with pytest.raises(MissingField) as err:
            load_dataset(path)
        assert err.value.name == "gold_answers"

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        assert load_dataset(path) == []

    def test_bad_json(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": "1", "question": "q", "gold_answers": ["a"]}\n{oops\n')
        with pytest.raises(ParseError) as err:
            load_dataset(path)
        assert err.value.line == 2
