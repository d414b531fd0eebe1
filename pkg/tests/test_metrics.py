import csv
import functools
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from readtwice.metrics import (
    EvalReport,
    bleu,
    lcs_length,
    normalize_for_eval,
    qa_f1_em,
    rouge_l,
    score_answer,
)

DATA = Path(__file__).parent / "data"


def golden_rows():
    with open(DATA / "normalize_golden.tsv", newline="", encoding="utf-8") as fh:
        return [(r["input"], r["expected"]) for r in csv.DictReader(fh, delimiter="\t")]


@pytest.mark.parametrize("text,expected", golden_rows())
def test_normalize_for_eval_golden(text, expected):
    assert normalize_for_eval(text) == expected


def test_rouge_l_examples():
    assert rouge_l("the cat sat", "the cat sat") == 1.0
    p, r, b2 = 1.0, 2 / 3, 1.2**2
    assert rouge_l("the cat", "the cat sat") == pytest.approx((1 + b2) * p * r / (r + b2 * p), abs=1e-6)
    assert rouge_l("the cat", "the cat sat") == pytest.approx(0.7722, abs=1e-4)
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("", "x") == 0.0


def test_bleu_examples():
    assert bleu("the cat sat on the mat", ["the cat sat on the mat"], 4) == pytest.approx(1.0, abs=1e-6)
    assert bleu("a a", ["a"], 1) == pytest.approx(0.5, abs=1e-6)
    assert bleu("x y z", ["a b c"], 1) < 1e-6
    assert bleu("x y z w", ["a b c d"], 4) < 1e-6
    assert bleu("", ["a"], 1) == 0.0


def test_bleu_brevity_penalty():
    # hyp of 2 tokens against ref of 4, all unigrams match
    import math

    assert bleu("a b", ["a b c d"], 1) == pytest.approx(math.exp(1 - 4 / 2), abs=1e-9)


def test_qa_f1_em_examples():
    assert qa_f1_em("Barack Obama", ["Barack Obama"]) == (1.0, 1.0)
    f1, em = qa_f1_em("barack obama", ["obama"])
    assert f1 == pytest.approx(2 / 3, abs=1e-6) and em == 0.0
    assert qa_f1_em("", ["obama"]) == (0.0, 0.0)
    assert qa_f1_em("The Eiffel tower!", ["eiffel tower"]) == (1.0, 1.0)


def brute_lcs(a, b):
    @functools.lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


words = st.lists(st.sampled_from("abcde"), max_size=8)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_lcs_matches_recursive_oracle(a, b):
    assert lcs_length(a, b) == brute_lcs(tuple(a), tuple(b))


@settings(max_examples=100, deadline=None)
@given(words.filter(bool), words.filter(bool))
def test_metrics_bounded_and_reflexive(a, b):
    x, y = " ".join(a), " ".join(b)
    for v in (rouge_l(x, y), bleu(x, [y], 1), bleu(x, [y], 4), *qa_f1_em(x, [y])):
        assert 0.0 <= v <= 1.0 + 1e-12
    assert rouge_l(x, x) == pytest.approx(1.0)
    assert bleu(x, [x], 1) == pytest.approx(1.0)
    assert bleu(x, [x], 4) == pytest.approx(1.0)


def test_report_aggregate_is_mean(tmp_path):
    rep = EvalReport()
    rep.add("q2", score_answer("red fox", ["the red fox"]))
    rep.add("q1", score_answer("blue", ["green"]))
    rep.add("q3", score_answer("The Ring.", ["the ring"]))
    for k, vals in rep.per_example.items():
        assert rep.aggregate[k] == pytest.approx(sum(vals) / 3, abs=1e-9)
    rep.write(tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert [l for l in lines if '"example"' in l][0].startswith('{"type": "example", "id": "q1"')
    assert '"meteor"' in lines[-1]
