import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jssff.errors import ParameterError
from jssff.metrics import (
    REPORT_COLUMNS,
    bleu_corpus,
    bleu_sentence_smoothed,
    cider_d,
    evaluate_all,
    meteor_lite,
    rouge_l,
    tokenize,
)

from . import oracles

WORDS = ["a", "b", "c", "d", "e"]


def random_corpus(rng, n_items, max_len=6, max_refs=3):
    cands, refs = [], []
    for _ in range(n_items):
        cands.append([rng.choice(WORDS) for _ in range(rng.randint(1, max_len))])
        refs.append([[rng.choice(WORDS) for _ in range(rng.randint(1, max_len))]
                     for _ in range(rng.randint(1, max_refs))])
    return cands, refs


# ---------------------------------------------------------------- tokenize

def test_tokenize_examples():
    assert tokenize("A Cat, sits.") == ["a", "cat", "sits"]
    assert tokenize("") == []
    assert tokenize("well-known  -dash- end-") == ["well-known", "dash", "end"]


@given(st.text())
def test_tokenize_idempotent(s):
    toks = tokenize(s)
    assert tokenize(" ".join(toks)) == toks
    assert all(t and t == t.lower() for t in toks)


# ---------------------------------------------------------------- BLEU

def test_bleu_hand_fixtures():
    assert bleu_corpus([["the", "cat"]], [[["the", "cat", "sat"]]])[0] == pytest.approx(math.exp(-0.5), abs=1e-4)
    assert bleu_corpus([["the", "cat"]], [[["the", "cat", "sat"]]])[0] == pytest.approx(0.6065, abs=1e-4)
    assert bleu_corpus([["the", "the", "the"]], [[["the", "cat"]]])[0] == pytest.approx(1 / 3, abs=1e-12)


def test_bleu_identical_is_one():
    cands = [["a", "b", "c", "d"], ["x", "y", "z", "w", "v"]]
    refs = [[c, ["q"]] for c in cands]
    assert bleu_corpus(cands, refs) == [1.0] * 4


def test_bleu_zero_precision_propagates():
    # unigrams match, no bigram does
    b = bleu_corpus([["b", "a"]], [[["a", "b"]]])
    assert b[0] == 1.0 and b[1:] == [0.0, 0.0, 0.0]


def test_bleu_empty_corpus():
    with pytest.raises(ParameterError):
        bleu_corpus([], [])


# ---------------------------------------------------------------- sentence BLEU

def test_sentence_bleu_fixtures():
    assert bleu_sentence_smoothed(["a", "b", "c"], [["a", "b", "c"]]) == 1.0
    assert bleu_sentence_smoothed(["a"], [["a"]]) == 1.0
    disjoint = bleu_sentence_smoothed(["a", "b", "c"], [["x", "y", "z"]])
    assert disjoint == pytest.approx(math.sqrt((0.1 / 3) * (0.1 / 2)), abs=1e-12)
    with pytest.raises(ParameterError):
        bleu_sentence_smoothed(["a"], [])


def test_sentence_bleu_adding_matching_reference_never_lowers():
    rng = random.Random(3)
    for _ in range(200):
        cands, refs = random_corpus(rng, 1)
        c, rs = cands[0], refs[0]
        assert bleu_sentence_smoothed(c, rs + [list(c)]) >= bleu_sentence_smoothed(c, rs)


# ---------------------------------------------------------------- ROUGE-L

def test_rouge_fixtures():
    assert rouge_l([["a", "b"]], [[["a", "b"]]]) == 1.0
    assert rouge_l([["the", "cat", "sat"]], [[["the", "cat", "sat", "on", "mat"]]]) == pytest.approx(0.7176, abs=1e-4)
    assert rouge_l([["a"]], [[["b"]]]) == 0.0


# ---------------------------------------------------------------- METEOR-lite

def test_meteor_fixtures():
    assert meteor_lite([["a"]], [[["a"]]]) == pytest.approx(0.5, abs=1e-12)
    m = 4
    toks = ["w", "x", "y", "z"]
    assert meteor_lite([toks], [[toks]]) == pytest.approx(1 - 0.5 * (1 / m) ** 3)
    assert meteor_lite([["a"]], [[["b"]]]) == 0.0


# ---------------------------------------------------------------- CIDEr-D

def test_cider_fixtures():
    assert cider_d([["a", "b"]], [[["a", "b"]]]) == 0.0  # single image: idf = 0
    assert cider_d([["q", "r"], ["a", "b"]], [[["a", "b"]], [["c", "d"]]]) == 0.0


def test_cider_two_image_fixture_matches_oracle():
    cands = [["red", "roof", "near", "road"], ["blue", "lake"]]
    refs = [[["red", "roof", "by", "the", "road"], ["a", "red", "roof"]],
            [["a", "blue", "lake"], ["blue", "lake", "and", "trees"]]]
    expected = oracles.cider_d(cands, refs)
    assert expected > 0
    assert cider_d(cands, refs) == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------- oracle sweep

@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force(seed):
    rng = random.Random(seed)
    cands, refs = random_corpus(rng, rng.randint(1, 5))
    for got, want in zip(bleu_corpus(cands, refs), oracles.bleu(cands, refs)):
        assert got == pytest.approx(want, abs=1e-9)
    assert rouge_l(cands, refs) == pytest.approx(oracles.rouge_l(cands, refs), abs=1e-9)
    assert cider_d(cands, refs) == pytest.approx(oracles.cider_d(cands, refs), abs=1e-9)
    assert meteor_lite(cands, refs) == pytest.approx(oracles.meteor(cands, refs), abs=1e-9)
    for c, rs in zip(cands, refs):
        assert bleu_sentence_smoothed(c, rs) == pytest.approx(oracles.sentence_bleu_smoothed(c, rs), abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_reference_order_invariance(seed):
    rng = random.Random(100 + seed)
    cands, refs = random_corpus(rng, 4)
    shuffled = [rng.sample(rs, len(rs)) for rs in refs]
    assert evaluate_all(cands, refs).values() == pytest.approx(evaluate_all(cands, shuffled).values(), abs=1e-12)


def test_bleu_order_can_increase_with_multiple_references():
    # Two references supply both bigrams while unigram clipping still bites,
    # so p2 > p1 and BLEU-2 > BLEU-1.
    b = bleu_corpus([["a", "b", "a"]], [[["a", "b"], ["b", "a"]]])
    assert b[0] == pytest.approx(2 / 3)
    assert b[1] == pytest.approx(math.sqrt(2 / 3))
    assert b[1] > b[0]


@pytest.mark.parametrize("seed", range(30))
def test_bleu_nonincreasing_single_reference(seed):
    rng = random.Random(200 + seed)
    cands, refs = random_corpus(rng, 5, max_refs=1)
    b = bleu_corpus(cands, refs)
    assert b[0] >= b[1] - 1e-12 >= b[2] - 2e-12 >= b[3] - 3e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=6), min_size=1, max_size=5))
def test_identical_corpus_scores_one(cands):
    refs = [[list(c)] for c in cands]
    rep = evaluate_all(cands, refs)
    assert rep.bleu1 == rep.bleu2 == rep.bleu3 == rep.bleu4 == 1.0 or any(len(c) < 4 for c in cands)
    assert rep.bleu1 == 1.0
    assert rep.rouge_l == 1.0


def test_evaluate_all_ranges_and_columns():
    rng = random.Random(9)
    cands, refs = random_corpus(rng, 6)
    rep = evaluate_all(cands, refs)
    for v in (rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.meteor, rep.rouge_l):
        assert 0.0 <= v <= 1.0
    assert 0.0 <= rep.cider <= 10.0
    assert REPORT_COLUMNS == ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


def test_disjoint_corpus_all_zero():
    rep = evaluate_all([["a", "b"], ["c"]], [[["x", "y"]], [["z"]]])
    assert rep.values() == (0.0,) * 7
