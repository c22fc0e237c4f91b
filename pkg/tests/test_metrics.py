import math
import random
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from guideloop.metrics import bleu4


def oracle_bleu4(candidate, reference):
    """Brute-force reimplementation: enumerate every candidate n-gram and count
    matches against the reference directly, no shared helpers."""
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if len(cand) == 0:
        return 0.0
    log_terms = []
    for n in (1, 2, 3, 4):
        cand_grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        matched = 0
        for gram, count in Counter(cand_grams).items():
            matched += min(count, ref_grams.count(gram))
        total = len(cand_grams)
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            if matched == 0:
                p = (matched + 1) / (total + 1)
            else:
                p = matched / total
        log_terms.append(0.25 * math.log(p))
    if len(cand) < len(ref):
        bp = math.exp(1 - len(ref) / len(cand))
    else:
        bp = 1.0
    return bp * math.exp(sum(log_terms))


def test_identity_is_one():
    s = "there is pneumonia and possible edema"
    assert bleu4(s, s) == pytest.approx(1.0)


def test_empty_candidate_is_zero():
    assert bleu4("", "some reference text") == 0.0


def test_no_overlap_is_zero():
    assert bleu4("alpha beta", "gamma delta") == 0.0


def test_hand_example_matches_oracle():
    cand = "there is pneumonia"
    ref = "there is pneumonia today"
    assert bleu4(cand, ref) == pytest.approx(oracle_bleu4(cand, ref), abs=1e-12)


def test_asymmetry():
    a = "a b c d e f"
    b = "a b c d"
    assert bleu4(a, b) != bleu4(b, a)


def test_case_insensitive():
    assert bleu4("No Pneumonia Seen Here", "no pneumonia seen here") == pytest.approx(1.0)


def test_oracle_agreement_500_random_pairs():
    rng = random.Random(42)
    vocab = ["a", "b", "c", "d", "e", "f", "g"]
    for _ in range(500):
        cand = " ".join(rng.choices(vocab, k=rng.randint(0, 12)))
        ref = " ".join(rng.choices(vocab, k=rng.randint(0, 12)))
        assert bleu4(cand, ref) == pytest.approx(oracle_bleu4(cand, ref), abs=1e-12)


@given(
    st.lists(st.sampled_from("abcde"), max_size=15),
    st.lists(st.sampled_from("abcde"), max_size=15),
)
def test_range(cand_toks, ref_toks):
    score = bleu4(" ".join(cand_toks), " ".join(ref_toks))
    assert 0.0 <= score <= 1.0
