"""BLEU-4 with add-one smoothing, used for example weights in the surrogate fit."""

from __future__ import annotations

import math
from collections import Counter


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, reference: str) -> float:
    """Sentence BLEU-4: modified n-gram precisions, brevity penalty.

    Lowercased whitespace tokens. For n >= 2, a zero numerator gets add-one
    smoothing ((num+1)/(den+1)); a zero unigram numerator means score 0.
    Empty candidate scores 0 by definition.
    """
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not cand:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        num = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        den = max(len(cand) - n + 1, 0)
        if n == 1:
            if num == 0:
                return 0.0
            p = num / den
        elif num == 0:
            p = (num + 1) / (den + 1)
        else:
            p = num / den
        log_sum += 0.25 * math.log(p)

    c, r = len(cand), len(ref)
    bp = math.exp(1 - r / c) if c < r else 1.0
    return bp * math.exp(log_sum)
