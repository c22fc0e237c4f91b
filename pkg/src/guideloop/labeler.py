"""Rule-based extraction of finding states from report text, NegEx style."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .data import ABSENT, MISSING, PRESENT, FindingOntology

# how far back (in tokens) a negation/uncertainty cue can reach
CUE_WINDOW = 5

_SENTENCE_SPLIT = re.compile(r"[.!?]")


@dataclass
class LabelResult:
    states: np.ndarray  # int vector, length L
    mention_spans: list[list[tuple[int, str]]]  # per label: (sentence idx, keyword)

    def mentioned(self, label_index: int) -> bool:
        return bool(self.mention_spans[label_index])


def _tokenize(sentence: str) -> list[str]:
    return sentence.split()


def _phrase_positions(tokens: list[str], phrase: list[str]) -> list[int]:
    n = len(phrase)
    return [
        i
        for i in range(len(tokens) - n + 1)
        if tokens[i : i + n] == phrase
    ]


def _cue_in_window(window: list[str], cues: list[list[str]]) -> bool:
    return any(_phrase_positions(window, cue) for cue in cues)


def label_text(text: str, ontology: FindingOntology) -> LabelResult:
    """Assign {present, absent, missing/ambiguous} per finding label.

    A keyword mention is Absent when a negation cue occurs in the 5 tokens
    before it, Ambiguous when an uncertainty cue does (uncertainty checked
    first), Present otherwise. Conflicting mentions resolve with precedence
    Present > Absent > Ambiguous; unmentioned labels stay Missing.
    """
    sentences = [s for s in _SENTENCE_SPLIT.split(text.lower()) if s.strip()]
    sent_tokens = [_tokenize(s) for s in sentences]
    neg_cues = [c.split() for c in ontology.negation_cues]
    unc_cues = [c.split() for c in ontology.uncertainty_cues]

    states = np.full(ontology.size, MISSING, dtype=int)
    spans: list[list[tuple[int, str]]] = [[] for _ in ontology.labels]
    # per-label mention flags: saw present / absent / ambiguous
    saw = [[False, False, False] for _ in ontology.labels]

    for s_idx, tokens in enumerate(sent_tokens):
        for l_idx, label in enumerate(ontology.labels):
            for keyword in ontology.keywords[label]:
                kw_tokens = keyword.lower().split()
                for pos in _phrase_positions(tokens, kw_tokens):
                    window = tokens[max(0, pos - CUE_WINDOW) : pos]
                    if _cue_in_window(window, unc_cues):
                        saw[l_idx][2] = True
                    elif _cue_in_window(window, neg_cues):
                        saw[l_idx][1] = True
                    else:
                        saw[l_idx][0] = True
                    spans[l_idx].append((s_idx, keyword))

    for l_idx, (present, absent, ambiguous) in enumerate(saw):
        if present:
            states[l_idx] = PRESENT
        elif absent:
            states[l_idx] = ABSENT
        elif ambiguous:
            states[l_idx] = MISSING

    return LabelResult(states=states, mention_spans=spans)


def info_score(states) -> float:
    """Mean finding state: sum of {+1, -1, 0} values normalized by L, in [-1, 1]."""
    states = np.asarray(states)
    if states.size == 0:
        raise ValueError("info_score of an empty state vector")
    return float(states.sum() / states.size)
