import numpy as np
import pytest
from hypothesis import given, strategies as st

from guideloop.data import (
    ABSENT,
    MISSING,
    PRESENT,
    FindingOntology,
    GeneratorConfig,
    generate_dataset,
)
from guideloop.labeler import info_score, label_text

ONTOLOGY = FindingOntology.default()
IDX = {label: i for i, label in enumerate(ONTOLOGY.labels)}


def states_of(text):
    return label_text(text, ONTOLOGY).states


def test_hand_example_present_and_negated():
    states = states_of("there is pneumonia. no pleural effusion.")
    assert states[IDX["pneumonia"]] == PRESENT
    assert states[IDX["pleural effusion"]] == ABSENT
    others = [s for label, s in zip(ONTOLOGY.labels, states)
              if label not in ("pneumonia", "pleural effusion")]
    assert all(s == MISSING for s in others)


def test_empty_text_all_missing():
    assert np.array_equal(states_of(""), np.zeros(8, dtype=int))


def test_absent_outranks_ambiguous():
    states = states_of("possible edema. no edema.")
    assert states[IDX["edema"]] == ABSENT


def test_present_outranks_absent():
    states = states_of("no edema. there is edema.")
    assert states[IDX["edema"]] == PRESENT


def test_uncertainty_checked_before_negation():
    # both cue types in the window: uncertainty wins for that mention
    states = states_of("cannot exclude pneumonia")
    assert states[IDX["pneumonia"]] == MISSING
    assert label_text("cannot exclude pneumonia", ONTOLOGY).mentioned(IDX["pneumonia"])


def test_negation_window_limited_to_five_tokens():
    # cue 6 tokens before the keyword is out of range
    far = "no signs that would at all suggest pneumonia"
    assert states_of(far)[IDX["pneumonia"]] == PRESENT
    near = "no convincing evidence of pneumonia"
    assert states_of(near)[IDX["pneumonia"]] == ABSENT


def test_negation_does_not_cross_sentences():
    states = states_of("no fracture. pneumonia")
    assert states[IDX["fracture"]] == ABSENT
    assert states[IDX["pneumonia"]] == PRESENT


def test_mention_spans_reference_sentences():
    result = label_text("there is pneumonia. no edema.", ONTOLOGY)
    assert result.mention_spans[IDX["pneumonia"]] == [(0, "pneumonia")]
    assert result.mention_spans[IDX["edema"]] == [(1, "edema")]


def test_deterministic():
    text = "possible consolidation. there is cardiomegaly. no fracture."
    a = label_text(text, ONTOLOGY)
    b = label_text(text, ONTOLOGY)
    assert np.array_equal(a.states, b.states)
    assert a.mention_spans == b.mention_spans


def test_template_reports_recover_generating_states():
    ds = generate_dataset(GeneratorConfig(n=200, noise_std=0.0, seed=13), ontology=ONTOLOGY)
    for scan in ds.scans:
        result = label_text(scan.report, ONTOLOGY)
        for i in range(ONTOLOGY.size):
            true = scan.findings[i]
            got = result.states[i]
            if true == PRESENT:
                assert got == PRESENT
            elif true == ABSENT:
                # mentioned absents recovered exactly, unmentioned are missing
                assert got == (ABSENT if result.mentioned(i) else MISSING)
            else:
                assert got == MISSING


def test_info_score_all_missing():
    assert info_score(np.zeros(8, dtype=int)) == 0.0


def test_info_score_mixed():
    states = np.zeros(8, dtype=int)
    states[IDX["pneumonia"]] = PRESENT
    states[IDX["pleural effusion"]] = ABSENT
    assert info_score(states) == 0.0


def test_info_score_all_present():
    assert info_score(np.ones(8, dtype=int)) == 1.0


def test_info_score_empty_rejected():
    with pytest.raises(ValueError):
        info_score([])


@given(st.lists(st.sampled_from([-1, 0, 1]), min_size=1, max_size=16))
def test_info_score_linear_and_bounded(states):
    score = info_score(states)
    assert -1.0 <= score <= 1.0
    assert score == pytest.approx(sum(states) / len(states))


@given(st.permutations(list(range(8))), st.lists(st.sampled_from([-1, 0, 1]), min_size=8, max_size=8))
def test_info_score_permutation_invariant(perm, states):
    permuted = [states[i] for i in perm]
    assert info_score(states) == pytest.approx(info_score(permuted))
