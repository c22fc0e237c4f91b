import numpy as np
import pytest

from guideloop.captioner import TOK_ABSENT, TOK_OMIT, TOK_PRESENT, TOK_UNCERTAIN
from guideloop.data import ABSENT, FindingOntology, GeneratorConfig, PRESENT, generate_dataset
from guideloop.engine import LoopConfig, pretrain
from guideloop.evaluate import METRICS_HEADER, emit_series, evaluate
from guideloop.judges import OracleJudge, true_decision

ONTOLOGY = FindingOntology.default()


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(GeneratorConfig(n=240, seed=7), ontology=ONTOLOGY)


def test_truth_revealing_captioner_scores_perfectly(dataset, monkeypatch):
    from guideloop import evaluate as ev
    from guideloop.captioner import Guidance, render

    token_of = {PRESENT: TOK_PRESENT, ABSENT: TOK_ABSENT, 0: TOK_UNCERTAIN}
    by_x = {tuple(s.x): s for s in dataset.scans}

    def fake_generate(params, x, ontology, temperature=None, rng=None):
        scan = by_x[tuple(x)]
        tokens = np.array([token_of[v] for v in scan.findings])
        return Guidance(tokens=tokens, text=render(tokens, ontology), z=np.zeros(8))

    monkeypatch.setattr(ev.Guidance, "generate", staticmethod(fake_generate))
    judge = OracleJudge("fidelity", ONTOLOGY)
    out = evaluate(None, None, dataset, "test", judge, ONTOLOGY)
    assert out["decision_accuracy"] == 1.0
    assert out["mean_judge_score"] == 1.0


def test_all_omit_captioner_scores_zero(dataset, monkeypatch):
    from guideloop import evaluate as ev
    from guideloop.captioner import Guidance, render

    def fake_generate(params, x, ontology, temperature=None, rng=None):
        tokens = np.full(ONTOLOGY.size, TOK_OMIT)
        return Guidance(tokens=tokens, text="", z=np.zeros(8))

    monkeypatch.setattr(ev.Guidance, "generate", staticmethod(fake_generate))
    judge = OracleJudge("fidelity", ONTOLOGY)
    out = evaluate(None, None, dataset, "test", judge, ONTOLOGY)
    assert out["mean_judge_score"] == 0.0
    healthy = sum(1 for s in dataset.by_split("test") if true_decision(s) == "healthy")
    assert out["decision_accuracy"] == healthy / len(dataset.by_split("test"))


def test_evaluate_is_read_only_and_repeatable(dataset):
    cfg = LoopConfig(pretrain_epochs=5, seed=1)
    params = pretrain(dataset, ONTOLOGY, cfg)
    before = params.flat().copy()
    judge = OracleJudge("fidelity", ONTOLOGY)
    out1 = evaluate(params, None, dataset, "test", judge, ONTOLOGY)
    out2 = evaluate(params, None, dataset, "test", judge, ONTOLOGY)
    assert out1 == out2
    np.testing.assert_array_equal(params.flat(), before)
    assert 0.0 <= out1["decision_accuracy"] <= 1.0


def test_evaluate_empty_split_rejected(dataset):
    from guideloop.data import Dataset

    with pytest.raises(ValueError):
        evaluate(None, None, Dataset(scans=[]), "test", None, ONTOLOGY)


def test_emit_series_missing_metrics(tmp_path):
    with pytest.raises(FileNotFoundError):
        emit_series(tmp_path)


def test_emit_series_empty_and_filled(tmp_path):
    run_dir = tmp_path
    (run_dir / "metrics.csv").write_text(",".join(METRICS_HEADER) + "\n")
    paths = emit_series(run_dir)
    assert len(paths) == len(METRICS_HEADER) - 1
    for p in paths:
        assert p.read_text() == "round,value\n"

    rows = "\n".join(f"{r},0.1,0.2,0.3,0.4,0.5" for r in range(1, 6))
    (run_dir / "metrics.csv").write_text(",".join(METRICS_HEADER) + "\n" + rows + "\n")
    paths = emit_series(run_dir)
    for p in paths:
        assert len(p.read_text().strip().splitlines()) == 6

    # idempotent replay
    first = {p: p.read_bytes() for p in paths}
    for p in emit_series(run_dir):
        assert p.read_bytes() == first[p]
