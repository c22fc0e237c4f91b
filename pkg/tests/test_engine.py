import json

import numpy as np
import pytest

from guideloop.captioner import encode, nll_loss_batch
from guideloop.data import ConfigError, FindingOntology, GeneratorConfig, generate_dataset
from guideloop.engine import (
    FeedbackRecord,
    LoopConfig,
    LoopState,
    RoundMetrics,
    RunDirError,
    augmented_loss,
    caption_targets,
    compute_round_metrics,
    pretrain,
    run_bootstrap,
    run_loop,
    run_round,
    split_arrays,
)
from guideloop.surrogate import WeightedKernelRidge

ONTOLOGY = FindingOntology.default()


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(GeneratorConfig(n=240, seed=7), ontology=ONTOLOGY)


@pytest.fixture(scope="module")
def small_config():
    return LoopConfig(
        rounds=2, batch_per_round=8, epochs_per_round=2, pretrain_epochs=10, seed=3
    )


@pytest.fixture(scope="module")
def pretrained(dataset, small_config):
    return pretrain(dataset, ONTOLOGY, small_config)


def test_loop_config_validation():
    with pytest.raises(ConfigError):
        LoopConfig(guide_weight=-1).validate()
    with pytest.raises(ConfigError):
        LoopConfig(temperature=0).validate()
    with pytest.raises(ConfigError):
        LoopConfig(judge="nope").validate()
    with pytest.raises(ConfigError):
        LoopConfig(stale_policy="nope").validate()
    LoopConfig().validate()


def test_round_metrics_must_be_finite():
    with pytest.raises(ValueError):
        RoundMetrics(0, float("nan"), 0, 0, 0, 0)


def test_feedback_record_bounds():
    with pytest.raises(ValueError):
        FeedbackRecord("s", np.zeros(8, int), "", np.zeros(8), 2.0, "human", 1)
    with pytest.raises(ValueError):
        FeedbackRecord("s", np.zeros(8, int), "", np.zeros(8), 0.0, "human", 1, weight=1.5)


def test_augmented_loss_zero_weight_is_plain_nll(dataset, pretrained):
    X, T = split_arrays(dataset, "train", ONTOLOGY)
    plain_loss, plain_g = nll_loss_batch(pretrained, X, T)
    loss, g = augmented_loss(pretrained, X, T, None, None, 0.0)
    assert loss == plain_loss
    np.testing.assert_array_equal(g.flat(), plain_g.flat())


def test_augmented_loss_requires_feedback(dataset, pretrained):
    X, T = split_arrays(dataset, "train", ONTOLOGY)
    with pytest.raises(ValueError):
        augmented_loss(pretrained, X, T, None, None, 1.0)


def test_augmented_loss_single_record_interpolation(dataset, pretrained):
    # N=1 surrogate in the interpolation limit: penalty at round start is -q
    X, T = split_arrays(dataset, "train", ONTOLOGY)
    scan = dataset.by_split("finetune")[0]
    z = encode(pretrained, scan.x)
    q = 0.6
    surrogate = WeightedKernelRidge(sigma=1.0, ridge=1e-12).fit(z[None, :], [q])
    nll, _ = nll_loss_batch(pretrained, X, T)
    lam = 1.0
    loss, _ = augmented_loss(pretrained, X, T, scan.x[None, :], surrogate, lam)
    assert loss == pytest.approx(nll - lam * q, abs=1e-8)


def test_augmented_loss_gradient_matches_finite_differences(dataset, pretrained):
    rng = np.random.default_rng(5)
    X, T = split_arrays(dataset, "train", ONTOLOGY)
    X, T = X[:12], T[:12]
    fb_scans = dataset.by_split("finetune")[:6]
    X_f = np.stack([s.x for s in fb_scans])
    Z = np.stack([encode(pretrained, s.x) for s in fb_scans])
    q = rng.uniform(-1, 1, size=6)
    surrogate = WeightedKernelRidge(sigma=1.0, ridge=1e-2).fit(Z, q)
    lam = 0.7

    _, g = augmented_loss(pretrained, X, T, X_f, surrogate, lam)

    step = 1e-5
    theta = pretrained.flat()
    idxs = rng.choice(theta.size, size=60, replace=False)
    for i in idxs:
        plus, minus = theta.copy(), theta.copy()
        plus[i] += step
        minus[i] -= step
        lp, _ = augmented_loss(pretrained.from_flat(plus), X, T, X_f, surrogate, lam)
        lm, _ = augmented_loss(pretrained.from_flat(minus), X, T, X_f, surrogate, lam)
        fd = (lp - lm) / (2 * step)
        assert g.flat()[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_caption_targets_cover_all_cases(dataset):
    for scan in dataset.scans[:50]:
        targets = caption_targets(scan, ONTOLOGY)
        assert targets.shape == (ONTOLOGY.size,)
        assert set(targets) <= {0, 1, 2, 3}


def test_run_round_fresh_weights_are_one(dataset, small_config, pretrained):
    state = LoopState(params=pretrained.copy())
    _, _, fresh, _ = run_round(state, small_config, dataset, ONTOLOGY)
    assert all(r.weight == 1.0 for r in fresh)
    assert all(r.round_created == 1 for r in fresh)


def test_run_round_surrogate_frozen_and_fit_anew(dataset, small_config, pretrained):
    state = LoopState(params=pretrained.copy())
    state, _, _, sur1 = run_round(state, small_config, dataset, ONTOLOGY)
    alpha_snapshot = sur1.alpha_.copy()
    state, _, _, sur2 = run_round(state, small_config, dataset, ONTOLOGY)
    # round 1's surrogate untouched by round 2's fine-tuning
    np.testing.assert_array_equal(sur1.alpha_, alpha_snapshot)
    assert sur1.fit_id_ != sur2.fit_id_


def test_run_round_lambda_zero_reduces_to_plain_nll(dataset, pretrained):
    cfg = LoopConfig(
        rounds=1, batch_per_round=8, epochs_per_round=1, guide_weight=0.0,
        pretrain_epochs=10, seed=3,
    )
    state, _, _, _ = run_round(LoopState(params=pretrained.copy()), cfg, dataset, ONTOLOGY)

    manual = pretrained.copy()
    X, T = split_arrays(dataset, "train", ONTOLOGY)
    _, g = nll_loss_batch(manual, X, T)
    manual.axpy(-cfg.learning_rate, g)
    np.testing.assert_allclose(state.params.flat(), manual.flat(), atol=1e-12)


def test_run_round_deterministic(dataset, small_config, pretrained):
    s1, m1, f1, _ = run_round(LoopState(params=pretrained.copy()), small_config, dataset, ONTOLOGY)
    s2, m2, f2, _ = run_round(LoopState(params=pretrained.copy()), small_config, dataset, ONTOLOGY)
    assert m1 == m2
    assert [r.scan_id for r in f1] == [r.scan_id for r in f2]
    np.testing.assert_array_equal(s1.params.flat(), s2.params.flat())


def test_stale_records_reweighted_by_bleu(dataset, small_config, pretrained):
    state = LoopState(params=pretrained.copy())
    state, _, _, _ = run_round(state, small_config, dataset, ONTOLOGY)
    state, _, fresh, _ = run_round(state, small_config, dataset, ONTOLOGY)
    stale = [r for r in state.feedback if r.round_created == 1]
    assert stale, "round 1 records should still be accumulated"
    assert all(0.0 <= r.weight <= 1.0 for r in stale)
    fresh_ids = {id(r) for r in fresh}
    assert all(r.weight == 1.0 for r in state.feedback if id(r) in fresh_ids)


def test_discard_policy_keeps_only_fresh(dataset, pretrained):
    cfg = LoopConfig(
        rounds=2, batch_per_round=8, epochs_per_round=1, pretrain_epochs=10,
        seed=3, stale_policy="discard",
    )
    state = LoopState(params=pretrained.copy())
    state, _, _, _ = run_round(state, cfg, dataset, ONTOLOGY)
    state, _, _, _ = run_round(state, cfg, dataset, ONTOLOGY)
    assert all(r.round_created == 2 for r in state.feedback)


def test_run_loop_zero_rounds(tmp_path, dataset):
    cfg = LoopConfig(rounds=0, pretrain_epochs=5, seed=1)
    run_dir = run_loop(dataset, cfg, tmp_path / "run0", ontology=ONTOLOGY)
    assert (run_dir / "checkpoints" / "round_0.json").exists()
    rows = (run_dir / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 2  # header + pretrained baseline row
    assert rows[1].startswith("0,")


def test_run_loop_replay_identical(tmp_path, dataset, small_config):
    d1 = run_loop(dataset, small_config, tmp_path / "a", ontology=ONTOLOGY)
    d2 = run_loop(dataset, small_config, tmp_path / "b", ontology=ONTOLOGY)
    assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
    assert (
        (d1 / "checkpoints" / "round_2.json").read_bytes()
        == (d2 / "checkpoints" / "round_2.json").read_bytes()
    )


def test_run_loop_resume_matches_uninterrupted(tmp_path, dataset):
    cfg3 = LoopConfig(rounds=3, batch_per_round=8, epochs_per_round=2, pretrain_epochs=10, seed=3)
    full = run_loop(dataset, cfg3, tmp_path / "full", ontology=ONTOLOGY)

    cfg1 = LoopConfig(rounds=1, batch_per_round=8, epochs_per_round=2, pretrain_epochs=10, seed=3)
    part = tmp_path / "part"
    run_loop(dataset, cfg1, part, ontology=ONTOLOGY)
    # rewrite the frozen config to the full horizon, then resume
    (part / "config.json").write_text(json.dumps(cfg3.to_dict(), indent=2))
    run_loop(dataset, cfg3, part, ontology=ONTOLOGY)

    full_rows = (full / "metrics.csv").read_text()
    part_rows = (part / "metrics.csv").read_text()
    assert part_rows == full_rows
    assert (
        (full / "checkpoints" / "round_3.json").read_bytes()
        == (part / "checkpoints" / "round_3.json").read_bytes()
    )


def test_run_loop_config_mismatch_rejected(tmp_path, dataset, small_config):
    run_dir = tmp_path / "run"
    run_loop(dataset, small_config, run_dir, ontology=ONTOLOGY)
    other = LoopConfig(rounds=2, batch_per_round=9, epochs_per_round=2, pretrain_epochs=10, seed=3)
    with pytest.raises(RunDirError):
        run_loop(dataset, other, run_dir, ontology=ONTOLOGY)


def test_run_loop_lock_conflict(tmp_path, dataset, small_config):
    run_dir = tmp_path / "locked"
    run_dir.mkdir()
    (run_dir / ".lock").write_text("999")
    with pytest.raises(RunDirError):
        run_loop(dataset, small_config, run_dir, ontology=ONTOLOGY)


def test_bootstrap_degenerate_empty_reports(dataset, pretrained, small_config):
    import copy

    ds = copy.deepcopy(dataset)
    for scan in ds.scans:
        scan.report = ""
    res = run_bootstrap(ds, small_config, ontology=ONTOLOGY, pretrained=pretrained)
    assert res.test_rmse == pytest.approx(0.0, abs=1e-6)


def test_bootstrap_emits_curve_and_metrics(tmp_path, dataset, small_config, pretrained):
    res = run_bootstrap(
        dataset, small_config, ontology=ONTOLOGY, pretrained=pretrained,
        run_dir=tmp_path / "boot",
    )
    assert (tmp_path / "boot" / "bootstrap_metrics.json").exists()
    curve = (tmp_path / "boot" / "bootstrap_curve.csv").read_text().splitlines()
    assert curve[0] == "train_size,train_rmse,validation_rmse"
    assert len(curve) == len(res.train_sizes) + 1
    assert res.test_score_std > 0
