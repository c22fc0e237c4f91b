"""Held-out evaluation and plot-ready metric series."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .captioner import CaptionerParams, Guidance
from .data import Dataset, FindingOntology
from .judges import simulate_decision, true_decision
from .surrogate import WeightedKernelRidge

METRICS_HEADER = [
    "round",
    "nll_validation",
    "surrogate_rmse_validation",
    "mean_judge_score_heldout",
    "decision_accuracy_heldout",
    "mean_surrogate_score_finetune",
]


def evaluate(
    params: CaptionerParams,
    surrogate: WeightedKernelRidge | None,
    dataset: Dataset,
    split: str,
    judge,
    ontology: FindingOntology,
) -> dict:
    """Score argmax guidance for every scan in a split.

    Returns mean judge score, downstream decision accuracy against ground
    truth, and (when a surrogate is given) surrogate RMSE against the judge
    scores on the same guidance. Read-only and deterministic.
    """
    scans = dataset.by_split(split)
    if not scans:
        raise ValueError(f"split {split!r} is empty")
    scores, correct, zs = [], 0, []
    for scan in scans:
        guidance = Guidance.generate(params, scan.x, ontology)
        scores.append(judge(scan, guidance).q)
        if simulate_decision(guidance.text, ontology) == true_decision(scan):
            correct += 1
        zs.append(guidance.z)
    out = {
        "mean_judge_score": float(np.mean(scores)),
        "decision_accuracy": correct / len(scans),
    }
    if surrogate is not None:
        preds = surrogate.predict(np.stack(zs))
        out["surrogate_rmse"] = float(np.sqrt(np.mean((preds - np.asarray(scores)) ** 2)))
    return out


def emit_series(run_dir: str | Path) -> list[Path]:
    """Split metrics.csv into one (round, value) CSV per metric; idempotent."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    with metrics_path.open() as f:
        rows = list(csv.DictReader(f))
    series_dir = run_dir / "series"
    series_dir.mkdir(exist_ok=True)
    written = []
    for metric in METRICS_HEADER[1:]:
        path = series_dir / f"{metric}.csv"
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "value"])
            for row in rows:
                writer.writerow([row["round"], row[metric]])
        written.append(path)
    return written
