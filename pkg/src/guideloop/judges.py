"""Quality-score sources: oracle judges, a simulated decision maker, and a
human-session adapter backed by the annotation service."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .captioner import Guidance
from .data import PRESENT, FindingOntology, Scan
from .labeler import info_score, label_text

SOURCE_INFORMATIVENESS = "oracle_informativeness"
SOURCE_FIDELITY = "oracle_fidelity"
SOURCE_HUMAN = "human"


@dataclass
class Judgment:
    scan_id: str
    guidance_text: str
    q: float
    source: str

    def __post_init__(self):
        if not -1.0 <= self.q <= 1.0:
            raise ValueError(f"score {self.q} outside [-1, 1]")


def judge_informativeness(guidance_text: str, ontology: FindingOntology) -> float:
    """Information score of the guidance alone; ignores the scan."""
    return info_score(label_text(guidance_text, ontology).states)


def judge_fidelity(guidance_text: str, scan: Scan, ontology: FindingOntology) -> float:
    """+1 per label stated with its true state, -1 per label stated wrongly,
    0 per unstated label; normalized by L. Cannot be gamed by asserting
    everything present."""
    result = label_text(guidance_text, ontology)
    total = 0
    for i in range(ontology.size):
        if not result.mentioned(i):
            continue
        total += 1 if result.states[i] == scan.findings[i] else -1
    return total / ontology.size


def simulate_decision(guidance_text: str, ontology: FindingOntology) -> str:
    """'diseased' iff the guidance states any finding as present."""
    states = label_text(guidance_text, ontology).states
    return "diseased" if (states == PRESENT).any() else "healthy"


def true_decision(scan: Scan) -> str:
    return "diseased" if (scan.findings == PRESENT).any() else "healthy"


class SessionClient(Protocol):
    """Transport to the annotation service; HTTP in production, in-process in tests."""

    def create_session(self, items: list[dict]) -> str: ...

    def session_state(self, session_id: str) -> dict: ...


class SessionCancelled(RuntimeError):
    """Session cancelled before completion; carries the judgments collected so far."""

    def __init__(self, message: str, partial: list[Judgment]):
        super().__init__(message)
        self.partial = partial


def _clamp(score: float) -> float:
    return float(np.clip(score, -1.0, 1.0))


def collect_human_scores(
    batch: list[tuple[Scan, Guidance]],
    session_client: SessionClient,
    poll_interval: float = 0.2,
    round_index: int = 0,
) -> list[Judgment]:
    """Open a session for the batch and block until every item is scored.

    Out-of-range scores are clamped to [-1, 1]. A cancelled session raises
    SessionCancelled carrying the judgments completed so far.
    """
    if not batch:
        raise ValueError("empty annotation batch")
    items = [
        {
            "item_id": f"r{round_index}-i{i}",
            "scan_id": scan.id,
            "scan_summary": scan.report,
            "guidance_text": guidance.text,
        }
        for i, (scan, guidance) in enumerate(batch)
    ]
    session_id = session_client.create_session(items)
    by_item = {it["item_id"]: (scan, g) for it, (scan, g) in zip(items, batch)}

    while True:
        state = session_client.session_state(session_id)
        scores = state["scores"]
        if state["state"] == "cancelled":
            partial = [
                Judgment(
                    scan_id=by_item[item_id][0].id,
                    guidance_text=by_item[item_id][1].text,
                    q=_clamp(score),
                    source=SOURCE_HUMAN,
                )
                for item_id, score in scores.items()
            ]
            raise SessionCancelled(f"session {session_id} cancelled", partial)
        if state["state"] == "complete":
            return [
                Judgment(
                    scan_id=scan.id,
                    guidance_text=g.text,
                    q=_clamp(scores[it["item_id"]]),
                    source=SOURCE_HUMAN,
                )
                for it, (scan, g) in zip(items, batch)
            ]
        time.sleep(poll_interval)


@dataclass
class OracleJudge:
    """Callable wrapper choosing one of the oracle scoring rules."""

    kind: str  # "fidelity" | "informativeness"
    ontology: FindingOntology

    def __call__(self, scan: Scan, guidance: Guidance) -> Judgment:
        if self.kind == "fidelity":
            q = judge_fidelity(guidance.text, scan, self.ontology)
            source = SOURCE_FIDELITY
        elif self.kind == "informativeness":
            q = judge_informativeness(guidance.text, self.ontology)
            source = SOURCE_INFORMATIVENESS
        else:
            raise ValueError(f"unknown oracle judge {self.kind!r}")
        return Judgment(scan_id=scan.id, guidance_text=guidance.text, q=q, source=source)
