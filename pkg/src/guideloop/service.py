"""Annotation sessions and loop control over HTTP, with durable score persistence.

Every accepted score is appended to annotations.jsonl and fsynced before the
request is acknowledged, so a crash never loses acked feedback. All mutations
funnel through one lock; the loop runs on a single worker thread.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .data import Dataset, FindingOntology
from .engine import LoopConfig, LoopState, run_round


@dataclass
class Session:
    session_id: str
    items: list[dict]  # {item_id, scan_id, scan_summary, guidance_text}
    scores: dict[str, float] = field(default_factory=dict)
    state: str = "open"  # open | complete | cancelled

    def next_unscored(self) -> dict | None:
        for item in self.items:
            if item["item_id"] not in self.scores:
                return item
        return None

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "items": self.items,
            "scores": self.scores,
            "state": self.state,
        }


class SessionStore:
    """Durable session + score store backed by two append-only JSONL files."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.sessions_path = self.run_dir / "sessions.jsonl"
        self.annotations_path = self.run_dir / "annotations.jsonl"
        self._lock = threading.Lock()
        self.sessions: dict[str, Session] = {}
        self._counter = 0
        self._recover()

    def _recover(self) -> None:
        if self.sessions_path.exists():
            with self.sessions_path.open() as f:
                for line in f:
                    raw = json.loads(line)
                    if raw["event"] == "created":
                        self.sessions[raw["session_id"]] = Session(
                            session_id=raw["session_id"], items=raw["items"]
                        )
                        self._counter += 1
                    elif raw["event"] == "cancelled":
                        self.sessions[raw["session_id"]].state = "cancelled"
        if self.annotations_path.exists():
            with self.annotations_path.open() as f:
                for line in f:
                    raw = json.loads(line)
                    if raw.get("source") != "human":
                        continue
                    session = self.sessions.get(raw["session_id"])
                    if session is not None:
                        session.scores[raw["item_id"]] = raw["score"]
        for session in self.sessions.values():
            if session.state == "open" and session.next_unscored() is None:
                session.state = "complete"

    def _append(self, path: Path, record: dict) -> None:
        with path.open("a") as f:
            f.write(json.dumps(record) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def create_session(self, items: list[dict]) -> str:
        if not items:
            raise ValueError("empty session batch")
        ids = [it["item_id"] for it in items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item_ids in batch")
        with self._lock:
            self._counter += 1
            session_id = f"session-{self._counter:04d}"
            self._append(
                self.sessions_path,
                {"event": "created", "session_id": session_id, "items": items},
            )
            self.sessions[session_id] = Session(session_id=session_id, items=list(items))
        return session_id

    def submit_score(
        self, session_id: str, item_id: str, score: float, round_index: int = 0
    ) -> bool:
        """Durably record a score; returns True when the value was clamped."""
        with self._lock:
            session = self.sessions.get(session_id)
            if session is None:
                raise KeyError(f"unknown session {session_id}")
            if session.state != "open":
                raise ConflictError(f"session {session_id} is {session.state}")
            if not any(it["item_id"] == item_id for it in session.items):
                raise KeyError(f"unknown item {item_id}")
            if item_id in session.scores:
                raise ConflictError(f"item {item_id} already scored")
            clamped = not -1.0 <= score <= 1.0
            stored = float(np.clip(score, -1.0, 1.0))
            scan_id = next(
                it["scan_id"] for it in session.items if it["item_id"] == item_id
            )
            self._append(
                self.annotations_path,
                {
                    "session_id": session_id,
                    "item_id": item_id,
                    "scan_id": scan_id,
                    "score": stored,
                    "clamped": clamped,
                    "source": "human",
                    "round": round_index,
                    "timestamp": time.time(),
                },
            )
            session.scores[item_id] = stored
            if session.next_unscored() is None:
                session.state = "complete"
        return clamped

    def cancel(self, session_id: str) -> None:
        with self._lock:
            session = self.sessions[session_id]
            if session.state == "open":
                self._append(
                    self.sessions_path,
                    {"event": "cancelled", "session_id": session_id},
                )
                session.state = "cancelled"

    def session_state(self, session_id: str) -> dict:
        with self._lock:
            session = self.sessions.get(session_id)
            if session is None:
                raise KeyError(f"unknown session {session_id}")
            return session.to_dict()

    def latest_open_session(self) -> Session | None:
        with self._lock:
            for session in reversed(list(self.sessions.values())):
                if session.state == "open":
                    return session
        return None


class ConflictError(RuntimeError):
    """Submitted operation conflicts with current session/loop state."""


class LocalSessionClient:
    """In-process SessionClient used when the loop and store share a process."""

    def __init__(self, store: SessionStore, round_index_ref=None):
        self.store = store
        self.round_index_ref = round_index_ref

    def create_session(self, items: list[dict]) -> str:
        return self.store.create_session(items)

    def session_state(self, session_id: str) -> dict:
        return self.store.session_state(session_id)


class HttpSessionClient:
    """SessionClient over the HTTP API, for a loop driven from another process."""

    def __init__(self, base_url: str, client=None):
        import httpx

        self.client = client or httpx.Client(base_url=base_url)

    def create_session(self, items: list[dict]) -> str:
        resp = self.client.post("/sessions", json={"items": items})
        resp.raise_for_status()
        return resp.json()["session_id"]

    def session_state(self, session_id: str) -> dict:
        resp = self.client.get(f"/sessions/{session_id}")
        resp.raise_for_status()
        return resp.json()


class LoopRunner:
    """Owns loop state and executes rounds one at a time on a worker thread."""

    def __init__(
        self,
        dataset: Dataset,
        config: LoopConfig,
        state: LoopState,
        store: SessionStore,
        ontology: FindingOntology,
    ):
        self.dataset = dataset
        self.config = config
        self.state = state
        self.store = store
        self.ontology = ontology
        self.running = False
        self.last_metrics = None
        self.error: str | None = None
        self._lock = threading.Lock()

    def try_start_round(self) -> None:
        with self._lock:
            if self.running:
                raise ConflictError("a round is already running")
            pending = self.store.latest_open_session()
            if pending is not None:
                raise ConflictError(f"session {pending.session_id} is still open")
            self.running = True
        thread = threading.Thread(target=self._run_round, daemon=True)
        thread.start()

    def _run_round(self) -> None:
        try:
            client = LocalSessionClient(self.store)
            state, metrics, fresh, _ = run_round(
                self.state, self.config, self.dataset, self.ontology,
                session_client=client,
            )
            from .captioner import save_checkpoint
            from .engine import _append_annotation_lines

            _append_annotation_lines(self.store.run_dir, [r.to_line() for r in fresh])
            ckpt_dir = self.store.run_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(state.params, ckpt_dir / f"round_{state.round_index}.json")
            metrics_path = self.store.run_dir / "metrics.csv"
            if not metrics_path.exists():
                from .evaluate import METRICS_HEADER

                metrics_path.write_text(",".join(METRICS_HEADER) + "\n")
            with metrics_path.open("a") as f:
                f.write(metrics.to_row() + "\n")
            with self._lock:
                self.state = state
                self.last_metrics = metrics
        except Exception as e:  # surfaced through /loop/status
            with self._lock:
                self.error = str(e)
        finally:
            with self._lock:
                self.running = False

    def status(self) -> dict:
        with self._lock:
            pending = self.store.latest_open_session()
            return {
                "round": self.state.round_index,
                "running": self.running,
                "metrics": (
                    None
                    if self.last_metrics is None
                    else {
                        name: getattr(self.last_metrics, name)
                        for name in self.last_metrics.__dataclass_fields__
                    }
                ),
                "pending_session": pending.session_id if pending else None,
                "error": self.error,
            }


class SessionCreate(BaseModel):
    items: list[dict]


class ScoreSubmit(BaseModel):
    item_id: str
    score: float


def create_app(
    store: SessionStore,
    runner: LoopRunner | None = None,
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="guideloop annotation service")

    @app.post("/sessions")
    def create_session(body: SessionCreate):
        try:
            session_id = store.create_session(body.items)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return {"session_id": session_id}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            return store.session_state(session_id)
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        try:
            state = store.session_state(session_id)
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        session = store.sessions[session_id]
        item = session.next_unscored()
        if item is None:
            return Response(status_code=204)
        return {
            **item,
            "scored": len(state["scores"]),
            "total": len(state["items"]),
        }

    @app.post("/sessions/{session_id}/scores")
    def submit_score(session_id: str, body: ScoreSubmit):
        round_index = runner.state.round_index + 1 if runner else 0
        try:
            clamped = store.submit_score(
                session_id, body.item_id, body.score, round_index=round_index
            )
        except KeyError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ConflictError as e:
            raise HTTPException(status_code=409, detail=str(e))
        return {"accepted": True, "clamped": clamped}

    @app.get("/loop/status")
    def loop_status():
        if runner is None:
            raise HTTPException(status_code=404, detail="no loop attached")
        return runner.status()

    @app.post("/loop/step")
    def loop_step():
        if runner is None:
            raise HTTPException(status_code=404, detail="no loop attached")
        if runner.state.round_index >= runner.config.rounds:
            raise HTTPException(status_code=409, detail="all configured rounds done")
        try:
            runner.try_start_round()
        except ConflictError as e:
            raise HTTPException(status_code=409, detail=str(e))
        return {"started": True}

    if static_dir is not None and Path(static_dir).exists():
        static_dir = Path(static_dir)

        @app.get("/")
        def index():
            return FileResponse(static_dir / "index.html")

        app.mount("/ui", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
