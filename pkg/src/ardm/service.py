"""HTTP chat service: interactive-mode decoding behind a session API.

Sessions are in-memory; transcripts are written through to JSONL after every
exchange, so a lost process loses memories but not logs (logs replay).
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from .data import DataError, EntityDB, RelexError, relexicalize
from .decoder import (PRESETS, DecodeMemory, SamplerConfig, job_rng,
                      sample_utterance)
from .dialog_model import load_bundle
from .tokenizer import SYSTEM, USER

# Session-start notice: the peer is a model, not a person.
DISCLOSURE = ("You are chatting with an automated dialog system "
              "(a machine agent, not a human).")


@dataclass
class ServiceConfig:
    checkpoint_dir: str = "checkpoints"
    transcript_dir: str = "transcripts"
    default_checkpoint: str = "default"
    default_preset: str = "default"
    entity_db_path: str | None = None
    seed: int = 0
    port: int = 8000

    @classmethod
    def load(cls, path=None, env=None) -> "ServiceConfig":
        """Optional JSON file, then ARDM_* environment overrides."""
        values = {}
        if path:
            with open(path) as f:
                values.update(json.load(f))
        env = os.environ if env is None else env
        for f_name in cls.__dataclass_fields__:
            key = f"ARDM_{f_name.upper()}"
            if key in env:
                raw = env[key]
                values[f_name] = int(raw) if f_name in ("seed", "port") \
                    else raw
        return cls(**values)


@dataclass
class Session:
    id: str
    memory: DecodeMemory
    sampler: SamplerConfig
    checkpoint: str
    preset: str
    seed: int
    created_at: float
    lock: threading.Lock = field(default_factory=threading.Lock)
    full: bool = False
    n_replies: int = 0


class SessionStore:
    def __init__(self):
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def add(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.id] = session

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session


class CreateSessionRequest(BaseModel):
    checkpoint: str | None = None
    preset: str | None = None
    seed: int | None = None


class MessageRequest(BaseModel):
    text: str


def session_transcript(session: Session) -> dict:
    """The session log in corpus-record form (JSONL-ready)."""
    return {
        "id": session.id,
        "turns": [[t.role, t.text, None] for t in session.memory.turns],
        "requested_slots": [],
        "goal": {},
    }


def reply_rng(session: Session):
    """RNG stream for the next system reply; pure function of seed and
    reply count, which is what makes exported logs replayable."""
    return job_rng(session.seed, session.n_replies)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="dialog-service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    store = SessionStore()
    bundles: dict[str, tuple] = {}
    db = EntityDB.load(config.entity_db_path) if config.entity_db_path \
        else None

    def resolve_bundle(name: str):
        if name not in bundles:
            path = name if os.path.isdir(name) \
                else os.path.join(config.checkpoint_dir, name)
            if not os.path.isdir(path):
                raise HTTPException(status_code=404,
                                    detail=f"unknown checkpoint {name!r}")
            bundles[name] = load_bundle(path)
        return bundles[name]

    def persist(session: Session) -> None:
        os.makedirs(config.transcript_dir, exist_ok=True)
        path = os.path.join(config.transcript_dir, f"{session.id}.jsonl")
        with open(path, "w") as f:
            f.write(json.dumps(session_transcript(session)) + "\n")

    def finish_reply(session: Session, text: str) -> str:
        if db is None:
            return text
        try:
            row = db.rows[0] if db.rows else {}
            return relexicalize(text, None, db_row=row)
        except (RelexError, DataError):
            return text

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        name = req.checkpoint or config.default_checkpoint
        preset = req.preset or config.default_preset
        if preset not in PRESETS:
            raise HTTPException(status_code=404,
                                detail=f"unknown preset {preset!r}")
        params, vocab = resolve_bundle(name)
        session = Session(
            id=uuid.uuid4().hex[:12],
            memory=DecodeMemory(params, vocab),
            sampler=PRESETS[preset],
            checkpoint=name, preset=preset,
            seed=config.seed if req.seed is None else req.seed,
            created_at=time.time(),
        )
        opening = None
        if preset == "persuasion":
            # Persuasion-style tasks open with the system speaking first.
            result = sample_utterance(SYSTEM, session.memory, session.sampler,
                                      reply_rng(session))
            session.memory = result.memory
            session.n_replies += 1
            opening = finish_reply(session, result.text)
        store.add(session)
        persist(session)
        return {"id": session.id, "disclosure": DISCLOSURE,
                "preset": preset, "opening": opening}

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, req: MessageRequest):
        session = store.get(session_id)
        if not session.lock.acquire(blocking=False):
            raise HTTPException(status_code=409,
                                detail="a reply is already in flight")
        try:
            if session.full:
                raise HTTPException(
                    status_code=409,
                    detail="session is full; start a new session")
            try:
                session.memory.feed_turn(USER, req.text)
            except Exception:
                session.full = True
                raise HTTPException(
                    status_code=409,
                    detail="session is full; start a new session")
            result = sample_utterance(SYSTEM, session.memory, session.sampler,
                                      reply_rng(session))
            session.memory = result.memory
            session.n_replies += 1
            if result.truncated and result.text == "":
                session.full = True
            reply = finish_reply(session, result.text)
            persist(session)
            return {"reply": reply,
                    "turn_index": len(session.memory.turns) - 1}
        finally:
            session.lock.release()

    @app.get("/sessions/{session_id}/history")
    def get_history(session_id: str):
        session = store.get(session_id)
        return {"turns": [{"role": t.role, "text": t.text, "index": i}
                          for i, t in enumerate(session.memory.turns)],
                "full": session.full}

    @app.get("/sessions/{session_id}/export")
    def export_log(session_id: str):
        session = store.get(session_id)
        line = json.dumps(session_transcript(session)) + "\n"
        return PlainTextResponse(line, media_type="application/jsonl")

    app.state.config = config
    app.state.store = store
    return app


def main(config_path=None):
    import uvicorn
    config = ServiceConfig.load(config_path)
    uvicorn.run(create_app(config), host="0.0.0.0", port=config.port)
