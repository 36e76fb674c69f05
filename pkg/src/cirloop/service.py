"""REST facade over the session engine for human-in-loop and remote studies.

Versioned JSON API under /v1 (see README for the endpoint table). Every
session lives in an embedded sqlite store as a JSON record and is rebuilt
from it on each request, so a restart loses nothing. Two visibility
modes exist: ``study`` responses include the target image and per-round
target ranks; ``blind`` responses carry no target information at all.
Mutations are serialized per session and support idempotency keys.
"""

from __future__ import annotations

import json
import secrets
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Header, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, RedirectResponse

from .compose import Caption, ComposerBinding, build_composer
from .errors import CirLoopError, ConfigError, SessionError, SimulatorError, TransportError
from .feedback import DatasetProfile, SimulatorBinding, build_simulator
from .gallery import EmbeddingGallery
from .session import (
    EvalConfig,
    QueryTriplet,
    Session,
    trace_from_dict,
    trace_to_dict,
)

SESSION_ID_BYTES = 16  # 128 bits of entropy
DEFAULT_TTL_S = 24 * 3600.0


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class ServiceConfig:
    """Everything the service needs: data, bindings, policies."""

    galleries: dict[str, EmbeddingGallery]
    store_path: str | Path
    triplets: dict[str, QueryTriplet] = field(default_factory=dict)
    eval_config: EvalConfig = field(default_factory=EvalConfig)
    composer_binding: ComposerBinding = field(default_factory=lambda: ComposerBinding("toy"))
    simulator_binding: SimulatorBinding | None = None
    profile: DatasetProfile = field(default_factory=lambda: DatasetProfile("cirr_like"))
    default_mode: str = "study"
    ttl_s: float = DEFAULT_TTL_S
    auth_token: str | None = None
    cors_origin: str = "*"


class SessionStore:
    """Tiny sqlite-backed KV store: session_id -> JSON record."""

    def __init__(self, path: str | Path):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._lock = threading.Lock()
        with self._lock:
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS sessions ("
                "session_id TEXT PRIMARY KEY, payload TEXT NOT NULL, expires_at REAL NOT NULL)"
            )
            self._conn.commit()

    def get(self, session_id: str) -> dict | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT payload FROM sessions WHERE session_id = ?", (session_id,)
            ).fetchone()
        return json.loads(row[0]) if row else None

    def put(self, session_id: str, record: dict, expires_at: float) -> None:
        payload = json.dumps(record, sort_keys=True)
        with self._lock:
            self._conn.execute(
                "INSERT OR REPLACE INTO sessions (session_id, payload, expires_at) VALUES (?, ?, ?)",
                (session_id, payload, expires_at),
            )
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()


class SessionHub:
    """Rebuilds engine sessions from the store and serializes their mutations."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.store = SessionStore(config.store_path)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._composers: dict[str, object] = {}
        self._simulator = (
            build_simulator(config.simulator_binding)
            if config.simulator_binding is not None
            else None
        )

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def gallery(self, gallery_id: str) -> EmbeddingGallery:
        gallery = self.config.galleries.get(gallery_id)
        if gallery is None:
            raise ApiError(404, "unknown_gallery", f"no gallery named {gallery_id!r}")
        return gallery

    def composer_for(self, gallery: EmbeddingGallery):
        if gallery.gallery_id not in self._composers:
            self._composers[gallery.gallery_id] = build_composer(
                self.config.composer_binding, gallery
            )
        return self._composers[gallery.gallery_id]

    @property
    def simulator(self):
        return self._simulator

    def load_record(self, session_id: str) -> dict:
        record = self.store.get(session_id)
        if record is None:
            raise ApiError(404, "unknown_session", f"no session {session_id!r}")
        return record

    def rebuild(self, record: dict) -> Session:
        gallery = self.gallery(record["gallery_key"])
        triplet_obj = record["triplet"]
        triplet = QueryTriplet(
            triplet_id=triplet_obj["triplet_id"],
            reference_id=triplet_obj["reference_id"],
            target_ids=frozenset(triplet_obj["target_ids"]),
            relative_caption=Caption(triplet_obj["relative_caption"]),
            category=triplet_obj.get("category"),
            hard_negative_ids=frozenset(triplet_obj.get("hard_negative_ids", [])),
        )
        pending_raw = record["pending"]
        pending = (
            Caption(pending_raw[0]) if pending_raw[0] is not None else None,
            pending_raw[1],
            bool(pending_raw[2]),
            pending_raw[3],
        )
        return Session.resume(
            triplet=triplet,
            gallery=gallery,
            config=EvalConfig.from_dict(record["config"]),
            composer=self.composer_for(gallery),
            trace=trace_from_dict(record["trace"]),
            next_reference=record["next_reference"],
            pending=pending,
            narrowed=set(record["narrowed"]) if record.get("narrowed") else None,
            profile=self.config.profile,
            session_id=record["session_id"],
        )

    def persist(self, record: dict, session: Session) -> None:
        caption, source, reused, reason = session.pending
        record["trace"] = trace_to_dict(session.trace)
        record["next_reference"] = session.next_reference
        record["pending"] = [caption.text if caption else None, source, reused, reason]
        record["narrowed"] = sorted(session.narrowed_ids) if session.narrowed_ids else None
        self.store.put(record["session_id"], record, record["expires_at"])


def _session_view(record: dict, session: Session) -> dict:
    """Shape one session for the wire; blind mode carries no target fields."""
    study = record["mode"] == "study"
    trace = session.trace
    gallery = session.gallery
    last = trace.rounds[-1]
    m = session.config.m

    def uri_of(image_id: str) -> str | None:
        return gallery.entry(image_id).uri if image_id in gallery else None

    candidates = [
        {"image_id": image_id, "score": score, "rank": rank, "uri": uri_of(image_id)}
        for rank, (image_id, score) in enumerate(last.top_m[:m], start=1)
    ]
    history = []
    for r in trace.rounds:
        item: dict = {
            "round": r.round,
            "caption": r.caption,
            "caption_source": r.caption_source,
        }
        if study:
            item["target_rank"] = r.target_rank
            item["target_in_pool"] = r.target_in_pool
        history.append(item)
    status: dict = {"kind": trace.status.kind}
    if study:
        status["round"] = trace.status.round
        status["rank"] = trace.status.rank
    elif trace.status.kind != "running":
        # blind clients learn only that the session ended, not how
        status = {"kind": "finished"}
    view = {
        "session_id": record["session_id"],
        "mode": record["mode"],
        "round": last.round,
        "r_max": session.config.r_max,
        "terminal": session.terminal,
        "status": status,
        "candidates": candidates,
        "history": history,
    }
    if study:
        target_id = min(trace.target_ids)
        view["target"] = {"image_id": target_id, "uri": uri_of(target_id)}
    return view


def create_app(config: ServiceConfig) -> FastAPI:
    hub = SessionHub(config)
    app = FastAPI(title="cirloop session service", version="1")
    app.state.hub = hub
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[config.cors_origin] if config.cors_origin != "*" else ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    def check_auth(authorization: str | None) -> None:
        if config.auth_token is None:
            return
        if authorization != f"Bearer {config.auth_token}":
            raise ApiError(401, "unauthorized", "missing or invalid bearer token")

    def mutate_guard(record: dict) -> None:
        if time.time() > record["expires_at"]:
            raise ApiError(410, "expired", "session expired; mutations rejected")
        if record["trace"]["status"]["kind"] != "running":
            raise ApiError(409, "terminal", "session already terminal")

    @app.get("/v1/galleries")
    def list_galleries(authorization: str | None = Header(default=None)):
        check_auth(authorization)
        return [
            {
                "gallery_id": g.gallery_id,
                "n": len(g),
                "d": g.d,
                "subset_tag": g.subset_tag,
            }
            for g in config.galleries.values()
        ]

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: dict, authorization: str | None = Header(default=None)):
        check_auth(authorization)
        if not isinstance(body, dict):
            raise ApiError(400, "bad_request", "body must be a JSON object")
        gallery_id = body.get("gallery_id")
        if not gallery_id:
            raise ApiError(400, "bad_request", "gallery_id is required")
        gallery = hub.gallery(gallery_id)

        mode = body.get("mode", config.default_mode)
        if mode not in ("study", "blind"):
            raise ApiError(400, "bad_request", f"mode must be study or blind, got {mode!r}")

        try:
            if isinstance(body.get("config"), dict):
                overrides = body["config"]
                unknown = sorted(set(overrides) - set(config.eval_config.to_dict()))
                if unknown:
                    raise ConfigError(f"unknown config key(s) {unknown}")
                eval_config = EvalConfig.from_dict({**config.eval_config.to_dict(), **overrides})
            else:
                eval_config = config.eval_config
        except (ConfigError, KeyError, ValueError) as exc:
            raise ApiError(400, "bad_config", str(exc)) from exc

        if body.get("triplet_id") is not None:
            triplet = config.triplets.get(str(body["triplet_id"]))
            if triplet is None:
                raise ApiError(404, "unknown_triplet", f"no triplet {body['triplet_id']!r}")
        else:
            missing = [k for k in ("reference_id", "caption", "target_ids") if not body.get(k)]
            if missing:
                raise ApiError(400, "bad_request", f"ad-hoc session missing {missing}")
            try:
                triplet = QueryTriplet(
                    triplet_id=f"adhoc-{secrets.token_hex(4)}",
                    reference_id=str(body["reference_id"]),
                    target_ids=frozenset(str(t) for t in body["target_ids"]),
                    relative_caption=Caption(str(body["caption"])),
                )
            except CirLoopError as exc:
                raise ApiError(400, "bad_request", str(exc)) from exc

        session_id = secrets.token_urlsafe(SESSION_ID_BYTES)
        try:
            session = Session(
                triplet,
                gallery,
                eval_config,
                hub.composer_for(gallery),
                profile=config.profile,
                session_id=session_id,
            )
            session.step()  # round 1 executes immediately
        except SessionError as exc:
            if "not resolvable" in str(exc):
                raise ApiError(404, "unknown_image", str(exc)) from exc
            raise ApiError(400, "bad_request", str(exc)) from exc

        now = time.time()
        record = {
            "session_id": session_id,
            "mode": mode,
            "created_at": now,
            "expires_at": now + config.ttl_s,
            "gallery_key": gallery_id,
            "config": eval_config.to_dict(),
            "triplet": {
                "triplet_id": triplet.triplet_id,
                "reference_id": triplet.reference_id,
                "target_ids": sorted(triplet.target_ids),
                "relative_caption": triplet.relative_caption.text,
                "category": triplet.category,
                "hard_negative_ids": sorted(triplet.hard_negative_ids),
            },
            "last_idempotency": None,
        }
        hub.persist(record, session)
        return _session_view(record, session)

    @app.get("/v1/sessions/{session_id}")
    def get_state(session_id: str, authorization: str | None = Header(default=None)):
        check_auth(authorization)
        record = hub.load_record(session_id)
        return _session_view(record, hub.rebuild(record))

    @app.post("/v1/sessions/{session_id}/feedback")
    def post_feedback(
        session_id: str,
        body: dict,
        authorization: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        check_auth(authorization)
        with hub.lock_for(session_id):
            record = hub.load_record(session_id)
            stored = record.get("last_idempotency")
            if idempotency_key is not None and stored and stored["key"] == idempotency_key:
                return stored["response"]
            mutate_guard(record)
            caption_text = (body or {}).get("caption", "")
            if not isinstance(caption_text, str) or not caption_text.strip():
                raise ApiError(400, "empty_caption", "caption must be non-empty text")
            session = hub.rebuild(record)
            try:
                session.step(Caption(caption_text.strip()), caption_source="human")
            except CirLoopError as exc:
                raise ApiError(400, "bad_request", str(exc)) from exc
            view = _session_view(record, session)
            if idempotency_key is not None:
                record["last_idempotency"] = {"key": idempotency_key, "response": view}
            hub.persist(record, session)
            return view

    @app.post("/v1/sessions/{session_id}/auto-step")
    def auto_step(session_id: str, authorization: str | None = Header(default=None)):
        check_auth(authorization)
        with hub.lock_for(session_id):
            record = hub.load_record(session_id)
            mutate_guard(record)
            session = hub.rebuild(record)
            pending_caption = session.pending[0]
            if session.config.feedback_mode != "frozen" and pending_caption is None:
                if hub.simulator is None:
                    raise ApiError(400, "no_simulator", "no simulator bound for this service")
                request = session.pending_feedback_request()
                if request is None:
                    session.apply_reuse("candidate_is_target")
                else:
                    try:
                        session.apply_feedback(hub.simulator.feedback(request))
                    except (SimulatorError, TransportError) as exc:
                        raise ApiError(503, "simulator_unavailable", str(exc)) from exc
            try:
                session.step()
            except CirLoopError as exc:
                raise ApiError(400, "bad_request", str(exc)) from exc
            view = _session_view(record, session)
            hub.persist(record, session)
            return view

    @app.get("/v1/images/{image_id}")
    def get_image(image_id: str, authorization: str | None = Header(default=None)):
        check_auth(authorization)
        for gallery in config.galleries.values():
            if image_id in gallery:
                uri = gallery.entry(image_id).uri
                if uri is None:
                    raise ApiError(404, "no_image", f"{image_id} has no stored image")
                if uri.startswith("http://") or uri.startswith("https://"):
                    return RedirectResponse(uri, status_code=302)
                path = Path(uri.removeprefix("file://"))
                if not path.exists():
                    raise ApiError(404, "no_image", f"image file missing for {image_id}")
                return FileResponse(path)
        raise ApiError(404, "unknown_image", f"no image {image_id!r}")

    return app
