"""Multi-round retrieval sessions: compose, fuse, rank, feed back, iterate.

One session walks a query triplet through up to ``r_max`` rounds. Round 1
uses the triplet's own relative caption; each later round composes the
previously selected candidate with fresh feedback, fuses the query
history (mean or last-only), ranks the eligible gallery pool, and records
the target's rank. A session terminates early only when ``stop_k`` is set
and the target ranks at or above it; by default all rounds execute so
every Hits@K cell is computable from one run.

Batch execution is deterministic: per-session randomness is keyed by
(config seed, triplet id, round), so traces are byte-identical regardless
of worker count or execution order.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .compose import Caption, QueryVector
from .errors import CirLoopError, ConfigError, SessionError, SimulatorError
from .feedback import DatasetProfile, Feedback, FeedbackRequest, frozen_feedback
from .gallery import EmbeddingGallery
from .ranking import (
    NextRefPolicy,
    Ranking,
    fuse_history,
    rank_gallery,
    select_next_reference,
    target_rank,
)

TRACE_SCHEMA = "session_trace@1"


@dataclass
class QueryTriplet:
    """One benchmark sample: reference image, target set, relative caption."""

    triplet_id: str
    reference_id: str
    target_ids: frozenset[str]
    relative_caption: Caption
    category: str | None = None
    hard_negative_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.triplet_id:
            raise SessionError("triplet_id must be non-empty")
        self.target_ids = frozenset(self.target_ids)
        self.hard_negative_ids = frozenset(self.hard_negative_ids)
        if not self.target_ids:
            raise SessionError(f"{self.triplet_id}: target id set must be non-empty")
        if self.reference_id in self.target_ids:
            raise SessionError(f"{self.triplet_id}: reference_id cannot be a target")


@dataclass(frozen=True)
class EvalConfig:
    """Knobs of the interaction loop (defaults mirror the standard protocol)."""

    r_max: int = 5
    m: int = 50
    stop_k: int | None = None
    history_mode: str = "mean"  # "mean" | "last_only"
    feedback_mode: str = "fresh"  # "fresh" | "frozen"
    next_ref: NextRefPolicy = NextRefPolicy("top1")
    pool_narrow: int | None = None
    exclusion_mode: str = "none"  # "none" | "current_ref" | "all_prior_refs"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.r_max < 1:
            raise ConfigError("r_max must be >= 1")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.stop_k is not None and not 1 <= self.stop_k <= self.m:
            raise ConfigError("stop_k must satisfy 1 <= stop_k <= m")
        if self.pool_narrow is not None and self.pool_narrow < 1:
            raise ConfigError("pool_narrow must be >= 1")
        if self.history_mode not in ("mean", "last_only"):
            raise ConfigError(f"unknown history_mode {self.history_mode!r}")
        if self.feedback_mode not in ("fresh", "frozen"):
            raise ConfigError(f"unknown feedback_mode {self.feedback_mode!r}")
        if self.exclusion_mode not in ("none", "current_ref", "all_prior_refs"):
            raise ConfigError(f"unknown exclusion_mode {self.exclusion_mode!r}")

    def to_dict(self) -> dict:
        policy = self.next_ref
        policy_text = {
            "top1": "top1",
            "random_topn": f"random_top{policy.n}",
            "fixed": f"fixed:{policy.n}",
        }[policy.kind]
        return {
            "r_max": self.r_max,
            "m": self.m,
            "stop_k": self.stop_k,
            "history_mode": self.history_mode,
            "feedback_mode": self.feedback_mode,
            "next_ref": policy_text,
            "pool_narrow": self.pool_narrow,
            "exclusion_mode": self.exclusion_mode,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(obj: dict) -> "EvalConfig":
        return EvalConfig(
            r_max=int(obj.get("r_max", 5)),
            m=int(obj.get("m", 50)),
            stop_k=obj.get("stop_k"),
            history_mode=obj.get("history_mode", "mean"),
            feedback_mode=obj.get("feedback_mode", "fresh"),
            next_ref=NextRefPolicy.parse(obj.get("next_ref", "top1")),
            pool_narrow=obj.get("pool_narrow"),
            exclusion_mode=obj.get("exclusion_mode", "none"),
            seed=int(obj.get("seed", 0)),
        )


@dataclass(frozen=True)
class Status:
    kind: str  # "running" | "hit" | "exhausted"
    round: int | None = None
    rank: int | None = None


@dataclass
class RoundRecord:
    """Everything one round did, sufficient to recompute every metric."""

    round: int
    reference_id: str
    caption: str
    caption_source: str  # initial | oracle | caption_pipeline | direct_diff | frozen | human | reused
    caption_reused: bool
    reuse_reason: str | None
    query: QueryVector
    fused: np.ndarray
    zero_history_fallback: bool
    top_m: list[tuple[str, float]]
    target_rank: int
    target_in_pool: bool
    feedback_next: Feedback | None = None


@dataclass
class SessionTrace:
    """Full record of one multi-round episode."""

    triplet_id: str
    category: str | None
    target_ids: tuple[str, ...]
    config: dict
    rounds: list[RoundRecord] = field(default_factory=list)
    status: Status = Status("running")


def apply_pool_narrowing(round1: Ranking, p: int) -> list[str]:
    """First-round cost cut: later rounds rank only within the round-1 top-P."""
    if not 1 <= p <= len(round1):
        raise SessionError(f"pool_narrow={p} outside 1..{len(round1)}")
    return round1.ids[:p]


class Session:
    """Stateful driver for one episode; ``step`` appends exactly one round."""

    def __init__(
        self,
        triplet: QueryTriplet,
        gallery: EmbeddingGallery,
        config: EvalConfig,
        composer,
        simulator=None,
        profile: DatasetProfile | None = None,
        session_id: str | None = None,
    ):
        for image_id in {triplet.reference_id, *triplet.target_ids, *triplet.hard_negative_ids}:
            if image_id not in gallery:
                raise SessionError(
                    f"{triplet.triplet_id}: id {image_id!r} not resolvable in gallery "
                    f"{gallery.gallery_id!r}"
                )
        if config.pool_narrow is not None and config.pool_narrow > len(gallery):
            raise ConfigError(
                f"pool_narrow={config.pool_narrow} exceeds gallery size {len(gallery)}"
            )
        self.triplet = triplet
        self.gallery = gallery
        self.config = config
        self.composer = composer
        self.simulator = simulator
        self.profile = profile or DatasetProfile("cirr_like")
        self.session_id = session_id or triplet.triplet_id
        self.trace = SessionTrace(
            triplet_id=triplet.triplet_id,
            category=triplet.category,
            target_ids=tuple(sorted(triplet.target_ids)),
            config=config.to_dict(),
        )
        self._history: list[np.ndarray] = []
        self._prior_refs: list[str] = []
        self._narrowed: set[str] | None = None
        self._next_reference = triplet.reference_id
        # pending caption for the next round: (caption, source, reused, reason)
        self._pending: tuple[Caption | None, str, bool, str | None] = (
            triplet.relative_caption,
            "initial",
            False,
            None,
        )

    @property
    def terminal(self) -> bool:
        return self.trace.status.kind != "running"

    @property
    def round_no(self) -> int:
        return len(self.trace.rounds)

    def step(self, caption: Caption | None = None, caption_source: str = "human") -> SessionTrace:
        """Execute one round; an explicit caption (human feedback) overrides the pending one."""
        if self.terminal:
            raise SessionError(f"{self.triplet.triplet_id}: session already terminal")
        r = self.round_no + 1
        pending_caption, pending_source, reused, reason = self._pending
        if caption is not None:
            use_caption, use_source, reused, reason = caption, caption_source, False, None
        elif pending_caption is not None:
            use_caption, use_source = pending_caption, pending_source
        else:
            raise SessionError(
                f"{self.triplet.triplet_id}: round {r} needs a feedback caption "
                "(no simulator bound)"
            )

        try:
            query = self.composer.compose(
                self._next_reference, use_caption, triplet_id=self.triplet.triplet_id, round_no=r
            )
        except CirLoopError as exc:
            raise SessionError(f"{self.triplet.triplet_id}: round {r}: {exc}") from exc

        if self.config.history_mode == "last_only":
            self._history = [query.values]
        else:
            self._history.append(query.values)
        fused, fallback = fuse_history(self._history)

        excluded: set[str] = set()
        if self.config.exclusion_mode == "current_ref":
            excluded = {self._next_reference}
        elif self.config.exclusion_mode == "all_prior_refs":
            excluded = set(self._prior_refs) | {self._next_reference}
        include = self._narrowed if (self._narrowed is not None and r >= 2) else None
        try:
            ranking = rank_gallery(fused, self.gallery, excluded, include, round=r)
        except CirLoopError as exc:
            raise SessionError(f"{self.triplet.triplet_id}: round {r}: {exc}") from exc

        present = self.triplet.target_ids.intersection(ranking.ids)
        if present:
            rank = target_rank(ranking, self.triplet.target_ids)
            in_pool = True
        else:
            # target excluded or narrowed away: sentinel rank, hit impossible
            rank = (self.config.pool_narrow + 1) if include is not None else len(ranking) + 1
            in_pool = False

        if r == 1 and self.config.pool_narrow is not None:
            self._narrowed = set(apply_pool_narrowing(ranking, self.config.pool_narrow))

        record = RoundRecord(
            round=r,
            reference_id=self._next_reference,
            caption=use_caption.text,
            caption_source=use_source,
            caption_reused=reused,
            reuse_reason=reason,
            query=query,
            fused=fused,
            zero_history_fallback=fallback,
            top_m=ranking.top(min(self.config.m, len(ranking))),
            target_rank=rank,
            target_in_pool=in_pool,
        )
        self.trace.rounds.append(record)
        self._prior_refs.append(self._next_reference)

        if self.config.stop_k is not None and in_pool and rank <= self.config.stop_k:
            self.trace.status = Status("hit", round=r, rank=rank)
        elif r >= self.config.r_max:
            self.trace.status = Status("exhausted")

        if not self.terminal:
            self._prepare_next(ranking, record)
        return self.trace

    def _prepare_next(self, ranking: Ranking, record: RoundRecord) -> None:
        r = record.round
        self._next_reference = select_next_reference(
            ranking, self.config.next_ref, self.config.seed, self.session_id, r
        )
        if self.config.feedback_mode == "frozen":
            self.apply_feedback(frozen_feedback(Caption(self.trace.rounds[0].caption)))
            return
        if self.simulator is None:
            self._pending = (None, "human", False, None)
            return
        request = self.pending_feedback_request()
        if request is None:
            self.apply_reuse("candidate_is_target")
            return
        try:
            self.apply_feedback(self.simulator.feedback(request))
        except SimulatorError:
            self.apply_reuse("simulator_error")

    def pending_feedback_request(self) -> FeedbackRequest | None:
        """The candidate-vs-target comparison the next round's feedback needs.

        None when the selected candidate IS the simulator target (with
        multiple targets, the lexicographically smallest): comparing an
        image with itself is undefined, so callers reuse the last caption.
        """
        if self.terminal or not self.trace.rounds:
            raise SessionError("no pending feedback request")
        sim_target_id = min(self.triplet.target_ids)
        if self._next_reference == sim_target_id:
            return None
        return FeedbackRequest(
            candidate=self.gallery.entry(self._next_reference),
            target=self.gallery.entry(sim_target_id),
            profile=self._profile_for_triplet(),
            round=self.round_no + 1,
        )

    def apply_feedback(self, fb: Feedback) -> None:
        """Attach produced feedback to the last round and stage its caption."""
        if self.terminal or not self.trace.rounds:
            raise SessionError("cannot apply feedback outside an active session")
        self.trace.rounds[-1].feedback_next = fb
        self._pending = (fb.caption, fb.simulator_kind, False, None)

    def apply_reuse(self, reason: str) -> None:
        """Stage the last round's caption again (failed or degenerate feedback)."""
        if self.terminal or not self.trace.rounds:
            raise SessionError("cannot reuse a caption outside an active session")
        self._pending = (Caption(self.trace.rounds[-1].caption), "reused", True, reason)

    def _profile_for_triplet(self) -> DatasetProfile:
        if self.profile.kind == "fisd" and self.profile.category is None:
            return DatasetProfile("fisd", self.triplet.category)
        return self.profile

    def run(self) -> SessionTrace:
        while not self.terminal:
            self.step()
        return self.trace

    @property
    def next_reference(self) -> str:
        return self._next_reference

    @property
    def pending(self) -> tuple[Caption | None, str, bool, str | None]:
        return self._pending

    @property
    def narrowed_ids(self) -> set[str] | None:
        return self._narrowed

    @classmethod
    def resume(
        cls,
        triplet: QueryTriplet,
        gallery: EmbeddingGallery,
        config: EvalConfig,
        composer,
        trace: SessionTrace,
        next_reference: str,
        pending: tuple[Caption | None, str, bool, str | None],
        narrowed: set[str] | None = None,
        simulator=None,
        profile: DatasetProfile | None = None,
        session_id: str | None = None,
    ) -> "Session":
        """Rebuild a live session from a persisted trace (service restarts).

        History and prior references derive from the trace; narrowing and
        the staged caption cannot (the trace only keeps top-M), so they
        are passed explicitly.
        """
        session = cls(triplet, gallery, config, composer, simulator, profile, session_id)
        session.trace = trace
        queries = [r.query.values for r in trace.rounds]
        if config.history_mode == "last_only":
            session._history = queries[-1:]
        else:
            session._history = list(queries)
        session._prior_refs = [r.reference_id for r in trace.rounds]
        session._narrowed = narrowed
        session._next_reference = next_reference
        session._pending = pending
        return session


def run_session(
    triplet: QueryTriplet,
    gallery: EmbeddingGallery,
    config: EvalConfig,
    composer,
    simulator=None,
    profile: DatasetProfile | None = None,
) -> SessionTrace:
    """Run one full episode to termination and return its trace."""
    return Session(triplet, gallery, config, composer, simulator, profile).run()


@dataclass
class EvalRun:
    """A batch of traces plus run metadata (timing stays out of the traces)."""

    traces: list[SessionTrace]
    config_hash: str
    wall_time_s: float
    failure_count: int
    failures: list[dict]


def config_hash(config: EvalConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def run_batch(
    triplets: list[QueryTriplet],
    galleries: EmbeddingGallery | Mapping[str, EmbeddingGallery],
    config: EvalConfig,
    composer_factory,
    simulator=None,
    profile: DatasetProfile | None = None,
    workers: int = 1,
) -> EvalRun:
    """Run every triplet; collect traces in triplet order regardless of scheduling.

    Args:
        galleries: one gallery for all triplets, or a mapping keyed by
            triplet category (with optional "default" fallback).
        composer_factory: callable(gallery) -> composer; called once per
            distinct gallery.
        workers: thread count; results are independent of it.

    Individual session failures are recorded and the batch continues.
    """
    started = time.monotonic()
    composer_cache: dict[str, object] = {}

    def gallery_for(triplet: QueryTriplet) -> EmbeddingGallery:
        if isinstance(galleries, EmbeddingGallery):
            return galleries
        key = triplet.category if triplet.category in galleries else "default"
        if key not in galleries:
            raise SessionError(
                f"{triplet.triplet_id}: no gallery bound for category {triplet.category!r}"
            )
        return galleries[key]

    def run_one(triplet: QueryTriplet):
        gallery = gallery_for(triplet)
        if gallery.gallery_id not in composer_cache:
            composer_cache[gallery.gallery_id] = composer_factory(gallery)
        composer = composer_cache[gallery.gallery_id]
        return run_session(triplet, gallery, config, composer, simulator, profile)

    results: list[SessionTrace | None] = [None] * len(triplets)
    failures: list[dict] = []
    if workers <= 1:
        for i, triplet in enumerate(triplets):
            try:
                results[i] = run_one(triplet)
            except CirLoopError as exc:
                failures.append({"triplet_id": triplet.triplet_id, "error": str(exc)})
    else:
        # composers are built up front so the cache is not mutated concurrently
        for triplet in triplets:
            gallery = gallery_for(triplet)
            if gallery.gallery_id not in composer_cache:
                composer_cache[gallery.gallery_id] = composer_factory(gallery)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_one, t): i for i, t in enumerate(triplets)}
            for future, i in futures.items():
                try:
                    results[i] = future.result()
                except CirLoopError as exc:
                    failures.append({"triplet_id": triplets[i].triplet_id, "error": str(exc)})
    failures.sort(key=lambda f: f["triplet_id"])
    return EvalRun(
        traces=[t for t in results if t is not None],
        config_hash=config_hash(config),
        wall_time_s=time.monotonic() - started,
        failure_count=len(failures),
        failures=failures,
    )


def _feedback_to_dict(fb: Feedback | None) -> dict | None:
    if fb is None:
        return None
    return {
        "caption": fb.caption.text,
        "simulator_kind": fb.simulator_kind,
        "raw_captions": list(fb.raw_captions) if fb.raw_captions else None,
        "rendered_prompts": fb.rendered_prompts,
    }


def trace_to_dict(trace: SessionTrace) -> dict:
    return {
        "schema": TRACE_SCHEMA,
        "triplet_id": trace.triplet_id,
        "category": trace.category,
        "target_ids": list(trace.target_ids),
        "config": trace.config,
        "status": {
            "kind": trace.status.kind,
            "round": trace.status.round,
            "rank": trace.status.rank,
        },
        "rounds": [
            {
                "round": r.round,
                "reference_id": r.reference_id,
                "caption": r.caption,
                "caption_source": r.caption_source,
                "caption_reused": r.caption_reused,
                "reuse_reason": r.reuse_reason,
                "query": [float(x) for x in r.query.values],
                "query_provenance": r.query.provenance,
                "fused": [float(x) for x in r.fused],
                "zero_history_fallback": r.zero_history_fallback,
                "top_m": [[image_id, float(score)] for image_id, score in r.top_m],
                "target_rank": r.target_rank,
                "target_in_pool": r.target_in_pool,
                "feedback_next": _feedback_to_dict(r.feedback_next),
            }
            for r in trace.rounds
        ],
    }


def trace_from_dict(obj: dict) -> SessionTrace:
    if obj.get("schema") != TRACE_SCHEMA:
        raise SessionError(f"unsupported trace schema {obj.get('schema')!r}")
    rounds = []
    for r in obj["rounds"]:
        fb = r.get("feedback_next")
        feedback = None
        if fb is not None:
            feedback = Feedback(
                caption=Caption(fb["caption"]),
                simulator_kind=fb["simulator_kind"],
                raw_captions=tuple(fb["raw_captions"]) if fb.get("raw_captions") else None,
                rendered_prompts=fb.get("rendered_prompts"),
            )
        rounds.append(
            RoundRecord(
                round=int(r["round"]),
                reference_id=r["reference_id"],
                caption=r["caption"],
                caption_source=r.get("caption_source", "initial"),
                caption_reused=bool(r.get("caption_reused", False)),
                reuse_reason=r.get("reuse_reason"),
                query=QueryVector(
                    np.asarray(r["query"], dtype=np.float32), r.get("query_provenance", "replay")
                ),
                fused=np.asarray(r["fused"], dtype=np.float32),
                zero_history_fallback=bool(r.get("zero_history_fallback", False)),
                top_m=[(item[0], float(item[1])) for item in r["top_m"]],
                target_rank=int(r["target_rank"]),
                target_in_pool=bool(r.get("target_in_pool", True)),
                feedback_next=feedback,
            )
        )
    status = obj["status"]
    return SessionTrace(
        triplet_id=obj["triplet_id"],
        category=obj.get("category"),
        target_ids=tuple(obj["target_ids"]),
        config=obj["config"],
        rounds=rounds,
        status=Status(status["kind"], status.get("round"), status.get("rank")),
    )


def dump_trace_line(trace: SessionTrace) -> str:
    return json.dumps(trace_to_dict(trace), sort_keys=True, separators=(",", ":"))


def write_traces_jsonl(traces: list[SessionTrace], path: str | Path) -> None:
    Path(path).write_text("".join(dump_trace_line(t) + "\n" for t in traces), encoding="utf-8")


def read_traces_jsonl(path: str | Path) -> list[SessionTrace]:
    traces = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                traces.append(trace_from_dict(json.loads(line)))
    return traces


def traces_digest(traces: list[SessionTrace]) -> str:
    h = hashlib.sha256()
    for trace in traces:
        h.update(dump_trace_line(trace).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def load_triplets_jsonl(path: str | Path) -> list[QueryTriplet]:
    """Read a triplet manifest (one JSON object per line, QueryTriplet fields)."""
    triplets = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SessionError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            triplets.append(
                QueryTriplet(
                    triplet_id=str(obj["triplet_id"]),
                    reference_id=str(obj["reference_id"]),
                    target_ids=frozenset(str(t) for t in obj["target_ids"]),
                    relative_caption=Caption(obj["relative_caption"]),
                    category=obj.get("category"),
                    hard_negative_ids=frozenset(
                        str(t) for t in obj.get("hard_negative_ids", [])
                    ),
                )
            )
    return triplets


def write_triplets_jsonl(triplets: list[QueryTriplet], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in triplets:
            obj = {
                "triplet_id": t.triplet_id,
                "reference_id": t.reference_id,
                "target_ids": sorted(t.target_ids),
                "relative_caption": t.relative_caption.text,
                "category": t.category,
                "hard_negative_ids": sorted(t.hard_negative_ids),
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
