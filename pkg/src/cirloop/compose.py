"""Composed-query providers: the retrieval model behind a vector interface.

A provider turns (reference image, relative caption) into a unit query
vector of the gallery's dimension. Three kinds exist:

* remote: POSTs to an HTTP wrapper around a real retrieval model.
* replay: looks up pre-exported vectors keyed by (triplet_id, round), so
  published model outputs can be re-run deterministically offline.
* toy: a deterministic in-process stand-in used for tests and demos. It
  additively blends the image vector with a pseudo-random caption
  direction, and it understands the oracle feedback token (see
  :mod:`cirloop.feedback`) to steer toward a named target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ComposeError, ConfigError, GalleryError, ReplayKeyError
from .gallery import EmbeddingGallery, UNIT_NORM_TOL, ensure_unit, normalize
from .rand import stream

MAX_CAPTION_CHARS = 4096

ORACLE_PREFIX = "ORACLE("


@dataclass(frozen=True)
class Caption:
    """A relative caption: non-empty English text, at most 4096 characters."""

    text: str
    language: str = "en"

    def __post_init__(self) -> None:
        if not self.text:
            raise ComposeError("caption must be non-empty")
        if len(self.text) > MAX_CAPTION_CHARS:
            raise ComposeError(f"caption exceeds {MAX_CAPTION_CHARS} characters")
        if self.language != "en":
            raise ComposeError("only English captions are supported")


@dataclass
class QueryVector:
    """A unit-norm composed query plus where it came from."""

    values: np.ndarray
    provenance: str  # "remote" | "replay" | "toy"


def _finalize(values: np.ndarray, provenance: str, d: int) -> QueryVector:
    # invariant: every composed query is unit-norm and dimension-d
    arr = np.asarray(values, dtype=np.float32)
    if arr.shape != (d,):
        raise ComposeError(f"composed query has shape {arr.shape}, expected ({d},)")
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ComposeError(f"composed query norm {norm} deviates from 1")
    return QueryVector(arr, provenance)


def toy_text_direction(caption: Caption, seed: int, d: int) -> np.ndarray:
    """Deterministic unit vector standing in for a text encoder.

    The direction is d standard normals from a counter-based stream keyed
    by (seed, caption text), normalized. Identical (caption, seed, d)
    always give bit-identical output.
    """
    if d < 1:
        raise ComposeError("dimension must be >= 1")
    rng = stream("toy_text", seed, caption.text)
    return normalize(rng.standard_normal(d))


def toy_compose(image_vec: np.ndarray, caption: Caption, beta: float, seed: int = 0) -> QueryVector:
    """Additive fusion stand-in: normalize((1-beta)*image + beta*text_direction).

    beta=0 degenerates to the (normalized) image vector, beta=1 to the
    caption direction. A zero blend falls back to the image vector.
    """
    if not 0.0 <= beta <= 1.0:
        raise ComposeError("beta must lie in [0, 1]")
    img = np.asarray(image_vec, dtype=np.float64)
    d = img.shape[0]
    if beta == 0.0:
        return _finalize(normalize(img), "toy", d)
    text_dir = toy_text_direction(caption, seed, d).astype(np.float64)
    blend = (1.0 - beta) * img + beta * text_dir
    if float(np.linalg.norm(blend)) == 0.0:
        return _finalize(normalize(img), "toy", d)
    return _finalize(normalize(blend), "toy", d)


def parse_oracle_token(text: str) -> tuple[str, float, int] | None:
    """Decode an oracle feedback caption into (target_id, alpha, round).

    Returns None for ordinary captions. Raises ComposeError for a token
    that looks like oracle feedback but does not parse.
    """
    if not text.startswith(ORACLE_PREFIX):
        return None
    if not text.endswith(")"):
        raise ComposeError(f"malformed oracle token {text!r}")
    body = text[len(ORACLE_PREFIX) : -1]
    parts = body.rsplit(",", 2)
    if len(parts) != 3:
        raise ComposeError(f"malformed oracle token {text!r}")
    target_id, alpha_text, round_text = parts
    try:
        alpha = float(alpha_text)
        round_no = int(round_text)
    except ValueError as exc:
        raise ComposeError(f"malformed oracle token {text!r}") from exc
    if not 0.0 <= alpha <= 1.0:
        raise ComposeError(f"oracle alpha {alpha} outside [0, 1]")
    return target_id, alpha, round_no


class ToyComposer:
    """Deterministic offline provider over a bound gallery."""

    kind = "toy"

    def __init__(self, gallery: EmbeddingGallery, beta: float = 0.5, seed: int = 0):
        if not 0.0 <= beta <= 1.0:
            raise ConfigError("toy_beta must lie in [0, 1]")
        self.gallery = gallery
        self.beta = beta
        self.seed = seed

    def compose(
        self,
        image_ref: str,
        caption: Caption,
        triplet_id: str | None = None,
        round_no: int | None = None,
    ) -> QueryVector:
        try:
            img = self.gallery.vector(image_ref)
        except GalleryError as exc:
            raise ComposeError(str(exc)) from exc
        oracle = parse_oracle_token(caption.text)
        if oracle is not None:
            target_id, alpha, _ = oracle
            try:
                tgt = self.gallery.vector(target_id)
            except GalleryError as exc:
                raise ComposeError(f"oracle target: {exc}") from exc
            blend = (1.0 - alpha) * img.astype(np.float64) + alpha * tgt.astype(np.float64)
            if float(np.linalg.norm(blend)) == 0.0:
                blend = img.astype(np.float64)
            return _finalize(normalize(blend), "toy", self.gallery.d)
        return toy_compose(img, caption, self.beta, self.seed)


class ReplayComposer:
    """Pure lookup provider over exported (triplet_id, round) -> vector rows."""

    kind = "replay"

    def __init__(self, table: dict[tuple[str, int], np.ndarray], d: int):
        self.d = d
        self.table = {key: ensure_unit(vec) for key, vec in table.items()}

    @classmethod
    def from_jsonl(cls, path: str | Path, d: int) -> "ReplayComposer":
        table: dict[tuple[str, int], np.ndarray] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                table[(str(obj["triplet_id"]), int(obj["round"]))] = np.asarray(
                    obj["vector"], dtype=np.float32
                )
        return cls(table, d)

    def compose(
        self,
        image_ref: str,
        caption: Caption,
        triplet_id: str | None = None,
        round_no: int | None = None,
    ) -> QueryVector:
        key = (triplet_id or "", round_no if round_no is not None else -1)
        if key not in self.table:
            raise ReplayKeyError(f"replay table has no vector for {key!r}")
        return _finalize(self.table[key], "replay", self.d)


class RemoteComposer:
    """HTTP provider speaking the /compose wire format."""

    kind = "remote"

    def __init__(self, endpoint: str, client, d: int):
        self.endpoint = endpoint
        self.client = client
        self.d = d

    def compose(
        self,
        image_ref: str,
        caption: Caption,
        triplet_id: str | None = None,
        round_no: int | None = None,
    ) -> QueryVector:
        payload = {"image_uri": image_ref, "caption": caption.text}
        body = self.client.post_json(self.endpoint, payload)
        values = body.get("vector")
        if not isinstance(values, list):
            raise ConfigError(f"composer endpoint returned no vector: {body!r}")
        if len(values) != self.d:
            # wrong dimension is a deployment bug, never retryable
            raise ConfigError(
                f"composer endpoint returned dimension {len(values)}, gallery d={self.d}"
            )
        return _finalize(normalize(np.asarray(values, dtype=np.float64)), "remote", self.d)


@dataclass
class ComposerBinding:
    """Declarative provider selection, validated per kind."""

    kind: str  # "remote" | "replay" | "toy"
    endpoint: str | None = None
    replay_table: str | dict | None = None
    toy_seed: int = 0
    toy_beta: float = 0.5
    timeout_s: float = 30.0
    retries: int = 2

    def validate(self) -> None:
        if self.kind == "remote":
            if not self.endpoint:
                raise ConfigError("remote composer binding requires an endpoint")
            if self.replay_table is not None:
                raise ConfigError("remote composer binding must not carry a replay table")
        elif self.kind == "replay":
            if self.replay_table is None:
                raise ConfigError("replay composer binding requires a replay table")
            if self.endpoint is not None:
                raise ConfigError("replay composer binding must not carry an endpoint")
        elif self.kind == "toy":
            if self.endpoint is not None or self.replay_table is not None:
                raise ConfigError("toy composer binding carries only toy_seed/toy_beta")
            if not 0.0 <= self.toy_beta <= 1.0:
                raise ConfigError("toy_beta must lie in [0, 1]")
        else:
            raise ConfigError(f"unknown composer kind {self.kind!r}")


def build_composer(binding: ComposerBinding, gallery: EmbeddingGallery, client=None):
    """Instantiate the provider a binding describes, bound to a gallery."""
    binding.validate()
    if binding.kind == "toy":
        return ToyComposer(gallery, beta=binding.toy_beta, seed=binding.toy_seed)
    if binding.kind == "replay":
        if isinstance(binding.replay_table, dict):
            table = {
                (str(t), int(r)): np.asarray(vec, dtype=np.float32)
                for (t, r), vec in binding.replay_table.items()
            }
            return ReplayComposer(table, gallery.d)
        return ReplayComposer.from_jsonl(binding.replay_table, gallery.d)
    if client is None:
        from .httpio import JsonHttpClient

        client = JsonHttpClient(timeout_s=binding.timeout_s, retries=binding.retries)
    return RemoteComposer(binding.endpoint, client, gallery.d)
