"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class CirLoopError(Exception):
    """Base class for all engine errors."""


class GalleryError(CirLoopError):
    """Malformed gallery data: dimension mismatch, duplicate id, bad value."""


class GalleryFormatError(GalleryError):
    """File does not parse under the declared on-disk format."""


class ComposeError(CirLoopError):
    """Composed-query provider failure."""


class ReplayKeyError(ComposeError):
    """Replay table has no vector for the requested (triplet, round) key."""


class ConfigError(CirLoopError):
    """Invalid or inconsistent configuration (fatal, not retryable)."""


class TransportError(CirLoopError):
    """Remote endpoint unreachable or persistently failing (after retries)."""


class SimulatorError(CirLoopError):
    """Feedback generation failed; the session may continue with the previous caption."""


class RankingError(CirLoopError):
    """Ranking preconditions violated (empty pool, missing target, ...)."""


class SessionError(CirLoopError):
    """Session-level failure with round context."""


class ForgeError(CirLoopError):
    """Benchmark construction error (unknown category, bad template, ...)."""


class MetricsError(CirLoopError):
    """Metric precondition or report invariant violation (an engine bug)."""
