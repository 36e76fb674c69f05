"""History fusion and exact similarity ranking over a gallery.

The round score is the dot product of unit vectors (equal to cosine
similarity; ranking by maximum similarity is identical to ranking by
minimum cosine distance 1 - cos). Scores accumulate in float64. Ordering
is total and deterministic: descending score, ties broken by ascending
image_id. Any positive rescaling of the query leaves the full ranking
unchanged, so renormalizing fused history vectors is ranking-neutral.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankingError
from .gallery import EmbeddingGallery, normalize
from .rand import stream


@dataclass
class Ranking:
    """Full ordering of eligible gallery entries for one round."""

    items: list[tuple[str, float]]
    round: int = 0

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.items]

    def top(self, m: int) -> list[tuple[str, float]]:
        return self.items[: max(0, m)]


@dataclass(frozen=True)
class NextRefPolicy:
    """How the next round's reference image is chosen from a ranking."""

    kind: str  # "top1" | "random_topn" | "fixed"
    n: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("top1", "random_topn", "fixed"):
            raise RankingError(f"unknown next-reference policy {self.kind!r}")
        if self.kind in ("random_topn", "fixed") and self.n < 1:
            raise RankingError("policy parameter must be >= 1")

    @staticmethod
    def parse(text: str) -> "NextRefPolicy":
        """Parse "top1", "random_top10" / "random10", or "fixed:3"."""
        t = text.strip().lower()
        if t == "top1":
            return NextRefPolicy("top1")
        if t.startswith("random"):
            digits = t.removeprefix("random").removeprefix("_top")
            if digits.isdigit() and int(digits) >= 1:
                return NextRefPolicy("random_topn", int(digits))
        if t.startswith("fixed:"):
            digits = t.split(":", 1)[1]
            if digits.isdigit() and int(digits) >= 1:
                return NextRefPolicy("fixed", int(digits))
        raise RankingError(f"cannot parse next-reference policy {text!r}")


def fuse_history(queries: list[np.ndarray]) -> tuple[np.ndarray, bool]:
    """Average the query history and renormalize.

    Returns:
        (fused, fallback): the unit-norm mean of the history, and whether
        the zero-mean fallback fired. A zero mean (opposing queries cancel
        out) falls back to the latest query, which callers record in the
        session trace.

    Raises:
        RankingError: empty history or mixed dimensions.
    """
    if not queries:
        raise RankingError("cannot fuse an empty history")
    d = queries[0].shape[0]
    for q in queries:
        if q.shape != (d,):
            raise RankingError("history contains mixed dimensions")
    mean = np.mean(np.stack(queries).astype(np.float64), axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return np.asarray(queries[-1], dtype=np.float32), True
    if abs(norm - 1.0) <= 1e-5:
        # already unit (e.g. a single-query history): skip the division so
        # the fused vector is bit-identical to the mean
        return mean.astype(np.float32), False
    return (mean / norm).astype(np.float32), False


def rank_gallery(
    fused: np.ndarray,
    gallery: EmbeddingGallery,
    excluded_ids: set[str] | frozenset[str] = frozenset(),
    include_ids: set[str] | frozenset[str] | None = None,
    round: int = 0,
) -> Ranking:
    """Score and totally order the eligible gallery entries.

    Args:
        fused: query vector of dimension gallery.d (any positive scale).
        excluded_ids: ids removed from the candidate pool; must exist in
            the gallery.
        include_ids: when given, restrict the pool to this set before
            exclusion (pool narrowing).
        round: recorded on the returned Ranking.

    Raises:
        RankingError: dimension mismatch, unknown excluded id, or an empty
            eligible pool.
    """
    q = np.asarray(fused, dtype=np.float64)
    if q.shape != (gallery.d,):
        raise RankingError(f"query has shape {q.shape}, gallery d={gallery.d}")
    for image_id in excluded_ids:
        if image_id not in gallery:
            raise RankingError(f"excluded id {image_id!r} not in gallery")

    n = len(gallery)
    mask = np.ones(n, dtype=bool)
    if include_ids is not None:
        mask[:] = False
        for image_id in include_ids:
            mask[gallery.position(image_id)] = True
    for image_id in excluded_ids:
        mask[gallery.position(image_id)] = False
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise RankingError("every gallery entry is excluded from the pool")

    scores = gallery.matrix64()[idx] @ q
    # lexsort: primary key last -> descending score, ties by ascending id
    order = np.lexsort((gallery.id_rank()[idx], -scores))
    ids = gallery.ids
    items = [(ids[idx[i]], float(scores[i])) for i in order]
    return Ranking(items=items, round=round)


def target_rank(ranking: Ranking, target_ids: set[str] | frozenset[str]) -> int:
    """1-based position of the best-ranked target (min over a multi-target set).

    Raises:
        RankingError: no target id appears in the ranking (mis-paired
            triplet and gallery).
    """
    if not target_ids:
        raise RankingError("target id set is empty")
    targets = set(target_ids)
    for pos, (image_id, _) in enumerate(ranking.items, start=1):
        if image_id in targets:
            return pos
    raise RankingError(f"no target of {sorted(targets)} present in the ranking")


def select_next_reference(
    ranking: Ranking,
    policy: NextRefPolicy,
    rng_seed: int = 0,
    session_id: str = "",
    round_no: int = 0,
) -> str:
    """Pick the next reference image id from a ranking under the given policy.

    random_topn draws uniformly over the first min(n, len) ids from a
    stream keyed by (rng_seed, session_id, round_no), so repeated runs of
    the same session reproduce the same choice.
    """
    if len(ranking) == 0:
        raise RankingError("cannot select from an empty ranking")
    if policy.kind == "top1":
        return ranking.items[0][0]
    if policy.kind == "fixed":
        if policy.n > len(ranking):
            raise RankingError(f"fixed({policy.n}) exceeds ranking length {len(ranking)}")
        return ranking.items[policy.n - 1][0]
    n_eff = min(policy.n, len(ranking))
    rng = stream("next_ref", rng_seed, session_id, round_no)
    return ranking.items[int(rng.integers(n_eff))][0]


@dataclass
class HistoryList:
    """Ordered composed-query history for one session (q_1 ... q_r)."""

    queries: list[np.ndarray] = field(default_factory=list)

    def append(self, q: np.ndarray) -> None:
        self.queries.append(q)

    def __len__(self) -> int:
        return len(self.queries)

    def fused(self) -> tuple[np.ndarray, bool]:
        return fuse_history(self.queries)

    def last(self) -> np.ndarray:
        if not self.queries:
            raise RankingError("history is empty")
        return self.queries[-1]


__all__ = [
    "Ranking",
    "NextRefPolicy",
    "HistoryList",
    "fuse_history",
    "rank_gallery",
    "target_rank",
    "select_next_reference",
    "normalize",
]
