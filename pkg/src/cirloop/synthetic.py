"""Deterministic synthetic fixtures: random galleries and benchmark manifests.

Used by demos, smoke tests, and pipeline dry runs; everything derives
from a single seed via counter-based streams, so repeated builds are
bit-identical.
"""

from __future__ import annotations

from .compose import Caption
from .forge import IMAGES_PER_SUBSET, TRIPLETS_PER_CATEGORY
from .feedback import FISD_CATEGORIES
from .gallery import EmbeddingGallery, GalleryEntry, normalize
from .rand import stream
from .session import QueryTriplet


def make_random_gallery(
    n: int, d: int, seed: int = 0, prefix: str = "img", gallery_id: str = "synthetic",
    with_uris: bool = False,
) -> EmbeddingGallery:
    """Random unit-vector gallery with ids ``{prefix}0000 ...`` (distinct rows)."""
    rng = stream("gallery", seed, gallery_id, n, d)
    entries = []
    for i in range(n):
        vec = normalize(rng.standard_normal(d))
        image_id = f"{prefix}{i:04d}"
        uri = f"file:///synthetic/{gallery_id}/{image_id}.png" if with_uris else None
        entries.append(GalleryEntry(image_id, vec, uri=uri))
    return EmbeddingGallery(gallery_id, d, entries)


def make_synthetic_triplets(
    gallery: EmbeddingGallery,
    count: int,
    seed: int = 0,
    category: str | None = None,
    prefix: str = "t",
    with_hard_negatives: bool = False,
) -> list[QueryTriplet]:
    """Random triplets over one gallery (reference, one target, optional hard neg)."""
    rng = stream("triplets", seed, gallery.gallery_id, count)
    ids = gallery.ids
    triplets = []
    for i in range(count):
        ref, tgt, neg = (ids[int(j)] for j in rng.choice(len(ids), size=3, replace=False))
        caption_words = [f"w{int(x)}" for x in rng.integers(0, 50, size=6)]
        triplets.append(
            QueryTriplet(
                triplet_id=f"{prefix}{i:04d}",
                reference_id=ref,
                target_ids=frozenset({tgt}),
                relative_caption=Caption(" ".join(caption_words)),
                category=category,
                hard_negative_ids=frozenset({neg}) if with_hard_negatives else frozenset(),
            )
        )
    return triplets


def make_synthetic_benchmark(
    d: int = 8, seed: int = 0
) -> tuple[list[QueryTriplet], dict[str, EmbeddingGallery]]:
    """A compliant six-category benchmark: 200 triplets and 600 images per subset.

    Each triplet uses three distinct subset-gallery images (reference,
    target, hard negative); the 200 triplets of a category tile its
    600-image gallery exactly. Complex captions exceed the 25-word floor.
    """
    triplets: list[QueryTriplet] = []
    galleries: dict[str, EmbeddingGallery] = {}
    for c_idx, category in enumerate(FISD_CATEGORIES):
        gallery = make_random_gallery(
            IMAGES_PER_SUBSET, d, seed=seed + c_idx, prefix=f"{category[:4]}",
            gallery_id=category,
        )
        galleries[category] = gallery
        ids = gallery.ids
        rng = stream("bench_captions", seed, category)
        for i in range(TRIPLETS_PER_CATEGORY):
            base = 3 * i
            words = max(4, 26 if category == "complex" else 6)
            caption = " ".join(f"w{int(x)}" for x in rng.integers(0, 99, size=words))
            triplets.append(
                QueryTriplet(
                    triplet_id=f"{category}-{i:04d}",
                    reference_id=ids[base],
                    target_ids=frozenset({ids[base + 1]}),
                    relative_caption=Caption(caption),
                    category=category,
                    hard_negative_ids=frozenset({ids[base + 2]}),
                )
            )
    return triplets, galleries
