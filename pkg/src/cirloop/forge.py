"""Benchmark construction pipeline: prompts, generation jobs, validation.

This module produces and validates the artifacts around external caption
and image generation; it never runs an LLM or diffusion model itself.
Outputs are deterministic in (templates, inputs, run seed):

* caption jobs: rendered prompts asking an LLM for a relative caption and
  a target caption, given a reference caption and a semantic category;
* cardinality captions: exact template instantiations driving image
  generation, plus registered relative-caption templates;
* generation manifests: one seed-locked job per image (reference and
  target jobs of a triplet share one seed so the pair stays consistent);
* validation: structural checks over a triplet manifest, its per-subset
  galleries, and optionally a generation manifest; violations are report
  content, not exceptions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ForgeError
from .feedback import FISD_CATEGORIES, PromptTemplate, load_template
from .gallery import EmbeddingGallery
from .rand import hash64

LLM_PROMPT_CATEGORIES = ("addition", "negation", "change", "background")
CARDINALITY_RANGE = range(1, 11)
COMPLEX_MIN_WORDS = 25

TRIPLETS_PER_CATEGORY = 200
IMAGES_PER_SUBSET = 600
EXPECTED_CATEGORIES = frozenset(FISD_CATEGORIES)


@dataclass
class CaptionJob:
    """One rendered LLM request for relative + target caption generation."""

    category: str
    reference_caption: str
    rendered_prompt: str
    source_dataset: str = ""


def render_caption_prompt(
    category: str, reference_caption: str, source_dataset: str = ""
) -> CaptionJob:
    """Render the caption-generation prompt for the four LLM-path categories.

    Cardinality uses fixed templates and complex uses filtered source
    captions, so both are rejected here.
    """
    if category not in LLM_PROMPT_CATEGORIES:
        raise ForgeError(
            f"category {category!r} does not use the LLM prompt path "
            f"(expected one of {LLM_PROMPT_CATEGORIES})"
        )
    if not reference_caption.strip():
        raise ForgeError("reference caption must be non-empty")
    template = load_template("forge_caption_gen")
    rendered = template.render(category=category, reference_caption=reference_caption)
    return CaptionJob(category, reference_caption, rendered, source_dataset)


def render_cardinality_caption(num: int, noun: str, allowed_nouns: list[str] | None = None) -> str:
    """Instantiate the image-generation caption for a given count and noun."""
    if num not in CARDINALITY_RANGE:
        raise ForgeError(f"cardinality num must be in 1..10, got {num}")
    if not noun.strip():
        raise ForgeError("noun must be non-empty")
    if allowed_nouns is not None and noun not in allowed_nouns:
        raise ForgeError(f"noun {noun!r} not in the configured category list")
    return f"a real-life image of {num} {noun}."


_CARDINALITY_TEMPLATE_IDS = (
    "cardinality_relative_change",
    "cardinality_relative_make",
    "cardinality_relative_show",
)
_cardinality_registry: dict[str, PromptTemplate] = {}


def _registry() -> dict[str, PromptTemplate]:
    if not _cardinality_registry:
        for template_id in _CARDINALITY_TEMPLATE_IDS:
            _cardinality_registry[template_id] = load_template(template_id)
    return _cardinality_registry


def register_cardinality_template(template: PromptTemplate) -> None:
    """Add a relative-caption template; placeholders must be from_num/to_num."""
    if set(template.placeholders) != {"from_num", "to_num"}:
        raise ForgeError("cardinality templates take exactly {from_num} and {to_num}")
    _registry()[template.template_id] = template


def cardinality_template_ids() -> list[str]:
    return sorted(_registry())


def render_cardinality_relative(template_id: str, from_num: int, to_num: int) -> str:
    """Bind quantities into a registered relative-caption template."""
    registry = _registry()
    if template_id not in registry:
        raise ForgeError(f"unregistered cardinality template {template_id!r}")
    for num in (from_num, to_num):
        if num not in CARDINALITY_RANGE:
            raise ForgeError(f"cardinality num must be in 1..10, got {num}")
    return registry[template_id].render(from_num=from_num, to_num=to_num)


def filter_complex_sources(records: list[dict], min_words: int = COMPLEX_MIN_WORDS) -> list[dict]:
    """Keep records whose relative caption has strictly more than min_words words."""
    kept = []
    for record in records:
        caption = record.get("caption", "")
        if len(str(caption).split()) > min_words:
            kept.append(record)
    return kept


@dataclass
class GenerationRecord:
    """One image-synthesis job for the diffusion runner."""

    triplet_id: str
    role: str  # "ref" | "tgt" | "hard_neg"
    prompt: str
    seed: int
    model_id: str
    status: str = "pending"


@dataclass
class GenerationManifest:
    records: list[GenerationRecord] = field(default_factory=list)

    def by_triplet(self) -> dict[str, dict[str, GenerationRecord]]:
        grouped: dict[str, dict[str, GenerationRecord]] = {}
        for record in self.records:
            grouped.setdefault(record.triplet_id, {})[record.role] = record
        return grouped


def make_generation_manifest(
    caption_triplets: list[dict], run_seed: int, model_id: str
) -> GenerationManifest:
    """Emit seed-locked jobs: ref and tgt of a triplet share one derived seed.

    Args:
        caption_triplets: dicts with triplet_id, ref_prompt, tgt_prompt and
            optional hard_neg_prompt.
        run_seed: root seed; per-triplet seeds derive from (run_seed,
            triplet_id) and are scanned for collisions.
    """
    records: list[GenerationRecord] = []
    seen_seeds: dict[int, str] = {}
    for row in caption_triplets:
        triplet_id = str(row["triplet_id"])
        for key in ("ref_prompt", "tgt_prompt"):
            if not str(row.get(key, "")).strip():
                raise ForgeError(f"{triplet_id}: missing {key}")
        seed = hash64("imggen", run_seed, triplet_id)
        if seed in seen_seeds and seen_seeds[seed] != triplet_id:
            raise ForgeError(
                f"seed collision between triplets {seen_seeds[seed]!r} and {triplet_id!r}"
            )
        seen_seeds[seed] = triplet_id
        records.append(GenerationRecord(triplet_id, "ref", str(row["ref_prompt"]), seed, model_id))
        records.append(GenerationRecord(triplet_id, "tgt", str(row["tgt_prompt"]), seed, model_id))
        hard_neg = row.get("hard_neg_prompt")
        if hard_neg is not None and str(hard_neg).strip():
            records.append(
                GenerationRecord(triplet_id, "hard_neg", str(hard_neg), seed, model_id)
            )
    return GenerationManifest(records)


def write_generation_manifest(manifest: GenerationManifest, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in manifest.records:
            obj = {
                "triplet_id": r.triplet_id,
                "role": r.role,
                "prompt": r.prompt,
                "seed": r.seed,
                "model_id": r.model_id,
                "status": r.status,
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_generation_manifest(path: str | Path) -> GenerationManifest:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                GenerationRecord(
                    triplet_id=str(obj["triplet_id"]),
                    role=str(obj["role"]),
                    prompt=str(obj["prompt"]),
                    seed=int(obj["seed"]),
                    model_id=str(obj.get("model_id", "")),
                    status=str(obj.get("status", "pending")),
                )
            )
    return GenerationManifest(records)


def write_caption_jobs(jobs: list[CaptionJob], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for job in jobs:
            obj = {
                "category": job.category,
                "reference_caption": job.reference_caption,
                "rendered_prompt": job.rendered_prompt,
                "source_dataset": job.source_dataset,
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


@dataclass
class ValidationReport:
    """Structural check outcome; violations are content, not exceptions."""

    passed: bool
    violations: list[str]
    stats: dict

    def to_dict(self) -> dict:
        return {"passed": self.passed, "violations": self.violations, "stats": self.stats}


def load_manifest_rows(path: str | Path) -> list[dict]:
    """Leniently parse a triplet manifest for validation (bad rows become findings)."""
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                rows.append({"_parse_error": lineno})
    return rows


def validate_benchmark(
    rows: list[dict],
    galleries: Mapping[str, EmbeddingGallery] | None = None,
    generation: GenerationManifest | None = None,
) -> ValidationReport:
    """Check a triplet manifest against the benchmark's structural contract.

    Checks: six categories with exactly 200 triplets each; per-category
    galleries of exactly 600 images resolving every referenced id; no role
    collisions inside a triplet; non-empty captions; complex captions
    longer than 25 words; ref/tgt seed sharing in the generation manifest
    when one is supplied.
    """
    violations: list[str] = []
    category_counts: dict[str, int] = {}
    image_ids_by_category: dict[str, set[str]] = {}

    for row in rows:
        if "_parse_error" in row:
            violations.append(f"line {row['_parse_error']}: unparseable JSON")
            continue
        triplet_id = str(row.get("triplet_id", "<missing id>"))
        category = row.get("category")
        if category not in EXPECTED_CATEGORIES:
            violations.append(f"{triplet_id}: unknown or missing category {category!r}")
            continue
        category_counts[category] = category_counts.get(category, 0) + 1

        reference_id = row.get("reference_id")
        target_ids = set(row.get("target_ids") or [])
        hard_neg_ids = set(row.get("hard_negative_ids") or [])
        if not reference_id:
            violations.append(f"{triplet_id}: missing reference_id")
            continue
        if not target_ids:
            violations.append(f"{triplet_id}: empty target id set")
        if reference_id in target_ids:
            violations.append(f"{triplet_id}: reference id collides with a target id")
        if reference_id in hard_neg_ids:
            violations.append(f"{triplet_id}: reference id collides with a hard-negative id")
        overlap = target_ids & hard_neg_ids
        if overlap:
            violations.append(
                f"{triplet_id}: hard-negative ids collide with target ids {sorted(overlap)}"
            )

        caption = str(row.get("relative_caption") or "")
        if not caption.strip():
            violations.append(f"{triplet_id}: empty relative caption")
        elif category == "complex" and len(caption.split()) <= COMPLEX_MIN_WORDS:
            violations.append(
                f"{triplet_id}: complex caption has {len(caption.split())} words "
                f"(must exceed {COMPLEX_MIN_WORDS})"
            )

        ids = {str(reference_id)} | {str(t) for t in target_ids} | {str(h) for h in hard_neg_ids}
        image_ids_by_category.setdefault(category, set()).update(ids)

    for category in sorted(EXPECTED_CATEGORIES):
        count = category_counts.get(category, 0)
        if count != TRIPLETS_PER_CATEGORY:
            violations.append(
                f"category {category}: {count} triplets (expected {TRIPLETS_PER_CATEGORY})"
            )

    if galleries is not None:
        for category in sorted(image_ids_by_category):
            gallery = galleries.get(category)
            if gallery is None:
                violations.append(f"category {category}: no subset gallery bound")
                continue
            if len(gallery) != IMAGES_PER_SUBSET:
                violations.append(
                    f"category {category}: subset gallery has {len(gallery)} images "
                    f"(expected {IMAGES_PER_SUBSET})"
                )
            unresolved = sorted(
                image_id for image_id in image_ids_by_category[category] if image_id not in gallery
            )
            if unresolved:
                violations.append(
                    f"category {category}: {len(unresolved)} unresolved image ids "
                    f"(first: {unresolved[:3]})"
                )

    if generation is not None:
        for triplet_id, roles in sorted(generation.by_triplet().items()):
            ref = roles.get("ref")
            tgt = roles.get("tgt")
            if ref is None or tgt is None:
                violations.append(f"{triplet_id}: generation manifest missing ref or tgt job")
            elif ref.seed != tgt.seed:
                violations.append(
                    f"{triplet_id}: ref seed {ref.seed} != tgt seed {tgt.seed}"
                )

    stats = {
        "triplet_count": sum(category_counts.values()),
        "category_counts": dict(sorted(category_counts.items())),
        "image_count": sum(len(v) for v in image_ids_by_category.values()),
    }
    return ValidationReport(passed=not violations, violations=violations, stats=stats)
