"""User simulators: produce the next round's relative caption.

Four feedback producers exist:

* oracle: an offline deterministic double. It emits a structured token
  ``ORACLE(target_id,alpha,round)`` that the toy composer decodes into a
  query steered toward the target; alpha=1 makes the next query the
  target's own vector.
* caption_pipeline: captions both images via a captioner endpoint, then
  asks a generator endpoint for one sentence describing the difference.
  Dataset profiles select the prompts; semantic-subset profiles restrict
  the feedback to their own aspect.
* direct_diff: one multimodal call comparing the two images directly.
* frozen: replays the session's first caption every round (ablation).
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .compose import Caption, MAX_CAPTION_CHARS
from .errors import SimulatorError, TransportError
from .gallery import GalleryEntry

FISD_CATEGORIES = ("cardinality", "addition", "negation", "change", "background", "complex")

_TEMPLATE_FILES = {
    "mllm_caption_image": "mllm_caption_image.txt",
    "mllm_caption_clothes": "mllm_caption_clothes.txt",
    "llm_diff_general": "llm_diff_general.txt",
    "llm_diff_fashioniq": "llm_diff_fashioniq.txt",
    "llm_diff_fisd": "llm_diff_fisd.txt",
    "llm_diff_fisd_complex": "llm_diff_fisd_complex.txt",
    "mm_direct_diff": "mm_direct_diff.txt",
    "forge_caption_gen": "forge_caption_gen.txt",
    "cardinality_relative_change": "cardinality_relative_change.txt",
    "cardinality_relative_make": "cardinality_relative_make.txt",
    "cardinality_relative_show": "cardinality_relative_show.txt",
}


@dataclass(frozen=True)
class PromptTemplate:
    """A text body with named ``{placeholder}`` fields."""

    template_id: str
    body: str
    placeholders: tuple[str, ...]

    def __post_init__(self) -> None:
        fields = _body_fields(self.body)
        missing = fields - set(self.placeholders)
        if missing:
            raise SimulatorError(
                f"template {self.template_id!r} uses undeclared placeholders {sorted(missing)}"
            )

    def render(self, **bindings: str) -> str:
        """Bind every placeholder; a render can never leave residual markers."""
        unbound = set(self.placeholders) - set(bindings)
        if unbound:
            raise SimulatorError(
                f"template {self.template_id!r} rendered without {sorted(unbound)}"
            )
        rendered = self.body.format(**{k: str(v) for k, v in bindings.items()})
        leftover = _body_fields(rendered)
        if leftover:
            raise SimulatorError(
                f"template {self.template_id!r} left unbound markers {sorted(leftover)}"
            )
        return rendered


def _body_fields(body: str) -> set[str]:
    fields = set()
    for _, name, _, _ in string.Formatter().parse(body):
        if name:
            fields.add(name)
    return fields


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    """Load a bundled template by id (see templates/ for the bodies)."""
    try:
        filename = _TEMPLATE_FILES[template_id]
    except KeyError:
        raise SimulatorError(f"unknown template id {template_id!r}") from None
    body = (resources.files("cirloop") / "templates" / filename).read_text("utf-8").rstrip("\n")
    return PromptTemplate(template_id, body, tuple(sorted(_body_fields(body))))


@dataclass(frozen=True)
class DatasetProfile:
    """Selects prompt wording: open-domain, fashion, or one semantic subset.

    A fisd profile without a category is a run-level wildcard resolved
    per triplet; feedback requests require the concrete category.
    """

    kind: str  # "cirr_like" | "fashioniq" | "fisd"
    category: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("cirr_like", "fashioniq", "fisd"):
            raise SimulatorError(f"unknown dataset profile {self.kind!r}")
        if self.kind == "fisd":
            if self.category is not None and self.category not in FISD_CATEGORIES:
                raise SimulatorError(
                    f"fisd profile requires one category of {FISD_CATEGORIES}, got {self.category!r}"
                )
        elif self.category is not None:
            raise SimulatorError(f"{self.kind} profile carries no category")


@dataclass
class FeedbackRequest:
    """One candidate-vs-target comparison to caption."""

    candidate: GalleryEntry
    target: GalleryEntry
    profile: DatasetProfile
    round: int

    def __post_init__(self) -> None:
        if self.candidate.image_id == self.target.image_id:
            raise SimulatorError("candidate and target must differ")
        if self.profile.kind == "fisd" and self.profile.category not in FISD_CATEGORIES:
            raise SimulatorError("feedback requests need a concrete fisd category")


@dataclass
class Feedback:
    """A produced relative caption plus attribution for the trace."""

    caption: Caption
    simulator_kind: str  # oracle | caption_pipeline | direct_diff | frozen | human
    raw_captions: tuple[str, str] | None = None
    rendered_prompts: list[str] | None = None


def format_oracle_token(target_id: str, alpha: float, round_no: int) -> str:
    return f"ORACLE({target_id},{alpha!r},{round_no})"


class OracleSimulator:
    """Deterministic offline oracle; no network, bit-stable output."""

    kind = "oracle"

    def __init__(self, alpha: float = 1.0, seed: int = 0):
        if not 0.0 <= alpha <= 1.0:
            raise SimulatorError("alpha must lie in [0, 1]")
        self.alpha = alpha
        self.seed = seed  # reserved; the caption is already deterministic

    def feedback(self, req: FeedbackRequest) -> Feedback:
        token = format_oracle_token(req.target.image_id, self.alpha, req.round)
        return Feedback(caption=Caption(token), simulator_kind=self.kind)


def _mllm_prompt(profile: DatasetProfile) -> str:
    if profile.kind == "fashioniq":
        return load_template("mllm_caption_clothes").body
    return load_template("mllm_caption_image").body


def _llm_template(profile: DatasetProfile) -> PromptTemplate:
    if profile.kind == "fashioniq":
        return load_template("llm_diff_fashioniq")
    if profile.kind == "fisd":
        if profile.category == "complex":
            return load_template("llm_diff_fisd_complex")
        return load_template("llm_diff_fisd")
    return load_template("llm_diff_general")


def _image_ref(entry: GalleryEntry) -> str:
    return entry.uri if entry.uri is not None else entry.image_id


def _clean_generation(text: object, source: str) -> Caption:
    if not isinstance(text, str):
        raise SimulatorError(f"{source} returned no text")
    cleaned = text.strip()[:MAX_CAPTION_CHARS]
    if not cleaned:
        raise SimulatorError(f"{source} returned empty output (prompt or service misconfigured)")
    return Caption(cleaned)


class CaptionPipelineSimulator:
    """Caption both images, then ask a generator for the difference sentence."""

    kind = "caption_pipeline"

    def __init__(
        self,
        captioner_endpoint: str,
        generator_endpoint: str,
        client,
        temperature: float = 0.0,
        max_tokens: int = 256,
    ):
        self.captioner_endpoint = captioner_endpoint
        self.generator_endpoint = generator_endpoint
        self.client = client
        self.temperature = temperature
        self.max_tokens = max_tokens

    def _caption_image(self, entry: GalleryEntry, prompt: str) -> str:
        try:
            body = self.client.post_json(
                self.captioner_endpoint, {"image_uri": _image_ref(entry), "prompt": prompt}
            )
        except TransportError as exc:
            raise SimulatorError(f"captioner failed: {exc}") from exc
        caption = body.get("caption")
        if not isinstance(caption, str) or not caption.strip():
            raise SimulatorError(f"captioner returned no caption for {entry.image_id}")
        return caption.strip()

    def feedback(self, req: FeedbackRequest) -> Feedback:
        mllm_prompt = _mllm_prompt(req.profile)
        cand_caption = self._caption_image(req.candidate, mllm_prompt)
        tgt_caption = self._caption_image(req.target, mllm_prompt)

        template = _llm_template(req.profile)
        bindings = {"candidate_caption": cand_caption, "target_caption": tgt_caption}
        if "category" in template.placeholders:
            bindings["category"] = req.profile.category or ""
        rendered = template.render(**bindings)

        try:
            body = self.client.post_json(
                self.generator_endpoint,
                {
                    "messages": [{"role": "user", "content": rendered}],
                    "temperature": self.temperature,
                    "max_tokens": self.max_tokens,
                },
            )
        except TransportError as exc:
            raise SimulatorError(f"generator failed: {exc}") from exc
        caption = _clean_generation(body.get("text"), "generator")
        return Feedback(
            caption=caption,
            simulator_kind=self.kind,
            raw_captions=(cand_caption, tgt_caption),
            rendered_prompts=[mllm_prompt, mllm_prompt, rendered],
        )


class DirectDiffSimulator:
    """Single multimodal call describing the candidate-to-target difference."""

    kind = "direct_diff"

    def __init__(self, endpoint: str, client):
        self.endpoint = endpoint
        self.client = client

    def feedback(self, req: FeedbackRequest) -> Feedback:
        if req.candidate.uri is None or req.target.uri is None:
            raise SimulatorError("direct-diff feedback requires image URIs on both entries")
        prompt = load_template("mm_direct_diff").body
        try:
            body = self.client.post_json(
                self.endpoint,
                {"image_uris": [req.candidate.uri, req.target.uri], "prompt": prompt},
            )
        except TransportError as exc:
            raise SimulatorError(f"direct-diff endpoint failed: {exc}") from exc
        caption = _clean_generation(body.get("text"), "direct-diff endpoint")
        return Feedback(caption=caption, simulator_kind=self.kind, rendered_prompts=[prompt])


def frozen_feedback(session_first_caption: Caption) -> Feedback:
    """Replay the round-1 caption unchanged (varied-feedback ablation)."""
    return Feedback(caption=session_first_caption, simulator_kind="frozen")


@dataclass
class SimulatorBinding:
    """Declarative simulator selection for run configs."""

    kind: str  # "oracle" | "caption_pipeline" | "direct_diff"
    alpha: float = 1.0
    seed: int = 0
    captioner_endpoint: str | None = None
    generator_endpoint: str | None = None
    diff_endpoint: str | None = None
    temperature: float = 0.0
    max_tokens: int = 256

    def validate(self) -> None:
        if self.kind == "oracle":
            if not 0.0 <= self.alpha <= 1.0:
                raise SimulatorError("oracle alpha must lie in [0, 1]")
        elif self.kind == "caption_pipeline":
            if not self.captioner_endpoint or not self.generator_endpoint:
                raise SimulatorError("caption_pipeline binding requires both endpoints")
        elif self.kind == "direct_diff":
            if not self.diff_endpoint:
                raise SimulatorError("direct_diff binding requires an endpoint")
        else:
            raise SimulatorError(f"unknown simulator kind {self.kind!r}")


def build_simulator(binding: SimulatorBinding, client=None):
    """Instantiate the simulator a binding describes."""
    binding.validate()
    if binding.kind == "oracle":
        return OracleSimulator(alpha=binding.alpha, seed=binding.seed)
    if client is None:
        from .httpio import JsonHttpClient

        client = JsonHttpClient()
    if binding.kind == "caption_pipeline":
        return CaptionPipelineSimulator(
            binding.captioner_endpoint,
            binding.generator_endpoint,
            client,
            temperature=binding.temperature,
            max_tokens=binding.max_tokens,
        )
    return DirectDiffSimulator(binding.diff_endpoint, client)
