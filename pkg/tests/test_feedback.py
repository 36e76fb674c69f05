"""Simulators: oracle token, prompt pipelines, direct diff, frozen replay."""

from __future__ import annotations

import numpy as np
import pytest

from cirloop.compose import Caption
from cirloop.errors import SimulatorError
from cirloop.feedback import (
    CaptionPipelineSimulator,
    DatasetProfile,
    DirectDiffSimulator,
    Feedback,
    FeedbackRequest,
    OracleSimulator,
    PromptTemplate,
    SimulatorBinding,
    build_simulator,
    frozen_feedback,
    load_template,
)
from cirloop.gallery import GalleryEntry, normalize
from cirloop.httpio import JsonHttpClient


def entry(image_id: str, uri: str | None = None) -> GalleryEntry:
    return GalleryEntry(image_id, normalize(np.array([1.0, 2.0])), uri=uri)


def request(profile=DatasetProfile("cirr_like"), round_no=2, uris=False) -> FeedbackRequest:
    return FeedbackRequest(
        candidate=entry("cand01", uri="file:///c.png" if uris else None),
        target=entry("tgt01", uri="file:///t.png" if uris else None),
        profile=profile,
        round=round_no,
    )


def test_request_rejects_identical_images():
    with pytest.raises(SimulatorError):
        FeedbackRequest(entry("same"), entry("same"), DatasetProfile("cirr_like"), 2)


def test_profile_validation():
    DatasetProfile("fisd", "negation")
    with pytest.raises(SimulatorError):
        DatasetProfile("fisd", "sarcasm")
    with pytest.raises(SimulatorError):
        DatasetProfile("cirr_like", "negation")
    with pytest.raises(SimulatorError):
        DatasetProfile("martian")


def test_template_rendering_and_unbound_detection():
    t = PromptTemplate("demo", "change {a} into {b}", ("a", "b"))
    assert t.render(a="x", b="y") == "change x into y"
    with pytest.raises(SimulatorError):
        t.render(a="x")
    with pytest.raises(SimulatorError):
        PromptTemplate("bad", "uses {ghost}", ("a",))


def test_bundled_mllm_prompts_are_exact():
    assert (
        load_template("mllm_caption_image").body
        == "Give me a short and precise English description of the image"
    )
    assert (
        load_template("mllm_caption_clothes").body
        == "Give a short and precise English description of the clothes"
    )


def test_oracle_feedback_token_and_determinism():
    sim = OracleSimulator(alpha=1.0)
    req = request(round_no=3)
    fb1 = sim.feedback(req)
    fb2 = sim.feedback(req)
    assert fb1.caption.text == "ORACLE(tgt01,1.0,3)"
    assert fb1.caption.text == fb2.caption.text
    assert fb1.simulator_kind == "oracle"


def test_oracle_alpha_validated():
    with pytest.raises(SimulatorError):
        OracleSimulator(alpha=1.5)


def test_caption_pipeline_renders_both_captions_verbatim(mock_endpoint):
    captions = {"cand01": "a red ball on sand", "tgt01": "a blue ball on grass"}

    def responder(path, body):
        if path == "/caption":
            key = body["image_uri"]
            return (200, {"caption": captions[key]})
        prompt = body["messages"][0]["content"]
        assert captions["cand01"] in prompt and captions["tgt01"] in prompt
        return (200, {"text": "make the ball blue and the ground grassy"})

    server = mock_endpoint(responder)
    client = JsonHttpClient(timeout_s=5)
    sim = CaptionPipelineSimulator(server.url + "/caption", server.url + "/generate", client)
    fb = sim.feedback(request())
    assert fb.caption.text == "make the ball blue and the ground grassy"
    assert fb.raw_captions == ("a red ball on sand", "a blue ball on grass")
    assert fb.simulator_kind == "caption_pipeline"
    # exact rendered prompts are kept for the trace
    assert any(captions["cand01"] in p for p in fb.rendered_prompts)


def test_caption_pipeline_fashioniq_prompt_exact(mock_endpoint):
    seen_prompts = []

    def responder(path, body):
        if path == "/caption":
            seen_prompts.append(body["prompt"])
            return (200, {"caption": "a dress"})
        return (200, {"text": "longer sleeves"})

    server = mock_endpoint(responder)
    sim = CaptionPipelineSimulator(
        server.url + "/caption", server.url + "/generate", JsonHttpClient(timeout_s=5)
    )
    sim.feedback(request(profile=DatasetProfile("fashioniq")))
    assert seen_prompts == ["Give a short and precise English description of the clothes"] * 2


def test_caption_pipeline_fisd_category_restriction(mock_endpoint):
    def responder(path, body):
        if path == "/caption":
            return (200, {"caption": "three cats"})
        assert "cardinality" in body["messages"][0]["content"]
        return (200, {"text": "show five cats instead of three"})

    server = mock_endpoint(responder)
    sim = CaptionPipelineSimulator(
        server.url + "/caption", server.url + "/generate", JsonHttpClient(timeout_s=5)
    )
    fb = sim.feedback(request(profile=DatasetProfile("fisd", "cardinality")))
    assert fb.caption.text == "show five cats instead of three"


def test_caption_pipeline_fisd_complex_is_unrestricted(mock_endpoint):
    def responder(path, body):
        if path == "/caption":
            return (200, {"caption": "a scene"})
        assert "{" not in body["messages"][0]["content"]
        return (200, {"text": "rework the scene"})

    server = mock_endpoint(responder)
    sim = CaptionPipelineSimulator(
        server.url + "/caption", server.url + "/generate", JsonHttpClient(timeout_s=5)
    )
    fb = sim.feedback(request(profile=DatasetProfile("fisd", "complex")))
    assert fb.caption.text == "rework the scene"


def test_caption_pipeline_generation_defaults(mock_endpoint):
    def responder(path, body):
        if path == "/caption":
            return (200, {"caption": "x"})
        assert body["temperature"] == 0.0
        assert body["max_tokens"] == 256
        return (200, {"text": "ok"})

    server = mock_endpoint(responder)
    sim = CaptionPipelineSimulator(
        server.url + "/caption", server.url + "/generate", JsonHttpClient(timeout_s=5)
    )
    assert sim.feedback(request()).caption.text == "ok"


def test_caption_pipeline_empty_generation_is_an_error(mock_endpoint):
    def responder(path, body):
        if path == "/caption":
            return (200, {"caption": "x"})
        return (200, {"text": "   "})

    server = mock_endpoint(responder)
    sim = CaptionPipelineSimulator(
        server.url + "/caption", server.url + "/generate", JsonHttpClient(timeout_s=5)
    )
    with pytest.raises(SimulatorError):
        sim.feedback(request())


def test_caption_pipeline_transport_failure_becomes_simulator_error(mock_endpoint):
    server = mock_endpoint(lambda path, body: (503, {}))
    sim = CaptionPipelineSimulator(
        server.url + "/caption",
        server.url + "/generate",
        JsonHttpClient(timeout_s=5, retries=1, backoff_base_s=0.01),
    )
    with pytest.raises(SimulatorError):
        sim.feedback(request())


def test_direct_diff_sends_both_uris_in_order(mock_endpoint):
    def responder(path, body):
        assert path == "/diff"
        assert body["image_uris"] == ["file:///c.png", "file:///t.png"]
        return (200, {"text": "swap the background"})

    server = mock_endpoint(responder)
    sim = DirectDiffSimulator(server.url + "/diff", JsonHttpClient(timeout_s=5))
    fb = sim.feedback(request(uris=True))
    assert fb.caption.text == "swap the background"
    assert fb.simulator_kind == "direct_diff"


def test_direct_diff_requires_uris(mock_endpoint):
    server = mock_endpoint(lambda path, body: (200, {"text": "x"}))
    sim = DirectDiffSimulator(server.url + "/diff", JsonHttpClient(timeout_s=5))
    with pytest.raises(SimulatorError):
        sim.feedback(request(uris=False))


def test_frozen_feedback_replays_first_caption():
    first = Caption("the very first caption")
    for _ in range(4):
        fb = frozen_feedback(first)
        assert fb.caption.text == first.text
        assert fb.simulator_kind == "frozen"


def test_simulator_binding_validation_and_build():
    sim = build_simulator(SimulatorBinding("oracle", alpha=0.5))
    assert isinstance(sim, OracleSimulator)
    with pytest.raises(SimulatorError):
        SimulatorBinding("caption_pipeline").validate()
    with pytest.raises(SimulatorError):
        SimulatorBinding("direct_diff").validate()
    with pytest.raises(SimulatorError):
        SimulatorBinding("vibes").validate()
