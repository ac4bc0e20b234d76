from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imagerag import prompts
from imagerag.errors import ConfigError, TransportError, VlmProtocolError, VlmRefusalError
from imagerag.vlm import (
    Attempt,
    ConceptCaption,
    MockVlmClient,
    RetryPolicy,
    captions_for_concepts,
    decide_match,
    image_part,
    missing_concepts,
    rephrase_prompt,
    retrieval_caption_generation,
)

FIXTURES = Path(__file__).parent / "fixtures" / "prompts"


def fixture_text(name):
    return (FIXTURES / f"{name}.txt").read_text(encoding="utf-8").removesuffix("\n")


def text_parts(request):
    out = []
    for message in request["messages"]:
        content = message["content"]
        if isinstance(content, str):
            continue
        out.extend(p["text"] for p in content if p.get("type") == "text")
    return out


IMG = "mock://image-1"


class TestPromptFidelity:
    def test_constants_match_fixtures(self):
        assert prompts.MATCH_DECISION_PROMPT == fixture_text("match_decision")
        assert prompts.MISSING_CONCEPTS_PROMPT == fixture_text("missing_concepts")
        assert prompts.CAPTION_GENERATION_PROMPT == fixture_text("caption_generation")
        assert prompts.REPHRASE_PROMPT == fixture_text("rephrase")

    def test_decision_request_embeds_substituted_fixture(self):
        vlm = MockVlmClient(["yes"])
        decide_match(vlm, "a red bird", IMG)
        expected = fixture_text("match_decision").replace("{prompt}", "a red bird")
        assert text_parts(vlm.requests[0]) == [expected]

    def test_missing_concepts_request_embeds_fixtures(self):
        vlm = MockVlmClient(["a sheep"])
        missing_concepts(vlm, "a sheep and a car", IMG, temperature=0.4)
        parts = text_parts(vlm.requests[0])
        assert parts[0] == fixture_text("match_decision").replace("{prompt}", "a sheep and a car")
        assert parts[1] == fixture_text("missing_concepts")
        assert vlm.requests[0]["temperature"] == 0.4

    def test_caption_request_embeds_fixture_and_concepts(self):
        vlm = MockVlmClient(["A fluffy white sheep standing in a green field"])
        captions_for_concepts(vlm, ["a sheep"], temperature=0.0)
        request = vlm.requests[0]
        parts = text_parts(request)
        assert parts[0] == fixture_text("missing_concepts")
        assert parts[1] == fixture_text("caption_generation")
        assert request["messages"][1] == {"role": "assistant", "content": "a sheep"}

    def test_rephrase_request_embeds_substituted_fixture(self):
        vlm = MockVlmClient(["a roadrunner bird"])
        rephrase_prompt(vlm, "Geococcyx", IMG)
        expected = fixture_text("rephrase").replace("{prompt}", "Geococcyx")
        assert text_parts(vlm.requests[0]) == [expected]


class TestDecideMatch:
    @pytest.mark.parametrize(
        "answer,expected",
        [("yes", True), ("Yes.", True), ("YES", True), ("no", False), ("No.", False), ("  no, it does not", False)],
    )
    def test_parse(self, answer, expected):
        decision = decide_match(MockVlmClient([answer]), "p", IMG)
        assert decision.matches is expected
        assert decision.raw_response == answer

    def test_unparseable_carries_raw(self):
        with pytest.raises(VlmProtocolError) as err:
            decide_match(MockVlmClient(["I'm unable to respond"]), "p", IMG)
        assert err.value.raw_response == "I'm unable to respond"

    def test_note_is_not_no(self):
        with pytest.raises(VlmProtocolError):
            decide_match(MockVlmClient(["Note that this is tricky"]), "p", IMG)

    def test_uses_given_temperature(self):
        vlm = MockVlmClient(["yes"])
        decide_match(vlm, "p", IMG, temperature=0.0)
        assert vlm.requests[0]["temperature"] == 0.0

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            decide_match(MockVlmClient(["yes"]), "", IMG)


class TestMissingConcepts:
    def test_newline_split(self):
        out = missing_concepts(MockVlmClient(["oil painting style\na sheep"]), "p", IMG, 0.0)
        assert out == ["oil painting style", "a sheep"]

    def test_bullet_and_numbering_stripped(self):
        out = missing_concepts(MockVlmClient(["- a sheep\n- a car\n"]), "p", IMG, 0.0)
        assert out == ["a sheep", "a car"]
        out = missing_concepts(MockVlmClient(["1. a sheep\n2) a car"]), "p", IMG, 0.0)
        assert out == ["a sheep", "a car"]

    def test_empty_response_gives_no_concepts(self):
        assert missing_concepts(MockVlmClient([""]), "p", IMG, 0.0) == []

    def test_refusal_phrase_gives_no_concepts(self):
        assert missing_concepts(MockVlmClient(["I am unable to respond to that."]), "p", IMG, 0.0) == []

    def test_max_concepts_cap(self):
        out = missing_concepts(MockVlmClient(["a\nb\nc\nd\ne"]), "p", IMG, 0.0, max_concepts=3)
        assert out == ["a", "b", "c"]


class TestCaptionsForConcepts:
    def test_one_to_one_pairing(self):
        batch = captions_for_concepts(
            MockVlmClient(["A fluffy white sheep standing in a green field"]), ["a sheep"], 0.0
        )
        assert batch.captions == [
            ConceptCaption("a sheep", "A fluffy white sheep standing in a green field")
        ]
        assert not batch.count_mismatch

    def test_extra_captions_pair_to_min_with_warning(self):
        batch = captions_for_concepts(MockVlmClient(["c1\nc2\nc3"]), ["a", "b"], 0.0)
        assert [c.caption for c in batch.captions] == ["c1", "c2"]
        assert batch.count_mismatch

    def test_fewer_captions_pair_to_min_with_warning(self):
        batch = captions_for_concepts(MockVlmClient(["only one"]), ["a", "b"], 0.0)
        assert batch.captions == [ConceptCaption("a", "only one")]
        assert batch.count_mismatch

    def test_equal_counts_no_warning(self):
        batch = captions_for_concepts(MockVlmClient(["c1\nc2"]), ["a", "b"], 0.0)
        assert len(batch.captions) == 2 and not batch.count_mismatch

    def test_zero_captions_is_retryable_error(self):
        with pytest.raises(VlmRefusalError):
            captions_for_concepts(MockVlmClient([""]), ["a"], 0.0)

    def test_empty_concepts_rejected(self):
        with pytest.raises(ValueError):
            captions_for_concepts(MockVlmClient(["x"]), [], 0.0)


def succeed_entries(concepts="a sheep\na car", captions="cap one\ncap two"):
    return [concepts, captions]


class TestRetryStateMachine:
    def test_success_at_attempt_zero_uses_initial_temperature(self):
        vlm = MockVlmClient(succeed_entries())
        result = retrieval_caption_generation(vlm, "p", IMG)
        assert result.attempts == [Attempt(0.0, "ok")]
        assert not result.fallback_used
        assert all(req["temperature"] == 0.0 for req in vlm.requests)

    def test_fail_fail_succeed_walks_schedule(self):
        vlm = MockVlmClient(["unable to respond", "unable to respond", *succeed_entries()])
        result = retrieval_caption_generation(vlm, "p", IMG)
        assert [a.temperature for a in result.attempts] == [0.0, 0.4, 0.7]
        assert [a.outcome for a in result.attempts] == ["no-concepts", "no-concepts", "ok"]
        assert not result.fallback_used
        assert len(result.captions) == 2

    def test_always_refusing_falls_back_to_prompt(self):
        vlm = MockVlmClient(["unable to respond"] * 4)
        result = retrieval_caption_generation(vlm, "a rare bird", IMG)
        assert len(result.attempts) == 4
        assert [a.temperature for a in result.attempts] == [0.0, 0.4, 0.7, 1.0]
        assert result.fallback_used
        assert result.captions == [ConceptCaption("a rare bird", "a rare bird")]

    def test_caption_failure_also_burns_schedule(self):
        vlm = MockVlmClient(["a sheep", "", *succeed_entries()])
        result = retrieval_caption_generation(vlm, "p", IMG)
        assert [a.outcome for a in result.attempts] == ["no-captions", "ok"]
        assert [a.temperature for a in result.attempts] == [0.0, 0.4]

    def test_transport_failure_aborts(self):
        vlm = MockVlmClient([{"error": "transport"}])
        with pytest.raises(TransportError):
            retrieval_caption_generation(vlm, "p", IMG)

    def test_fallback_never_returns_empty_captions(self):
        result = retrieval_caption_generation(MockVlmClient([""] * 8), "p", IMG)
        assert result.captions

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["refuse", "empty", "ok"]), min_size=1, max_size=6))
    def test_property_temperatures_strictly_increase(self, script):
        responses = []
        for step in script:
            if step == "refuse":
                responses.append("unable to respond")
            elif step == "empty":
                responses.append("")
            else:
                responses.extend(succeed_entries())
        responses.extend(succeed_entries())  # padding in case all steps fail early
        vlm = MockVlmClient(responses)
        result = retrieval_caption_generation(vlm, "p", IMG)
        temps = [a.temperature for a in result.attempts]
        assert temps == sorted(set(temps))
        assert len(result.attempts) <= 1 + 3
        assert result.captions


class TestRetryPolicy:
    def test_defaults(self):
        policy = RetryPolicy()
        assert policy.max_repetitions == 3
        assert policy.temperature_schedule == (0.4, 0.7, 1.0)
        assert policy.initial_temperature == 0.0

    def test_schedule_must_match_repetitions(self):
        with pytest.raises(ConfigError):
            RetryPolicy(max_repetitions=2, temperature_schedule=(0.4, 0.7, 1.0))

    def test_schedule_must_increase(self):
        with pytest.raises(ConfigError):
            RetryPolicy(temperature_schedule=(0.4, 0.4, 1.0))
        with pytest.raises(ConfigError):
            RetryPolicy(initial_temperature=0.5, temperature_schedule=(0.4, 0.7, 1.0))


class TestRephrase:
    def test_echo(self):
        assert rephrase_prompt(MockVlmClient(["a clear prompt"]), "a clear prompt", IMG) == "a clear prompt"

    def test_scripted_rewrite(self):
        assert rephrase_prompt(MockVlmClient(["a roadrunner bird"]), "Geococcyx", IMG) == "a roadrunner bird"

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            rephrase_prompt(MockVlmClient(["x"]), "", IMG)


class TestClients:
    def test_transcript_jsonl_roundtrip(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"content": "yes"}\n{"content": "no"}\n')
        vlm = MockVlmClient.from_jsonl(path)
        assert vlm.chat([{"role": "user", "content": "x"}]) == "yes"
        assert vlm.chat([{"role": "user", "content": "x"}]) == "no"
        with pytest.raises(TransportError):
            vlm.chat([{"role": "user", "content": "x"}])

    def test_image_part_url_passthrough(self):
        part = image_part("https://example.com/x.png")
        assert part["image_url"]["url"] == "https://example.com/x.png"

    def test_image_part_inlines_local_file(self, tmp_path):
        p = tmp_path / "img.png"
        p.write_bytes(b"\x89PNG\r\n\x1a\nfake")
        part = image_part(str(p))
        assert part["image_url"]["url"].startswith("data:image/png;base64,")
