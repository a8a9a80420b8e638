import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmsi_harness.backends import ChatRequest, InferenceBackend
from mmsi_harness.core import Turn, ValidationError
from mmsi_harness.forecasting import (
    COARSE_HEADER,
    FINE_HEADER,
    ForecastResponse,
    ForecastTarget,
    ParseStatus,
    coarse_to_fine_forecast,
    greedy_decode,
    markov_speaker_baseline,
    parse_speaker_turns,
    parse_utterances,
    serialize_forecast,
    transition_counts,
)
from mmsi_harness.prompts import RenderedPrompt

EXAMPLE_COARSE = "The upcoming speakers' turns: Player0, Player4, Player0, Player3"
EXAMPLE_FINE = (
    "The upcoming utterances: [Player0]: I'm the troublemaker. [Player4]: I was the werewolf. "
    "[Player0]: Who did you swap? [Player3]: I robbed Player4."
)


def test_reference_strings_parse():
    assert parse_speaker_turns(EXAMPLE_COARSE) == ([0, 4, 0, 3], ParseStatus.OK)
    pairs, status = parse_utterances(EXAMPLE_FINE)
    assert status is ParseStatus.OK
    assert [p for p, _ in pairs] == [0, 4, 0, 3]
    assert pairs[0] == (0, "I'm the troublemaker.")
    assert pairs[3] == (3, "I robbed Player4.")


def test_serialization_shape():
    t = ForecastTarget.from_utterances([(0, "a  b\nc"), (4, "d")])
    coarse, fine = serialize_forecast(t)
    assert coarse == "The upcoming speakers' turns: Player0, Player4"
    assert fine == "The upcoming utterances: [Player0]: a b c [Player4]: d"
    assert serialize_forecast(ForecastTarget((1, 2))) == ("The upcoming speakers' turns: Player1, Player2", "")
    assert serialize_forecast(ForecastTarget()) == (COARSE_HEADER, "")


def test_target_alignment_is_enforced():
    with pytest.raises(ValidationError):
        ForecastTarget((0, 1), ((0, "a"), (2, "b")))


def test_lenient_parsing():
    assert parse_speaker_turns("the upcoming speaker turns:player1,player2") == ([1, 2], ParseStatus.OK)
    assert parse_speaker_turns("Probably Player2 then Player5") == ([2, 5], ParseStatus.PARTIAL)
    assert parse_speaker_turns("no idea") == ([], ParseStatus.FAILED)
    assert parse_utterances("nothing here")[1] is ParseStatus.FAILED
    assert parse_utterances("[Player1]: hi [Player2]:")[1] is ParseStatus.PARTIAL
    both = f"{EXAMPLE_COARSE}\n{EXAMPLE_FINE}"
    assert parse_speaker_turns(both)[0] == [0, 4, 0, 3]


words = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCXYZ0123456789.,!?'-:*()<>", min_size=1, max_size=12)
utterance = st.lists(words, min_size=1, max_size=8).map(" ".join)


@st.composite
def targets(draw):
    k = draw(st.integers(0, 8))
    speakers = draw(st.lists(st.integers(0, 5), min_size=k, max_size=k))
    return ForecastTarget.from_utterances([(p, draw(utterance)) for p in speakers])


@settings(max_examples=500)
@given(targets())
def test_round_trip(target):
    coarse, fine = serialize_forecast(target)
    speakers, s1 = parse_speaker_turns(coarse)
    assert s1 is ParseStatus.OK and speakers == list(target.speakers)
    if target.utterances:
        pairs, s2 = parse_utterances(fine)
        assert s2 is ParseStatus.OK
        assert ForecastTarget.from_utterances(pairs) == target


def test_markov_examples():
    window = [Turn(s, "x", i, i) for i, s in enumerate([0, 1, 0, 1, 0, 2])]
    counts = transition_counts([t.speaker for t in window], 3)
    assert counts == [[0, 2, 1], [2, 0, 0], [0, 0, 0]]
    # from 2: all-zero row, ties go to the lowest index; then 0 -> 1 -> 0 ...
    assert markov_speaker_baseline(window, 4) == [0, 1, 0, 1]
    assert greedy_decode([[0, 1], [1, 0]], 0, 3) == [1, 0, 1]
    assert markov_speaker_baseline(window, 0) == []
    with pytest.raises(ValueError):
        markov_speaker_baseline([], 2)


def test_markov_sampling_is_seeded():
    window = [Turn(s, "x", i, i) for i, s in enumerate([0, 1, 2, 0, 1, 2, 0])]
    a = markov_speaker_baseline(window, 8, seed=3, sample=True)
    assert a == markov_speaker_baseline(window, 8, seed=3, sample=True)
    assert all(0 <= p < 3 for p in a)
    assert len({tuple(markov_speaker_baseline(window, 8, seed=s, sample=True)) for s in range(10)}) > 1


class Scripted(InferenceBackend):
    def __init__(self, answers):
        self.answers = list(answers)
        self.requests: list[ChatRequest] = []

    def complete(self, req):
        self.requests.append(req)
        return self.answers.pop(0)


PROMPT = RenderedPrompt("legend", "[Player0]: hi\n[Player1]: yo\nIdentify which player the speaker is talking to?", ("f.png",), "s:1")


def test_coarse_then_fine_with_coarse_in_context():
    b = Scripted([EXAMPLE_COARSE, EXAMPLE_FINE])
    fr = coarse_to_fine_forecast(b, PROMPT, 4)
    assert fr.parse_status is ParseStatus.OK
    assert fr.parsed.speakers == (0, 4, 0, 3)
    assert len(b.requests) == 2
    assert "Identify which player" not in b.requests[0].user
    assert EXAMPLE_COARSE in b.requests[1].user
    assert all(r.images == ("f.png",) and r.system == "legend" for r in b.requests)
    ctx = fr.context_text()
    assert ctx.split("\n")[0] == EXAMPLE_COARSE and ctx.split("\n")[1].startswith(FINE_HEADER)


def test_coarse_failure_falls_back_to_single_stage():
    b = Scripted(["I cannot say.", EXAMPLE_FINE])
    fr = coarse_to_fine_forecast(b, PROMPT, 4)
    assert fr.parse_status is ParseStatus.PARTIAL
    assert fr.parsed.speakers == (0, 4, 0, 3)
    assert "Write the next 4 turns" in b.requests[1].user
    assert COARSE_HEADER not in b.requests[1].user.split("formatted as")[0]


def test_fine_disagreeing_with_coarse_is_partial():
    b = Scripted([EXAMPLE_COARSE, "The upcoming utterances: [Player1]: a [Player2]: b"])
    fr = coarse_to_fine_forecast(b, PROMPT, 4)
    assert fr.parse_status is ParseStatus.PARTIAL


def test_both_stages_failing():
    fr = coarse_to_fine_forecast(Scripted(["??", "??"]), PROMPT, 4)
    assert fr.parse_status is ParseStatus.FAILED and fr.context_text() == ""


def test_stage_switches_and_k_zero():
    b = Scripted([EXAMPLE_COARSE])
    fr = coarse_to_fine_forecast(b, PROMPT, 4, detailed_utterances=False)
    assert len(b.requests) == 1 and fr.context_text() == EXAMPLE_COARSE
    b = Scripted([EXAMPLE_FINE])
    fr = coarse_to_fine_forecast(b, PROMPT, 4, speaker_turns=False)
    assert len(b.requests) == 1 and fr.context_text().startswith(FINE_HEADER)
    b = Scripted([])
    assert coarse_to_fine_forecast(b, PROMPT, 0) == ForecastResponse(sample_id="s:1")
    assert b.requests == []


def test_text_only_forecast_drops_images():
    b = Scripted([EXAMPLE_COARSE, EXAMPLE_FINE])
    coarse_to_fine_forecast(b, PROMPT, 4, text_only=True)
    assert all(r.images == () for r in b.requests)


def test_truncates_to_k():
    b = Scripted([EXAMPLE_COARSE, "The upcoming utterances: [Player0]: a [Player4]: b"])
    fr = coarse_to_fine_forecast(b, PROMPT, 2)
    assert fr.parsed.speakers == (0, 4)
    assert fr.parse_status is ParseStatus.OK


def test_random_targets_reparse_from_context():
    rng = random.Random(0)
    for _ in range(50):
        k = rng.randint(1, 8)
        t = ForecastTarget.from_utterances([(rng.randrange(6), f"u{i}") for i in range(k)])
        coarse, fine = serialize_forecast(t)
        fr = coarse_to_fine_forecast(Scripted([coarse, fine]), PROMPT, k)
        assert fr.parsed == t and fr.parse_status is ParseStatus.OK
