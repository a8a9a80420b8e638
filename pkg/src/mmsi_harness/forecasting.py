"""Coarse-to-fine conversation forecasting.

The coarse stage predicts who speaks next (``The upcoming speakers' turns:
Player0, Player4``); the fine stage, conditioned on those speakers, writes
one utterance per speaker (``The upcoming utterances: [Player0]: ...``).
This module owns that response grammar, a model-free Markov speaker
baseline, and the two-call orchestration against a backend.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Sequence

from mmsi_harness.backends import ChatRequest, complete
from mmsi_harness.core import Turn, ValidationError, player_name

if TYPE_CHECKING:
    from mmsi_harness.prompts import RenderedPrompt

COARSE_HEADER = "The upcoming speakers' turns:"
FINE_HEADER = "The upcoming utterances:"

_COARSE_HEADER_RE = re.compile(r"the\s+upcoming\s+speakers?['’]?\s*turns\s*:", re.IGNORECASE)
_FINE_HEADER_RE = re.compile(r"the\s+upcoming\s+utterances\s*:", re.IGNORECASE)
_PLAYER_TOKEN_RE = re.compile(r"\bplayer(\d+)\b", re.IGNORECASE)
_MARKER_RE = re.compile(r"\[\s*player(\d+)\s*\]\s*:", re.IGNORECASE)


class ParseStatus(str, Enum):
    OK = "ok"
    PARTIAL = "partial"
    FAILED = "failed"


@dataclass(frozen=True)
class ForecastTarget:
    """Upcoming speakers and their utterances, aligned index by index.

    ``utterances`` may be empty when only the coarse (speaker) stage exists.
    """

    speakers: tuple[int, ...] = ()
    utterances: tuple[tuple[int, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "utterances", tuple((int(p), str(u)) for p, u in self.utterances))
        if self.utterances and tuple(p for p, _ in self.utterances) != self.speakers:
            raise ValidationError("forecast speakers must equal the speaker column of utterances")

    @classmethod
    def from_utterances(cls, utterances: Sequence[tuple[int, str]]) -> ForecastTarget:
        return cls(tuple(p for p, _ in utterances), tuple(utterances))

    def __len__(self) -> int:
        return len(self.speakers)

    def truncate(self, k: int) -> ForecastTarget:
        return ForecastTarget(self.speakers[:k], self.utterances[:k])

    def to_dict(self) -> dict[str, Any]:
        return {"speakers": list(self.speakers), "utterances": [[p, u] for p, u in self.utterances]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ForecastTarget:
        return cls(tuple(data["speakers"]), tuple((p, u) for p, u in data["utterances"]))


# -- grammar -------------------------------------------------------------------


def _one_line(text: str) -> str:
    return " ".join(text.split())


def serialize_forecast(target: ForecastTarget) -> tuple[str, str]:
    """Return ``(coarse_text, fine_text)``; fine text is empty when there are no utterances."""
    names = ", ".join(player_name(p) for p in target.speakers)
    coarse = f"{COARSE_HEADER} {names}" if names else COARSE_HEADER
    if not target.utterances:
        return coarse, ""
    parts = " ".join(f"[{player_name(p)}]: {_one_line(u)}" for p, u in target.utterances)
    return coarse, f"{FINE_HEADER} {parts}"


def parse_speaker_turns(text: str) -> tuple[list[int], ParseStatus]:
    """Extract the ordered speaker list from a coarse-stage response.

    With the header present, every ``PlayerN`` token after it is taken (the
    list may be shorter than requested). Without it, any ``PlayerN`` tokens
    found give a partial parse.
    """
    m = _COARSE_HEADER_RE.search(text)
    if m:
        tail = text[m.end():]
        # Stop at a following fine-stage block if the model emitted both.
        fine = _FINE_HEADER_RE.search(tail)
        if fine:
            tail = tail[: fine.start()]
        return [int(n) for n in _PLAYER_TOKEN_RE.findall(tail)], ParseStatus.OK
    tokens = [int(n) for n in _PLAYER_TOKEN_RE.findall(text)]
    if not tokens:
        return [], ParseStatus.FAILED
    return tokens, ParseStatus.PARTIAL


def parse_utterances(text: str) -> tuple[list[tuple[int, str]], ParseStatus]:
    """Split a fine-stage response on ``[PlayerN]:`` markers."""
    m = _FINE_HEADER_RE.search(text)
    body = text[m.end():] if m else text
    markers = list(_MARKER_RE.finditer(body))
    if not markers:
        return [], ParseStatus.FAILED
    pairs = []
    for i, mk in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(body)
        pairs.append((int(mk.group(1)), body[mk.end():end].strip()))
    status = ParseStatus.OK if all(u for _, u in pairs) else ParseStatus.PARTIAL
    return pairs, status


# -- Markov baseline -----------------------------------------------------------


def transition_counts(speakers: Sequence[int], player_count: int) -> list[list[int]]:
    """First-order transition counts ``counts[a][b]`` over consecutive speakers."""
    counts = [[0] * player_count for _ in range(player_count)]
    for a, b in zip(speakers, speakers[1:]):
        counts[a][b] += 1
    return counts


def greedy_decode(counts: Sequence[Sequence[float]], start: int, k: int) -> list[int]:
    """Follow add-one-smoothed argmax transitions ``k`` steps; ties go to the lowest index."""
    out = []
    cur = start
    for _ in range(k):
        row = counts[cur]
        best = 0
        for j in range(1, len(row)):
            if row[j] + 1 > row[best] + 1:
                best = j
        out.append(best)
        cur = best
    return out


def markov_speaker_baseline(
    window: Sequence[Turn],
    k: int,
    seed: int = 0,
    player_count: int | None = None,
    sample: bool = False,
) -> list[int]:
    """Predict the next ``k`` speakers from transition statistics of the window.

    Greedy by default. ``sample=True`` draws from the smoothed transition
    distribution with a ``seed``-ed generator instead.
    """
    if not window:
        raise ValueError("markov baseline needs a non-empty window")
    speakers = [t.speaker for t in window]
    n = max(max(speakers) + 1, player_count or 0)
    counts = transition_counts(speakers, n)
    if not sample:
        return greedy_decode(counts, speakers[-1], k)
    rng = random.Random(seed)
    out, cur = [], speakers[-1]
    for _ in range(k):
        weights = [c + 1 for c in counts[cur]]
        cur = rng.choices(range(n), weights=weights)[0]
        out.append(cur)
    return out


# -- orchestration -------------------------------------------------------------


@dataclass(frozen=True)
class ForecastResponse:
    raw_coarse: str = ""
    raw_fine: str = ""
    parsed: ForecastTarget = field(default_factory=ForecastTarget)
    parse_status: ParseStatus = ParseStatus.OK
    sample_id: str = ""

    def context_text(self) -> str:
        """Forecast lines to splice into a later task request."""
        if self.parse_status is ParseStatus.FAILED or not self.parsed.speakers:
            return ""
        coarse, fine = serialize_forecast(self.parsed)
        lines = []
        if self.raw_coarse or not self.parsed.utterances:
            lines.append(coarse)
        if fine:
            lines.append(fine)
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_id": self.sample_id,
                "raw_coarse": self.raw_coarse,
                "raw_fine": self.raw_fine,
                "parsed": self.parsed.to_dict(),
                "parse_status": self.parse_status.value,
            },
            ensure_ascii=False,
        )


def coarse_request_text(context: str, k: int) -> str:
    from mmsi_harness.prompts import build_forecast_prompt

    return (
        f"{context}\n{build_forecast_prompt()}\n"
        f"First list the next {k} speakers, formatted as \"{COARSE_HEADER} PlayerA, PlayerB, ...\"."
    )


def fine_request_text(context: str, k: int, coarse: str | None) -> str:
    from mmsi_harness.prompts import build_forecast_prompt

    if coarse is None:
        return (
            f"{context}\n{build_forecast_prompt()}\n"
            f"Write the next {k} turns, formatted as \"{FINE_HEADER} [PlayerA]: ... [PlayerB]: ...\"."
        )
    return (
        f"{context}\n{build_forecast_prompt()}\n{coarse}\n"
        f"Now write one utterance for each of these speakers, formatted as "
        f"\"{FINE_HEADER} [PlayerA]: ... [PlayerB]: ...\"."
    )


def coarse_to_fine_forecast(
    backend: Any,
    prompt: RenderedPrompt,
    k: int,
    speaker_turns: bool = True,
    detailed_utterances: bool = True,
    text_only: bool = False,
    max_output_tokens: int = 512,
) -> ForecastResponse:
    """Forecast ``k`` upcoming turns with up to two sequential backend calls.

    Stage one asks for speakers; stage two receives the parsed speaker list
    in its context and asks for utterances. If stage one is unparseable the
    fine request is issued without it and the result is marked partial.
    Either stage can be switched off for ablations.
    """
    from mmsi_harness.prompts import strip_queries

    if k <= 0 or not (speaker_turns or detailed_utterances):
        return ForecastResponse(sample_id=prompt.sample_id)
    context = strip_queries(prompt.user_text)
    images = () if text_only else tuple(prompt.image_refs)

    def call(user: str) -> str:
        req = ChatRequest(
            system=prompt.system_text,
            user=user,
            images=images,
            max_output_tokens=max_output_tokens,
            sample_id=prompt.sample_id,
        )
        return complete(backend, req)

    raw_coarse = ""
    coarse_speakers: list[int] | None = None
    status = ParseStatus.OK
    if speaker_turns:
        raw_coarse = call(coarse_request_text(context, k))
        speakers, st = parse_speaker_turns(raw_coarse)
        if st is ParseStatus.FAILED:
            status = ParseStatus.PARTIAL
        else:
            coarse_speakers = speakers[:k]
            if st is ParseStatus.PARTIAL:
                status = ParseStatus.PARTIAL

    if not detailed_utterances:
        if coarse_speakers is None:
            return ForecastResponse(raw_coarse, "", ForecastTarget(), ParseStatus.FAILED, prompt.sample_id)
        return ForecastResponse(raw_coarse, "", ForecastTarget(tuple(coarse_speakers)), status, prompt.sample_id)

    coarse_text = None
    if coarse_speakers is not None:
        coarse_text = serialize_forecast(ForecastTarget(tuple(coarse_speakers)))[0]
    raw_fine = call(fine_request_text(context, k, coarse_text))
    pairs, fst = parse_utterances(raw_fine)
    pairs = pairs[:k]
    if fst is ParseStatus.FAILED:
        if coarse_speakers is None:
            return ForecastResponse(raw_coarse, raw_fine, ForecastTarget(), ParseStatus.FAILED, prompt.sample_id)
        return ForecastResponse(
            raw_coarse, raw_fine, ForecastTarget(tuple(coarse_speakers)), ParseStatus.PARTIAL, prompt.sample_id
        )
    if fst is ParseStatus.PARTIAL:
        status = ParseStatus.PARTIAL
    if coarse_speakers is not None and [p for p, _ in pairs] != coarse_speakers:
        status = ParseStatus.PARTIAL
    return ForecastResponse(raw_coarse, raw_fine, ForecastTarget.from_utterances(pairs), status, prompt.sample_id)

