"""Model-free backend that answers harness prompts with simple heuristics.

It reads the ``[PlayerN]: ...`` dialogue lines out of the request text and
answers forecast requests with the Markov speaker baseline and referent
queries with turn-taking heuristics. Useful for offline end-to-end runs and
for recording replay fixtures.
"""

from __future__ import annotations

import re
from collections import Counter

from mmsi_harness.backends import ChatRequest, InferenceBackend
from mmsi_harness.core import TaskKind, Turn, player_name
from mmsi_harness.forecasting import (
    COARSE_HEADER,
    FINE_HEADER,
    ForecastTarget,
    markov_speaker_baseline,
    parse_speaker_turns,
    serialize_forecast,
)
from mmsi_harness.prompts import FORECAST_PROMPT, TASK_PROMPTS

_LINE_RE = re.compile(r"^\[Player(\d+)\]: (.*)$")
_K_RE = re.compile(r"next (\d+) (?:speakers|turns)")
_MENTION_RE = re.compile(r"\bplayer(\d+)\b", re.IGNORECASE)


def dialogue_from_text(text: str) -> list[Turn]:
    turns = []
    for line in text.split("\n"):
        m = _LINE_RE.match(line)
        if m and m.group(2).strip():
            turns.append(Turn(int(m.group(1)), m.group(2), float(len(turns)), float(len(turns))))
    return turns


def _forecast_speakers(text: str) -> list[int]:
    for line in text.split("\n"):
        if line.startswith(COARSE_HEADER):
            return parse_speaker_turns(line)[0]
        if line.startswith(FINE_HEADER):
            return [int(n) for n in re.findall(r"\[Player(\d+)\]:", line)]
    return []


def guess_referent(task: TaskKind, turns: list[Turn], upcoming: list[int]) -> int:
    """Heuristic referent for a query on the last turn.

    Addressee-style tasks prefer the first forecast speaker who is not the
    current speaker (the referent tends to answer), then the most recent
    other speaker. Mentioned-player queries prefer the player named most
    often in the history.
    """
    if not turns:
        return 0
    me = turns[-1].speaker
    if task is TaskKind.MENTIONED_PLAYER:
        mentions = Counter(
            int(n) for t in turns[:-1] for n in _MENTION_RE.findall(t.utterance) if int(n) != me
        )
        if mentions:
            return min(mentions, key=lambda p: (-mentions[p], p))
    for p in upcoming:
        if p != me:
            return p
    for t in reversed(turns[:-1]):
        if t.speaker != me:
            return t.speaker
    return 0 if me != 0 else 1


class BaselineBackend(InferenceBackend):
    def __init__(self, seed: int = 0, sample: bool = False):
        self.seed = seed
        self.sample = sample

    def complete(self, req: ChatRequest) -> str:
        text = req.user
        turns = dialogue_from_text(text)
        if FORECAST_PROMPT in text:
            m = _K_RE.search(text)
            k = int(m.group(1)) if m else 4
            if not turns:
                return COARSE_HEADER
            if "First list the next" in text:
                speakers = markov_speaker_baseline(turns, k, self.seed, sample=self.sample)
                return serialize_forecast(ForecastTarget(tuple(speakers)))[0]
            speakers = _forecast_speakers(text) or markov_speaker_baseline(turns, k, self.seed, sample=self.sample)
            last_said = {t.speaker: t.utterance for t in turns}
            target = ForecastTarget.from_utterances([(p, last_said.get(p, "...")) for p in speakers[:k]])
            return serialize_forecast(target)[1]
        for task, query in TASK_PROMPTS.items():
            if query in text:
                return player_name(guess_referent(task, turns, _forecast_speakers(text)))
        return player_name(0)
