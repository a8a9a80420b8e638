"""Textual prompt assembly: color legend, dialogue history, task and forecast queries."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Sequence

from mmsi_harness.core import TaskKind, Turn, player_name
from mmsi_harness.dataset import MASK_TOKEN, OnlineSample
from mmsi_harness.render import ColorMap

TASK_PROMPTS = {
    TaskKind.SPEAKING_TARGET: "Identify which player the speaker is talking to?",
    TaskKind.PRONOUN_COREFERENCE: "Determine which player a pronoun refers to?",
    TaskKind.MENTIONED_PLAYER: "Predict which player is mentioned by name?",
}

FORECAST_PROMPT = (
    "Predict the upcoming speakers' turns and then predict the upcoming utterance of each speaker."
)
# Original wording, kept for provenance; never sent to a model.
FORECAST_PROMPT_RAW = (
    "Predict the upcomping speakers' turns and then predict the upcoming utterance of each speaker"
)

_QUERY_LINES = frozenset(TASK_PROMPTS.values()) | {FORECAST_PROMPT}


@dataclass(frozen=True)
class RenderedPrompt:
    system_text: str
    user_text: str
    image_refs: tuple[str, ...]
    sample_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_refs", tuple(str(r) for r in self.image_refs))

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system_text,
            "user": self.user_text,
            "images": list(self.image_refs),
            "sample_id": self.sample_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RenderedPrompt:
        return cls(data["system"], data["user"], tuple(data["images"]), data["sample_id"])


def _join_words(words: Sequence[str]) -> str:
    if len(words) == 1:
        return words[0]
    if len(words) == 2:
        return f"{words[0]} and {words[1]}"
    return ", ".join(words[:-1]) + f", and {words[-1]}"


def build_system_prompt(colors: ColorMap) -> str:
    """The color legend sentence, e.g. ``The red and blue colors correspond to Player0 and Player1, respectively.``"""
    names = [c.name for c in colors.entries]
    players = [player_name(c.player) for c in colors.entries]
    if len(names) == 1:
        return f"The {names[0]} color corresponds to {players[0]}."
    return f"The {_join_words(names)} colors correspond to {_join_words(players)}, respectively."


def _line(speaker: int, text: str) -> str:
    flat = text.replace("\r\n", " ").replace("\n", " ").replace("\r", " ")
    return f"[{player_name(speaker)}]: {flat}"


def serialize_dialogue(window: Sequence[Turn]) -> str:
    if not window:
        raise ValueError("cannot serialize an empty dialogue window")
    return "\n".join(_line(t.speaker, t.utterance) for t in window)


def build_task_prompt(task: TaskKind) -> str:
    return TASK_PROMPTS[TaskKind.parse(task)]


def build_forecast_prompt() -> str:
    return FORECAST_PROMPT


def strip_queries(user_text: str) -> str:
    """Drop trailing task/forecast query lines, leaving the dialogue context."""
    lines = user_text.split("\n")
    while lines and lines[-1] in _QUERY_LINES:
        lines.pop()
    return "\n".join(lines)


def query_line(sample: OnlineSample, highlight_pronoun: bool = True) -> str:
    """The anchored utterance as it is shown to the model.

    Mentioned-player queries show the masked utterance; pronoun queries wrap
    the queried pronoun in asterisks when ``highlight_pronoun`` is set.
    """
    anchor = sample.dialogue_window[-1]
    if sample.task is TaskKind.MENTIONED_PLAYER:
        return _line(anchor.speaker, sample.masked_query_utterance or "")
    if sample.task is TaskKind.PRONOUN_COREFERENCE and highlight_pronoun and sample.query_span:
        s, e = sample.query_span
        u = anchor.utterance
        return _line(anchor.speaker, f"{u[:s]}*{u[s:e]}*{u[e:]}")
    return _line(anchor.speaker, anchor.utterance)


def assemble(
    sample: OnlineSample,
    images: Sequence[str],
    colors: ColorMap | None,
    include_forecast_query: bool = False,
    highlight_pronoun: bool = True,
) -> RenderedPrompt:
    """Build the system/user text for one sample.

    ``colors`` should be None when the images carry no overlays (or there are
    no images); the legend sentence is then omitted. For mentioned-player
    samples the anchored line is replaced by its masked form, so the answer
    never appears in that line.
    """
    images = [str(i) for i in images]
    if len(images) > max(len(sample.frame_window), 0):
        raise ValueError(
            f"{sample.sample_id}: {len(images)} images for {len(sample.frame_window)} annotated frames"
        )
    system = build_system_prompt(colors) if colors is not None and images else ""
    lines = []
    if len(sample.dialogue_window) > 1:
        lines.append(serialize_dialogue(sample.dialogue_window[:-1]))
    lines.append(query_line(sample, highlight_pronoun))
    lines.append(build_task_prompt(sample.task))
    if include_forecast_query:
        lines.append(build_forecast_prompt())
    return RenderedPrompt(system, "\n".join(lines), tuple(images), sample.sample_id)
