"""Domain types for multi-party interaction corpora.

Transcripts are ordered speaker turns; annotation tracks hold per-frame,
per-player boxes and COCO-17 keypoints. Times are seconds, coordinates are
pixels with a top-left origin (y grows downward). Turns are half-open
intervals ``[start, end)``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

logger = logging.getLogger(__name__)

NUM_KEYPOINTS = 17

# COCO-17 joint order.
COCO_KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

_PLAYER_RE = re.compile(r"player(\d+)", re.IGNORECASE)


class ValidationError(ValueError):
    """Raised when corpus data violates a structural invariant."""


class TaskKind(str, Enum):
    SPEAKING_TARGET = "SpeakingTarget"
    PRONOUN_COREFERENCE = "PronounCoreference"
    MENTIONED_PLAYER = "MentionedPlayer"

    @classmethod
    def parse(cls, value: str | TaskKind) -> TaskKind:
        """Accept enum values (``SpeakingTarget``) or snake_case (``speaking_target``)."""
        if isinstance(value, TaskKind):
            return value
        key = value.replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValidationError(f"unknown task kind: {value!r}")

    @property
    def short_name(self) -> str:
        return {
            TaskKind.SPEAKING_TARGET: "Speaking Target",
            TaskKind.PRONOUN_COREFERENCE: "Pronoun Coreference",
            TaskKind.MENTIONED_PLAYER: "Mentioned Player",
        }[self]


def player_name(index: int) -> str:
    return f"Player{index}"


def parse_player_name(text: str) -> int | None:
    """Return N for text that is exactly ``PlayerN`` (any case), else None."""
    m = _PLAYER_RE.fullmatch(text.strip())
    return int(m.group(1)) if m else None


def _check_player(index: Any, what: str) -> int:
    if isinstance(index, bool) or not isinstance(index, int) or index < 0:
        raise ValidationError(f"{what} must be a non-negative integer, got {index!r}")
    return index


def _finite(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{what} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{what} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class Turn:
    speaker: int
    utterance: str
    start: float
    end: float

    def __post_init__(self) -> None:
        _check_player(self.speaker, "speaker")
        object.__setattr__(self, "start", _finite(self.start, "start"))
        object.__setattr__(self, "end", _finite(self.end, "end"))
        if self.start < 0:
            raise ValidationError(f"turn start must be non-negative, got {self.start}")
        if self.start > self.end:
            raise ValidationError(f"turn start {self.start} after end {self.end}")
        if not isinstance(self.utterance, str) or not self.utterance.strip():
            raise ValidationError("utterance must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"speaker": self.speaker, "utterance": self.utterance, "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = False) -> Turn:
        _check_fields(data, ("speaker", "utterance", "start", "end"), "turn", strict)
        return cls(data["speaker"], data["utterance"], data["start"], data["end"])


@dataclass(frozen=True)
class Transcript:
    session_id: str
    player_count: int
    turns: tuple[Turn, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if isinstance(self.player_count, bool) or not isinstance(self.player_count, int) or self.player_count < 1:
            raise ValidationError(f"player_count must be a positive integer, got {self.player_count!r}")
        for i, turn in enumerate(self.turns):
            if turn.speaker >= self.player_count:
                raise ValidationError(
                    f"turn {i}: speaker {turn.speaker} >= player_count {self.player_count}"
                )
            if i and turn.start <= self.turns[i - 1].start:
                raise ValidationError(f"turn {i}: start times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class PersonAnnotation:
    player: int
    bbox: tuple[float, float, float, float]
    keypoints: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        _check_player(self.player, "player")
        if len(self.bbox) != 4:
            raise ValidationError("bbox must be [x, y, width, height]")
        bbox = tuple(_finite(v, "bbox") for v in self.bbox)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise ValidationError(f"bbox width/height must be positive, got {bbox}")
        object.__setattr__(self, "bbox", bbox)
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise ValidationError(f"expected {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}")
        kps = []
        for j, kp in enumerate(self.keypoints):
            if len(kp) != 3:
                raise ValidationError(f"keypoint {j} must be [x, y, confidence]")
            x, y, c = (_finite(v, f"keypoint {j}") for v in kp)
            if not 0.0 <= c <= 1.0:
                raise ValidationError(f"keypoint {j} confidence {c} outside [0, 1]")
            kps.append((x, y, c))
        object.__setattr__(self, "keypoints", tuple(kps))

    def to_dict(self) -> dict[str, Any]:
        return {
            "player": self.player,
            "bbox": list(self.bbox),
            "keypoints": [list(kp) for kp in self.keypoints],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = False) -> PersonAnnotation:
        _check_fields(data, ("player", "bbox", "keypoints"), "person", strict)
        return cls(data["player"], tuple(data["bbox"]), tuple(tuple(kp) for kp in data["keypoints"]))


@dataclass(frozen=True)
class FrameAnnotation:
    timestamp: float
    frame_ref: str
    persons: tuple[PersonAnnotation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamp", _finite(self.timestamp, "timestamp"))
        object.__setattr__(self, "persons", tuple(self.persons))
        seen = set()
        for p in self.persons:
            if p.player in seen:
                raise ValidationError(f"frame {self.frame_ref}: duplicate annotation for player {p.player}")
            seen.add(p.player)

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "frame_ref": self.frame_ref,
            "persons": [p.to_dict() for p in self.persons],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = False) -> FrameAnnotation:
        _check_fields(data, ("timestamp", "frame_ref", "persons"), "frame", strict)
        persons = tuple(PersonAnnotation.from_dict(p, strict) for p in data["persons"])
        return cls(data["timestamp"], data["frame_ref"], persons)


@dataclass(frozen=True)
class AnnotationTrack:
    session_id: str
    frames: tuple[FrameAnnotation, ...]
    source_resolution: tuple[int, int] = (640, 360)

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        w, h = self.source_resolution
        if w <= 0 or h <= 0:
            raise ValidationError(f"source_resolution must be positive, got {self.source_resolution}")
        object.__setattr__(self, "source_resolution", (int(w), int(h)))
        for i in range(1, len(self.frames)):
            if self.frames[i].timestamp <= self.frames[i - 1].timestamp:
                raise ValidationError(f"frame {i}: timestamps must be strictly increasing")

    def max_player(self) -> int:
        return max((p.player for f in self.frames for p in f.persons), default=-1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "source_resolution": list(self.source_resolution),
            "frames": [f.to_dict() for f in self.frames],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = False) -> AnnotationTrack:
        _check_fields(data, ("session_id", "source_resolution", "frames"), "annotation track", strict)
        frames = tuple(FrameAnnotation.from_dict(f, strict) for f in data["frames"])
        res = data["source_resolution"]
        if not isinstance(res, (list, tuple)) or len(res) != 2:
            raise ValidationError("source_resolution must be [width, height]")
        return cls(data["session_id"], frames, tuple(res))


def _check_fields(data: Any, required: Iterable[str], what: str, strict: bool) -> None:
    if not isinstance(data, dict):
        raise ValidationError(f"{what} must be a JSON object")
    required = tuple(required)
    missing = [k for k in required if k not in data]
    if missing:
        raise ValidationError(f"{what}: missing field(s) {missing}")
    extra = sorted(set(data) - set(required))
    if extra:
        if strict:
            raise ValidationError(f"{what}: unknown field(s) {extra}")
        logger.warning("%s: ignoring unknown field(s) %s", what, extra)


# -- serialization -------------------------------------------------------------


def dumps_transcript(transcript: Transcript) -> str:
    """One JSON turn per line."""
    return "".join(json.dumps(t.to_dict(), ensure_ascii=False) + "\n" for t in transcript.turns)


def loads_transcript(
    text: str,
    session_id: str,
    player_count: int | None = None,
    strict: bool = False,
) -> Transcript:
    """Parse line-oriented JSON turns.

    The line format carries no player count; when omitted it is taken as
    ``max(speaker) + 1``.
    """
    turns = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            turns.append(Turn.from_dict(data, strict))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
    if player_count is None:
        player_count = max((t.speaker for t in turns), default=0) + 1
    return Transcript(session_id, player_count, tuple(turns))


def load_transcript(
    path: str | Path,
    session_id: str | None = None,
    player_count: int | None = None,
    strict: bool = False,
) -> Transcript:
    path = Path(path)
    return loads_transcript(
        path.read_text(encoding="utf-8"), session_id or path.stem, player_count, strict
    )


def dump_transcript(transcript: Transcript, path: str | Path) -> None:
    Path(path).write_text(dumps_transcript(transcript), encoding="utf-8")


def dumps_annotations(track: AnnotationTrack) -> str:
    return json.dumps(track.to_dict(), ensure_ascii=False)


def loads_annotations(text: str, strict: bool = False) -> AnnotationTrack:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid annotation JSON: {exc}") from exc
    return AnnotationTrack.from_dict(data, strict)


def load_annotations(path: str | Path, strict: bool = False) -> AnnotationTrack:
    return loads_annotations(Path(path).read_text(encoding="utf-8"), strict)


def dump_annotations(track: AnnotationTrack, path: str | Path) -> None:
    Path(path).write_text(dumps_annotations(track), encoding="utf-8")
