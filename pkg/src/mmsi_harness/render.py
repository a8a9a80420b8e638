"""Social-aware overlays, frame sampling and 3x2 grid composition.

Rasters are ``uint8`` RGB arrays of shape ``(height, width, 3)``. Drawing
uses OpenCV with 8-connected (non anti-aliased) primitives so output is
bit-for-bit reproducible.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from mmsi_harness.core import AnnotationTrack, FrameAnnotation, PersonAnnotation, player_name

REFERENCE_HEIGHT = 360
RECT_THICKNESS = 3
DISC_RADIUS = 4
LIMB_THICKNESS = 2
LABEL_HEIGHT = 16
LABEL_PAD = 2
DEFAULT_RESOLUTION = (640, 360)

# Pairs of COCO-17 joint indices joined by a limb.
COCO_SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)  # fmt: skip

PALETTE = (
    ("red", (220, 20, 60)),
    ("blue", (30, 90, 220)),
    ("green", (30, 160, 70)),
    ("yellow", (240, 200, 0)),
    ("purple", (150, 60, 200)),
    ("orange", (250, 140, 20)),
)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class PlayerColor:
    player: int
    name: str
    rgb: tuple[int, int, int]


@dataclass(frozen=True)
class ColorMap:
    entries: tuple[PlayerColor, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        rgbs = [e.rgb for e in self.entries]
        if len(set(rgbs)) != len(rgbs) or len({e.player for e in self.entries}) != len(rgbs):
            raise RenderError("color map must be injective")

    def __getitem__(self, player: int) -> tuple[int, int, int]:
        for e in self.entries:
            if e.player == player:
                return e.rgb
        raise KeyError(player)

    def __contains__(self, player: object) -> bool:
        return any(e.player == player for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def assign_colors(
    player_count: int, palette: Sequence[tuple[str, tuple[int, int, int]]] = PALETTE
) -> ColorMap:
    """Give players ``0..player_count-1`` the first colors of ``palette``."""
    if player_count < 1:
        raise RenderError("player_count must be >= 1")
    if player_count > len(palette):
        raise RenderError(
            f"{player_count} players but only {len(palette)} palette colors; pass an extended palette"
        )
    return ColorMap(tuple(PlayerColor(i, name, rgb) for i, (name, rgb) in enumerate(palette[:player_count])))


@dataclass(frozen=True)
class OverlayOptions:
    text: bool = True
    rect: bool = True
    point: bool = True
    keypoint_confidence_threshold: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 <= self.keypoint_confidence_threshold <= 1.0:
            raise RenderError("keypoint_confidence_threshold must be in [0, 1]")

    @property
    def any(self) -> bool:
        return self.text or self.rect or self.point

    @property
    def label(self) -> str:
        """``text+rect+point`` style name; ``none`` when nothing is drawn."""
        parts = [n for n, on in (("text", self.text), ("rect", self.rect), ("point", self.point)) if on]
        return "+".join(parts) or "none"

    @classmethod
    def from_label(cls, label: str, threshold: float = 0.3) -> OverlayOptions:
        parts = set() if label in ("", "none") else set(label.split("+"))
        unknown = parts - {"text", "rect", "point"}
        if unknown:
            raise RenderError(f"unknown overlay flag(s): {sorted(unknown)}")
        return cls("text" in parts, "rect" in parts, "point" in parts, threshold)


@dataclass(frozen=True)
class PerSecond:
    fps: float = 1.0

    def __post_init__(self) -> None:
        if not self.fps > 0:
            raise RenderError("fps must be positive")

    @property
    def label(self) -> str:
        return f"fps:{self.fps:g}"


@dataclass(frozen=True)
class Grid6:
    @property
    def label(self) -> str:
        return "grid6"


SamplingMode = PerSecond | Grid6


def parse_mode(text: str) -> SamplingMode:
    """``grid6`` or ``fps:<rate>``."""
    if text == "grid6":
        return Grid6()
    m = re.fullmatch(r"fps:([0-9.]+)", text)
    if not m:
        raise RenderError(f"unknown sampling mode {text!r}; expected fps:<rate> or grid6")
    return PerSecond(float(m.group(1)))


# -- drawing -----------------------------------------------------------------------


def _px(v: float) -> int:
    return int(math.floor(v + 0.5))


def _scaled(ref: int, height: int) -> int:
    return max(1, _px(ref * height / REFERENCE_HEIGHT))


def _clamp(v: int, lo: int, hi: int) -> int:
    return min(max(v, lo), hi)


def _strip_color(rgb: tuple[int, int, int]) -> tuple[int, int, int]:
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    return (0, 0, 0) if lum > 110 else (255, 255, 255)


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned region touched by one drawn primitive (inclusive bounds)."""

    x0: int
    y0: int
    x1: int
    y1: int


def _label_geometry(
    person: PersonAnnotation, width: int, height: int
) -> tuple[str, float, int, tuple[int, int, int, int], tuple[int, int]]:
    text = player_name(person.player)
    font_h = _scaled(LABEL_HEIGHT, height)
    thick = max(1, _px(height / REFERENCE_HEIGHT))
    scale = cv2.getFontScaleFromHeight(cv2.FONT_HERSHEY_SIMPLEX, font_h, thick)
    (tw, th), base = cv2.getTextSize(text, cv2.FONT_HERSHEY_SIMPLEX, scale, thick)
    pad = _scaled(LABEL_PAD, height)
    sw, sh = tw + 2 * pad, th + base + 2 * pad
    x = _clamp(_px(person.bbox[0]), 0, max(0, width - sw))
    top = _px(person.bbox[1])
    y = top - sh if top - sh >= 0 else _clamp(top, 0, max(0, height - sh))
    strip = (x, y, min(width - 1, x + sw - 1), min(height - 1, y + sh - 1))
    origin = (x + pad, y + pad + th)
    return text, scale, thick, strip, origin


def overlay_regions(
    annotation: FrameAnnotation, opts: OverlayOptions, width: int, height: int
) -> list[Primitive]:
    """Conservative bounding regions of everything ``render_overlay`` draws."""
    regions = []
    rect_t = _scaled(RECT_THICKNESS, height)
    radius = _scaled(DISC_RADIUS, height)
    limb_t = _scaled(LIMB_THICKNESS, height)
    for person in annotation.persons:
        x0, y0, x1, y1 = _box(person, width, height)
        if opts.rect:
            regions.append(Primitive(x0 - rect_t, y0 - rect_t, x1 + rect_t, y1 + rect_t))
        if opts.point:
            pts = _points(person, opts, width, height)
            for p in pts.values():
                regions.append(Primitive(p[0] - radius - 1, p[1] - radius - 1, p[0] + radius + 1, p[1] + radius + 1))
            for a, b in COCO_SKELETON:
                if a in pts and b in pts:
                    (ax, ay), (bx, by) = pts[a], pts[b]
                    regions.append(
                        Primitive(min(ax, bx) - limb_t, min(ay, by) - limb_t, max(ax, bx) + limb_t, max(ay, by) + limb_t)
                    )
        if opts.text:
            _, _, _, strip, _ = _label_geometry(person, width, height)
            regions.append(Primitive(*strip))
    return regions


def _box(person: PersonAnnotation, width: int, height: int) -> tuple[int, int, int, int]:
    x, y, w, h = person.bbox
    return (
        _clamp(_px(x), 0, width - 1),
        _clamp(_px(y), 0, height - 1),
        _clamp(_px(x + w), 0, width - 1),
        _clamp(_px(y + h), 0, height - 1),
    )


def _points(person: PersonAnnotation, opts: OverlayOptions, width: int, height: int) -> dict[int, tuple[int, int]]:
    return {
        j: (_clamp(_px(x), 0, width - 1), _clamp(_px(y), 0, height - 1))
        for j, (x, y, c) in enumerate(person.keypoints)
        if c >= opts.keypoint_confidence_threshold and c > 0
    }


def render_overlay(
    frame_image: np.ndarray,
    annotations: FrameAnnotation,
    colors: ColorMap,
    opts: OverlayOptions,
) -> np.ndarray:
    """Draw boxes, skeletons and ``PlayerN`` labels in each player's color.

    Annotation coordinates must already be in the image's pixel space. The
    input array is left untouched; a new array is returned.
    """
    if frame_image.ndim != 3 or frame_image.shape[2] != 3 or frame_image.shape[0] == 0 or frame_image.shape[1] == 0:
        raise RenderError(f"expected a non-empty HxWx3 image, got shape {frame_image.shape}")
    for p in annotations.persons:
        if p.player not in colors:
            raise RenderError(f"no color assigned to {player_name(p.player)}")
    out = np.array(frame_image, dtype=np.uint8, copy=True, order="C")
    if not annotations.persons:
        return out
    if not opts.any:
        raise RenderError("no overlay flag set")
    height, width = out.shape[:2]
    rect_t = _scaled(RECT_THICKNESS, height)
    radius = _scaled(DISC_RADIUS, height)
    limb_t = _scaled(LIMB_THICKNESS, height)
    for person in sorted(annotations.persons, key=lambda p: p.player):
        color = tuple(int(c) for c in colors[person.player])
        if opts.rect:
            x0, y0, x1, y1 = _box(person, width, height)
            cv2.rectangle(out, (x0, y0), (x1, y1), color, rect_t, cv2.LINE_8)
        if opts.point:
            pts = _points(person, opts, width, height)
            for a, b in COCO_SKELETON:
                if a in pts and b in pts:
                    cv2.line(out, pts[a], pts[b], color, limb_t, cv2.LINE_8)
            for j in sorted(pts):
                cv2.circle(out, pts[j], radius, color, -1, cv2.LINE_8)
        if opts.text:
            text, scale, thick, (sx0, sy0, sx1, sy1), origin = _label_geometry(person, width, height)
            cv2.rectangle(out, (sx0, sy0), (sx1, sy1), _strip_color(color), -1, cv2.LINE_8)
            cv2.putText(out, text, origin, cv2.FONT_HERSHEY_SIMPLEX, scale, color, thick, cv2.LINE_8)
    return out


# -- sampling & grids --------------------------------------------------------------


def grid6_indices(n: int) -> list[int]:
    """``round(i * (n - 1) / 5)`` for ``i = 0..5``, halves rounded up."""
    if n < 1:
        raise RenderError("need at least one frame")
    return [(2 * i * (n - 1) + 5) // 10 for i in range(6)]


def sample_frames(
    track: AnnotationTrack, span: tuple[float, float], mode: SamplingMode
) -> list[FrameAnnotation]:
    """Pick frames in ``[t0, t1]``.

    ``PerSecond(f)`` splits the span into ``floor(duration * f)`` bins (at
    least one; any remainder joins the last bin) and keeps, per bin, the frame
    nearest the bin midpoint. Bins without frames are skipped. ``Grid6``
    returns exactly six frames spread evenly, repeating frames when fewer
    than six exist.
    """
    t0, t1 = span
    if t0 > t1:
        raise RenderError(f"span start {t0} after end {t1}")
    frames = [f for f in track.frames if t0 <= f.timestamp <= t1]
    if not frames:
        raise RenderError(f"no annotated frames in span [{t0}, {t1}]")
    if isinstance(mode, Grid6):
        return [frames[i] for i in grid6_indices(len(frames))]
    width = 1.0 / mode.fps
    nbins = max(1, int(math.floor((t1 - t0) * mode.fps + 1e-9)))
    picked = []
    for j in range(nbins):
        lo = t0 + j * width
        hi = t1 if j == nbins - 1 else t0 + (j + 1) * width
        last = j == nbins - 1
        in_bin = [f for f in frames if lo <= f.timestamp and (f.timestamp <= hi if last else f.timestamp < hi)]
        if not in_bin:
            continue
        mid = (lo + hi) / 2
        picked.append(min(in_bin, key=lambda f: (abs(f.timestamp - mid), f.timestamp)))
    return picked


def compose_grid(frames: Sequence[np.ndarray], separator: int = 2) -> np.ndarray:
    """Tile six equal-size frames row-major into a 3x2 grid with black cell borders."""
    if len(frames) != 6:
        raise RenderError(f"grid needs exactly 6 frames, got {len(frames)}")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames) or len(shape) != 3 or shape[2] != 3:
        raise RenderError("grid frames must share one HxWx3 shape")
    h, w = shape[:2]
    out = np.zeros((2 * h, 3 * w, 3), dtype=np.uint8)
    for idx, f in enumerate(frames):
        r, c = divmod(idx, 3)
        out[r * h : (r + 1) * h, c * w : (c + 1) * w] = f
    half = separator // 2
    for c in (1, 2):
        out[:, max(0, c * w - half) : c * w - half + separator] = 0
    out[max(0, h - half) : h - half + separator, :] = 0
    return out


# -- frame I/O -----------------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(path, format="PNG")


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if (image.shape[1], image.shape[0]) == tuple(size):
        return image
    return np.asarray(Image.fromarray(image).resize(size, Image.Resampling.BILINEAR))


def scale_annotation(frame: FrameAnnotation, src: tuple[int, int], dst: tuple[int, int]) -> FrameAnnotation:
    """Map annotation pixel coordinates from resolution ``src`` to ``dst``."""
    if tuple(src) == tuple(dst):
        return frame
    sx, sy = dst[0] / src[0], dst[1] / src[1]
    persons = tuple(
        PersonAnnotation(
            p.player,
            (p.bbox[0] * sx, p.bbox[1] * sy, p.bbox[2] * sx, p.bbox[3] * sy),
            tuple((x * sx, y * sy, c) for x, y, c in p.keypoints),
        )
        for p in frame.persons
    )
    return FrameAnnotation(frame.timestamp, frame.frame_ref, persons)
