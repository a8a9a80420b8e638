"""Turning samples into rendered prompts, from raw frames or from a prior render."""

from __future__ import annotations

import json
import re
import threading
from pathlib import Path
from typing import Iterable, Protocol

from mmsi_harness.dataset import OnlineSample
from mmsi_harness.prompts import RenderedPrompt, assemble
from mmsi_harness.render import (
    DEFAULT_RESOLUTION,
    Grid6,
    OverlayOptions,
    SamplingMode,
    assign_colors,
    compose_grid,
    load_image,
    render_overlay,
    resize,
    sample_frames,
    save_png,
    scale_annotation,
)


class PromptSource(Protocol):
    def prompt_for(
        self, sample: OnlineSample, overlay: OverlayOptions, mode: SamplingMode, with_images: bool
    ) -> RenderedPrompt: ...


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def render_sample_images(
    sample: OnlineSample,
    frames_dir: str | Path,
    out_dir: str | Path,
    overlay: OverlayOptions,
    mode: SamplingMode,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    ref_base: str | Path | None = None,
) -> list[str]:
    """Render a sample's sampled frames to PNG files; return their locators.

    Locators are relative to ``ref_base`` when given (the prompt file's
    directory), otherwise absolute paths.
    """
    if not sample.frame_window:
        return []
    frames_dir, out_dir = Path(frames_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    span = (sample.dialogue_window[0].start, sample.query_time_t)
    chosen = sample_frames(sample.track(), (min(span[0], sample.frame_window[0].timestamp), span[1]), mode)
    colors = assign_colors(sample.player_count) if overlay.any else None
    rasters = []
    for fa in chosen:
        img = resize(load_image(frames_dir / fa.frame_ref), resolution)
        if colors is not None:
            img = render_overlay(img, scale_annotation(fa, sample.source_resolution, resolution), colors, overlay)
        rasters.append(img)
    stem = f"{_safe(sample.sample_id)}__{_safe(overlay.label)}__{_safe(mode.label)}"
    paths = []
    if isinstance(mode, Grid6):
        p = out_dir / f"{stem}.png"
        save_png(compose_grid(rasters), p)
        paths.append(p)
    else:
        for j, img in enumerate(rasters):
            p = out_dir / f"{stem}_{j:02d}.png"
            save_png(img, p)
            paths.append(p)
    if ref_base is None:
        return [str(p.resolve()) for p in paths]
    return [Path(p).resolve().relative_to(Path(ref_base).resolve()).as_posix() for p in paths]


class FrameRenderer:
    """Renders overlays from source frames on demand, caching per (sample, overlay, mode)."""

    def __init__(
        self,
        frames_dir: str | Path,
        out_dir: str | Path,
        resolution: tuple[int, int] = DEFAULT_RESOLUTION,
        highlight_pronoun: bool = True,
    ):
        self.frames_dir = Path(frames_dir)
        self.out_dir = Path(out_dir)
        self.resolution = resolution
        self.highlight_pronoun = highlight_pronoun
        self._cache: dict[tuple[str, str, str], list[str]] = {}
        self._lock = threading.Lock()

    def prompt_for(
        self, sample: OnlineSample, overlay: OverlayOptions, mode: SamplingMode, with_images: bool
    ) -> RenderedPrompt:
        if not with_images:
            return assemble(sample, [], None, highlight_pronoun=self.highlight_pronoun)
        key = (sample.sample_id, overlay.label, mode.label)
        with self._lock:
            refs = self._cache.get(key)
        if refs is None:
            refs = render_sample_images(sample, self.frames_dir, self.out_dir, overlay, mode, self.resolution)
            with self._lock:
                self._cache[key] = refs
        colors = assign_colors(sample.player_count) if overlay.any and refs else None
        return assemble(sample, refs, colors, highlight_pronoun=self.highlight_pronoun)


class PrerenderedPrompts:
    """Prompts produced earlier by ``render``; image locators resolve against ``base_dir``.

    Overlay and sampling choices are fixed by that render, so requests for
    other settings are refused.
    """

    def __init__(
        self,
        prompts: Iterable[RenderedPrompt],
        base_dir: str | Path = ".",
        overlay: OverlayOptions | None = None,
        mode: SamplingMode | None = None,
    ):
        self.base_dir = Path(base_dir)
        self.prompts = {p.sample_id: p for p in prompts}
        self.overlay = overlay
        self.mode = mode

    @classmethod
    def from_file(cls, path: str | Path) -> PrerenderedPrompts:
        path = Path(path)
        prompts = [
            RenderedPrompt.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").split("\n")
            if line.strip()
        ]
        overlay = mode = None
        settings = path.parent / "render.json"
        if settings.exists():
            from mmsi_harness.render import parse_mode

            data = json.loads(settings.read_text(encoding="utf-8"))
            overlay = OverlayOptions.from_label(data["overlay"], data.get("keypoint_confidence_threshold", 0.3))
            mode = parse_mode(data["mode"])
        return cls(prompts, path.parent, overlay, mode)

    def prompt_for(
        self, sample: OnlineSample, overlay: OverlayOptions, mode: SamplingMode, with_images: bool
    ) -> RenderedPrompt:
        try:
            p = self.prompts[sample.sample_id]
        except KeyError:
            raise KeyError(f"no rendered prompt for sample {sample.sample_id}") from None
        if not with_images:
            return RenderedPrompt("", p.user_text, (), p.sample_id)
        if self.overlay is not None and overlay.label != self.overlay.label:
            raise ValueError(f"prompts were rendered with overlay {self.overlay.label}, not {overlay.label}")
        if self.mode is not None and mode.label != self.mode.label:
            raise ValueError(f"prompts were rendered with mode {self.mode.label}, not {mode.label}")
        refs = tuple(str((self.base_dir / r).resolve()) if not Path(r).is_absolute() else r for r in p.image_refs)
        return RenderedPrompt(p.system_text, p.user_text, refs, p.sample_id)


def write_prompts(prompts: Iterable[RenderedPrompt], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(p.to_json() + "\n")
