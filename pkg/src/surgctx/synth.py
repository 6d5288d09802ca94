"""Synthetic trials: grammar walks rendered as mask scenes with known context.

Every scene is assembled from axis-aligned rectangles so the geometric
facts behind each context digit hold exactly: a holding or touching
grasper shares an edge with the needle (distance 0), a thread grasp is a
real overlap, a needle "in" the tissue overlaps a tissue marker left of the
markers' midpoint, and objects that must not interact are far apart or
left out of the frame.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import Thresholds
from .fsm import GrammarGraph, default_grammar, random_walk
from .trial_io import (
    ContextFrame,
    GestureSegment,
    GestureTranscript,
    JawEndSeries,
    ObjectClass,
    Task,
    TrialManifest,
    segments_from_series,
    write_context_transcript,
    write_gesture_transcript,
    write_jaw_ends,
    write_manifest,
    write_pgm,
    write_points,
)

LG, RG, N, T, R = (ObjectClass.LEFT_GRASPER, ObjectClass.RIGHT_GRASPER, ObjectClass.NEEDLE,
                   ObjectClass.THREAD, ObjectClass.RING)

CLOSED_JAW_PX = 10
OPEN_JAW_PX = 25


class SynthError(ValueError):
    """A context that no scene of this generator can realise."""


Rect = tuple[int, int, int, int]  # x0, y0, x1, y1 (pixel-edge, exclusive end)


@dataclass
class Scene:
    rects: dict[ObjectClass, list[Rect]]
    open_left: bool
    open_right: bool
    jaw_anchor: tuple[tuple[int, int], tuple[int, int]]


@dataclass(frozen=True)
class Layout:
    width: int = 640
    height: int = 480
    needle_len: int = 60
    needle_thick: int = 6
    grasper_w: int = 24
    grasper_h: int = 16
    marker_half: int = 4

    def __post_init__(self):
        if self.width < 320 or self.height < 240:
            raise SynthError("synthetic scenes need at least 320x240 pixels")

    @property
    def targets(self) -> list[tuple[int, int]]:
        """Tissue points (Suturing) or ring centres (Needle Passing)."""
        x, y = int(0.65 * self.width), int(0.6 * self.height)
        return [(x, y), (x + 40, y)]

    def needle(self, inside: bool) -> Rect:
        if inside:
            tx, ty = self.targets[0]
            x1 = tx + self.marker_half
            y0 = ty - self.needle_thick // 2
            return (x1 - self.needle_len, y0, x1, y0 + self.needle_thick)
        x0, y0 = int(0.3 * self.width), int(0.45 * self.height)
        return (x0, y0, x0 + self.needle_len, y0 + self.needle_thick)

    def free_grasper(self, left: bool) -> Rect:
        x0 = int(0.08 * self.width) if left else int(0.85 * self.width)
        y0 = int(0.1 * self.height)
        return (x0, y0, x0 + self.grasper_w, y0 + self.grasper_h)

    def grasper_on_needle(self, needle: Rect, left: bool) -> Rect:
        x0, y0, x1, _ = needle
        gy = y0 - (self.grasper_h - self.needle_thick) // 2
        if left:
            return (x0 - self.grasper_w, gy, x0, gy + self.grasper_h)
        return (x1, gy, x1 + self.grasper_w, gy + self.grasper_h)

    def thread_over(self, grasper: Rect) -> Rect:
        x0, y0, x1, y1 = grasper
        cy = (y0 + y1) // 2
        return (x0 - 10, cy - 2, x1 + 10, cy + 2)

    def thread_across(self) -> Rect:
        gl, gr = self.free_grasper(True), self.free_grasper(False)
        cy = (gl[1] + gl[3]) // 2
        return (gl[0] - 10, cy - 2, gr[2] + 10, cy + 2)

    def thread_far(self) -> Rect:
        x0, y0 = int(0.1 * self.width), int(0.85 * self.height)
        return (x0, y0, x0 + 40, y0 + 4)


def build_scene(code: str, layout: Layout) -> Scene:
    """Rectangles per object class realising a 5-digit context code."""
    lh, lc, rh, rc, s5 = (int(c) for c in code)
    if lh and lc or rh and rc:
        raise SynthError(f"{code}: an arm cannot hold and touch at once")
    vl, vr = lh or lc, rh or rc
    if 1 in (vl, vr):
        raise SynthError(f"{code}: ring hold/contact scenes are not generated")
    if s5 not in (0, 1, 2):
        raise SynthError(f"{code}: fifth state {s5} has no geometric rule")

    show_left = show_right = True
    thread_mode = None  # "left", "right", "across", "far"
    if vl == 3 and vr == 3:
        thread_mode = "across"
    elif vl == 3:
        thread_mode = "left"
    elif vr == 3:
        thread_mode = "right"
    needle_needed = 2 in (vl, vr) or s5 == 2

    if s5 == 1:
        if vr != 3:
            if thread_mode is None:
                thread_mode = "far"
        elif vl == 2:
            raise SynthError(f"{code}: needle out of control needs a thread away from the right grasper")
        else:
            needle_needed = True  # left grasper away from the needle
    elif s5 == 0:
        # neither "right grasper away from thread" nor "left grasper away from needle" may hold
        if thread_mode is not None and vr != 3:
            if vr == 0:
                show_right = False
            else:
                raise SynthError(f"{code}: thread is present but away from the right grasper")
        if needle_needed and vl != 2:
            if vl == 0:
                show_left = False
            else:
                raise SynthError(f"{code}: left grasper on the thread but away from the needle")

    rects: dict[ObjectClass, list[Rect]] = {LG: [], RG: [], N: [], T: []}
    needle = layout.needle(inside=s5 == 2) if needle_needed else None
    if needle:
        rects[N].append(needle)
    for left, v, show in ((True, vl, show_left), (False, vr, show_right)):
        if not show:
            continue
        g = layout.grasper_on_needle(needle, left) if v == 2 else layout.free_grasper(left)
        rects[LG if left else RG].append(g)
    if thread_mode == "across":
        rects[T].append(layout.thread_across())
    elif thread_mode == "left":
        rects[T].append(layout.thread_over(rects[LG][0]))
    elif thread_mode == "right":
        rects[T].append(layout.thread_over(rects[RG][0]))
    elif thread_mode == "far":
        rects[T].append(layout.thread_far())

    def anchor(obj, left):
        r = rects[obj][0] if rects[obj] else layout.free_grasper(left)
        return ((r[0] + r[2]) // 2, (r[1] + r[3]) // 2)

    return Scene(rects, open_left=not lh, open_right=not rh, jaw_anchor=(anchor(LG, True), anchor(RG, False)))


def render(rects: list[Rect], layout: Layout) -> np.ndarray:
    bits = np.zeros((layout.height, layout.width), dtype=bool)
    for x0, y0, x1, y1 in rects:
        bits[y0:y1, x0:x1] = True
    return bits


def _jaw_points(anchor: tuple[int, int], is_open: bool) -> tuple[tuple[int, int], tuple[int, int]]:
    gap = OPEN_JAW_PX if is_open else CLOSED_JAW_PX
    x, y = anchor
    return ((x - gap // 2, y), (x - gap // 2 + gap, y))


def _link_or_write(cache: dict, key, path: Path, bits_fn) -> None:
    if key in cache:
        try:
            os.link(cache[key], path)
            return
        except OSError:
            pass
        path.write_bytes(Path(cache[key]).read_bytes())
        return
    write_pgm(path, bits_fn())
    cache[key] = path


def synth_trial(
    task: Task | str,
    out_dir: str | Path,
    rng: random.Random,
    trial_id: str,
    n_gestures: int = 8,
    n_samples: int | None = None,
    layout: Layout | None = None,
    frame_rate_hz: int = 30,
    output_rate_hz: int = 3,
    grammar: GrammarGraph | None = None,
) -> Path:
    """Write one synthetic trial directory and return its manifest path.

    With ``n_samples`` the walk is extended or cut to exactly that many
    output samples; otherwise it has ``n_gestures`` gestures.
    """
    task = Task.parse(task)
    if task == Task.KNOT_TYING:
        raise SynthError("KnotTying scenes are not generated: its rule set does not infer the knot status")
    layout = layout or Layout()
    grammar = grammar or default_grammar(task)
    stride = frame_rate_hz // output_rate_hz
    if stride * output_rate_hz != frame_rate_hz:
        raise SynthError("output rate must divide the frame rate")

    if n_samples is None:
        walk = random_walk(grammar, rng, n_gestures, output_rate_hz)
    else:
        walk = random_walk(grammar, rng, max(n_gestures, 4 * n_samples), output_rate_hz)
        if len(walk.codes) < n_samples:
            raise SynthError(f"grammar walk ended after {len(walk.codes)} samples")
        walk.codes, walk.labels = walk.codes[:n_samples], walk.labels[:n_samples]
    if not walk.codes:
        raise SynthError("grammar produced an empty walk")

    trial_dir = Path(out_dir) / trial_id
    classes = [LG, RG, N, T] + ([R] if task == Task.NEEDLE_PASSING else [])
    for obj in classes:
        (trial_dir / "masks" / obj.value).mkdir(parents=True, exist_ok=True)
    (trial_dir / "gt").mkdir(parents=True, exist_ok=True)

    scenes = {code: build_scene(code, layout) for code in sorted(set(walk.codes))}
    ring_rects = [
        (x - layout.marker_half, y - layout.marker_half, x + layout.marker_half, y + layout.marker_half)
        for x, y in layout.targets
    ]
    cache: dict = {}
    jaws = JawEndSeries()
    last_jaw = None
    for k, code in enumerate(walk.codes):
        scene = scenes[code]
        for f in range(k * stride, (k + 1) * stride):
            for obj in classes:
                rects = ring_rects if obj == R else scene.rects[obj]
                key = (obj, code if obj != R else "")
                path = trial_dir / "masks" / obj.value / f"{f:05d}.pgm"
                _link_or_write(cache, key, path, lambda r=rects: render(r, layout))
        jaw = (_jaw_points(scene.jaw_anchor[0], scene.open_left), _jaw_points(scene.jaw_anchor[1], scene.open_right))
        if jaw != last_jaw:
            jaws.frames[k * stride] = jaw
            last_jaw = jaw
    write_jaw_ends(jaws, trial_dir / "jaw_ends.csv")

    annotations = {"jaw_ends": trial_dir / "jaw_ends.csv"}
    streams = {obj: f"masks/{obj.value}/{{frame:05d}}.pgm" for obj in classes}
    if task == Task.SUTURING:
        write_points(layout.targets, trial_dir / "tissue_points.csv")
        annotations["tissue_points"] = trial_dir / "tissue_points.csv"

    manifest = TrialManifest(
        trial_id=trial_id,
        task=task,
        frame_rate_hz=Fraction(frame_rate_hz),
        frame_count=len(walk.codes) * stride,
        mask_streams=streams,
        annotations=annotations,
        output_rate_hz=Fraction(output_rate_hz),
        base_dir=trial_dir,
        width=layout.width,
        height=layout.height,
        thresholds=Thresholds(marker_half_px=float(layout.marker_half)),
    )
    write_manifest(manifest, trial_dir / "manifest.cfg")

    frames = [ContextFrame.from_code(c, timestamp=i) for i, c in enumerate(walk.codes)]
    write_context_transcript(frames, trial_dir / "gt" / f"{trial_id}.context.csv")
    segs = segments_from_series(walk.labels, stride)
    n = len(walk.codes)
    if grammar.terminal_samples:
        segs.append(GestureSegment(n * stride, (n + grammar.terminal_samples) * stride - 1, grammar.terminal))
    write_gesture_transcript(GestureTranscript(segs), trial_dir / "gt" / f"{trial_id}.gestures.txt")
    return trial_dir / "manifest.cfg"


def synth_trials(task: Task | str, seed: int, n_trials: int, out_dir: str | Path, **kwargs) -> list[Path]:
    task = Task.parse(task)
    paths = []
    for k in range(n_trials):
        rng = random.Random(f"{task.value}:{seed}:{k}")
        paths.append(synth_trial(task, out_dir, rng, f"{task.value}_s{seed}_{k:03d}", **kwargs))
    return paths
