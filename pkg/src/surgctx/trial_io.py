"""On-disk formats: trial manifests, object masks, annotations and transcripts."""

from __future__ import annotations

import csv
import enum
import io
import os
import re
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .config import ConfigError, StructuredText, Thresholds, key_values, read_structured_text


class DataError(ValueError):
    """Input data (masks, annotations, transcripts) is missing or invalid."""


class Task(str, enum.Enum):
    SUTURING = "Suturing"
    NEEDLE_PASSING = "NeedlePassing"
    KNOT_TYING = "KnotTying"

    @classmethod
    def parse(cls, value: "str | Task") -> "Task":
        if isinstance(value, Task):
            return value
        norm = re.sub(r"[\s_-]", "", str(value)).lower()
        for task in cls:
            if task.value.lower() == norm:
                return task
        raise ConfigError(f"unknown task {value!r} (expected one of {[t.value for t in cls]})")


class ObjectClass(str, enum.Enum):
    LEFT_GRASPER = "LeftGrasper"
    RIGHT_GRASPER = "RightGrasper"
    NEEDLE = "Needle"
    THREAD = "Thread"
    RING = "Ring"
    TISSUE_POINTS = "TissuePoints"

    @property
    def abbrev(self) -> str:
        return _ABBREV[self]

    @classmethod
    def parse(cls, value: "str | ObjectClass") -> "ObjectClass":
        if isinstance(value, ObjectClass):
            return value
        for obj in cls:
            if value in (obj.value, obj.abbrev):
                return obj
        raise ConfigError(f"unknown object class {value!r}")


_ABBREV = {
    ObjectClass.LEFT_GRASPER: "LG",
    ObjectClass.RIGHT_GRASPER: "RG",
    ObjectClass.NEEDLE: "N",
    ObjectClass.THREAD: "T",
    ObjectClass.RING: "R",
    ObjectClass.TISSUE_POINTS: "Ts",
}

STATE_NAMES = ("left_hold", "left_contact", "right_hold", "right_contact", "fifth_state")
CSV_STATE_NAMES = ("LH", "LC", "RH", "RC", "S5")

# Allowed values per state variable: hold/contact digits, then the fifth state.
# 0 nothing, 1 ring, 2 needle, 3 thread; the fifth state is task specific.
TASK_VALUE_SETS: dict[Task, tuple[frozenset[int], frozenset[int]]] = {
    Task.SUTURING: (frozenset({0, 2, 3}), frozenset({0, 1, 2})),
    Task.NEEDLE_PASSING: (frozenset({0, 1, 2, 3}), frozenset({0, 1, 2})),
    Task.KNOT_TYING: (frozenset({0, 3}), frozenset({0, 1, 2, 3})),
}


# ---------------------------------------------------------------- masks


@dataclass
class Mask:
    bits: np.ndarray  # bool, shape (height, width)
    frame_index: int
    object_class: ObjectClass

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def empty(cls, width: int, height: int, frame_index: int, object_class: ObjectClass) -> "Mask":
        return cls(np.zeros((height, width), dtype=bool), frame_index, object_class)


def threshold(pixels: np.ndarray) -> np.ndarray:
    """Binarize an 8-bit image: values above 127 are object pixels."""
    return pixels > 127


def _read_p5(data, length: int | None = None) -> np.ndarray | None:
    """Decode an 8-bit binary PGM directly; None means "let cv2 handle it"."""
    length = len(data) if length is None else length
    head = bytes(data[:min(length, 128)])
    if head[:2] != b"P5":
        return None
    pos, tokens = 2, []
    while len(tokens) < 3:
        m = _PGM_TOKEN.match(head, pos)
        if not m or not m.group(1).isdigit():
            return None
        tokens.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = tokens
    pos += 1  # single whitespace byte after maxval
    if maxval > 255 or length - pos != w * h:
        return None
    return np.frombuffer(data, np.uint8, w * h, pos).reshape(h, w)


def _check_pixels(pixels, path, object_class: ObjectClass, frame_index: int) -> None:
    if pixels is None:
        raise DataError(f"{object_class.value} frame {frame_index}: cannot read mask {path}")
    if pixels.dtype != np.uint8:
        raise DataError(
            f"{object_class.value} frame {frame_index}: unsupported bit depth "
            f"({pixels.dtype}) in {path}; masks must be 8-bit grayscale"
        )
    if pixels.ndim != 2:
        raise DataError(f"{object_class.value} frame {frame_index}: {path} is not a grayscale image")


def _read_bytes(path: str, object_class: ObjectClass, frame_index: int, into: bytearray | None = None):
    try:
        with open(path, "rb", buffering=0) as fh:
            if into is None:
                return fh.read()
            n = fh.readinto(into)
            while n == len(into):  # buffer full: the file may be longer
                into.extend(bytes(max(len(into), 1 << 16)))
                fh.seek(0)
                n = fh.readinto(into)
            return n
    except OSError as exc:
        raise DataError(f"{object_class.value} frame {frame_index}: cannot read mask {path}: {exc}") from None


def load_mask(path: str | Path, object_class: ObjectClass, frame_index: int) -> Mask:
    path = os.fspath(path)
    pixels = None
    if path[-4:].lower() == ".pgm":
        pixels = _read_p5(_read_bytes(path, object_class, frame_index))
    if pixels is None:
        pixels = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    _check_pixels(pixels, path, object_class, frame_index)
    return Mask(threshold(pixels), frame_index, object_class)


class MaskReader:
    """``load_mask`` into reused buffers.

    Each returned Mask is only valid until the next ``read`` on the same
    reader. Allocating fresh frame-sized buffers costs several times more
    than decoding a PGM, so the per-frame loop keeps one reader per thread.
    """

    def __init__(self):
        self._raw = bytearray()
        self._bits: np.ndarray | None = None

    def read(self, path: str | Path, object_class: ObjectClass, frame_index: int) -> Mask:
        path = os.fspath(path)
        if path[-4:].lower() != ".pgm":
            return load_mask(path, object_class, frame_index)
        n = _read_bytes(path, object_class, frame_index, self._raw)
        pixels = _read_p5(self._raw, n)
        if pixels is None:
            return load_mask(path, object_class, frame_index)
        if self._bits is None or self._bits.shape != pixels.shape:
            self._bits = np.empty(pixels.shape, dtype=bool)
        np.greater(pixels, 127, out=self._bits)
        return Mask(self._bits, frame_index, object_class)


def write_pgm(path: str | Path, bits: np.ndarray) -> None:
    """Write a binary mask as an 8-bit P5 PGM (object pixels 255)."""
    bits = np.asarray(bits)
    h, w = bits.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    data = np.where(bits.astype(bool), 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + data)


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def image_size(path: str | Path) -> tuple[int, int]:
    """(width, height) read from a PGM or PNG header without decoding pixels."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head[:8] == b"\x89PNG\r\n\x1a\n":
        if len(head) < 24 or head[12:16] != b"IHDR":
            raise DataError(f"{path}: truncated PNG header")
        return int.from_bytes(head[16:20], "big"), int.from_bytes(head[20:24], "big")
    if head[:2] == b"P5":
        pos, tokens = 2, []
        while len(tokens) < 2:
            m = _PGM_TOKEN.match(head, pos)
            if not m:
                raise DataError(f"{path}: truncated PGM header")
            tokens.append(int(m.group(1)))
            pos = m.end()
        return tokens[0], tokens[1]
    raise DataError(f"{path}: not a binary PGM (P5) or PNG file")


# ---------------------------------------------------------------- annotations

Point = tuple[float, float]


@dataclass
class JawEndSeries:
    """Sparse per-frame jaw-end points: ((left1, left2), (right1, right2))."""

    frames: dict[int, tuple[tuple[Point, Point], tuple[Point, Point]]] = field(default_factory=dict)

    def dense(self, frame_count: int) -> list[tuple[tuple[Point, Point], tuple[Point, Point]] | None]:
        """One entry per frame; gaps inherit the most recent prior annotation.

        Frames before the first annotation take the first annotation; with no
        annotations at all every entry is None.
        """
        out: list = [None] * frame_count
        if not self.frames:
            return out
        keys = sorted(self.frames)
        current = self.frames[keys[0]]
        for i in range(frame_count):
            if i in self.frames:
                current = self.frames[i]
            out[i] = current
        return out


def read_jaw_ends(path: str | Path, width: int | None = None, height: int | None = None) -> JawEndSeries:
    cols = ["frame", "lx1", "ly1", "lx2", "ly2", "rx1", "ry1", "rx2", "ry2"]
    series = JawEndSeries()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != cols:
            raise DataError(f"{path}: jaw-end header must be {','.join(cols)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                frame = int(row["frame"])
                v = [float(row[c]) for c in cols[1:]]
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: non-numeric jaw-end cell") from exc
            xs, ys = v[0::2], v[1::2]
            if width is not None and height is not None:
                if any(x < 0 or x > width for x in xs) or any(y < 0 or y > height for y in ys):
                    raise DataError(f"{path}:{lineno}: jaw-end point outside the {width}x{height} image")
            if frame in series.frames:
                raise DataError(f"{path}:{lineno}: duplicate frame {frame}")
            series.frames[frame] = (((v[0], v[1]), (v[2], v[3])), ((v[4], v[5]), (v[6], v[7])))
    return series


def write_jaw_ends(series: JawEndSeries, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "lx1", "ly1", "lx2", "ly2", "rx1", "ry1", "rx2", "ry2"])
    for frame in sorted(series.frames):
        (l1, l2), (r1, r2) = series.frames[frame]
        w.writerow([frame, *_fmt_pts(l1, l2, r1, r2)])
    atomic_write_text(path, buf.getvalue())


def _fmt_pts(*pts: Point) -> list[str]:
    return [_fmt_num(c) for p in pts for c in p]


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def read_points(path: str | Path) -> list[Point]:
    """Static point list (tissue markings, ring centres): CSV with header ``x,y``."""
    pts: list[Point] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y"]:
            raise DataError(f"{path}: point list header must be x,y")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad point row {row!r}") from exc
    return pts


def write_points(points: Iterable[Point], path: str | Path) -> None:
    lines = ["x,y"] + [f"{_fmt_num(x)},{_fmt_num(y)}" for x, y in points]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------- manifest


@dataclass
class TrialManifest:
    trial_id: str
    task: Task
    frame_rate_hz: Fraction
    frame_count: int
    mask_streams: dict[ObjectClass, str]
    annotations: dict[str, Path]
    output_rate_hz: Fraction = Fraction(3)
    base_dir: Path = Path(".")
    width: int = 0
    height: int = 0
    thresholds: Thresholds = field(default_factory=Thresholds)
    rules: Path | None = None

    @property
    def stride(self) -> int:
        """Native frames per output sample."""
        return int(self.frame_rate_hz / self.output_rate_hz)

    def mask_path(self, object_class: ObjectClass, frame_index: int) -> str:
        return os.path.join(self.base_dir, self.mask_streams[object_class].format(frame=frame_index))


def _parse_rate(value: str, name: str, where: str) -> Fraction:
    try:
        rate = Fraction(value.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{where}: {name} must be a positive rational, got {value!r}") from exc
    if rate <= 0:
        raise ConfigError(f"{where}: {name} must be positive, got {value!r}")
    return rate


def load_manifest(path: str | Path, check_files: bool = True) -> TrialManifest:
    """Parse and eagerly validate a trial manifest.

    Every mask file is checked for existence and its header is read to verify
    that all streams share one image size.
    """
    path = Path(path)
    doc = read_structured_text(path)
    top = doc.top
    where = str(path)
    for key in ("trial_id", "task", "frame_rate_hz", "frame_count"):
        if key not in top:
            raise ConfigError(f"{where}: missing required key {key!r}")
    task = Task.parse(top["task"])
    frame_rate = _parse_rate(top["frame_rate_hz"], "frame_rate_hz", where)
    output_rate = _parse_rate(top.get("output_rate_hz", "3"), "output_rate_hz", where)
    if (frame_rate / output_rate).denominator != 1:
        raise ConfigError(f"{where}: output_rate_hz {output_rate} does not divide frame_rate_hz {frame_rate}")
    try:
        frame_count = int(top["frame_count"])
    except ValueError as exc:
        raise ConfigError(f"{where}: frame_count must be an integer") from exc
    if frame_count <= 0:
        raise ConfigError(f"{where}: frame_count must be positive")

    streams: dict[ObjectClass, str] = {}
    for key, pattern in key_values(doc, "masks").items():
        obj = ObjectClass.parse(key)
        if "{frame" not in pattern:
            raise ConfigError(f"{where}: mask pattern for {obj.value} lacks a {{frame}} field")
        streams[obj] = pattern
    annotations = {k: path.parent / v for k, v in key_values(doc, "annotations").items()}
    unknown = set(annotations) - {"jaw_ends", "tissue_points", "ring_points"}
    if unknown:
        raise ConfigError(f"{where}: unknown annotation(s) {sorted(unknown)}")
    try:
        thresholds = Thresholds().with_overrides(**key_values(doc, "thresholds"))
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc

    manifest = TrialManifest(
        trial_id=top["trial_id"],
        task=task,
        frame_rate_hz=frame_rate,
        frame_count=frame_count,
        mask_streams=streams,
        annotations=annotations,
        output_rate_hz=output_rate,
        base_dir=path.parent,
        thresholds=thresholds,
        rules=(path.parent / top["rules"]) if "rules" in top else None,
    )
    for key in ("width", "height"):
        if key in top:
            setattr(manifest, key, int(top[key]))
    if check_files:
        _check_files(manifest)
    return manifest


def _check_files(manifest: TrialManifest) -> None:
    size: tuple[int, int] | None = None
    if manifest.width and manifest.height:
        size = (manifest.width, manifest.height)
    size_src = "manifest"
    for obj, _ in sorted(manifest.mask_streams.items(), key=lambda kv: kv[0].value):
        for frame in range(manifest.frame_count):
            p = manifest.mask_path(obj, frame)
            if not os.path.isfile(p):
                raise DataError(f"{obj.value} frame {frame}: mask file {p} is missing")
            this = image_size(p)
            if size is None:
                size, size_src = this, f"{obj.value} frame {frame}"
            elif this != size:
                raise DataError(
                    f"{obj.value} frame {frame}: image size {this[0]}x{this[1]} "
                    f"differs from {size[0]}x{size[1]} ({size_src})"
                )
    for name, p in manifest.annotations.items():
        if not p.is_file():
            raise DataError(f"annotation {name}: file {p} is missing")
    if size is not None:
        manifest.width, manifest.height = size


def write_manifest(manifest: TrialManifest, path: str | Path) -> None:
    path = Path(path)
    lines = [
        f"trial_id = {manifest.trial_id}",
        f"task = {manifest.task.value}",
        f"frame_rate_hz = {manifest.frame_rate_hz}",
        f"output_rate_hz = {manifest.output_rate_hz}",
        f"frame_count = {manifest.frame_count}",
    ]
    if manifest.width and manifest.height:
        lines += [f"width = {manifest.width}", f"height = {manifest.height}"]
    if manifest.rules is not None:
        lines.append(f"rules = {os.path.relpath(manifest.rules, path.parent)}")
    lines += ["", "[masks]"]
    lines += [f"{obj.value} = {pat}" for obj, pat in manifest.mask_streams.items()]
    if manifest.annotations:
        lines += ["", "[annotations]"]
        lines += [f"{k} = {os.path.relpath(v, path.parent)}" for k, v in manifest.annotations.items()]
    defaults = Thresholds()
    changed = [n for n in Thresholds.field_names() if getattr(manifest.thresholds, n) != getattr(defaults, n)]
    if changed:
        lines += ["", "[thresholds]"]
        lines += [f"{n} = {getattr(manifest.thresholds, n)}" for n in changed]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------- context transcripts


@dataclass(frozen=True)
class ContextFrame:
    left_hold: int
    left_contact: int
    right_hold: int
    right_contact: int
    fifth_state: int
    timestamp: int = 0

    @property
    def values(self) -> tuple[int, int, int, int, int]:
        return (self.left_hold, self.left_contact, self.right_hold, self.right_contact, self.fifth_state)

    @property
    def code(self) -> str:
        """Five-digit context code, e.g. ``"00202"``."""
        return "".join(str(v) for v in self.values)

    @classmethod
    def from_code(cls, code: str, timestamp: int = 0) -> "ContextFrame":
        if len(code) != 5 or not code.isdigit():
            raise DataError(f"context code must be 5 digits, got {code!r}")
        return cls(*(int(c) for c in code), timestamp=timestamp)


def check_context_values(frame: ContextFrame, task: Task | None, where: str = "") -> None:
    for name, v in zip(CSV_STATE_NAMES, frame.values):
        if not 0 <= v <= 9:
            raise DataError(f"{where}{name}={v} is not a single digit")
    if task is None:
        return
    hold_set, fifth_set = TASK_VALUE_SETS[task]
    for name, v in zip(CSV_STATE_NAMES[:4], frame.values[:4]):
        if v not in hold_set:
            raise DataError(f"{where}{name}={v} is out of range for {task.value} (allowed {sorted(hold_set)})")
    if frame.fifth_state not in fifth_set:
        raise DataError(
            f"{where}S5={frame.fifth_state} is out of range for {task.value} (allowed {sorted(fifth_set)})"
        )


CONTEXT_HEADER = ["sample_index", *CSV_STATE_NAMES]


def read_context_transcript(path: str | Path, task: Task | str | None = None) -> list[ContextFrame]:
    task = Task.parse(task) if task is not None else None
    frames: list[ContextFrame] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CONTEXT_HEADER:
            raise DataError(f"{path}: header must be {','.join(CONTEXT_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 cells, got {len(row)}")
            try:
                cells = [int(c) for c in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer cell in {row!r}") from exc
            frame = ContextFrame(*cells[1:], timestamp=cells[0])
            check_context_values(frame, task, f"{path}:{lineno}: ")
            frames.append(frame)
    return frames


def write_context_transcript(frames: Sequence[ContextFrame], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONTEXT_HEADER)
    for f in frames:
        w.writerow([f.timestamp, *f.values])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------- gesture transcripts

GESTURE_RE = re.compile(r"^G([1-9]|1[0-5])$")


@dataclass(frozen=True)
class GestureSegment:
    start: int  # first frame, inclusive
    end: int    # last frame, inclusive
    label: str

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class GestureTranscript:
    segments: list[GestureSegment] = field(default_factory=list)
    frame_basis: str = "native"  # or "output"

    def __post_init__(self):
        validate_segments(self.segments)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.segments]

    def to_series(self, length: int | None = None) -> list[str | None]:
        """Per-frame labels; frames not covered by a segment are None."""
        end = self.segments[-1].end + 1 if self.segments else 0
        n = end if length is None else length
        out: list[str | None] = [None] * n
        for s in self.segments:
            for i in range(s.start, min(s.end + 1, n)):
                out[i] = s.label
        return out


def validate_segments(segments: Sequence[GestureSegment], where: str = "") -> None:
    prev: GestureSegment | None = None
    for seg in segments:
        if not GESTURE_RE.match(seg.label):
            raise DataError(f"{where}unknown gesture label {seg.label!r}")
        if seg.start < 0:
            raise DataError(f"{where}negative start frame {seg.start}")
        if seg.start > seg.end:
            raise DataError(f"{where}segment {seg.start}-{seg.end} {seg.label}: start after end")
        if prev is not None and seg.start <= prev.end:
            raise DataError(
                f"{where}segment {seg.start}-{seg.end} {seg.label} overlaps "
                f"{prev.start}-{prev.end} {prev.label}"
            )
        prev = seg


def read_gesture_transcript(path: str | Path) -> GestureTranscript:
    segments: list[GestureSegment] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'start end G<k>', got {raw.strip()!r}")
            try:
                start, end = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer frame index") from exc
            segments.append(GestureSegment(start, end, parts[2]))
    validate_segments(segments, f"{path}: ")
    return GestureTranscript(segments)


def write_gesture_transcript(t: GestureTranscript, path: str | Path) -> None:
    text = "".join(f"{s.start} {s.end} {s.label}\n" for s in t.segments)
    atomic_write_text(path, text)


def segments_from_series(labels: Sequence[str | None], stride: int = 1) -> list[GestureSegment]:
    """Run-length encode per-sample labels into native-frame segments.

    Sample ``i`` covers frames ``[i*stride, (i+1)*stride - 1]``; None samples
    become gaps.
    """
    segs: list[GestureSegment] = []
    i, n = 0, len(labels)
    while i < n:
        j = i
        while j < n and labels[j] == labels[i]:
            j += 1
        if labels[i] is not None:
            segs.append(GestureSegment(i * stride, j * stride - 1, labels[i]))
        i = j
    return segs


# ---------------------------------------------------------------- helpers


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
