"""Per-frame features, task rule sets, state inference and downsampling.

Rule conditions are small boolean expressions over the frame's features::

    D(LG, N) < touch_px and not open_left
    (Inter(Ts, N) <= overlap_px2 or N.x >= Ts.x) and D(RG, T) > touch_px

``D`` is the mean polygon distance between two objects, ``Inter`` their
intersection area, ``X.x``/``X.y`` an object's vertex midpoint, and
``open_left``/``open_right`` the grasper openness flags. Threshold names
from :class:`~surgctx.config.Thresholds` may appear as constants.

A distance or midpoint of an object that is absent from the frame is
unknown, and every ordering comparison on an unknown value is false.
"""

from __future__ import annotations

import ast
import logging
import math
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .config import ConfigError, StructuredText, Thresholds, parse_structured_text, read_structured_text
from .geometry import INF, ObjectPolygons, build_shapes, intersection_area, marker_polygons, object_distance, object_polygons
from .trial_io import (
    STATE_NAMES,
    TASK_VALUE_SETS,
    ContextFrame,
    DataError,
    ObjectClass,
    Task,
    MaskReader,
    TrialManifest,
    read_jaw_ends,
    read_points,
)

log = logging.getLogger(__name__)
_local = threading.local()

# Value written into hold/contact variables for each held/touched object.
ENCODING = {ObjectClass.RING: 1, ObjectClass.NEEDLE: 2, ObjectClass.THREAD: 3}

TASK_OBJECTS = {
    Task.SUTURING: {"LG", "RG", "N", "T", "Ts"},
    Task.NEEDLE_PASSING: {"LG", "RG", "N", "T", "R"},
    Task.KNOT_TYING: {"LG", "RG", "T"},
}

_ABBREVS = {o.abbrev: o for o in ObjectClass}


def grasper_open(jaw_points, threshold_px: float = 18.0) -> bool:
    """True (open) unless the two jaw ends are closer than ``threshold_px``."""
    (x1, y1), (x2, y2) = jaw_points
    return math.hypot(x2 - x1, y2 - y1) >= threshold_px


# ---------------------------------------------------------------- features


@dataclass
class FeatureVector:
    frame_index: int
    distances: dict[tuple[str, str], float] = field(default_factory=dict)
    intersections: dict[tuple[str, str], float] = field(default_factory=dict)
    midpoints: dict[str, tuple[float, float]] = field(default_factory=dict)
    open_left: bool = True
    open_right: bool = True

    def D(self, a: str, b: str) -> float:
        return _lookup(self.distances, a, b, "D")

    def Inter(self, a: str, b: str) -> float:
        return _lookup(self.intersections, a, b, "Inter")


def _lookup(table: dict, a: str, b: str, kind: str) -> float:
    if (a, b) in table:
        return table[(a, b)]
    if (b, a) in table:
        return table[(b, a)]
    raise KeyError(f"feature {kind}({a},{b}) was not computed for this frame")


# ---------------------------------------------------------------- rule language

_CMP_OPS = (ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq)
_FLAG_NAMES = {"open_left", "open_right"}


@dataclass(frozen=True)
class Condition:
    source: str
    code: object = field(repr=False, compare=False)
    distances: frozenset[tuple[str, str]] = frozenset()
    intersections: frozenset[tuple[str, str]] = frozenset()
    midpoints: frozenset[str] = frozenset()

    @property
    def objects(self) -> set[str]:
        objs = set(self.midpoints)
        for a, b in self.distances | self.intersections:
            objs.update((a, b))
        return objs


def compile_condition(source: str) -> Condition:
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad rule condition {source!r}: {exc.msg}") from exc
    dists: set[tuple[str, str]] = set()
    inters: set[tuple[str, str]] = set()
    mids: set[str] = set()
    thresholds = set(Thresholds.field_names())

    def visit(node):
        if isinstance(node, ast.Expression):
            return visit(node.body)
        if isinstance(node, ast.BoolOp):
            return [visit(v) for v in node.values]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            return visit(node.operand)
        if isinstance(node, ast.Compare):
            if not all(isinstance(op, _CMP_OPS) for op in node.ops):
                raise ConfigError(f"bad rule condition {source!r}: unsupported comparison")
            return [visit(node.left)] + [visit(c) for c in node.comparators]
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in ("D", "Inter"):
                raise ConfigError(f"bad rule condition {source!r}: only D(..) and Inter(..) may be called")
            if node.keywords or len(node.args) != 2 or not all(
                isinstance(a, ast.Name) and a.id in _ABBREVS for a in node.args
            ):
                raise ConfigError(f"bad rule condition {source!r}: {node.func.id} takes two object names")
            pair = (node.args[0].id, node.args[1].id)
            (dists if node.func.id == "D" else inters).add(pair)
            return None
        if isinstance(node, ast.Attribute):
            if not isinstance(node.value, ast.Name) or node.value.id not in _ABBREVS or node.attr not in ("x", "y"):
                raise ConfigError(f"bad rule condition {source!r}: midpoints are written like N.x or Ts.y")
            mids.add(node.value.id)
            return None
        if isinstance(node, ast.Name):
            if node.id in _FLAG_NAMES or node.id in thresholds:
                return None
            raise ConfigError(f"bad rule condition {source!r}: unknown name {node.id!r}")
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return None
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return visit(node.operand)
        raise ConfigError(f"bad rule condition {source!r}: unsupported syntax {type(node).__name__}")

    visit(tree)
    code = compile(tree, "<rule>", "eval")
    return Condition(source.strip(), code, frozenset(dists), frozenset(inters), frozenset(mids))


@dataclass(frozen=True)
class Rule:
    value: int
    condition: Condition


@dataclass
class RuleSet:
    """Ordered rules per state variable; the first matching rule wins, else 0."""

    task: Task
    rules: dict[str, list[Rule]]
    status: str = ""
    source: str = ""

    def __post_init__(self):
        hold_set, fifth_set = TASK_VALUE_SETS[self.task]
        allowed_objects = TASK_OBJECTS[self.task]
        for name in self.rules:
            if name not in STATE_NAMES:
                raise ConfigError(f"{self.source}: unknown state variable [{name}]")
        for name in STATE_NAMES:
            self.rules.setdefault(name, [])
            values = fifth_set if name == "fifth_state" else hold_set
            for rule in self.rules[name]:
                if rule.value not in values:
                    raise ConfigError(
                        f"{self.source}: [{name}] value {rule.value} is not valid for {self.task.value}"
                    )
                extra = rule.condition.objects - allowed_objects
                if extra:
                    raise ConfigError(
                        f"{self.source}: [{name}] rule {rule.condition.source!r} uses "
                        f"{sorted(extra)}, which {self.task.value} does not provide"
                    )

    def _conditions(self):
        return [r.condition for rs in self.rules.values() for r in rs]

    @property
    def required_distances(self) -> set[tuple[str, str]]:
        return set().union(*(c.distances for c in self._conditions()))

    @property
    def required_intersections(self) -> set[tuple[str, str]]:
        return set().union(*(c.intersections for c in self._conditions()))

    @property
    def required_midpoints(self) -> set[str]:
        return set().union(*(c.midpoints for c in self._conditions()))

    @property
    def required_objects(self) -> set[ObjectClass]:
        names = set().union(*(c.objects for c in self._conditions()))
        return {_ABBREVS[n] for n in names}


def parse_rules(doc: StructuredText) -> RuleSet:
    where = doc.where()
    if "task" not in doc.top:
        raise ConfigError(f"{where}: rule set lacks 'task = ...'")
    task = Task.parse(doc.top["task"])
    rules: dict[str, list[Rule]] = {}
    for name, lines in doc.sections.items():
        rules[name] = []
        for line in lines:
            value, sep, cond = line.text.partition(":")
            if not sep:
                raise ConfigError(f"{doc.where(line)}: expected '<value>: <condition>'")
            try:
                v = int(value.strip())
            except ValueError as exc:
                raise ConfigError(f"{doc.where(line)}: rule value must be an integer") from exc
            try:
                rules[name].append(Rule(v, compile_condition(cond)))
            except ConfigError as exc:
                raise ConfigError(f"{doc.where(line)}: {exc}") from exc
    return RuleSet(task, rules, doc.top.get("status", ""), where)


def load_rules(path: str | Path) -> RuleSet:
    return parse_rules(read_structured_text(path))


RULE_FILES = {
    Task.SUTURING: "suturing.rules",
    Task.NEEDLE_PASSING: "needle_passing.rules",
    Task.KNOT_TYING: "knot_tying.rules",
}


def default_rules(task: Task | str) -> RuleSet:
    task = Task.parse(task)
    ref = resources.files("surgctx") / "data" / "rules" / RULE_FILES[task]
    return parse_rules(parse_structured_text(ref.read_text(encoding="utf-8"), Path(str(ref))))


# ---------------------------------------------------------------- inference


class _Obj:
    __slots__ = ("name", "x", "y")

    def __init__(self, name: str, mid: tuple[float, float] | None):
        self.name = name
        self.x, self.y = mid if mid is not None else (math.nan, math.nan)


def _unknown_if_inf(v: float) -> float:
    return math.nan if v == INF else v


def infer_state(v: FeatureVector, rules: RuleSet, thresholds: Thresholds | None = None, timestamp: int | None = None) -> ContextFrame:
    th = thresholds or Thresholds()
    ns = {name: getattr(th, name) for name in Thresholds.field_names()}
    ns.update(
        __builtins__={},
        D=lambda a, b: _unknown_if_inf(v.D(a.name, b.name)),
        Inter=lambda a, b: v.Inter(a.name, b.name),
        open_left=v.open_left,
        open_right=v.open_right,
    )
    for abbrev in _ABBREVS:
        ns[abbrev] = _Obj(abbrev, v.midpoints.get(abbrev))
    values = []
    for name in STATE_NAMES:
        out = 0
        for rule in rules.rules[name]:
            if eval(rule.condition.code, ns):
                out = rule.value
                break
        values.append(out)
    return ContextFrame(*values, timestamp=v.frame_index if timestamp is None else timestamp)


def compute_features(
    polygons: dict[ObjectClass, ObjectPolygons],
    rules: RuleSet,
    open_left: bool = True,
    open_right: bool = True,
    frame_index: int = 0,
) -> FeatureVector:
    """Exactly the distances, intersections and midpoints ``rules`` reads.

    Objects missing from ``polygons`` (or without polygons) are absent:
    distance +inf, intersection 0, no midpoint.
    """
    def get(name: str) -> ObjectPolygons:
        obj = _ABBREVS[name]
        return polygons.get(obj) or ObjectPolygons(obj)

    build_shapes(polygons.values())
    v = FeatureVector(frame_index, open_left=open_left, open_right=open_right)
    for a, b in sorted(rules.required_distances):
        v.distances[(a, b)] = object_distance(get(a), get(b))
    for a, b in sorted(rules.required_intersections):
        v.intersections[(a, b)] = intersection_area(get(a), get(b))
    for name in sorted(rules.required_midpoints):
        obj = get(name)
        if obj:
            v.midpoints[name] = obj.midpoint
    return v


def rolling_mode(values: Sequence[int]) -> int:
    """Most frequent value; ties go to the value seen most recently."""
    counts = Counter(values)
    best = max(counts.values())
    for v in reversed(values):
        if counts[v] == best:
            return v
    raise ValueError("rolling_mode of an empty window")


def downsample(frames: Sequence[ContextFrame], window: int = 10, stride: int = 10) -> list[ContextFrame]:
    """Per-variable mode over the trailing ``window`` frames at every stride point.

    Output sample ``k`` closes at native frame ``min((k+1)*stride, n) - 1``;
    windows that would start before frame 0 use the available prefix.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    n = len(frames)
    out = []
    for k in range(math.ceil(n / stride)):
        end = min((k + 1) * stride, n)
        chunk = frames[max(0, end - window):end]
        vals = [rolling_mode([f.values[i] for f in chunk]) for i in range(5)]
        out.append(ContextFrame(*vals, timestamp=k))
    return out


@dataclass
class TrialInputs:
    """Everything per-frame inference needs besides the masks themselves."""

    manifest: TrialManifest
    rules: RuleSet
    thresholds: Thresholds
    static: dict[ObjectClass, ObjectPolygons]
    jaws: list

    @classmethod
    def prepare(cls, manifest: TrialManifest, rules: RuleSet | None = None, thresholds: Thresholds | None = None) -> "TrialInputs":
        if rules is None:
            rules = load_rules(manifest.rules) if manifest.rules else default_rules(manifest.task)
        if rules.task != manifest.task:
            raise ConfigError(f"rule set is for {rules.task.value}, trial {manifest.trial_id} is {manifest.task.value}")
        th = thresholds or manifest.thresholds
        static: dict[ObjectClass, ObjectPolygons] = {}
        for obj, key in ((ObjectClass.TISSUE_POINTS, "tissue_points"), (ObjectClass.RING, "ring_points")):
            if obj not in manifest.mask_streams and key in manifest.annotations:
                static[obj] = marker_polygons(read_points(manifest.annotations[key]), obj, th.marker_half_px)
        jaws: list = [None] * manifest.frame_count
        if "jaw_ends" in manifest.annotations:
            w, h = (manifest.width, manifest.height) if manifest.width else (None, None)
            jaws = read_jaw_ends(manifest.annotations["jaw_ends"], w, h).dense(manifest.frame_count)
        return cls(manifest, rules, th, static, jaws)

    def _reader(self) -> MaskReader:
        reader = getattr(_local, "reader", None)
        if reader is None:
            reader = _local.reader = MaskReader()
        return reader

    def frame_state(self, frame: int) -> ContextFrame:
        m, th = self.manifest, self.thresholds
        polys = dict(self.static)
        for obj in self.rules.required_objects:
            if obj in polys or obj not in m.mask_streams:
                continue
            mask = self._reader().read(m.mask_path(obj, frame), obj, frame)
            if m.width and (mask.width, mask.height) != (m.width, m.height):
                raise DataError(f"{obj.value} frame {frame}: mask size changed while loading")
            polys[obj] = object_polygons(mask, obj, th.rdp_epsilon_px, th.min_area_px2)
        jaw = self.jaws[frame]
        if jaw is None:
            open_l = open_r = True
        else:
            open_l = grasper_open(jaw[0], th.jaw_closed_px)
            open_r = grasper_open(jaw[1], th.jaw_closed_px)
        v = compute_features(polys, self.rules, open_l, open_r, frame)
        return infer_state(v, self.rules, th)


def infer_frame_states(inputs: TrialInputs, jobs: int = 1) -> list[ContextFrame]:
    frames = range(inputs.manifest.frame_count)
    if jobs <= 1:
        return [inputs.frame_state(f) for f in frames]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(inputs.frame_state, frames, chunksize=64))


def infer_trial_context(
    manifest: TrialManifest,
    rules: RuleSet | None = None,
    thresholds: Thresholds | None = None,
    jobs: int = 1,
) -> list[ContextFrame]:
    """Masks -> polygons -> features -> states -> downsampled context transcript."""
    t0 = time.perf_counter()
    inputs = TrialInputs.prepare(manifest, rules, thresholds)
    per_frame = infer_frame_states(inputs, jobs)
    out = downsample(per_frame, inputs.thresholds.mode_window, manifest.stride)
    log.info(
        "trial=%s stage=infer-context frames=%d samples=%d duration_ms=%.1f",
        manifest.trial_id, len(per_frame), len(out), (time.perf_counter() - t0) * 1e3,
    )
    return out
