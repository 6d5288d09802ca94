"""Context-to-gesture translation with a grammar-graph finite state machine.

Grammar files use the structured-text format of :mod:`surgctx.config`::

    task = Suturing

    [states]
    Start =
    G4 = 20000 20020 20200 02200 00200     # contexts grouped under G4

    [transitions]
    G6, G4, contexts=[00200 02200 20000 20020 20200]
    G3, G8, contexts=[00200 02200], priority=1, status=reconstructed

    [durations]
    G4, 5.2, G2                            # forced G4 -> G2 after 5.2 s

    [terminal]
    G11, samples=1

    [excluded]
    G9 G10

At each sample the machine stays put while the context belongs to the
current gesture's group. Otherwise the first outgoing transition (by
priority, then file order) whose trigger set holds the context fires.
If nothing fired and the dwell time now exceeds the state's duration
limit, the forced transition is taken.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .config import ConfigError, StructuredText, parse_structured_text, read_structured_text
from .trial_io import (
    GESTURE_RE,
    ContextFrame,
    DataError,
    GestureSegment,
    GestureTranscript,
    Task,
    atomic_write_text,
    segments_from_series,
)

log = logging.getLogger(__name__)

START = "Start"
_CODE_RE = re.compile(r"^\d{5}$")
_ATTR_RE = re.compile(r"(\w+)\s*=\s*(\[[^\]]*\]|[^,]+)")


@dataclass(frozen=True)
class Transition:
    source: str
    target: str
    contexts: frozenset[str]
    priority: int | None = None
    status: str = ""
    order: int = 0  # position in the file


@dataclass
class GrammarGraph:
    task: Task
    states: dict[str, frozenset[str]]
    transitions: list[Transition]
    durations: dict[str, tuple[float, str]] = field(default_factory=dict)
    terminal: str = "G11"
    terminal_samples: int = 1
    excluded: frozenset[str] = frozenset()
    source: str = ""

    def __post_init__(self):
        self._validate()
        self._exits = {s: self._resolve_exits(s) for s in self.states}

    def _validate(self) -> None:
        where = self.source or "<grammar>"
        if START not in self.states:
            raise ConfigError(f"{where}: grammar must declare the {START} state")
        for state, group in self.states.items():
            if state != START and not GESTURE_RE.match(state):
                raise ConfigError(f"{where}: unknown state {state!r}")
            if state in self.excluded:
                raise ConfigError(f"{where}: state {state} is listed as excluded")
            _check_codes(group, f"{where}: state {state}")
        for t in self.transitions:
            for s in (t.source, t.target):
                if s not in self.states:
                    raise ConfigError(f"{where}: transition {t.source} -> {t.target} uses undeclared state {s!r}")
            if t.target == START:
                raise ConfigError(f"{where}: transitions may not enter {START}")
            if not t.contexts:
                raise ConfigError(f"{where}: transition {t.source} -> {t.target} has no trigger contexts")
            _check_codes(t.contexts, f"{where}: transition {t.source} -> {t.target}")
        by_source: dict[str, list[Transition]] = {}
        for t in self.transitions:
            by_source.setdefault(t.source, []).append(t)
        for source, ts in by_source.items():
            for i, a in enumerate(ts):
                for b in ts[i + 1:]:
                    shared = a.contexts & b.contexts
                    if not shared:
                        continue
                    if a.priority is None or b.priority is None or a.priority == b.priority:
                        raise ConfigError(
                            f"{where}: transitions {source} -> {a.target} and {source} -> {b.target} "
                            f"share trigger(s) {sorted(shared)} without distinct priorities"
                        )
        for state, (seconds, nxt) in self.durations.items():
            if state not in self.states or nxt not in self.states:
                raise ConfigError(f"{where}: duration trigger {state} -> {nxt} uses an undeclared state")
            if not seconds > 0:
                raise ConfigError(f"{where}: duration for {state} must be positive, got {seconds}")
            if nxt == START:
                raise ConfigError(f"{where}: duration triggers may not enter {START}")
        if not GESTURE_RE.match(self.terminal):
            raise ConfigError(f"{where}: terminal gesture {self.terminal!r} is not a gesture label")
        if self.terminal_samples < 0:
            raise ConfigError(f"{where}: terminal samples must be >= 0")

    def _resolve_exits(self, state: str) -> dict[str, str]:
        ranked = sorted(
            (t for t in self.transitions if t.source == state),
            key=lambda t: (t.priority if t.priority is not None else math.inf, t.order),
        )
        exits: dict[str, str] = {}
        for t in ranked:
            for c in sorted(t.contexts):
                exits.setdefault(c, t.target)
        return exits

    def next_state(self, state: str, code: str) -> str | None:
        """Target of the context-triggered transition taken from ``state``, if any."""
        if code in self.states[state]:
            return None
        return self._exits[state].get(code)

    def entry_contexts(self, t: Transition) -> list[str]:
        """Trigger contexts that actually make ``t`` fire."""
        return sorted(c for c in t.contexts if self.next_state(t.source, c) == t.target)


def _check_codes(codes, where: str) -> None:
    for c in codes:
        if not _CODE_RE.match(c):
            raise ConfigError(f"{where}: context {c!r} is not a 5-digit code")


def _split_codes(text: str) -> frozenset[str]:
    return frozenset(tok for tok in re.split(r"[\s,\[\]]+", text) if tok)


def parse_grammar(doc: StructuredText) -> GrammarGraph:
    where = doc.where()
    if "task" not in doc.top:
        raise ConfigError(f"{where}: grammar lacks 'task = ...'")
    task = Task.parse(doc.top["task"])

    states: dict[str, frozenset[str]] = {}
    for line in doc.section("states"):
        name, sep, rest = line.text.partition("=")
        name = name.strip()
        if not name or " " in name:
            raise ConfigError(f"{doc.where(line)}: expected '<state> = <contexts>'")
        if name in states:
            raise ConfigError(f"{doc.where(line)}: state {name} declared twice")
        states[name] = _split_codes(rest)

    transitions = []
    for order, line in enumerate(doc.section("transitions")):
        m = re.match(r"^\s*([^,\s]+)\s*,\s*([^,\s]+)\s*,(.*)$", line.text)
        if not m:
            raise ConfigError(f"{doc.where(line)}: expected 'from, to, contexts=[...]'")
        rest = m.group(3)
        attrs = {k: v.strip() for k, v in _ATTR_RE.findall(rest)}
        if _ATTR_RE.sub("", rest).strip(" ,"):
            raise ConfigError(f"{doc.where(line)}: cannot parse transition attributes {rest.strip()!r}")
        unknown = set(attrs) - {"contexts", "priority", "status"}
        if unknown or "contexts" not in attrs:
            raise ConfigError(f"{doc.where(line)}: transition needs contexts=[...] (unknown: {sorted(unknown)})")
        try:
            priority = int(attrs["priority"]) if "priority" in attrs else None
        except ValueError as exc:
            raise ConfigError(f"{doc.where(line)}: priority must be an integer") from exc
        transitions.append(
            Transition(m.group(1), m.group(2), _split_codes(attrs["contexts"]), priority, attrs.get("status", ""), order)
        )

    durations: dict[str, tuple[float, str]] = {}
    for line in doc.section("durations"):
        parts = [p.strip() for p in line.text.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"{doc.where(line)}: expected 'state, seconds, next'")
        try:
            seconds = float(parts[1])
        except ValueError as exc:
            raise ConfigError(f"{doc.where(line)}: duration must be a number") from exc
        if parts[0] in durations:
            raise ConfigError(f"{doc.where(line)}: second duration trigger for {parts[0]}")
        durations[parts[0]] = (seconds, parts[2])

    terminal, terminal_samples = "G11", 1
    term_lines = doc.section("terminal")
    if len(term_lines) > 1:
        raise ConfigError(f"{doc.where(term_lines[1])}: only one terminal gesture is allowed")
    if term_lines:
        head, _, tail = term_lines[0].text.partition(",")
        terminal = head.strip()
        if tail.strip():
            key, _, value = tail.partition("=")
            if key.strip() != "samples":
                raise ConfigError(f"{doc.where(term_lines[0])}: expected 'G11, samples=<n>'")
            try:
                terminal_samples = int(value)
            except ValueError as exc:
                raise ConfigError(f"{doc.where(term_lines[0])}: samples must be an integer") from exc

    excluded = frozenset(tok for line in doc.section("excluded") for tok in line.text.replace(",", " ").split())
    for name in doc.sections:
        if name not in ("states", "transitions", "durations", "terminal", "excluded"):
            raise ConfigError(f"{where}: unknown section [{name}]")
    return GrammarGraph(task, states, transitions, durations, terminal, terminal_samples, excluded, where)


def load_grammar(path: str | Path) -> GrammarGraph:
    return parse_grammar(read_structured_text(path))


GRAMMAR_FILES = {
    Task.SUTURING: "suturing.grammar",
    Task.NEEDLE_PASSING: "needle_passing.grammar",
    Task.KNOT_TYING: "knot_tying.grammar",
}


def default_grammar(task: Task | str) -> GrammarGraph:
    task = Task.parse(task)
    ref = resources.files("surgctx") / "data" / "grammars" / GRAMMAR_FILES[task]
    return parse_grammar(parse_structured_text(ref.read_text(encoding="utf-8"), Path(str(ref))))


# ---------------------------------------------------------------- translation


@dataclass(frozen=True)
class TraceRow:
    sample: int
    context: str
    state: str
    trigger: str  # "context", "duration" or "none"
    emitted: str | None


def _codes(context: Sequence[ContextFrame | str]) -> list[str]:
    out = []
    for i, c in enumerate(context):
        code = c.code if isinstance(c, ContextFrame) else str(c)
        if not _CODE_RE.match(code):
            raise DataError(f"sample {i}: context {code!r} is not a 5-digit code")
        out.append(code)
    return out


def translate(
    context: Sequence[ContextFrame | str],
    grammar: GrammarGraph,
    sample_rate_hz: float = 3.0,
    stride: int = 1,
) -> tuple[GestureTranscript, list[TraceRow]]:
    """Run the grammar over a context transcript.

    Returns the gesture transcript (segments in units of ``stride`` frames
    per sample; the terminal gesture is appended after the last sample) and
    one trace row per input sample.
    """
    if sample_rate_hz <= 0:
        raise ValueError("sample_rate_hz must be positive")
    codes = _codes(context)
    state, dwell = START, 0
    states: list[str] = []
    triggers: list[str] = []
    for code in codes:
        trigger = "none"
        target = grammar.next_state(state, code)
        if target is not None:
            state, dwell, trigger = target, 0, "context"
        dwell += 1
        limit = grammar.durations.get(state)
        if trigger == "none" and limit is not None and dwell > limit[0] * sample_rate_hz + 1e-9:
            state, dwell, trigger = limit[1], 1, "duration"
        states.append(state)
        triggers.append(trigger)

    labels: list[str | None] = [None if s == START else s for s in states]
    first = next((i for i, s in enumerate(labels) if s is not None), None)
    if first is not None:
        labels[:first] = [labels[first]] * first

    segments = segments_from_series(labels, stride)
    n = len(codes)
    if n and grammar.terminal_samples > 0 and (not labels or labels[-1] != grammar.terminal):
        segments.append(
            GestureSegment(n * stride, (n + grammar.terminal_samples) * stride - 1, grammar.terminal)
        )
    trace = [TraceRow(i, c, s, t, e) for i, (c, s, t, e) in enumerate(zip(codes, states, triggers, labels))]
    basis = "output" if stride == 1 else "native"
    return GestureTranscript(segments, basis), trace


def validate_transcript(t: GestureTranscript, grammar: GrammarGraph) -> list[str]:
    """Grammar-level problems with a transcript (empty list when clean)."""
    problems = []
    known = set(grammar.states) | {grammar.terminal}
    for seg in t.segments:
        if seg.label in grammar.excluded:
            problems.append(f"{seg.start}-{seg.end}: excluded gesture {seg.label}")
        elif seg.label not in known:
            problems.append(f"{seg.start}-{seg.end}: gesture {seg.label} is not in the {grammar.task.value} grammar")
    if t.segments and t.segments[-1].label != grammar.terminal:
        problems.append(f"transcript ends in {t.segments[-1].label}, not {grammar.terminal}")
    return problems


TRACE_HEADER = ["sample_index", "context", "state", "trigger", "emitted"]


def write_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in trace:
        w.writerow([r.sample, r.context, r.state, r.trigger, r.emitted or ""])
    atomic_write_text(path, buf.getvalue())


def read_trace(path: str | Path) -> list[TraceRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise DataError(f"{path}: header must be {','.join(TRACE_HEADER)}")
        return [TraceRow(int(r[0]), r[1], r[2], r[3], r[4] or None) for r in reader if r]


# ---------------------------------------------------------------- grammar walks


@dataclass
class Walk:
    """A context sequence generated from a grammar with its gesture labels."""

    codes: list[str]
    labels: list[str]

    @property
    def gestures(self) -> list[str]:
        out: list[str] = []
        for lab in self.labels:
            if not out or out[-1] != lab:
                out.append(lab)
        return out


def random_walk(
    grammar: GrammarGraph,
    rng,
    n_gestures: int,
    sample_rate_hz: float = 3.0,
    max_dwell_s: float = 6.0,
    start: str = START,
) -> Walk:
    """Sample a walk through the grammar that the FSM maps back exactly.

    Each gesture is entered on one of its transition's effective trigger
    contexts and then dwells on contexts from its own group, staying below
    any duration limit. ``rng`` is a :class:`random.Random`.
    """
    state = start
    codes: list[str] = []
    labels: list[str] = []
    for _ in range(n_gestures):
        options = [(t, grammar.entry_contexts(t)) for t in grammar.transitions if t.source == state]
        options = [(t, cs) for t, cs in options if cs]
        if not options:
            break
        t, entries = options[rng.randrange(len(options))]
        entry = entries[rng.randrange(len(entries))]
        group = sorted(grammar.states[t.target])
        limit = grammar.durations.get(t.target)
        cap = math.floor(limit[0] * sample_rate_hz + 1e-9) if limit else math.floor(max_dwell_s * sample_rate_hz)
        length = rng.randint(1, max(1, cap)) if group else 1
        seq = [entry]
        while len(seq) < length:
            if seq[-1] in grammar.states[t.target] and rng.random() < 0.7:
                seq.append(seq[-1])
            else:
                seq.append(group[rng.randrange(len(group))])
        codes += seq
        labels += [t.target] * len(seq)
        state = t.target
    return Walk(codes, labels)
