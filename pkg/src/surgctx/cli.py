"""Command-line front end: infer-context, translate, evaluate, render-timeline, synth.

Exit codes: 0 success, 3 config problem, 4 data problem, 5 validation
failure (a produced or supplied transcript breaks the grammar).
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, Thresholds
from .context import infer_trial_context, load_rules
from .fsm import default_grammar, load_grammar, translate, validate_transcript, write_trace
from .metrics import TABLE_COLUMNS, gesture_scores, report_csv, report_text, state_variable_report
from .synth import SynthError, synth_trials
from .timeline import context_bands, gesture_band, render_svg
from .trial_io import (
    DataError,
    Task,
    atomic_write_text,
    load_manifest,
    read_context_transcript,
    read_gesture_transcript,
    write_context_transcript,
    write_gesture_transcript,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VALIDATION = 0, 3, 4, 5

log = logging.getLogger("surgctx")


class ValidationFailure(Exception):
    pass


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, SynthError)):
        return EXIT_CONFIG
    if isinstance(exc, ValidationFailure):
        return EXIT_VALIDATION
    return EXIT_DATA


def _expand(patterns: list[str]) -> list[Path]:
    out: list[Path] = []
    for pat in patterns:
        hits = sorted(glob.glob(pat, recursive=True))
        if not hits and not glob.has_magic(pat):
            hits = [pat]
        out += [Path(h) for h in hits]
    seen, unique = set(), []
    for p in out:
        if p.resolve() not in seen:
            seen.add(p.resolve())
            unique.append(p)
    return unique


def _overrides(args) -> dict:
    return {n: getattr(args, n) for n in Thresholds.field_names() if getattr(args, n, None) is not None}


@dataclass
class Outcome:
    trial: str
    code: int
    message: str = ""
    duration_ms: float = 0.0


def _report(outcomes: list[Outcome], stage: str) -> int:
    failed = [o for o in outcomes if o.code]
    for o in outcomes:
        if o.code:
            log.error("trial=%s stage=%s status=failed exit=%d error=%s", o.trial, stage, o.code, o.message)
        else:
            log.info("trial=%s stage=%s status=ok duration_ms=%.1f", o.trial, stage, o.duration_ms)
    if not outcomes:
        log.error("stage=%s no trials given", stage)
        return EXIT_CONFIG
    return max((o.code for o in failed), default=EXIT_OK)


def _run_pool(fn, jobs: list[tuple], workers: int) -> list[Outcome]:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------- infer-context


def _infer_one(manifest_path: str, rules_path: str | None, overrides: dict, out_dir: str) -> Outcome:
    t0 = time.perf_counter()
    trial = Path(manifest_path).stem
    try:
        m = load_manifest(manifest_path)
        trial = m.trial_id
        rules = load_rules(rules_path) if rules_path else None
        th = m.thresholds.with_overrides(**overrides)
        frames = infer_trial_context(m, rules, th)
        write_context_transcript(frames, Path(out_dir) / f"{trial}.context.csv")
    except (ConfigError, DataError, OSError) as exc:
        return Outcome(trial, _exit_code(exc), str(exc))
    return Outcome(trial, EXIT_OK, duration_ms=(time.perf_counter() - t0) * 1e3)


def cmd_infer_context(args) -> int:
    manifests = _expand(args.manifest)
    if args.rules and not Path(args.rules).is_file():
        raise ConfigError(f"rule set {args.rules} does not exist")
    overrides = _overrides(args)
    Thresholds().with_overrides(**overrides)  # reject bad values before spawning workers
    jobs = [(str(m), args.rules, overrides, args.out) for m in manifests]
    return _report(_run_pool(_infer_one, jobs, args.jobs), "infer-context")


# ---------------------------------------------------------------- translate


def _translate_one(context_path: str, trial: str, task: str | None, grammar_path: str | None,
                   frame_rate: float, rate: float, out_dir: str) -> Outcome:
    t0 = time.perf_counter()
    try:
        grammar = load_grammar(grammar_path) if grammar_path else default_grammar(task)
        if task and grammar.task != Task.parse(task):
            raise ConfigError(f"grammar is for {grammar.task.value}, trial {trial} is {task}")
        frames = read_context_transcript(context_path, grammar.task)
        stride = round(frame_rate / rate)
        if abs(stride * rate - frame_rate) > 1e-9:
            raise ConfigError(f"output rate {rate} does not divide frame rate {frame_rate}")
        transcript, trace = translate(frames, grammar, rate, stride)
        write_gesture_transcript(transcript, Path(out_dir) / f"{trial}.gestures.txt")
        write_trace(trace, Path(out_dir) / f"{trial}.trace.csv")
        problems = validate_transcript(transcript, grammar)
        if problems:
            raise ValidationFailure("; ".join(problems))
    except (ConfigError, DataError, OSError, ValidationFailure) as exc:
        return Outcome(trial, _exit_code(exc), str(exc))
    return Outcome(trial, EXIT_OK, duration_ms=(time.perf_counter() - t0) * 1e3)


def _context_trial_id(path: Path) -> str:
    name = path.name
    return name[: -len(".context.csv")] if name.endswith(".context.csv") else path.stem


def cmd_translate(args) -> int:
    if args.grammar:
        load_grammar(args.grammar)  # config diagnostics before any trial runs
    jobs = []
    if args.manifest:
        ctx_dir = Path(args.context_dir or args.out)
        for mp in _expand(args.manifest):
            m = load_manifest(mp, check_files=False)
            jobs.append((str(ctx_dir / f"{m.trial_id}.context.csv"), m.trial_id, m.task.value, args.grammar,
                         float(m.frame_rate_hz), float(m.output_rate_hz), args.out))
    for cp in _expand(args.context or []):
        if not (args.task or args.grammar):
            raise ConfigError("--task or --grammar is needed for context files given without a manifest")
        jobs.append((str(cp), _context_trial_id(cp), args.task, args.grammar, args.frame_rate, args.rate, args.out))
    return _report(_run_pool(_translate_one, jobs, args.jobs), "translate")


# ---------------------------------------------------------------- evaluate


def _find(gt_dir: Path, name: str) -> Path | None:
    direct = gt_dir / name
    if direct.is_file():
        return direct
    hits = sorted(gt_dir.rglob(name))
    return hits[0] if hits else None


def _mean_row(rows: list[dict], columns: list[str], label: str) -> dict:
    row = {columns[0]: label}
    for c in columns[1:]:
        vals = [r[c] for r in rows if isinstance(r.get(c), float)]
        row[c] = sum(vals) / len(vals) if vals else float("nan")
    return row


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir, out_dir = Path(args.pred), Path(args.gt), Path(args.out)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise ConfigError("--pred and --gt must be existing directories")
    ctx_cols = ["Trial"] + TABLE_COLUMNS
    ges_cols = ["Trial", "Accuracy", "Edit", "IOU"]
    ctx_rows, ges_rows, skipped = [], [], []

    for p in sorted(pred_dir.glob("*.context.csv")):
        trial = _context_trial_id(p)
        g = _find(gt_dir, p.name)
        if g is None:
            skipped.append(p.name)
            log.warning("trial=%s stage=evaluate status=skipped reason=no ground-truth context", trial)
            continue
        ctx_rows.append({"Trial": trial, **state_variable_report(read_context_transcript(g), read_context_transcript(p))})

    for p in sorted(pred_dir.glob("*.gestures.txt")):
        trial = p.name[: -len(".gestures.txt")]
        g = _find(gt_dir, p.name)
        if g is None:
            skipped.append(p.name)
            log.warning("trial=%s stage=evaluate status=skipped reason=no ground-truth gestures", trial)
            continue
        gt_t, pred_t = read_gesture_transcript(g), read_gesture_transcript(p)
        n = max(gt_t.segments[-1].end + 1 if gt_t.segments else 0, pred_t.segments[-1].end + 1 if pred_t.segments else 0)
        s = gesture_scores(gt_t.to_series(n), pred_t.to_series(n))
        ges_rows.append({"Trial": trial, "Accuracy": s.accuracy, "Edit": s.edit, "IOU": s.iou})

    text = []
    if ctx_rows:
        rows = ctx_rows + [_mean_row(ctx_rows, ctx_cols, "Overall")]
        atomic_write_text(out_dir / "context_report.csv", report_csv(rows, ctx_cols))
        text.append("Context state variables (IOU)\n" + report_text(rows, ctx_cols))
    if ges_rows:
        rows = ges_rows + [_mean_row(ges_rows, ges_cols, "Overall")]
        atomic_write_text(out_dir / "gesture_report.csv", report_csv(rows, ges_cols))
        text.append("Gestures\n" + report_text(rows, ges_cols))
    if skipped:
        text.append("Skipped (no ground truth): " + ", ".join(skipped) + "\n")
    report = "\n".join(text)
    atomic_write_text(out_dir / "report.txt", report)
    sys.stdout.write(report)
    if not ctx_rows and not ges_rows:
        log.error("stage=evaluate no prediction had ground truth")
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------- render-timeline


def cmd_render_timeline(args) -> int:
    bands = []
    for path in _expand(args.transcripts):
        if path.name.endswith(".csv"):
            bands += context_bands(_context_trial_id(path), read_context_transcript(path), args.rate)
        else:
            name = path.name[: -len(".gestures.txt")] if path.name.endswith(".gestures.txt") else path.stem
            bands.append(gesture_band(name, read_gesture_transcript(path), args.frame_rate))
    atomic_write_text(args.out, render_svg(bands, title=args.title or ""))
    log.info("stage=render-timeline bands=%d out=%s", len(bands), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    paths = synth_trials(args.task, args.seed, args.n_trials, args.out,
                         n_gestures=args.gestures, n_samples=args.samples)
    for p in paths:
        print(p)
    log.info("stage=synth trials=%d duration_ms=%.1f", len(paths), (time.perf_counter() - t0) * 1e3)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgctx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifests=True):
        if manifests:
            p.add_argument("--manifest", nargs="+", default=[], metavar="PATH", help="trial manifests (globs allowed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="trials processed in parallel")

    p = sub.add_parser("infer-context", help="masks -> context transcripts")
    common(p)
    p.add_argument("--rules", help="rule-set file (default: shipped rules for the trial's task)")
    th = p.add_argument_group("thresholds (override the manifest)")
    defaults = Thresholds()
    for name in Thresholds.field_names():
        kind = type(getattr(defaults, name))
        th.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, metavar=kind.__name__.upper(),
                        help=f"default {getattr(defaults, name)}")
    p.set_defaults(func=cmd_infer_context)

    p = sub.add_parser("translate", help="context transcripts -> gesture transcripts and traces")
    common(p)
    p.add_argument("--context", nargs="+", metavar="CSV", help="context transcripts not tied to a manifest")
    p.add_argument("--context-dir", help="where <trial>.context.csv files live (default: --out)")
    p.add_argument("--grammar", help="grammar file (default: shipped grammar for the task)")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--frame-rate", type=float, default=30.0, help="native frame rate for --context files")
    p.add_argument("--rate", type=float, default=3.0, help="context sample rate for --context files")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory with predicted transcripts")
    p.add_argument("--gt", required=True, help="directory searched (recursively) for ground truth")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-timeline", help="SVG timeline of transcripts")
    p.add_argument("transcripts", nargs="*", help="gesture (.txt) or context (.csv) transcripts")
    p.add_argument("--out", required=True, help="SVG file")
    p.add_argument("--frame-rate", type=float, default=30.0)
    p.add_argument("--rate", type=float, default=3.0, help="context sample rate")
    p.add_argument("--title")
    p.set_defaults(func=cmd_render_timeline)

    p = sub.add_parser("synth", help="generate synthetic trials with ground truth")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-trials", type=int, default=1)
    p.add_argument("--gestures", type=int, default=8, help="gestures per walk")
    p.add_argument("--samples", type=int, help="exact output samples per trial (overrides --gestures)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, SynthError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
