import subprocess
import sys

import pytest

from surgctx.cli import main
from surgctx.trial_io import read_context_transcript, read_gesture_transcript


@pytest.fixture(scope="module")
def trial(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--task", "Suturing", "--seed", "1", "--samples", "10", "--out", str(out)]) == 0
    return out / "Suturing_s1_000"


def test_hundred_frames_give_ten_samples(trial, tmp_path):
    assert main(["infer-context", "--manifest", str(trial / "manifest.cfg"), "--out", str(tmp_path)]) == 0
    frames = read_context_transcript(tmp_path / "Suturing_s1_000.context.csv")
    assert [f.timestamp for f in frames] == list(range(10))
    assert frames == read_context_transcript(trial / "gt" / "Suturing_s1_000.context.csv")


def test_full_chain_and_evaluate(trial, tmp_path):
    m = str(trial / "manifest.cfg")
    assert main(["infer-context", "--manifest", m, "--out", str(tmp_path)]) == 0
    assert main(["translate", "--manifest", m, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "Suturing_s1_000.trace.csv").is_file()
    pred = read_gesture_transcript(tmp_path / "Suturing_s1_000.gestures.txt")
    assert pred.segments == read_gesture_transcript(trial / "gt" / "Suturing_s1_000.gestures.txt").segments
    # a prediction without ground truth is skipped, not fatal
    (tmp_path / "orphan.context.csv").write_bytes((tmp_path / "Suturing_s1_000.context.csv").read_bytes())
    rep = tmp_path / "rep"
    assert main(["evaluate", "--pred", str(tmp_path), "--gt", str(trial), "--out", str(rep)]) == 0
    text = (rep / "report.txt").read_text()
    assert "Skipped (no ground truth): orphan.context.csv" in text
    rows = (rep / "context_report.csv").read_text().splitlines()
    assert rows[-1].startswith("Overall,1.0000")
    assert (rep / "gesture_report.csv").read_text().splitlines()[1] == "Suturing_s1_000,100.0000,100.0000,1.0000"


def test_render_timeline(trial, tmp_path):
    out = tmp_path / "t.svg"
    gt = trial / "gt"
    assert main(["render-timeline", str(gt / "Suturing_s1_000.gestures.txt"),
                 str(gt / "Suturing_s1_000.context.csv"), "--out", str(out)]) == 0
    assert out.read_text().count('data-name="') == 6


def test_config_error_exit_3(trial, tmp_path):
    bad = tmp_path / "bad.rules"
    bad.write_text("task = Suturing\n[left_hold]\n2: D(LG, Q) < 1\n")
    args = ["infer-context", "--manifest", str(trial / "manifest.cfg"), "--rules", str(bad), "--out", str(tmp_path)]
    assert main(args) == 3
    assert main(["synth", "--task", "KnotTying", "--out", str(tmp_path)]) == 3
    assert main(["infer-context", "--manifest", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 3


def test_data_error_exit_4(trial, tmp_path):
    bad = tmp_path / "x.context.csv"
    bad.write_text("sample_index,LH,LC,RH,RC,S5\n0,1,0,0,0,0\n")
    assert main(["translate", "--context", str(bad), "--task", "Suturing", "--out", str(tmp_path)]) == 4


def test_missing_mask_exit_4(trial, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(trial, copy)
    (copy / "masks" / "Needle" / "00042.pgm").unlink()
    assert main(["infer-context", "--manifest", str(copy / "manifest.cfg"), "--out", str(tmp_path)]) == 4


def test_validation_failure_exit_5(tmp_path):
    from importlib import resources

    text = (resources.files("surgctx") / "data" / "grammars" / "suturing.grammar").read_text()
    g = tmp_path / "g.grammar"
    g.write_text(text.replace("G11, samples=1", "G11, samples=0"))
    ctx = tmp_path / "c.context.csv"
    ctx.write_text("sample_index,LH,LC,RH,RC,S5\n0,0,0,0,0,0\n1,0,0,0,0,0\n")
    assert main(["translate", "--context", str(ctx), "--grammar", str(g), "--out", str(tmp_path)]) == 5
    assert (tmp_path / "c.gestures.txt").read_text() == "0 19 G1\n"


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "surgctx.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "infer-context" in r.stdout
