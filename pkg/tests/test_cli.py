from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from turnforge.cli import expand_inputs, main
from turnforge.synth import SynthConfig, generate_corpus
from turnforge.transcript_io import tokens_to_csv

DATA = Path(__file__).parent / "data"


def write_corpus(tmp: Path, n=3, seed=0, n_turns=30, effects=None) -> Path:
    src = tmp / "in"
    src.mkdir()
    corpus = generate_corpus(SynthConfig(seed=seed, n_turns=n_turns), n, effects, ["good", "bad"] if effects else None)
    for s in corpus.streams:
        (src / f"{s.conversation_id}.csv").write_text(tokens_to_csv(s.tokens), encoding="utf-8")
    if effects:
        with open(tmp / "grouping.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["conversation_id", "speaker_id", "group"])
            w.writeheader()
            w.writerows(corpus.grouping_rows())
    return src


def read_manifest(out: Path) -> dict:
    return json.loads((out / "manifest.json").read_text())


def snapshot(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def test_segment_three_good_inputs(tmp_path):
    src = write_corpus(tmp_path)
    out = tmp_path / "out"
    assert main(["--quiet", "segment", str(src), "-o", str(out), "--model", "backbiter"]) == 0
    assert sorted(p.name for p in out.glob("*.jsonl")) == [f"synth-000{i}.backbiter.jsonl" for i in range(3)]
    m = read_manifest(out)
    assert [c["status"] for c in m["conversations"]] == ["ok"] * 3
    assert m["command"] == "segment" and m["config"]["model"] == "backbiter" and "wall_time_s" in m


def test_segment_all_models_default(tmp_path):
    src = write_corpus(tmp_path, n=1)
    out = tmp_path / "out"
    assert main(["--quiet", "segment", str(src), "-o", str(out)]) == 0
    assert {p.name.split(".")[1] for p in out.glob("*.jsonl")} == {"audiophile", "cliffhanger", "backbiter"}


def test_one_corrupt_input_isolated(tmp_path):
    src = write_corpus(tmp_path)
    (src / "synth-0001.csv").write_text("conversation_id,speaker_id,text,start_ms,stop_ms\nx,A,hi,500,100\n")
    out = tmp_path / "out"
    assert main(["--quiet", "segment", str(src), "-o", str(out), "--model", "audiophile"]) == 1
    assert len(list(out.glob("*.jsonl"))) == 2
    m = read_manifest(out)
    assert len(m["conversations"]) == 3
    bad = [c for c in m["conversations"] if c["status"] == "error"]
    assert len(bad) == 1 and bad[0]["input"].endswith("synth-0001.csv")
    assert "NegativeDuration" in bad[0]["reason"]


def test_monologue_fails_per_conversation(tmp_path):
    src = write_corpus(tmp_path, n=1)
    (src / "mono.csv").write_text("conversation_id,speaker_id,text,start_ms,stop_ms\nm,A,hi,0,100\n")
    out = tmp_path / "out"
    assert main(["--quiet", "intervals", str(src), "-o", str(out)]) == 1
    reasons = [c["reason"] for c in read_manifest(out)["conversations"] if c["status"] == "error"]
    assert len(reasons) == 1 and "NotDyadic" in reasons[0]


def test_empty_input_dir_is_config_error(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["intervals", str(tmp_path / "empty"), "-o", str(tmp_path / "out")]) == 2
    assert "no input transcripts" in capsys.readouterr().err


def test_bad_flags_exit_2(tmp_path):
    src = write_corpus(tmp_path, n=1)
    assert main(["segment", str(src), "--model", "nonsense"]) == 2
    assert main(["segment", str(src), "--jobs", "0"]) == 2
    assert main(["segment", str(src), "--cues", str(tmp_path / "missing.json")]) == 2
    assert main(["intervals", str(src), "--grid-ms", "abc"]) == 2
    assert main([]) == 2


def test_intervals_outputs(tmp_path):
    src = write_corpus(tmp_path, n=4, n_turns=80)
    out = tmp_path / "out"
    assert main(["--quiet", "intervals", str(src), "-o", str(out), "--bin-width", "100"]) == 0
    with open(out / "histogram.csv") as fh:
        hist = list(csv.DictReader(fh))
    lefts = [int(r["bin_left_ms"]) for r in hist]
    assert len(hist) == (lefts[-1] + 100 - lefts[0]) // 100
    assert all(int(r["bin_right_ms"]) - int(r["bin_left_ms"]) == 100 for r in hist)
    with open(out / "intervals.csv") as fh:
        rows = list(csv.DictReader(fh))
    n_trans = sum(r["kind"] in ("Gap", "Overlap") for r in rows)
    assert sum(int(r["count"]) for r in hist) == n_trans
    summary = json.loads((out / "summary.json").read_text())
    assert {"gap_share", "overlap_share", "median_gap_ms", "median_overlap_ms",
            "median_signed_transition_ms"} <= set(summary)


def test_features_and_topics(tmp_path):
    src = write_corpus(tmp_path, n=2)
    topics = tmp_path / "topics.json"
    topics.write_text(json.dumps({"space": ["rocket", "planet"]}))
    out = tmp_path / "out"
    assert main(["--quiet", "features", str(src), "-o", str(out), "--topics", str(topics)]) == 0
    with open(out / "features.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {"weight", "decile_words_per_second", "pause_s"} <= set(rows[0])
    with open(out / "topics.csv") as fh:
        trows = list(csv.DictReader(fh))
    assert {r["topic"] for r in trows} == {"space"} and len(trows) == 2


def test_stats_end_to_end_and_rerun(tmp_path):
    src = write_corpus(tmp_path, n=60, n_turns=40, effects={"good": {"words_per_second": 0.5}})
    feats = tmp_path / "feat"
    assert main(["--quiet", "features", str(src), "-o", str(feats)]) == 0
    runs = []
    for k in range(2):
        out = tmp_path / f"stats{k}"
        code = main(["--quiet", "stats", str(feats / "features.csv"), "--grouping", str(tmp_path / "grouping.csv"),
                     "-o", str(out), "--group-order", "good,bad"])
        assert code == 0
        runs.append(snapshot(out))
    assert runs[0] == runs[1]
    report = {r["feature"]: r for r in json.loads(runs[0]["report.json"])}
    assert report["words_per_second"]["p_adj_mean"] < 0.05
    assert report["words_per_second"]["diff"] > 0
    assert b"good - bad" in runs[0]["report.txt"]


def test_stats_single_group_exit_2(tmp_path):
    src = write_corpus(tmp_path, n=4, effects={"good": {"words_per_second": 0.1}})
    feats = tmp_path / "feat"
    main(["--quiet", "features", str(src), "-o", str(feats)])
    one = tmp_path / "one.csv"
    rows = list(csv.DictReader(open(tmp_path / "grouping.csv")))
    with open(one, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["conversation_id", "speaker_id", "group"])
        w.writeheader()
        w.writerows({**r, "group": "x"} for r in rows)
    assert main(["--quiet", "stats", str(feats / "features.csv"), "--grouping", str(one), "-o", str(tmp_path / "s")]) == 2


def test_stats_unknown_speaker_exit_2(tmp_path):
    src = write_corpus(tmp_path, n=4, effects={"good": {"words_per_second": 0.1}})
    feats = tmp_path / "feat"
    main(["--quiet", "features", str(src), "-o", str(feats)])
    with open(tmp_path / "grouping.csv", "a") as fh:
        fh.write("ghost,ghost-A,good\n")
    code = main(["--quiet", "stats", str(feats / "features.csv"), "--grouping", str(tmp_path / "grouping.csv"),
                 "-o", str(tmp_path / "s")])
    assert code == 2


def test_parallel_output_identical(tmp_path):
    src = write_corpus(tmp_path, n=6)
    snaps = []
    for jobs in (1, 4):
        out = tmp_path / f"out{jobs}"
        assert main(["--quiet", "report", str(src), "-o", str(out), "--jobs", str(jobs)]) == 0
        snaps.append(snapshot(out))
        conv = read_manifest(out)["conversations"]
        assert [c["conversation_id"] for c in conv] == [f"synth-000{i}" for i in range(6)]
    assert snaps[0] == snaps[1]
    assert {"intervals.csv", "histogram.csv", "summary.json", "features.csv"} <= set(snaps[0])


def test_config_file_and_flag_precedence(tmp_path):
    src = write_corpus(tmp_path, n=1)
    cfg = tmp_path / "run.toml"
    cfg.write_text('quiet = true\n[segment]\nmodel = "cliffhanger"\ngrid_ms = 20\n')
    out = tmp_path / "a"
    assert main(["--config", str(cfg), "segment", str(src), "-o", str(out)]) == 0
    assert [p.name for p in out.glob("*.jsonl")] == ["synth-0000.cliffhanger.jsonl"]
    assert read_manifest(out)["config"]["grid_ms"] == 20
    out = tmp_path / "b"
    assert main(["--config", str(cfg), "segment", str(src), "-o", str(out), "--model", "audiophile"]) == 0
    assert [p.name for p in out.glob("*.jsonl")] == ["synth-0000.audiophile.jsonl"]


def test_config_file_errors(tmp_path):
    src = write_corpus(tmp_path, n=1)
    bad = tmp_path / "bad.toml"
    bad.write_text("[segment]\nbogus_key = 1\n")
    assert main(["--config", str(bad), "segment", str(src)]) == 2
    broken = tmp_path / "broken.toml"
    broken.write_text("model = \n")
    assert main(["--config", str(broken), "segment", str(src)]) == 2


def test_cue_env_var(tmp_path, monkeypatch):
    cues = json.loads((Path(__file__).parents[1] / "src/turnforge/data/cues.json").read_text())
    cues["backchannel_cues"] = ["zzz"]
    path = tmp_path / "cues.json"
    path.write_text(json.dumps(cues))
    src = tmp_path / "in"
    src.mkdir()
    (src / "c.csv").write_text(
        "conversation_id,speaker_id,text,start_ms,stop_ms\n"
        "c,A,one,0,400\nc,A,two,400,800\nc,B,yeah.,500,600\nc,A,three.,800,1200\nc,B,fine.,1500,2000\n")
    out = tmp_path / "default"
    main(["--quiet", "segment", str(src), "-o", str(out), "--model", "backbiter"])
    base = [json.loads(x) for x in (out / "c.backbiter.jsonl").read_text().splitlines()]
    monkeypatch.setenv("TURNFORGE_CUES", str(path))
    out = tmp_path / "env"
    main(["--quiet", "segment", str(src), "-o", str(out), "--model", "backbiter"])
    env = [json.loads(x) for x in (out / "c.backbiter.jsonl").read_text().splitlines()]
    assert any(t["backchannels"] for t in base)
    assert not any(t["backchannels"] for t in env)


def test_intro_cliffhanger_golden_via_cli(tmp_path):
    out = tmp_path / "out"
    assert main(["--quiet", "segment", str(DATA / "intro_tokens.csv"), "-o", str(out), "--model", "cliffhanger"]) == 0
    assert (out / "intro.cliffhanger.jsonl").read_bytes() == (DATA / "intro.cliffhanger.jsonl").read_bytes()


def test_synth_subcommand(tmp_path):
    out = tmp_path / "syn"
    argv = ["--quiet", "synth", "-o", str(out), "-n", "3", "--seed", "5", "--group-effect", "good:words_per_second=0.1",
            "--groups", "good,bad"]
    assert main(argv) == 0
    assert sorted(p.name for p in out.iterdir()) == ["grouping.csv", "transcripts", "truth"]
    assert sorted(p.name for p in (out / "transcripts").iterdir()) == [f"synth-000{i}.csv" for i in range(3)]
    truth = json.loads((out / "truth" / "synth-0000.truth.json").read_text())
    assert {"turns", "signed_intervals", "backchannels", "speaker_groups"} <= set(truth)
    first = snapshot(out / "transcripts"), snapshot(out / "truth")
    assert main(argv) == 0 and (snapshot(out / "transcripts"), snapshot(out / "truth")) == first
    bigger = tmp_path / "syn12"
    assert main(argv[:3] + [str(bigger), "-n", "12"] + argv[6:]) == 0
    assert main(["--quiet", "report", str(bigger / "transcripts"), "-o", str(tmp_path / "rep"),
                 "--grouping", str(bigger / "grouping.csv")]) == 0
    assert main(["synth", "-o", str(out), "--group-effect", "nocolon"]) == 2
    assert main(["synth", "-o", str(out), "--group-effect", "g:volume=1"]) == 2
    assert main(["synth", "-o", str(out), "--bc-prob", "2"]) == 2


def test_expand_inputs(tmp_path):
    src = write_corpus(tmp_path, n=3)
    (src / "notes.txt").write_text("x")
    assert [p.name for p in expand_inputs([str(src)])] == [f"synth-000{i}.csv" for i in range(3)]
    assert len(expand_inputs([str(src / "*.csv"), str(src / "synth-0000.csv")])) == 3


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "turnforge", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("turnforge ")
