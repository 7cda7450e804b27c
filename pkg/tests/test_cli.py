"""Tests for the command-line driver: composition, determinism, exit codes."""

import hashlib
from pathlib import Path

import pytest

from aesleak.cli import main


def _tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# simulate


def test_simulate_writes_run_directory(tmp_path):
    out = tmp_path / "sim"
    rc = main(
        [
            "simulate",
            "--style",
            "four_ttable",
            "--profile",
            "noise-free",
            "--traces",
            "3",
            "--seed",
            "5",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    for name in ("manifest.txt", "profile.txt", "key.txt", "blocks.csv"):
        assert (out / name).is_file()
    assert sorted(p.name for p in out.glob("trace_*.txt")) == [
        "trace_000.txt",
        "trace_001.txt",
        "trace_002.txt",
    ]
    assert len(list(out.glob("obs_*.csv"))) == 3
    manifest = (out / "manifest.txt").read_text()
    assert "command simulate" in manifest
    assert "style four_ttable" in manifest
    assert "seed 5" in manifest
    assert "profile_digest " in manifest


def test_simulate_trace_has_160_data_rows(tmp_path):
    out = tmp_path / "sim"
    assert (
        main(
            ["simulate", "--style", "four_ttable", "--traces", "1", "--seed", "1", "--out", str(out)]
        )
        == 0
    )
    rows = [
        line
        for line in (out / "trace_000.txt").read_text().splitlines()
        if line and not line.startswith("#") and line.endswith("-")
    ]
    assert len(rows) == 160


def test_simulate_is_deterministic(tmp_path):
    args = ["simulate", "--style", "large_ttable", "--traces", "4", "--seed", "77"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


# ---------------------------------------------------------------------------
# attack-ttable


def test_attack_ttable_inline_noise_free():
    rc = main(
        [
            "attack-ttable",
            "--style",
            "four_ttable",
            "--profile",
            "noise-free",
            "--traces",
            "10",
            "--seed",
            "2",
        ]
    )
    assert rc == 0


def test_attack_ttable_from_simulated_directory(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert (
        main(
            [
                "simulate",
                "--style",
                "large_ttable",
                "--profile",
                "noise-free",
                "--traces",
                "8",
                "--seed",
                "11",
                "--out",
                str(sim),
            ]
        )
        == 0
    )
    capsys.readouterr()
    rc = main(["attack-ttable", "--in", str(sim), "--seed", "3", "--out", str(tmp_path / "atk")])
    report = capsys.readouterr().out
    assert rc == 0
    assert "success: True" in report
    assert (tmp_path / "atk" / "recovery_report.txt").is_file()


def test_attack_ttable_rejects_sbox_runs(tmp_path):
    sim = tmp_path / "sim"
    assert (
        main(["simulate", "--style", "sbox", "--traces", "2", "--seed", "1", "--out", str(sim)])
        == 0
    )
    assert main(["attack-ttable", "--in", str(sim)]) == 4


# ---------------------------------------------------------------------------
# attack-sbox


def test_attack_sbox_inline_reports_bits(tmp_path, capsys):
    out = tmp_path / "sbox"
    rc = main(
        [
            "attack-sbox",
            "--traces",
            "320",
            "--seed",
            "6",
            "--mode",
            "relative",
            "--out",
            str(out),
        ]
    )
    report = capsys.readouterr().out
    assert rc in (0, 2)
    assert "resolved positions" in report
    assert "rank-1 correct positions" in report
    csv_lines = (out / "correlations.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "position,key_guess,correlation"
    assert len(csv_lines) == 1 + 16 * 256


def test_attack_sbox_correlations_deterministic(tmp_path):
    args = ["attack-sbox", "--traces", "120", "--seed", "9", "--mode", "absolute"]
    assert main(args + ["--out", str(tmp_path / "a")]) in (0, 2)
    assert main(args + ["--out", str(tmp_path / "b")]) in (0, 2)
    a = (tmp_path / "a" / "correlations.csv").read_bytes()
    b = (tmp_path / "b" / "correlations.csv").read_bytes()
    assert a == b


def test_attack_sbox_insufficient_data():
    assert main(["attack-sbox", "--traces", "4", "--seed", "1"]) == 3


# ---------------------------------------------------------------------------
# calibrate


def test_calibrate_noise_free_exact(capsys):
    rc = main(
        ["calibrate", "--style", "four_ttable", "--profile", "noise-free", "--traces", "40", "--seed", "3"]
    )
    report = capsys.readouterr().out
    assert rc == 0
    tp_line = next(l for l in report.splitlines() if l.startswith("true_positive_rate"))
    assert tp_line.split() == ["true_positive_rate", "100.0", "100.0", "0.0", "PASS"]
    assert "calibration: PASS" in report


def test_calibrate_published_four_ttable(capsys):
    rc = main(["calibrate", "--style", "four_ttable", "--traces", "120", "--seed", "2"])
    report = capsys.readouterr().out
    assert rc == 0
    assert report.count("PASS") == 5


# ---------------------------------------------------------------------------
# success-curve


def test_success_curve_rows_and_determinism(tmp_path, capsys):
    args = [
        "success-curve",
        "--style",
        "large_ttable",
        "--profile",
        "noise-free",
        "--traces",
        "4,6",
        "--trials",
        "2",
        "--seed",
        "4",
    ]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "curve.csv").read_text()
    b = (tmp_path / "b" / "curve.csv").read_text()
    assert a == b
    lines = a.strip().splitlines()
    assert lines[0] == "style,variant,traces,successes,trials,rate"
    assert len(lines) == 1 + 2 * 2  # two counts x (ordered, unordered)
    assert sum(line.startswith("large_ttable,ordered") for line in lines[1:]) == 2


# ---------------------------------------------------------------------------
# exit codes


def test_config_errors_exit_4(tmp_path):
    assert main(["attack-ttable", "--style", "bogus"]) == 4
    assert main(["attack-ttable", "--style", "sbox"]) == 4
    assert main(["simulate", "--style", "sbox"]) == 4
    assert main(["attack-ttable", "--in", str(tmp_path / "missing")]) == 4
    assert main(["success-curve", "--style", "four_ttable", "--traces", "x,y"]) == 4
    assert main(["--nonsense"]) == 4


def test_profile_file_roundtrip(tmp_path):
    from aesleak.noise import table1_large_ttable

    path = tmp_path / "prof.txt"
    path.write_text(table1_large_ttable().to_text())
    rc = main(
        [
            "attack-ttable",
            "--style",
            "large_ttable",
            "--profile",
            str(path),
            "--traces",
            "12",
            "--seed",
            "8",
        ]
    )
    assert rc in (0, 2)
