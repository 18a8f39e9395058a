import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from mnaft.cli import main
from mnaft.pipeline import sha256

TINY = """\
seed = 0
[model]
d_model = 16
n_heads = 2
d_ffn = 16
vision_blocks = 1
language_blocks = 2
[suite]
train = 48
score = 6
eval = 12
[base]
steps = 15
warmup = 3
[finetune]
steps = 8
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == 0 else None)


def test_full_pipeline_end_to_end(conf, tmp_path, capsys):
    run = tmp_path / "run"
    common = ("--config", str(conf), "--out", str(run))
    code, s = _run(capsys, "gen-data", *common)
    assert code == 0 and s == {"files": 9, "stage": "gen-data", "tasks": 3}
    assert _run(capsys, "train-base", *common)[0] == 0
    code, s = _run(capsys, "score", *common, "--with-oracle")
    assert code == 0 and s["shape"] == [3, 48] and "oracle" in s
    assert _run(capsys, "partition", *common)[0] == 0
    for mode in ("mnaft", "full"):
        code, s = _run(capsys, "finetune", *common, "--mode", mode, "--task", "1")
        assert code == 0 and s["frozen_violations"] == 0
    code, s = _run(capsys, "eval", *common)
    assert code == 0 and s["checkpoints"] == ["base", "full_t1", "mnaft_t1"]
    code, s = _run(capsys, "report", *common)
    assert code == 0
    for svg in (run / "report").glob("*.svg"):
        ET.parse(svg)
    ev = json.loads((run / "eval.json").read_text())
    assert set(ev["forgetting"]) == {"full_t1", "mnaft_t1"} and len(ev["results"]) == 9
    assert (run / "manifests" / "finetune-mnaft_t1.json").exists()


def test_gen_data_rerun_is_byte_identical(conf, tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        assert _run(capsys, "gen-data", "--config", str(conf), "--out", str(tmp_path / name))[0] == 0
        hashes.append({p.name: sha256(p) for p in (tmp_path / name / "data").iterdir()})
    assert len(hashes[0]) == 10 and hashes[0] == hashes[1]
    _run(capsys, "gen-data", "--config", str(conf), "--out", str(tmp_path / "c"), "--seed", "1")
    assert sha256(tmp_path / "c" / "data" / "task0_train.tsv") != hashes[0]["task0_train.tsv"]


def test_exit_codes(conf, tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    bad.write_text("[partition]\nepsilon = 2.0\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    bad.write_text("[base]\nsteps = 50\n")  # default warmup exceeds the run
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    # later stage before its inputs exist
    assert main(["train-base", "--config", str(conf), "--out", str(tmp_path / "empty")]) == 2


def test_corrupted_and_tampered_inputs_are_rejected(conf, tmp_path, capsys, caplog):
    common = ["--config", str(conf), "--out", str(tmp_path / "r")]
    for stage in ("gen-data", "train-base"):
        assert main([stage] + common) == 0
    ckpt = tmp_path / "r" / "base.ckpt"
    blob = bytearray(ckpt.read_bytes())
    blob[200] ^= 0x01
    ckpt.write_bytes(bytes(blob))
    assert main(["score"] + common) == 1
    assert "hash mismatch" in caplog.text
    # without the manifest record the container checksum still catches it
    (tmp_path / "r" / "manifests" / "train-base.json").unlink()
    caplog.clear()
    assert main(["score"] + common) == 1
    assert "CRC" in caplog.text


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "mnaft.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train-base", "score", "partition", "finetune", "eval", "report"):
        assert cmd in res.stdout
