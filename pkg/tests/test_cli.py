import subprocess
import sys

import pytest

from ramlab.cli import main
from ramlab.experiments import read_ledger

TINY = """[data]
train_count = 4
val_count = 3
img_h = 16
img_w = 16
classes = 4
min_shapes = 1
max_shapes = 2
[model]
mixers = pool, global
patch = 4
embed_dim = 8
layers = 1
window = 2
[attention]
modes = baseline, ram
[train]
epochs = 1
batch_size = 2
[attack]
methods = dag
targets = permute, strip
sizes = 8
steps = 3
images = 2
save_images = true
[rf]
images = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "exp.cfg").write_text(TINY)
    out = root / "run"
    args = ["--config", str(root / "exp.cfg"), "--out", str(out), "-q"]
    for cmd in ("gen-data", "train", "attack", "rf"):
        assert main([cmd] + args) == 0, cmd
    return root, out, args


def test_pipeline_outputs(workdir):
    _, out, _ = workdir
    assert (out / "resolved.cfg").is_file()
    assert (out / "data" / "val" / "manifest.tsv").is_file()
    assert {p.name for p in (out / "models").glob("*.ckpt")} == {
        "pool.ckpt", "global-baseline.ckpt", "global-ram-T0.3-p0.5.ckpt"}
    rows = read_ledger(out / "ledger.csv")
    assert len(rows) == 6
    for tag in ("pool", "global-baseline", "global-ram-T0.3-p0.5"):
        assert sorted(r["target"] for r in rows if r["model_tag"] == tag) == ["permute", "strip"]
    adir = out / "attacks" / rows[0]["run_id"]
    assert sorted(p.name for p in adir.iterdir()) == ["img0000.json", "img0000.ppm",
                                                     "img0001.json", "img0001.ppm"]
    assert (out / "rf" / "radius.csv").read_text().count("\n") == 4
    assert (out / "rf" / "pool.pgm").is_file()


def test_report(workdir, capsys):
    _, out, args = workdir
    assert main(["report"] + args) == 0
    text = capsys.readouterr().out
    assert "Δ global-baseline − global-ram-T0.3-p0.5" in text
    assert (out / "report.md").read_text().strip() == text.strip()


def test_rerun_is_byte_identical(workdir, tmp_path):
    root, out, args = workdir
    before = (out / "ledger.csv").read_bytes()
    assert main(["attack"] + args) == 0
    assert (out / "ledger.csv").read_bytes() == before
    statuses = (out / "reruns.csv").read_text().split()
    assert statuses[0] == "run_id,status" and all(s.endswith(",identical") for s in statuses[1:])
    # a fresh output directory reproduces the same rows
    fresh = ["--config", str(root / "exp.cfg"), "--out", str(tmp_path / "again"), "-q"]
    for cmd in ("gen-data", "train", "attack"):
        assert main([cmd] + fresh) == 0
    assert (tmp_path / "again" / "ledger.csv").read_bytes() == before


def test_seed_flag_changes_run_ids(workdir, tmp_path):
    root, out, _ = workdir
    args = ["--config", str(root / "exp.cfg"), "--out", str(tmp_path / "s7"), "--seed", "7", "-q"]
    for cmd in ("gen-data", "train", "attack"):
        assert main([cmd] + args) == 0
    a = {r["run_id"] for r in read_ledger(out / "ledger.csv")}
    b = read_ledger(tmp_path / "s7" / "ledger.csv")
    assert not a & {r["run_id"] for r in b} and b[0]["seed"] == "7"


def test_validation_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\ndepth = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    empty = tmp_path / "empty.cfg"
    empty.write_text("[data]\ntrain_count = 0\n")
    assert main(["gen-data", "--config", str(empty), "--out", str(tmp_path / "o")]) == 1
    assert "empty dataset" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "nothing")]) == 1
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--seed", "-1"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_runtime_errors_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "sub"), "-q"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ramlab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "attack", "rf", "report"):
        assert cmd in res.stdout


def test_parallel_jobs_match_serial(workdir, tmp_path):
    root, out, _ = workdir
    args = ["--config", str(root / "exp.cfg"), "--out", str(tmp_path / "par"), "-q", "--jobs", "2"]
    for cmd in ("gen-data", "train", "attack"):
        assert main([cmd] + args) == 0
    assert (tmp_path / "par" / "ledger.csv").read_bytes() == (out / "ledger.csv").read_bytes()
