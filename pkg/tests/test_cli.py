import json

import numpy as np
import pytest

from ggpfn import cli
from ggpfn.checkpoint import load_checkpoint
from ggpfn.gradcheck import OP_CASES
from ggpfn.volume_io import VolumeGrid, load_volume, save_volume


def synth(out_dir, seed=0, n=3):
    return cli.main(["synth", "--n", str(n), "--extents", "16,32,32", "--seed", str(seed), "--out-dir", str(out_dir)])


def train_args(run_dir, data_dir, *extra):
    return ["train", "--set", f"manifest={data_dir / 'manifest.json'}", "--set", f"out_dir={run_dir}",
            "--set", "epochs=1,2,1", "--set", "batch_sizes=2,2,2", "--set", "val_interval=1", *extra]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert synth(d) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("run")
    assert cli.main(train_args(d, data_dir)) == 0
    return d


# ---------------------------------------------------------------- synth

def test_synth_writes_volumes_and_manifest(data_dir, tmp_path):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert [e["seed"] for e in manifest["volumes"]] == [0, 1, 2]
    for e in manifest["volumes"]:
        vg = load_volume(data_dir / e["path"])
        assert vg.extents == (16, 32, 32) and vg.labels is not None
    assert synth(tmp_path) == 0
    for e in manifest["volumes"]:
        assert (tmp_path / e["path"]).read_bytes() == (data_dir / e["path"]).read_bytes()


def test_synth_bad_extents(tmp_path):
    assert cli.main(["synth", "--extents", "16,32", "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- train

def test_train_writes_artifacts(run_dir):
    assert (run_dir / "best.ckpt").exists() and (run_dir / "last.ckpt").exists()
    records = [json.loads(x) for x in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in records[1:]] == ["global", "pfn", "pfn", "finetune"]
    _, meta = load_checkpoint(run_dir / "last.ckpt")
    assert meta["stage"] == "finetune" and meta["stage_index"] == 2
    best, meta = load_checkpoint(run_dir / "best.ckpt")
    assert best.config is not None and 0 <= meta["val_dsc"] <= 1


def test_train_unknown_key_names_it(tmp_path, data_dir, capsys):
    code = cli.main(train_args(tmp_path, data_dir, "--set", "learning_rate=3"))
    assert code == cli.EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_train_config_file_and_parse_errors(tmp_path, data_dir, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# smoke run\nmanifest = {data_dir / 'manifest.json'}\nout_dir = {tmp_path / 'o'}\n"
                   "epochs = 1, 0, 0   # global only\nbatch_sizes = 2,2,2\nval_interval = 1\nhg = 32\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--set", "epochs=1,2"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(cfg), "--set", "T=three"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "epochs" in err and "T" in err


def test_train_single_stage_and_resume(tmp_path, data_dir):
    assert cli.main(train_args(tmp_path, data_dir, "--stage", "global")) == 0
    records = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert {r["stage"] for r in records[1:]} == {"global"}
    assert cli.main(train_args(tmp_path, data_dir, "--stage", "pfn")) == 0
    first = load_checkpoint(tmp_path / "last.ckpt")[1]
    assert (first["stage"], first["epoch"]) == ("pfn", 2)
    resumed = tmp_path / "resumed"
    args = train_args(resumed, data_dir, "--stage", "pfn", "--resume", str(tmp_path / "last.ckpt"))
    args[args.index("epochs=1,2,1")] = "epochs=1,4,1"
    assert cli.main(args) == 0
    records = [json.loads(x) for x in (resumed / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records if r["stage"] == "pfn"] == [3, 4]


# ---------------------------------------------------------------- infer and eval

def test_infer_single_view_and_determinism(run_dir, data_dir, tmp_path):
    vol = data_dir / "phantom_000.raw"
    args = ["infer", "--volume", str(vol), "--model", f"axial={run_dir / 'best.ckpt'}"]
    assert cli.main(args + ["--out", str(tmp_path / "a.raw")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.raw")]) == 0
    a = load_volume(tmp_path / "a.raw")
    assert a.extents == (16, 32, 32) and a.labels is None
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()


def test_infer_three_views_per_view_files(run_dir, data_dir, tmp_path):
    ck = run_dir / "best.ckpt"
    code = cli.main(["infer", "--volume", str(data_dir / "phantom_001.raw"), "--views", "axial,sagittal,coronal",
                     "--model", f"axial={ck}", "--model", f"sagittal={ck}", "--model", f"coronal={ck}",
                     "--weights", "0.4,0.3,0.3", "--out", str(tmp_path / "p.raw"), "--per-view"])
    assert code == 0
    parts = [load_volume(tmp_path / f"p_{v}.raw").intensities for v in ("axial", "sagittal", "coronal")]
    fused = load_volume(tmp_path / "p.raw").intensities
    np.testing.assert_allclose(fused, 0.4 * parts[0] + 0.3 * parts[1] + 0.3 * parts[2], atol=1e-6)


def test_infer_missing_view(run_dir, data_dir, tmp_path, capsys):
    code = cli.main(["infer", "--volume", str(data_dir / "phantom_000.raw"), "--views", "axial,sagittal,coronal",
                     "--model", f"axial={run_dir / 'best.ckpt'}", "--out", str(tmp_path / "x.raw")])
    assert code == cli.EXIT_CONFIG
    assert "sagittal" in capsys.readouterr().err


def test_eval_dsc_and_pr(data_dir, tmp_path):
    gt = load_volume(data_dir / "phantom_000.raw")
    perfect = VolumeGrid(gt.labels.astype(np.float32), gt.spacing)
    save_volume(perfect, tmp_path / "perfect.raw")
    save_volume(VolumeGrid(1 - perfect.intensities, gt.spacing), tmp_path / "inverse.raw")
    base = ["eval", "--gt", str(data_dir / "phantom_000.raw")]
    assert cli.main(base + ["--pred", str(tmp_path / "perfect.raw"), "--out", str(tmp_path / "m.json"),
                            "--pr", str(tmp_path / "pr.tsv"), "--n-thresholds", "11"]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["dsc"] == 1.0
    assert len((tmp_path / "pr.tsv").read_text().splitlines()) == 11
    assert cli.main(base + ["--pred", str(tmp_path / "inverse.raw"), "--out", str(tmp_path / "n.json")]) == 0
    assert json.loads((tmp_path / "n.json").read_text())["dsc"] == 0.0


def test_eval_extent_mismatch(data_dir, tmp_path):
    save_volume(VolumeGrid(np.zeros((16, 32, 31), dtype=np.float32)), tmp_path / "bad.raw")
    code = cli.main(["eval", "--pred", str(tmp_path / "bad.raw"), "--gt", str(data_dir / "phantom_000.raw"),
                     "--out", str(tmp_path / "m.json")])
    assert code == cli.EXIT_DATA


def test_missing_input_file_is_data_error(tmp_path):
    code = cli.main(["eval", "--pred", str(tmp_path / "nope.raw"), "--gt", str(tmp_path / "nope.raw"),
                     "--out", str(tmp_path / "m.json")])
    assert code == cli.EXIT_DATA


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_ops_report(capsys):
    assert cli.main(["gradcheck", "--ops-only", "--repeats", "2"]) == 0
    out = capsys.readouterr().out
    for name in OP_CASES:
        assert name in out
    assert "gradcheck passed" in out


def test_gradcheck_detects_injected_fault(capsys):
    code = cli.main(["gradcheck", "--ops-only", "--repeats", "2", "--inject", "broken_sigmoid"])
    assert code == cli.EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_usage_errors():
    assert cli.main(["train", "--stage", "bogus"]) == cli.EXIT_CONFIG
    assert cli.main([]) == cli.EXIT_CONFIG
    assert cli.main(["--help"]) == 0
