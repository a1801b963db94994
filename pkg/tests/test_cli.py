import json

import pytest

from rfbnet import __version__
from rfbnet.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "4", "synth", "--count", "6", "--out", str(root / "data")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"model": {"widths": [8, 8, 16], "bottleneck": 4}, "train": {"batch_size": 3}}))
    assert main(["--strict-deterministic", "train", "--data", str(root / "data"), "--config", str(cfg),
                 "--epochs", "2", "--out", str(root / "run")]) == 0
    return root


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["train"]["base_lr"] == 4e-3 and cfg["train"]["milestones"] == [150, 200]
    assert cfg["model"]["head"] == "rfb" and cfg["scene"]["image_size"] == 64


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as e:
        main(["synth", "--count", "1", "--out", "x", "--colour", "red"])
    assert e.value.code == 1


def test_synth_outputs_and_manifest(workspace):
    data = workspace / "data"
    assert (data / "annotations.jsonl").exists() and (data / "manifest.json").exists()
    run = json.loads((data / "run_manifest.json").read_text())
    assert run["command"] == "synth" and run["seed"] == 4 and run["version"] == __version__
    assert {"started", "finished", "artifacts", "config"} <= set(run)


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "final" / "manifest.json").exists()
    assert (run / "history.csv").read_text().startswith("epoch,loss_cls,loss_loc,lr,wallclock_s")
    assert json.loads((run / "run_manifest.json").read_text())["config"]["train"]["total_epochs"] == 2


def test_strict_deterministic_identical_artifacts(workspace, tmp_path):
    assert main(["--strict-deterministic", "train", "--data", str(workspace / "data"), "--config",
                 str(workspace / "cfg.json"), "--epochs", "2", "--out", str(tmp_path / "again")]) == 0
    a, b = workspace / "run" / "final", tmp_path / "again" / "final"
    for blob in sorted((a / "params").iterdir()):
        assert blob.read_bytes() == (b / "params" / blob.name).read_bytes(), blob.name
    strip = lambda h: [{k: v for k, v in r.items() if k != "wallclock_s"} for r in h]
    ha = json.loads((a / "manifest.json").read_text())["history"]
    hb = json.loads((b / "manifest.json").read_text())["history"]
    assert strip(ha) == strip(hb)


def test_inspect_prints_rf(workspace, capsys):
    assert main(["inspect", "--ckpt", str(workspace / "run" / "final")]) == 0
    out = capsys.readouterr().out
    assert "max RF 15x15" in out and "max RF 13x13" in out


def test_inspect_fresh_checkpoint(tmp_path, capsys):
    assert main(["init", "--out", str(tmp_path / "fresh")]) == 0
    assert main(["inspect", "--ckpt", str(tmp_path / "fresh" / "init")]) == 0
    assert "block middle   rfb" in capsys.readouterr().out


@pytest.mark.parametrize("mode", ["voc07", "allpoints", "coco-avg"])
def test_eval_checkpoint(workspace, mode):
    out = workspace / f"eval_{mode}.json"
    dets = workspace / f"dets_{mode}.jsonl"
    assert main(["eval", "--ckpt", str(workspace / "run" / "final"), "--data", str(workspace / "data"),
                 "--mode", mode, "--out", str(out), "--write-dets", str(dets)]) == 0
    res = json.loads(out.read_text())
    assert 0.0 <= res["map"] <= 1.0
    assert out.with_name(out.name + ".manifest.json").exists()
    row = json.loads(dets.read_text().splitlines()[0])
    assert set(row) == {"image_id", "class", "score", "xmin", "ymin", "xmax", "ymax"}


def test_eval_empty_detections(workspace, tmp_path):
    empty = tmp_path / "none.jsonl"
    empty.write_text("")
    assert main(["eval", "--dets", str(empty), "--data", str(workspace / "data"), "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["map"] == 0.0


def test_io_error_exit_code_and_cleanup(workspace, tmp_path):
    out = tmp_path / "new" / "r.json"
    code = main(["eval", "--dets", str(tmp_path / "missing.jsonl"), "--data", str(workspace / "data"), "--out", str(out)])
    assert code == 2
    assert not (tmp_path / "new").exists()


def test_validation_error_exit_code(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"milestones": [5, 2]}}))
    code = main(["train", "--data", str(workspace / "data"), "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1 and not (tmp_path / "o").exists()


def test_erf_block_compare(tmp_path, capsys):
    out = tmp_path / "erf"
    assert main(["erf", "--block", "rfb", "--block", "plain", "--channels", "8", "--bottleneck", "2",
                 "--samples", "2", "--seeds", "2", "--out", str(out)]) == 0
    assert (out / "rfb.pgm").exists() and (out / "plain.csv").exists()
    report = json.loads((out / "report.json").read_text())
    assert report["ranking"][0] == "rfb"
    assert "random MSRA initialization" in capsys.readouterr().out


def test_erf_from_checkpoint(workspace, tmp_path):
    out = tmp_path / "erfck"
    assert main(["erf", "--ckpt", str(workspace / "run" / "final"), "--layer", "middle", "--samples", "2",
                 "--out", str(out)]) == 0
    assert json.loads((out / "middle.json").read_text())["footprint_h"] == 15
    assert main(["erf", "--ckpt", str(workspace / "run" / "final"), "--layer", "stem", "--out", str(tmp_path / "x")]) == 1


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--ops", "loss", "--precision", "64"]) == 0
    out = capsys.readouterr().out
    assert "softmax_ce" in out and "FAIL" not in out
    assert main(["gradcheck", "--precision", "32"]) == 1
