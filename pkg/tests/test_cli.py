import numpy as np
import pytest

from pcgnet.cli import run
from pcgnet.features import MfccHeatMap, ppm_size, write_heatmap
from pcgnet.tensor_nn import load_checkpoint


@pytest.mark.parametrize("se,sp,shown", [("0.7278", "0.9521", "0.8399"), ("0.6545", "0.7569", "0.7057")])
def test_score_from_se_sp(capsys, se, sp, shown):
    assert run(["score", "--se", se, "--sp", sp]) == 0
    assert capsys.readouterr().out.strip() == shown


def test_render_keeps_map_size(tmp_path):
    src = tmp_path / "x.mfhm"
    write_heatmap(MfccHeatMap(np.random.default_rng(0).normal(size=(6, 300))), src)
    assert run(["render", "--input", str(src), "--out", str(tmp_path / "x.ppm")]) == 0
    assert ppm_size((tmp_path / "x.ppm").read_bytes()) == (300, 6)
    assert run(["render", "--input", str(src), "--scale", "4"]) == 0
    assert ppm_size((tmp_path / "x.ppm").read_bytes()) == (1200, 24)


def test_error_exit_codes(tmp_path, capsys):
    assert run(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "run")]) == 2
    assert "data error" in capsys.readouterr().err
    assert run(["score", "--bogus"]) == 1
    assert run(["frobnicate"]) == 1
    assert run([]) == 1
    assert run(["score", "--se", "0.5"]) == 1


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("no_such_key = 1\n")
    synth = tmp_path / "data"
    assert run(["synth", "--count", "2", "--duration", "4", "--out", str(synth)]) == 0
    args = ["featurize", "--manifest", str(synth / "manifest.csv"), "--out", str(tmp_path / "maps")]
    assert run(args + ["--config", str(cfg)]) == 1
    cfg.write_text("filter_count = many\n")
    assert run(args + ["--config", str(cfg)]) == 1


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["synth", "--count", "8", "--seed", "3", "--abnormal-fraction", "0.5", "--duration", "5",
                "--out", str(data)]) == 0
    cfg = root / "train.cfg"
    cfg.write_text("# short run\nmax_epochs = 1\nbatch_size = 32\nseed = 5\n")
    run_dir = root / "run"
    assert run(["train", "--manifest", str(data / "manifest.csv"), "--config", str(cfg),
                "--out", str(run_dir)]) == 0
    return root, data, run_dir


def test_train_outputs(workspace):
    _, _, run_dir = workspace
    assert (run_dir / "best.ckpt").exists() and (run_dir / "last.ckpt").exists()
    log = (run_dir / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_se,val_sp,val_score" and len(log) == 2
    params = load_checkpoint(run_dir / "best.ckpt")
    assert params.hyper["max_epochs"] == 1 and params.hyper["seed"] == 5
    assert params.hyper["mfcc"]["kept_coefficients"] == 6


def test_evaluate_equals_predict_then_score(workspace, capsys):
    root, data, run_dir = workspace
    manifest, ckpt = str(data / "manifest.csv"), str(run_dir / "best.ckpt")
    pred = root / "pred.csv"
    assert run(["predict", "--manifest", manifest, "--checkpoint", ckpt, "--out", str(pred)]) == 0
    capsys.readouterr()
    assert run(["score", "--predictions", str(pred), "--manifest", manifest]) == 0
    scored = capsys.readouterr().out
    assert run(["evaluate", "--manifest", manifest, "--checkpoint", ckpt]) == 0
    assert capsys.readouterr().out == scored
    assert scored.startswith("Se ")


def test_featurize_segment_and_ingest(workspace, capsys):
    root, data, _ = workspace
    manifest = str(data / "manifest.csv")
    assert run(["ingest", "--manifest", manifest]) == 0
    assert '"recordings": 8' in capsys.readouterr().out
    assert run(["segment", "--manifest", manifest, "--out", str(root / "on.csv")]) == 0
    assert (root / "on.csv").read_text().startswith("record_id,onset_sample\n")
    out = root / "maps"
    assert run(["featurize", "--manifest", manifest, "--out", str(out)]) == 0
    files = sorted(out.glob("*.mfhm"))
    assert files and files[0].name.endswith("_000.mfhm")
