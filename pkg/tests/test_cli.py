import json
from pathlib import Path

import pytest

from diffusionlab.cli import main, parse_prompt
from diffusionlab.errors import ParameterError, VocabularyError
from diffusionlab.experiments import EXPERIMENTS, ExperimentConfig, write_report
from diffusionlab.prompts import PromptSpec

TINY = dict(d=8, hidden=16, time_dim=8, reps=1, epochs=2, batch_size=16, S=5,
            a_values=[0, 2, 5], n_prompts=4, n_pairs=4, n_runs=3, n_images=4,
            prop1_sizes=[4, 8], prop1_trials=100)

CSV = {"prop1": "prop1.csv", "spectrum": "curves.csv", "attn-f1": "attn_f1.csv",
       "token-weights": "token_weights.csv", "eos-switch": "eos_switch.csv",
       "eos-window": "eos_window.csv", "text-window": "text_window.csv",
       "drop-guidance": "drop_guidance.csv", "eos-count": "eos_count.csv",
       "sos-only": "sos_only.csv", "zero-rand": "zero_rand.csv", "kv-sub": "kv_sub.csv",
       "gap-norms": "gap_norms.csv"}


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    root = tmp_path_factory.mktemp("lab")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY | dict(data_dir=str(root / "data"),
                                          checkpoint=str(root / "model"))))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return root, cfg


def test_pipeline_outputs(lab):
    root, _ = lab
    assert len(list((root / "data").glob("img_*.f32"))) == 80
    for name in ("model.dnlb", "loss_curve.csv", "summary.json", "config.json"):
        assert (root / "model" / name).exists()


@pytest.mark.parametrize("name", sorted(EXPERIMENTS))
def test_every_experiment_runs_deterministically(lab, name, tmp_path):
    _, cfg = lab
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["run", name, "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
        outs.append(out)
    a, b = outs
    assert (a / CSV[name]).exists()
    assert json.loads((a / "config.json").read_text())["experiment"] == name
    assert json.loads((a / "summary.json").read_text())["experiment"] == name
    for f in a.glob("*.csv"):
        assert f.read_bytes() == (b / f.name).read_bytes()
    for f in a.glob("*.f32"):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_sample_command(lab, tmp_path):
    _, cfg = lab
    out = tmp_path / "s"
    assert main(["sample", "--config", str(cfg), "--prompt", "a red circle", "--out", str(out),
                 "--w", "3", "--a", "2", "--mode", "drop_late"]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["policy"] == dict(w=3.0, a=2, mode="drop_late")
    assert (out / "x_0.f32").exists() and (out / "image.f32").exists()
    assert main(["sample", "--config", str(cfg), "--prompt", "a red circle", "--prompt2",
                 "a blue star", "--a", "2", "--mode", "switch", "--out", str(tmp_path / "t")]) == 0


def test_usage_errors(lab, tmp_path, capsys):
    _, cfg = lab
    assert main(["run", "no-such-thing", "--config", str(cfg)]) == 2
    assert "unknown experiment" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["sample", "--config", str(cfg), "--prompt", "a purple blob"]) == 2
    assert main(["run", "prop1", "--set", "bogus=1"]) == 2


def test_dependency_errors(tmp_path, capsys):
    assert main(["run", "eos-switch", "--out", str(tmp_path / "x"),
                 "--set", f"checkpoint={tmp_path / 'none.dnlb'}"]) == 3
    assert "lab train" in capsys.readouterr().err
    assert main(["train", "--set", f"data_dir={tmp_path / 'nodata'}",
                 "--out", str(tmp_path / "m")]) == 3


def test_format_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "prop1", "--config", str(bad)]) == 4
    bad.write_text("[1, 2]")
    assert main(["run", "prop1", "--config", str(bad)]) == 4
    ckpt = tmp_path / "broken.dnlb"
    ckpt.write_bytes(b"nope")
    assert main(["run", "gap-norms", "--set", f"checkpoint={ckpt}",
                 "--out", str(tmp_path / "g")]) == 4


def test_config_overrides():
    cfg = ExperimentConfig().override(w=2, a="10", a_values="0,5")
    assert cfg.w == 2.0 and cfg.a == 10 and cfg.a_values == [0, 5]
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"S": "many"})
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"nonsense": 1})


def test_parse_prompt():
    assert parse_prompt("a red circle") == PromptSpec(0, 0)
    assert parse_prompt("dots bar") == PromptSpec(6, 8)
    with pytest.raises(VocabularyError):
        parse_prompt("a red")


def _summary(path, checks):
    path.mkdir()
    (path / "summary.json").write_text(json.dumps(dict(experiment=path.name, checks=checks)))


def test_report_status(tmp_path):
    ok = dict(name="x", criterion=1, value=1, threshold=1, passed=True)
    bad = dict(name="y", criterion=7, value=0, threshold=1, passed=False)
    obs = dict(name="z", criterion=None, value=0, threshold=1, passed=False)
    _summary(tmp_path / "good", [ok, obs])
    _summary(tmp_path / "poor", [bad])
    assert write_report([tmp_path / "good"])["status"] == "PASS"
    rep = write_report([tmp_path / "good", tmp_path / "poor", tmp_path / "gone"],
                       tmp_path / "r.json")
    assert rep["status"] == "FAIL" and rep["failed"] == ["criterion 7: y"]
    assert rep["missing"] == [str(tmp_path / "gone")]
    assert json.loads((tmp_path / "r.json").read_text())["status"] == "FAIL"
    empty = write_report([])
    assert empty["sections"] == [] and empty["warnings"]


def test_report_command(tmp_path, capsys):
    _summary(tmp_path / "good", [dict(name="x", criterion=1, value=1, threshold=1, passed=True)])
    assert main(["report", str(tmp_path / "good"), "--out", str(tmp_path / "rep")]) == 0
    assert "STATUS PASS" in capsys.readouterr().out
    assert (tmp_path / "rep" / "report.json").exists()
