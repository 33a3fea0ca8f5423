import json

import numpy as np
import pytest

from perceiver_ts.cli import load_run_config, main
from perceiver_ts.data import MultivariateSeries, write_csv
from perceiver_ts.errors import ConfigError
from perceiver_ts.model import load_checkpoint, save_checkpoint

SMALL = ["--set", "model.lookback=24", "--set", "model.horizon=12", "--set", "model.patch_len=6",
         "--set", "model.d_model=8", "--set", "model.d_latent=8", "--set", "model.n_latents=2",
         "--set", "model.n_self_layers=1", "--set", "model.n_heads=2",
         "--set", "train.batch_size=64", "--set", "train.stride=4", "--set", "train.warmup_epochs=0"]


def synth_config(tmp_path, length=400):
    spec = {"length": length, "seed": 3, "channels": [{"sines": [{"period": 24}], "noise_std": 0.1},
                                                       {"sines": [{"period": 12, "amplitude": 0.5}]}]}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"data": {"synth": spec}}))
    return str(p)


def test_synth_minimal_spec(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"synth": {"length": 10, "channels": [{}]}}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "synth.csv").read_text().splitlines()
    assert len(lines) == 11 and len(lines[0].split(",")) == 2
    manifest = json.loads((tmp_path / "a" / "synth_manifest.json").read_text())
    assert manifest["length"] == 10
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "synth.csv").read_bytes() == (tmp_path / "b" / "synth.csv").read_bytes()


def test_synth_zero_length_is_validation_error(tmp_path):
    assert main(["synth", "--set", 'data.synth={"length": 0, "channels": [{}]}', "--out", str(tmp_path)]) == 1


def test_unknown_key_and_section(tmp_path, capsys):
    assert main(["train", "--set", "train.colour=1", "--out", str(tmp_path)]) == 1
    assert "train.colour" in capsys.readouterr().err
    assert main(["eval", "--set", "bogus.x=1", "--out", str(tmp_path)]) == 1
    with pytest.raises(ConfigError, match="eval.nope"):
        load_run_config(None, ["eval.nope=1"], None)


def test_dry_run_prints_config(tmp_path, capsys):
    assert main(["train", "--config", synth_config(tmp_path), *SMALL, "--dry-run", "--out", str(tmp_path / "r")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["model"]["lookback"] == 24
    assert not (tmp_path / "r").exists()


def test_bad_learning_rate_exits_one(tmp_path):
    assert main(["train", "--config", synth_config(tmp_path), *SMALL, "--set", "train.lr_base=0",
                 "--out", str(tmp_path / "r")]) == 1


def test_train_zero_epochs_writes_checkpoint(tmp_path):
    out = tmp_path / "r"
    assert main(["train", "--config", synth_config(tmp_path), *SMALL, "--set", "train.epochs=0",
                 "--out", str(out)]) == 0
    assert (out / "best.npz").exists() and (out / "last.npz").exists()
    cfg, _, _, _ = load_checkpoint(out / "best.npz")
    assert cfg.lookback == 24


def test_resume_keeps_counters_monotonic(tmp_path):
    conf = synth_config(tmp_path)
    out = tmp_path / "r"
    assert main(["train", "--config", conf, *SMALL, "--set", "train.epochs=1", "--out", str(out)]) == 0
    assert main(["train", "--config", conf, *SMALL, "--set", "train.epochs=3", "--resume", str(out / "last.npz"),
                 "--out", str(out)]) == 0
    hist = [json.loads(line) for line in (out / "history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    steps = [h["step"] for h in hist]
    assert steps == sorted(steps) and len(set(steps)) == 3


def test_fixed_seed_runs_are_identical(tmp_path):
    conf = synth_config(tmp_path)
    for d in ("a", "b"):
        assert main(["train", "--config", conf, *SMALL, "--set", "train.epochs=1", "--seed", "7",
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()
    for d in ("a", "b"):
        assert main(["eval", "--config", conf, "--checkpoint", str(tmp_path / d / "best.npz"),
                     "--out", str(tmp_path / d)]) == 0
    pa = json.loads((tmp_path / "a" / "eval_report.json").read_text())["payload"]
    pb = json.loads((tmp_path / "b" / "eval_report.json").read_text())["payload"]
    assert pa == pb and pa["records"][0]["seed"] == 7


@pytest.fixture
def constant_run(tmp_path):
    data = tmp_path / "const.csv"
    write_csv(MultivariateSeries(np.full((2, 400), 4.25), ["a", "b"]), data)
    conf = tmp_path / "const.json"
    conf.write_text(json.dumps({"data": {"path": str(data)}}))
    out = tmp_path / "r"
    assert main(["train", "--config", str(conf), *SMALL, "--set", "train.epochs=0", "--out", str(out)]) == 0
    cfg, params, meta, _ = load_checkpoint(out / "best.npz")
    params["w_output"].data[...] = 0.0
    save_checkpoint(out / "zero.npz", cfg, params, meta=meta)
    return str(conf), out


def test_eval_and_impute_on_constant_series(constant_run):
    conf, out = constant_run
    assert main(["eval", "--config", conf, "--checkpoint", str(out / "zero.npz"), "--out", str(out)]) == 0
    rep = json.loads((out / "eval_report.json").read_text())
    assert rep["payload"]["records"][0]["mse"] < 1e-20
    assert main(["impute", "--config", conf, "--checkpoint", str(out / "zero.npz"),
                 "--set", "eval.mask_patch_len=6", "--out", str(out)]) == 0
    rep = json.loads((out / "impute_report.json").read_text())
    assert rep["payload"]["records"][0]["mse"] < 1e-20


def test_eval_missing_checkpoint(constant_run):
    conf, out = constant_run
    assert main(["eval", "--config", conf, "--checkpoint", str(out / "nope.npz"), "--out", str(out)]) == 1


def test_attn_writes_two_csv_and_one_json(constant_run):
    conf, out = constant_run
    dest = out / "attn"
    assert main(["attn", "--config", conf, "--checkpoint", str(out / "best.npz"), "--out", str(dest)]) == 0
    names = sorted(p.name for p in dest.iterdir())
    assert names == ["attn_w0_decoder.csv", "attn_w0_encoder.csv", "attn_w0_meta.json"]
    enc = np.loadtxt(dest / "attn_w0_encoder.csv", delimiter=",", ndmin=2)
    np.testing.assert_allclose(enc.sum(axis=1), 1.0, atol=1e-6)


def test_profile_grid_too_small(tmp_path, capsys):
    assert main(["profile", "--set", "profile.token_counts=[56,112]", "--out", str(tmp_path)]) == 1
    assert "grid too small" in capsys.readouterr().err


def test_profile_small_grid(tmp_path):
    assert main(["profile", "--set", "profile.token_counts=[14,28,56]", "--set", "profile.patch_len=4",
                 "--set", "model.d_model=8", "--set", "model.d_latent=8", "--set", "model.n_heads=2",
                 "--out", str(tmp_path)]) == 0
    exps = json.loads((tmp_path / "profile.json").read_text())["payload"]["exponents"]
    assert exps["full_self_attn"] == pytest.approx(2.0, abs=0.05)
