import json
import subprocess
import sys

import numpy as np
import pytest

from masktrans import cli
from masktrans.autodiff import kernels
from masktrans.config import schema_table
from masktrans.io import load_ftc1, read_ppm

SMALL = ["--sampler.global_crop", "32", "--sampler.base_height", "32", "--sampler.local_batch", "4",
         "--train.width_multiplier", "0.03125", "--train.checkpoint_every", "5"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(root), "--n", "6", "--size", "32", "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--seed", "1", "--steps", "5", *SMALL]) == 0
    return out


def test_help_lists_every_schema_field_with_default(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for key, default, _ in schema_table():
        assert f"--{key}" in text
        assert f"(default: {default})" in text


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "masktrans.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "sample-stats", "train", "translate", "eval", "gradcheck"):
        assert cmd in r.stdout


def test_gen_data_layout(dataset):
    meta = json.loads((dataset / "dataset.json").read_text())
    assert meta["n"] == 6 and meta["biased_class"] in meta["classes"]
    assert len(list((dataset / "domainA" / "images").glob("*.ppm"))) == 6
    assert len(list((dataset / "domainB" / "segs").glob("*.pgm"))) == 6


def test_sample_stats_with_oracle(dataset, tmp_path):
    out = tmp_path / "s.jsonl"
    rc = cli.main(["sample-stats", "--data", str(dataset), "--crop", "16", "--draws", "200",
                   "--pairs", "2", "--oracle", "--out", str(out)])
    assert rc == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 2
    for r in rows:
        assert r["draws"] == 200
        se = np.sqrt(max(r["valid_fraction_oracle"] * (1 - r["valid_fraction_oracle"]), 1e-4) / 200)
        assert abs(r["accept_rate"] - r["valid_fraction_oracle"]) <= 4 * se


def test_train_outputs(trained):
    rows = [json.loads(line) for line in (trained / "telemetry.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(5))
    assert (trained / "final" / "manifest.json").exists()
    assert (trained / "ckpt_0000005").exists()
    rep = json.loads((trained / "report.json").read_text())
    assert rep["environment"]["seed"] == 1 and rep["steps"] == 5


def test_translate_with_attention(trained, dataset, tmp_path):
    img = dataset / "domainA" / "images" / "00000.ppm"
    seg = dataset / "domainA" / "segs" / "00000.pgm"
    out = tmp_path / "t.ppm"
    rc = cli.main(["translate", "--ckpt", str(trained / "final"), "--in", str(img), "--seg", str(seg),
                   "--out", str(out), "--dump-attention"])
    assert rc == 0
    assert read_ppm(out).shape == read_ppm(img).shape
    maps = sorted((tmp_path / "t_attention").glob("*.ftc1"))
    assert maps
    a = load_ftc1(maps[0])
    assert a.min() >= 0 and a.max() <= 1


def test_translate_rejects_unknown_class(trained, dataset, tmp_path):
    from masktrans.io import write_pgm

    seg = tmp_path / "bad.pgm"
    write_pgm(seg, np.full((32, 32), 200, np.uint16))
    img = dataset / "domainA" / "images" / "00000.ppm"
    assert cli.main(["translate", "--ckpt", str(trained / "final"), "--in", str(img), "--seg", str(seg),
                     "--out", str(tmp_path / "o.ppm")]) == 3


@pytest.mark.parametrize("metric", ["kid", "skvd", "ckvd"])
def test_eval_identical_corpora(dataset, tmp_path, metric, capsys):
    d = str(dataset / "domainA")
    out = tmp_path / "r.json"
    rc = cli.main(["eval", "--metric", metric, "--src", d, "--tgt", d, "--n-pairs", "8", "--crop-ratio", "0.5",
                   "--out", str(out)])
    assert rc == 0
    rep = json.loads(out.read_text())["report"]
    assert rep["name"] == metric
    if metric == "kid":
        assert abs(rep["raw"]) < 1.0


def test_eval_precomputed_features(tmp_path):
    from masktrans.io import save_ftc1

    rng = np.random.default_rng(0)
    save_ftc1(tmp_path / "source.ftc1", rng.normal(size=(20, 4)))
    save_ftc1(tmp_path / "target.ftc1", rng.normal(size=(30, 4)))
    assert cli.main(["eval", "--metric", "kid", "--features", f"ftc1:{tmp_path}"]) == 0
    assert cli.main(["eval", "--metric", "skvd", "--features", f"ftc1:{tmp_path}"]) == 2


def test_exit_code_config(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"schema_version": 1, "train": {"bogus": 1}}')
    assert cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"),
                     "--sampler.threshold", "1.5"]) == 2
    assert cli.main(["train", "--data", str(dataset)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--train.steps", "many"])
    assert exc.value.code == 2


def test_exit_code_data(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad"
    (bad / "images").mkdir(parents=True)
    (bad / "segs").mkdir()
    (bad / "images" / "00000.ppm").write_bytes(b"P6\n2 2\n255\n")
    (bad / "segs" / "00000.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x00\x00\x00")
    assert cli.main(["eval", "--metric", "kid", "--src", str(bad), "--tgt", str(bad)]) == 3


def test_gradcheck_lists_ops(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert cli.main(["gradcheck", "--ops", "conv2d", "instance_norm", "fate_block", "--seeds", "1",
                     "--out", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert [r["op"] for r in rows] == ["conv2d", "instance_norm", "fate_block"]
    assert all(r["passed"] for r in rows)
    assert cli.main(["gradcheck", "--ops", "nope"]) == 2


def test_gradcheck_catches_flipped_conv_backward(monkeypatch):
    orig = kernels.conv2d_grad_input
    monkeypatch.setattr(kernels, "conv2d_grad_input", lambda *a: -orig(*a))
    assert cli.main(["gradcheck", "--ops", "conv2d", "--seeds", "1"]) == 4
