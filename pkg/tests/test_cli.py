"""
Tests for the probadapt command line.
"""

import logging

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

import probadapt.cli as cli_module
from conftest import TINY_MODEL
from probadapt.cli import cli
from probadapt.config import METHODS
from probadapt.data import read_pgm, write_pgm
from probadapt.errors import TrainingDivergedError
from probadapt.records import RunManifest, read_metrics


@pytest.fixture(autouse=True)
def reset_cli_logging():
    yield
    logger = logging.getLogger("probadapt")
    for handler in list(logger.handlers):
        if getattr(handler, cli_module._HANDLER_TAG, False):
            logger.removeHandler(handler)
            handler.close()


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def dataset(tmp_path, toy_dataset_config, runner):
    root = tmp_path / "data"
    result = runner.invoke(cli, ["generate", "--config", str(toy_dataset_config), "--out", str(root)])
    assert result.exit_code == 0, result.output
    return root


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({
            "train": {"iterations": 4, "val_interval": 2, "val_samples": 2, "n_samples": 3},
            "model": dict(TINY_MODEL),
            "data": {"patch_shape": [16, 16], "batch_size": 2},
        }, f)
    return path


def _train(runner, run_config, dataset, out, method=None, *extra):
    args = ["train"] + ([method] if method else []) + [
        "--config", str(run_config), "--data", str(dataset), "--out", str(out), *extra,
    ]
    return runner.invoke(cli, args)


@pytest.fixture
def source_run(tmp_path, runner, run_config, dataset):
    out = tmp_path / "runs" / "source"
    result = _train(runner, run_config, dataset, out, "source")
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def two_class_run(tmp_path, runner, run_config, dataset):
    config = yaml.safe_load(run_config.read_text())
    config["model"]["num_classes"] = 2
    path = tmp_path / "two_class.yaml"
    path.write_text(yaml.safe_dump(config))
    out = tmp_path / "runs" / "two_class"
    result = _train(runner, path, dataset, out, "source")
    assert result.exit_code == 0, result.output
    return out


# -- generate ----------------------------------------------------------------------

def test_generate(dataset):
    assert (dataset / "dataset.yaml").exists()
    assert len(list((dataset / "source" / "train" / "images").glob("*.pgm"))) == 16
    assert not (dataset / "target" / "train" / "labels").exists()


def test_generate_seed_and_count(tmp_path, runner, toy_dataset_config):
    out = tmp_path / "d"
    result = runner.invoke(cli, ["generate", "-c", str(toy_dataset_config), "-o", str(out), "-n", "10", "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert "source: 10 images" in result.output
    assert "unlabeled: train" in result.output
    manifest = yaml.safe_load((out / "dataset.yaml").read_text())
    assert manifest["domains"]["source"]["spec"]["seed"] == 7
    assert manifest["domains"]["target"]["spec"]["seed"] == 8


# -- train -------------------------------------------------------------------------

def test_train_source_writes_run_directory(source_run):
    manifest = RunManifest.load(source_run / "manifest.yaml")
    assert manifest.status == "completed"
    assert manifest.config["train"]["method"] == "source"
    assert (source_run / "checkpoints" / "best.pt").exists()
    assert (source_run / "checkpoints" / "final.pt").exists()
    assert (source_run / "train.log").exists()
    assert not (source_run / ".lock").exists()
    assert len(read_metrics(source_run / "metrics.csv")) == 4


def test_rerun_from_manifest_is_identical(tmp_path, runner, source_run):
    again = tmp_path / "runs" / "again"
    result = runner.invoke(cli, ["train", "--config", str(source_run / "manifest.yaml"), "--out", str(again)])
    assert result.exit_code == 0, result.output
    assert (again / "metrics.csv").read_bytes() == (source_run / "metrics.csv").read_bytes()


def test_unknown_method(tmp_path, runner, run_config, dataset):
    result = _train(runner, run_config, dataset, tmp_path / "x", "mt_x_m")
    assert result.exit_code == 1
    for name in METHODS:
        assert name in result.output
    assert "unet" in result.output


def test_missing_method(tmp_path, runner, run_config, dataset):
    result = _train(runner, run_config, dataset, tmp_path / "x")
    assert result.exit_code == 1
    assert "Missing METHOD" in result.output


def test_separate_needs_pretrained(tmp_path, runner, run_config, dataset):
    result = _train(runner, run_config, dataset, tmp_path / "x", "mt_s_m")
    assert result.exit_code == 1
    assert "--pretrained" in result.output


def test_every_method_trains(tmp_path, runner, run_config, dataset, source_run):
    pretrained = str(source_run / "checkpoints" / "best.pt")
    for name, spec in METHODS.items():
        extra = ["--iterations", "10"]
        if spec.strategy.value == "separate":
            extra += ["--pretrained", pretrained]
        out = tmp_path / "runs" / name
        result = _train(runner, run_config, dataset, out, name, *extra)
        assert result.exit_code == 0, f"{name}: {result.output}"
        rows = read_metrics(out / "metrics.csv")
        assert len(rows) == 10
        assert rows[-1]["loss_unsup"] is not None
        assert (out / "checkpoints" / "final.pt").exists()


def test_separate_rerun_reuses_pretrained(tmp_path, runner, run_config, dataset, source_run):
    first = tmp_path / "runs" / "fm_s_w"
    pretrained = str(source_run / "checkpoints" / "best.pt")
    result = _train(runner, run_config, dataset, first, "fm_s_w", "--pretrained", pretrained)
    assert result.exit_code == 0, result.output
    assert RunManifest.load(first / "manifest.yaml").inputs["pretrained"] == pretrained
    again = runner.invoke(cli, ["train", "-c", str(first / "manifest.yaml"), "-o", str(tmp_path / "again")])
    assert again.exit_code == 0, again.output


def test_pretrained_architecture_mismatch(tmp_path, runner, run_config, dataset, source_run):
    config = yaml.safe_load(run_config.read_text())
    config["model"]["latent_dim"] = 5
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(config))
    result = _train(runner, other, dataset, tmp_path / "x", "mt_s",
                    "--pretrained", str(source_run / "checkpoints" / "best.pt"))
    assert result.exit_code == 1
    assert "latent_dim" in result.output


def test_divergence_exits_2_and_marks_manifest(tmp_path, runner, run_config, dataset, monkeypatch):
    def diverge(*args, **kwargs):
        raise TrainingDivergedError("non-finite loss", 3)
    monkeypatch.setattr(cli_module, "_run_training", diverge)
    out = tmp_path / "runs" / "bad"
    result = _train(runner, run_config, dataset, out, "source")
    assert result.exit_code == 2
    assert "iteration 3" in result.output
    assert RunManifest.load(out / "manifest.yaml").status == "failed"
    assert not (out / ".lock").exists()


def test_locked_output_directory(tmp_path, runner, run_config, dataset):
    out = tmp_path / "runs" / "busy"
    out.mkdir(parents=True)
    (out / ".lock").write_text("1")
    result = _train(runner, run_config, dataset, out, "source")
    assert result.exit_code == 1
    assert "another run" in result.output


def test_train_and_eval_unet_baseline(tmp_path, runner, run_config, dataset):
    out = tmp_path / "runs" / "unet"
    result = _train(runner, run_config, dataset, out, "unet")
    assert result.exit_code == 0, result.output
    assert "unet (UNet)" in result.output
    assert RunManifest.load(out / "manifest.yaml").config["train"]["method"] == "unet"
    assert all(row["kl"] == 0.0 for row in read_metrics(out / "metrics.csv"))

    result = runner.invoke(cli, ["eval", str(out / "checkpoints" / "best.pt"), "--data", str(dataset),
                                 "--samples", "2", "--out", str(tmp_path / "eval")])
    assert result.exit_code == 0, result.output
    assert "Mean dice (target/test, 2 images, 2 samples)" in result.output


def test_unet_checkpoint_cannot_be_adapted(tmp_path, runner, run_config, dataset):
    source = tmp_path / "runs" / "unet"
    assert _train(runner, run_config, dataset, source, "unet").exit_code == 0
    result = _train(runner, run_config, dataset, tmp_path / "x", "mt_s",
                    "--pretrained", str(source / "checkpoints" / "best.pt"))
    assert result.exit_code == 1
    assert "deterministic" in result.output


# -- eval and predict ----------------------------------------------------------------

def test_eval(tmp_path, runner, dataset, source_run):
    ckpt = str(source_run / "checkpoints" / "best.pt")
    result = runner.invoke(cli, ["eval", ckpt, "--data", str(dataset), "--domain", "target",
                                 "--samples", "2", "--out", str(tmp_path / "eval")])
    assert result.exit_code == 0, result.output
    assert "Mean dice (target/test, 2 images, 2 samples)" in result.output
    lines = (tmp_path / "eval" / "eval.csv").read_text().splitlines()
    assert lines[0] == "index,dice"
    assert [line.split(",")[0] for line in lines[1:]] == ["18", "19"]
    rows = read_metrics(tmp_path / "eval" / "eval.csv")
    assert all(0.0 <= row["dice"] <= 1.0 for row in rows)


def test_eval_missing_labels(runner, dataset, source_run):
    ckpt = str(source_run / "checkpoints" / "best.pt")
    result = runner.invoke(cli, ["eval", ckpt, "--data", str(dataset), "--domain", "target", "--split", "train"])
    assert result.exit_code == 1
    assert "labels" in result.output


def test_eval_instances_need_two_classes(runner, dataset, source_run):
    ckpt = str(source_run / "checkpoints" / "best.pt")
    result = runner.invoke(cli, ["eval", ckpt, "--data", str(dataset), "--instances"])
    assert result.exit_code == 1
    assert "2-class" in result.output


def test_eval_mixed_image_sizes(tmp_path, runner, source_run):
    root = tmp_path / "mixed"
    rng = np.random.default_rng(0)
    for index, size in enumerate((16, 32)):
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[4:12, 4:12] = 255
        image = (rng.random((size, size)) * 60 + mask * 0.7).astype(np.uint8)
        write_pgm(root / "dom" / "test" / "images" / f"{index:04d}.pgm", image)
        write_pgm(root / "dom" / "test" / "labels" / f"{index:04d}.pgm", mask)
    result = runner.invoke(cli, ["eval", str(source_run / "checkpoints" / "best.pt"), "--data", str(root),
                                 "--domain", "dom", "--samples", "2", "--out", str(tmp_path / "eval")])
    assert result.exit_code == 0, result.output
    assert "2 images" in result.output
    lines = (tmp_path / "eval" / "eval.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "1"]


def test_eval_instances_two_class_model(tmp_path, runner, dataset, two_class_run):
    result = runner.invoke(cli, ["eval", str(two_class_run / "checkpoints" / "best.pt"), "--data", str(dataset),
                                 "--domain", "source", "--samples", "2", "--instances",
                                 "--out", str(tmp_path / "eval")])
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "eval" / "eval.csv").read_text().splitlines()
    assert lines[0] == "index,dice,instances"
    for line in lines[1:]:
        index, dice, count = line.split(",")
        assert 0.0 <= float(dice) <= 1.0
        assert int(count) >= 0


def test_predict_single_sample(tmp_path, runner, dataset, source_run):
    out = tmp_path / "pred"
    image = dataset / "target" / "test" / "images" / "0018.pgm"
    result = runner.invoke(cli, ["predict", str(source_run / "checkpoints" / "best.pt"), str(image),
                                 "--out", str(out), "--samples", "1"])
    assert result.exit_code == 0, result.output
    assert np.array_equal(read_pgm(out / "mean.pgm"), read_pgm(out / "sample_00.pgm"))
    assert set(np.unique(read_pgm(out / "consensus.pgm"))) <= {0, 255}


def test_predict_consensus_levels(tmp_path, runner, dataset, source_run):
    out = tmp_path / "pred"
    image = dataset / "source" / "test" / "images" / "0019.pgm"
    result = runner.invoke(cli, ["predict", str(source_run / "checkpoints" / "best.pt"), str(image),
                                 "-o", str(out), "--samples", "4", "--seed", "2"])
    assert result.exit_code == 0, result.output
    assert len(list(out.glob("sample_*.pgm"))) == 4
    assert set(np.unique(read_pgm(out / "consensus.pgm"))) <= {0, 64, 128, 191, 255}


def test_predict_rejects_zero_samples(tmp_path, runner, dataset, source_run):
    image = dataset / "source" / "test" / "images" / "0019.pgm"
    result = runner.invoke(cli, ["predict", str(source_run / "checkpoints" / "best.pt"), str(image),
                                 "-o", str(tmp_path / "p"), "--samples", "0"])
    assert result.exit_code == 1


def test_predict_instances_are_16_bit(tmp_path, runner, dataset, two_class_run):
    out = tmp_path / "pred"
    image = dataset / "source" / "test" / "images" / "0019.pgm"
    result = runner.invoke(cli, ["predict", str(two_class_run / "checkpoints" / "best.pt"), str(image),
                                 "-o", str(out), "--samples", "2", "--instances"])
    assert result.exit_code == 0, result.output
    labels = read_pgm(out / "instances.pgm")
    assert labels.dtype == np.uint16
    assert labels.shape == read_pgm(image).shape
    assert (out / "mean_c0.pgm").exists() and (out / "mean_c1.pgm").exists()


# -- misc ----------------------------------------------------------------------------

def test_check(runner):
    result = runner.invoke(cli, ["check"])
    assert result.exit_code == 0
    assert "Required" in result.output and "torch" in result.output


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert "0.1.0" in result.output


def test_thread_cap_validation(runner, monkeypatch):
    monkeypatch.setenv("PROBADAPT_THREADS", "zero")
    result = runner.invoke(cli, ["check"])
    assert result.exit_code == 1
    assert "PROBADAPT_THREADS" in result.output
