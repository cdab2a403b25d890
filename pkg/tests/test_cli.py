import os

import numpy as np
import pytest

from pertforge import cli
from pertforge.cli import EXIT_CONFIG, EXIT_IO, main


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """gen-data + one trained meso_lite checkpoint, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data_out = str(root / "data")
    rc = run("gen-data", "--set", f"out={data_out}", "--set", "styles=A",
             "--set", "n_train=12", "--set", "n_test=8")
    assert rc == 0
    train_out = str(root / "train")
    with pytest.warns(UserWarning):
        rc = run("train", "--set", f"out={train_out}",
                 "--set", f"data={data_out}/style_A",
                 "--set", "arch=meso_lite", "--set", "epochs=1")
    assert rc == 0
    return {"root": root, "data": f"{data_out}/style_A",
            "checkpoint": f"{train_out}/checkpoint"}


def test_gen_data_outputs_and_echo(workspace):
    data = workspace["data"]
    assert os.path.isdir(os.path.join(data, "train"))
    assert os.path.isdir(os.path.join(data, "test"))
    resolved = os.path.join(os.path.dirname(data), "resolved.cfg")
    text = open(resolved).read()
    assert "n_train=12" in text and "seed=0" in text


def test_gen_data_deterministic(tmp_path):
    for name in ("one", "two"):
        rc = run("gen-data", "--set", f"out={tmp_path / name}",
                 "--set", "styles=B", "--set", "n_train=4", "--set", "n_test=2")
        assert rc == 0
    a = open(tmp_path / "one/style_B/train/manifest.csv", "rb").read()
    b = open(tmp_path / "two/style_B/train/manifest.csv", "rb").read()
    assert a == b
    a = open(tmp_path / "one/style_B/train/images/B_0_00000.png", "rb").read()
    b = open(tmp_path / "two/style_B/train/images/B_0_00000.png", "rb").read()
    assert a == b


def test_train_artifacts(workspace):
    ckpt = workspace["checkpoint"]
    assert os.path.isfile(os.path.join(ckpt, "manifest.txt"))
    assert os.path.isfile(os.path.join(os.path.dirname(ckpt),
                                       "training_log.json"))


def test_attack_iap_end_to_end(workspace, tmp_path):
    out = str(tmp_path / "iap")
    rc = run("attack", "--set", f"out={out}",
             "--set", f"checkpoint={workspace['checkpoint']}",
             "--set", f"data={workspace['data']}",
             "--set", "attack=iap", "--set", "limit=2", "--set", "iap_iters=1")
    assert rc == 0
    assert os.path.isfile(os.path.join(out, "report.csv"))
    assert os.path.isfile(os.path.join(out, "report.json"))
    assert os.path.isfile(os.path.join(out, "perturbations", "pert_00000.pft"))


def test_attack_uap_prints_data_free_note(workspace, tmp_path, capsys):
    out = str(tmp_path / "uap")
    rc = run("attack", "--set", f"out={out}",
             "--set", f"checkpoint={workspace['checkpoint']}",
             "--set", f"data={workspace['data']}",
             "--set", "attack=urn")
    assert rc == 0
    capsys.readouterr()
    # meso_lite has no zones, so exercise the data-free note on the message
    # path only when a zone model is available; here check urn succeeded and
    # the uap note appears for an unsupported model as a config error.
    rc = run("attack", "--set", f"out={out}2",
             "--set", f"checkpoint={workspace['checkpoint']}",
             "--set", f"data={workspace['data']}",
             "--set", "attack=uap", "--set", "uap_iters=1")
    captured = capsys.readouterr()
    assert "data-free" in captured.out
    assert rc == EXIT_CONFIG


def test_attack_iap_seg_without_branch_is_config_error(workspace, tmp_path):
    rc = run("attack", "--set", f"out={tmp_path / 'seg'}",
             "--set", f"checkpoint={workspace['checkpoint']}",
             "--set", f"data={workspace['data']}",
             "--set", "attack=iap-seg", "--set", "seg_iters=1")
    assert rc == EXIT_CONFIG


def test_unknown_attack_kind(workspace, tmp_path):
    rc = run("attack", "--set", f"out={tmp_path / 'bad'}",
             "--set", f"checkpoint={workspace['checkpoint']}",
             "--set", f"data={workspace['data']}",
             "--set", "attack=wavelet")
    assert rc == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    rc = run("gen-data", "--config", str(tmp_path / "nope.cfg"))
    assert rc == EXIT_CONFIG


def test_malformed_override():
    rc = run("gen-data", "--set", "epsilon")
    assert rc == EXIT_CONFIG


def test_missing_dataset_is_io_error(workspace, tmp_path):
    rc = run("train", "--set", f"out={tmp_path / 'train'}",
             "--set", f"data={tmp_path / 'absent'}", "--set", "epochs=1")
    assert rc == EXIT_IO


def test_report_requires_sources(tmp_path):
    rc = run("report", "--set", f"out={tmp_path / 'rep'}")
    assert rc == EXIT_CONFIG
