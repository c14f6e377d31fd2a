import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from filelock import FileLock

import torch

from iscl.checkpoint import load_bundle, model_config_to_dict, read_header
from iscl.cli import main
from iscl.data import ImageTensor, list_images, load_image, read_manifest, save_image
from iscl.metrics import psnr

from conftest import tiny_model_config


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "config.resolved.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config(workdir):
    path = workdir / "run.json"
    path.write_text(json.dumps({
        "seed": 4,
        "train": {"batch_size": 4, "lr_start": 1e-3, "lr_end": 1e-5, "model": model_config_to_dict(tiny_model_config())},
    }))
    return path


@pytest.fixture(scope="module")
def dataset(workdir):
    out = workdir / "data"
    assert main(["synthesize", "--out", str(out), "--phantoms", "30", "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(workdir, dataset, config):
    out = workdir / "train"
    assert main(["train", "--config", str(config), "--manifest", str(dataset / "manifest.txt"),
                 "--out", str(out), "--epochs", "2"]) == 0
    return out


# -------------------------------------------------------------- synthesize


def test_synthesize_layout(dataset):
    split = read_manifest(dataset / "manifest.txt")
    sources = {p.name for p in list_images(dataset / "sources")}
    names = lambda ids: {Path(i).name for i in ids}
    parts = [names(split.clean_group), names(split.noisy_group), names(split.val_noisy)]
    assert set().union(*parts) == sources and sum(map(len, parts)) == len(sources) == 30
    resolved = json.loads((dataset / "config.resolved.json").read_text())
    assert resolved["noise"]["kind"] == "charge" and resolved["seed"] == 1


def test_synthesize_repeatable(tmp_path, dataset):
    out = tmp_path / "again"
    assert main(["synthesize", "--out", str(out), "--phantoms", "30", "--seed", "1"]) == 0
    assert tree_digest(out) == tree_digest(dataset)


def test_synthesize_zero_amplitude(tmp_path, dataset):
    out = tmp_path / "clean"
    assert main(["synthesize", "--out", str(out), "--clean-dir", str(dataset / "sources"),
                 "--amplitude", "0", "--seed", "1"]) == 0
    split = read_manifest(out / "manifest.txt")
    for rel in split.noisy_group:
        a = load_image(out / rel).pixels
        b = load_image(dataset / "sources" / Path(rel).name).pixels
        assert np.array_equal(a, b)


def test_synthesize_missing_dir(tmp_path):
    assert main(["synthesize", "--out", str(tmp_path / "o"), "--clean-dir", str(tmp_path / "nope")]) == 1


# ------------------------------------------------------------------- train


def test_train_outputs(trained):
    for name in ("model.ckpt", "state.ckpt", "metrics.csv", "config.resolved.json"):
        assert (trained / name).is_file()
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert {r["epoch"] for r in rows} == {"0", "1"}
    resolved = json.loads((trained / "config.resolved.json").read_text())
    assert resolved["train"]["n_epochs"] == 2 and resolved["train"]["lam"] == 30.0
    assert resolved["train"]["batch_size"] == 4  # from the config file
    assert read_header(trained / "model.ckpt")["flags"] == ["B", "C", "D", "E"]


def test_train_zero_epochs_and_row_a(tmp_path, dataset, config):
    out = tmp_path / "t0"
    assert main(["train", "--config", str(config), "--manifest", str(dataset / "manifest.txt"),
                 "--out", str(out), "--epochs", "0", "--ablation", "A"]) == 0
    assert (out / "model.ckpt").is_file()
    assert list(csv.DictReader(open(out / "metrics.csv"))) == []
    assert read_header(out / "model.ckpt")["flags"] == []


def test_train_resume_equals_uninterrupted(tmp_path, dataset, config, monkeypatch):
    import iscl.cli as cli

    common = ["--config", str(config), "--manifest", str(dataset / "manifest.txt"), "--epochs", "3"]
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", *common, "--out", str(full)]) == 0

    real_fit = cli.fit

    def interrupted(cfg, split, on_epoch=None, **kw):
        def hook(st):
            on_epoch(st)
            if st.epoch == 1:
                raise KeyboardInterrupt
        return real_fit(cfg, split, on_epoch=hook, **kw)

    monkeypatch.setattr(cli, "fit", interrupted)
    with pytest.raises(KeyboardInterrupt):
        main(["train", *common, "--out", str(part)])
    monkeypatch.setattr(cli, "fit", real_fit)
    assert main(["train", *common, "--out", str(part), "--resume", str(part / "state.ckpt")]) == 0
    assert (full / "metrics.csv").read_text() == (part / "metrics.csv").read_text()
    a = load_bundle(full / "model.ckpt").state_dict()
    b = load_bundle(part / "model.ckpt").state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_train_rejects_unknown_keys(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["train", "--config", str(bad), "--manifest", str(dataset / "manifest.txt"),
                 "--out", str(tmp_path / "o")]) == 64
    bad.write_text(json.dumps({"optimizer": {}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 64


def test_bad_flags_exit_usage():
    with pytest.raises(SystemExit) as info:
        main(["train", "--epochs", "many"])
    assert info.value.code == 64


def test_locked_output(tmp_path, dataset, config):
    out = tmp_path / "busy"
    out.mkdir()
    with FileLock(str(out / ".iscl.lock")):
        code = main(["train", "--config", str(config), "--manifest", str(dataset / "manifest.txt"),
                     "--out", str(out), "--epochs", "0"])
    assert code == 5


# ----------------------------------------------------------------- denoise


def test_denoise_gamma_one_equals_f_only(tmp_path, trained, dataset):
    ck, inp = str(trained / "model.ckpt"), str(dataset / "val_noisy")
    assert main(["denoise", "--checkpoint", ck, "--input", inp, "--out", str(tmp_path / "g1"), "--gamma", "1"]) == 0
    assert main(["denoise", "--checkpoint", ck, "--input", inp, "--out", str(tmp_path / "f"), "--f-only"]) == 0
    assert main(["denoise", "--checkpoint", ck, "--input", inp, "--out", str(tmp_path / "h"), "--h-only"]) == 0
    files = list_images(tmp_path / "g1")
    assert len(files) == len(list_images(dataset / "val_noisy"))
    for p in files:
        assert p.read_bytes() == (tmp_path / "f" / p.name).read_bytes()


def test_denoise_large_image(tmp_path, trained):
    inp = tmp_path / "big"
    save_image(ImageTensor(np.random.default_rng(0).random((512, 512)).astype(np.float32)), inp / "big.png")
    assert main(["denoise", "--checkpoint", str(trained / "model.ckpt"), "--input", str(inp),
                 "--out", str(tmp_path / "o"), "--tile", "128"]) == 0
    assert load_image(tmp_path / "o" / "big.png").pixels.shape == (512, 512)


def test_denoise_odd_size(tmp_path, trained):
    inp = tmp_path / "odd"
    save_image(ImageTensor(np.random.default_rng(0).random((70, 53)).astype(np.float32)), inp / "odd.png")
    assert main(["denoise", "--checkpoint", str(trained / "model.ckpt"), "--input", str(inp),
                 "--out", str(tmp_path / "o")]) == 0
    assert load_image(tmp_path / "o" / "odd.png").pixels.shape == (70, 53)


def test_denoise_errors(tmp_path, trained, dataset):
    inp = str(dataset / "val_noisy")
    assert main(["denoise", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", inp, "--out", str(tmp_path / "o")]) == 3
    assert main(["denoise", "--checkpoint", str(trained / "model.ckpt"), "--input", inp, "--out", str(tmp_path / "o"),
                 "--f-only", "--h-only"]) == 64
    assert main(["denoise", "--checkpoint", str(trained / "model.ckpt"), "--input", inp, "--out", str(tmp_path / "o"),
                 "--gamma", "2"]) == 64


# ---------------------------------------------------------------- evaluate


def test_evaluate_matches_denoise(tmp_path, trained, dataset):
    den = tmp_path / "den"
    assert main(["denoise", "--checkpoint", str(trained / "model.ckpt"), "--input", str(dataset / "val_noisy"),
                 "--out", str(den)]) == 0
    ev = tmp_path / "ev"
    assert main(["evaluate", "--outputs", str(den), "--references", str(dataset / "val_clean"), "--out", str(ev)]) == 0
    rows = list(csv.DictReader(open(ev / "metrics.csv")))
    for r in rows[:-1]:
        a = load_image(dataset / "val_clean" / r["image"]).pixels
        b = load_image(den / r["image"]).pixels
        assert float(r["psnr"]) == pytest.approx(psnr(a, b), abs=1e-9)
    assert rows[-1]["image"] == "mean"


def test_evaluate_self(tmp_path, dataset):
    ev = tmp_path / "ev"
    ref = str(dataset / "val_clean")
    assert main(["evaluate", "--outputs", ref, "--references", ref, "--out", str(ev)]) == 0
    rows = list(csv.DictReader(open(ev / "metrics.csv")))
    assert all(float(r["psnr"]) == 99.0 and float(r["ssim"]) == pytest.approx(1.0) for r in rows)


def test_evaluate_gamma_grid(tmp_path, trained, dataset):
    ev = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--manifest", str(dataset / "manifest.txt"),
                 "--gamma-grid", "0,0.5,1", "--out", str(ev)]) == 0
    lines = (ev / "gamma_curve.csv").read_text().splitlines()
    assert len(lines) == 4


def test_evaluate_missing_references(tmp_path, dataset):
    assert main(["evaluate", "--outputs", str(dataset / "val_noisy"), "--references", str(tmp_path / "none"),
                 "--out", str(tmp_path / "ev")]) == 4


def test_ablate_and_ladder_table(tmp_path, dataset, config):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config), "--manifest", str(dataset / "manifest.txt"),
                 "--epochs", "1", "--iters", "1", "--out", str(out)]) == 0
    assert len(list(csv.DictReader(open(out / "ladder.csv")))) == 5
    ev = tmp_path / "ev"
    assert main(["evaluate", "--ladder", str(out / "ladder.csv"), "--out", str(ev)]) == 0
    assert (ev / "ladder.txt").read_text() == (out / "ladder.txt").read_text()
    assert len((ev / "ladder.txt").read_text().splitlines()) == 3 + 5


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "iscl.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synthesize" in r.stdout
