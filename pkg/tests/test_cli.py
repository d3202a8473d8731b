import hashlib

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from pixseg.cli import main
from pixseg.pipeline import read_csv
from pixseg.prototypes import PrototypeBank
from pixseg.vlm import load_palette

from .conftest import small_config_dict


def _config(root, name="cfg.yaml", **train):
    path = root / name
    path.write_text(yaml.safe_dump(small_config_dict(**train)))
    return str(path)


def _run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    return result


def _ok(*args):
    result = _run(*args)
    assert result.exit_code == 0, result.output
    return result


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    cfg = _config(small_corpus, "cli.yaml", iterations=50)
    run = tmp_path_factory.mktemp("runs") / "run"
    _ok("build-prototypes", "--config", cfg, "--out", run)
    _ok("train", "--config", cfg, "--out", run)
    return cfg, run


def test_build_prototypes_bank(small_corpus, tmp_path):
    cfg = _config(small_corpus)
    out = _ok("build-prototypes", "--config", cfg, "--out", tmp_path / "a")
    assert "k=3" in out.output and "u=8" in out.output
    _ok("build-prototypes", "--config", cfg, "--out", tmp_path / "b")
    a, b = tmp_path / "a" / "prototypes.bin", tmp_path / "b" / "prototypes.bin"
    assert _sha(a) == _sha(b)
    bank = PrototypeBank.load(a)
    assert (bank.k, bank.u) == (3, 8)
    palette = {e.name: e.vector for e in load_palette(small_corpus / "palette.json")}
    for name, proto in zip(bank.names, bank.known_array):
        assert proto @ palette[name] >= 0.95


def test_train_outputs(trained):
    _, run = trained
    log = [line for line in (run / "train_log.jsonl").read_text().splitlines() if line]
    assert len(log) == 50
    chash = yaml.safe_load((run / "config.yaml").read_text())["config_hash"]
    assert chash in log[0]
    for name in ("final.pt", "loss_trace.png", "prototypes_trained.bin"):
        assert (run / name).exists()
    assert PrototypeBank.load(run / "prototypes_trained.bin").config_hash == chash


@pytest.mark.parametrize("mode", ["langseg", "knn", "linear", "track"])
def test_eval_modes_write_reports(trained, mode):
    cfg, run = trained
    _ok("eval", "--config", cfg, "--out", run, "--mode", mode)
    rows = read_csv(run / f"eval_{mode}.csv")
    chash = yaml.safe_load((run / "config.yaml").read_text())["config_hash"]
    assert len(rows) == 1 and rows[0]["config_hash"] == chash
    if mode == "langseg":
        assert {"mIoU_u", "mIoU_k", "hIoU", "avgsim", "unk_cos_yellow"} <= set(rows[0])
        assert float(rows[0]["hIoU"]) > 0
    if mode == "track":
        assert float(rows[0]["J"]) > 0
    from PIL import Image

    with Image.open(run / f"eval_{mode}.png") as im:
        assert chash in im.info.get("Description", "")


def test_report_passthrough_and_ablation(trained, tmp_path):
    cfg, run = trained
    _ok("eval", "--config", cfg, "--out", run, "--mode", "langseg")
    _ok("report", run, "--out", tmp_path / "rep", "--ablation")
    merged = read_csv(tmp_path / "rep" / "report.csv")
    sources = sorted(run.glob("eval_*.csv"))
    assert len(merged) == len(sources)
    for row, src in zip(merged, sources):
        original = read_csv(src)[0]
        assert {k: row[k] for k in original} == original
        assert all(row[k] == "" for k in set(row) - set(original))
    abl = read_csv(tmp_path / "rep" / "ablation.csv")
    assert list(abl[0])[:3] == ["L_t", "L_e", "L_s"]
    assert [abl[0][k] for k in ("L_t", "L_e", "L_s")] == ["x", "x", "x"]


def test_report_two_identical_runs(trained, tmp_path):
    cfg, run = trained
    _ok("eval", "--config", cfg, "--out", run, "--mode", "track")
    _ok("report", run, run, "--out", tmp_path / "rep")
    rows = read_csv(tmp_path / "rep" / "report.csv")
    half = len(rows) // 2
    assert rows[:half] == rows[half:]


def test_export_bank(trained, tmp_path):
    _, run = trained
    _ok("export-bank", "--checkpoint", run / "final.pt", "--out", tmp_path / "bank.bin")
    np.testing.assert_array_equal(PrototypeBank.load(tmp_path / "bank.bin").as_numpy(),
                                  PrototypeBank.load(run / "prototypes_trained.bin").as_numpy())


def test_preconditions_exit_nonzero(small_corpus, tmp_path):
    cfg = _config(small_corpus)
    assert _run("train", "--config", cfg, "--out", tmp_path / "nobank").exit_code == 2
    assert _run("eval", "--config", cfg, "--out", tmp_path / "nockpt", "--mode", "langseg").exit_code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("trian: {}\n")
    assert _run("build-prototypes", "--config", bad).exit_code == 2
    assert _run("build-prototypes", "--config", tmp_path / "missing.yaml").exit_code == 2
    data = small_config_dict()
    data["dataset"]["image_dir"] = str(tmp_path / "absent")
    (tmp_path / "absent.yaml").write_text(yaml.safe_dump(data))
    assert _run("build-prototypes", "--config", tmp_path / "absent.yaml").exit_code == 2
    assert _run("report", tmp_path, "--out", tmp_path / "r").exit_code == 2


def test_eval_without_ground_truth_fails(trained, small_corpus, tmp_path):
    _, run = trained
    data = small_config_dict()
    data["eval"].pop("gt_dir")
    path = small_corpus / "nogt.yaml"
    path.write_text(yaml.safe_dump(data))
    result = _run("eval", "--config", path, "--out", tmp_path, "--mode", "langseg", "--checkpoint", run / "final.pt")
    assert result.exit_code == 2 and "gt_dir" in result.output


def test_seed_flag_changes_hash(small_corpus, tmp_path):
    cfg = _config(small_corpus)
    _ok("build-prototypes", "--config", cfg, "--out", tmp_path / "s0")
    _ok("build-prototypes", "--config", cfg, "--out", tmp_path / "s1", "--seed", 1)
    h0 = yaml.safe_load((tmp_path / "s0" / "config.yaml").read_text())["config_hash"]
    h1 = yaml.safe_load((tmp_path / "s1" / "config.yaml").read_text())["config_hash"]
    assert h0 != h1


def test_gen_synth(tmp_path):
    _ok("gen-synth", "--out", tmp_path / "c", "--n-train", 2, "--n-eval", 1, "--size", 16)
    assert len(list((tmp_path / "c" / "train" / "images").glob("*.png"))) == 2
    assert len(list((tmp_path / "c" / "video" / "frames").glob("*.png"))) == 10
