import json
import subprocess
import sys

import numpy as np
import pytest

from dispa.cli import main
from dispa.minipatch import read_provenance
from dispa.nn import load_checkpoint
from dispa.pointcloud import read_manifest

PRETRAIN = """resolution = 32
n_views = 2
rotations = 1
radius = 1
embed_dim = 8
rep_dim = 4
depth = 1
"""

TRAIN = """epochs = 2
batch = 4
inner_steps = 2
grids = 2
minipatch = 16
embed_dim = 8
hidden = 8
est_hidden = [8]
depth = 1
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "3", "synth", "--out", str(root / "corpus"), "--contents", "2",
                 "--points", "600"]) == 0
    return root


def test_synth_writes_manifest(corpus):
    recs = read_manifest(corpus / "corpus" / "manifest.csv")
    assert len(recs) == 2 * 3 * 7
    assert len({r.content_id for r in recs}) == 2


def test_render_and_minipatch(corpus, capsys):
    ply = corpus / "corpus" / read_manifest(corpus / "corpus" / "manifest.csv")[0].path
    main(["render", "--input", str(ply), "--out", str(corpus / "views"), "--resolution", "64",
          "--radius", "1", "--pose-seed", "5"])
    pngs = sorted((corpus / "views").glob("view*.png"))
    assert len(pngs) == 6
    main(["--seed", "1", "minipatch", "--input", str(corpus / "views"), "--L", "4",
          "--patch", "8", "--out", str(corpus / "map" / "map.png")])
    prov = read_provenance(corpus / "map" / "provenance.csv")
    assert len(prov) == (64 // 8) ** 2
    assert "map.png" in capsys.readouterr().out


def test_pretrain_train_eval(corpus):
    (corpus / "p.toml").write_text(PRETRAIN)
    (corpus / "t.toml").write_text(TRAIN)
    (corpus / "folds.toml").write_text('protocol = "kfold"\nfolds = 2\n')
    manifest = str(corpus / "corpus" / "manifest.csv")
    main(["pretrain", "--manifest", manifest, "--config", str(corpus / "p.toml"),
          "--epochs", "1", "--batch", "8", "--out", str(corpus / "content.dql")])
    arrays = load_checkpoint(corpus / "content.dql")
    assert arrays["cfg.resolution"][0] == 32 and arrays["meta.epoch"][0] == 1
    assert (corpus / "content.csv").read_text().startswith("epoch,loss")

    main(["train", "--manifest", manifest, "--content-ckpt", str(corpus / "content.dql"),
          "--config", str(corpus / "t.toml"), "--out", str(corpus / "model.dql")])
    assert (corpus / "model.toml").exists() and (corpus / "model.csv").exists()

    main(["eval", "--ckpt", str(corpus / "model.dql"), "--manifest", manifest,
          "--folds", str(corpus / "folds.toml"), "--out", str(corpus / "report.json")])
    report = json.loads((corpus / "report.json").read_text())
    assert report["protocol"] == "kfold" and len(report["folds"]) == 2
    for f in report["folds"]:
        assert -1 <= f["srocc"] <= 1 and f["n_test"] == 21
    assert (corpus / "report.csv").exists()


def test_eval_checkpoint_count_mismatch(corpus):
    (corpus / "f3.toml").write_text("folds = 2\n")
    with pytest.raises(SystemExit):
        main(["eval", "--ckpt", "a", "--ckpt", "b", "--ckpt", "c", "--manifest",
              str(corpus / "corpus" / "manifest.csv"), "--folds", str(corpus / "f3.toml"),
              "--out", str(corpus / "r.json")])


def test_mi_bench_output(capsys):
    main(["--seed", "2", "mi-bench", "--rho", "0.5", "--steps", "20", "--samples", "64",
          "--every", "10"])
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "step,nll"
    assert [ln.split(",")[0] for ln in lines[1:4]] == ["0", "10", "19"]
    table = dict(ln.split(",") for ln in lines[lines.index("quantity,value") + 1 :])
    assert float(table["true_mi"]) == pytest.approx(-0.5 * np.log(0.75))
    assert np.isfinite(float(table["estimated_mi"]))


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dispa", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("render", "minipatch", "pretrain", "train", "mi-bench", "eval"):
        assert cmd in out.stdout
    assert "--seed" in out.stdout and "--threads" in out.stdout
