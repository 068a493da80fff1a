import json
import struct

import pytest

from ditlab.checkpoint import sha256
from ditlab.cli import main
from ditlab.train import RunLog


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["data-gen", "--count", "10", "--seed", "1", "--out", str(out),
                 "--frames", "2", "--height", "8", "--width", "8"]) == 0
    return out


def write_config(path, dataset, out_dir, **extra):
    values = {"dataset": dataset, "out_dir": out_dir, "total_iterations": 5, "micro_batch": 2,
              "embed_dim": 16, "num_heads": 2, "num_blocks": 2, "precision": "float64", "seed": 3}
    values.update(extra)
    path.write_text("# tiny run\n" + "".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "train.cfg", dataset, root / "out")
    assert main(["train", "--config", str(cfg), "--log-every", "0"]) == 0
    return root


def test_sampler_demo(tmp_path, capsys):
    assert main(["sampler-demo", "--out", str(tmp_path), "--samples", "20000", "--iterations", "0,500"]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"density.csv", "histogram.csv", "density.svg", "sampler_demo.txt", "manifest.json"} <= names
    footer = (tmp_path / "sampler_demo.txt").read_text().splitlines()
    assert len(footer) == 2 and all("ok" in line for line in footer)
    assert "KS" in capsys.readouterr().out


def test_sampler_demo_rejects_bad_alpha(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["sampler-demo", "--out", str(tmp_path), "--alpha", "2"])
    assert exc.value.code == 2


def test_data_gen_manifest(dataset, tmp_path):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["artifacts"]) == 10
    assert len(manifest["split"]["train"]) == 9 and len(manifest["split"]["val"]) == 1
    for name, digest in manifest["artifacts"].items():
        assert sha256(dataset / name) == digest
    again = tmp_path / "again"
    main(["data-gen", "--count", "10", "--seed", "1", "--out", str(again),
          "--frames", "2", "--height", "8", "--width", "8"])
    assert json.loads((again / "manifest.json").read_text())["artifacts"] == manifest["artifacts"]


def test_train_writes_one_row_per_step(trained):
    out = trained / "out"
    assert len(RunLog.read_csv(out / "runlog.csv")["step"]) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"runlog.csv", "config.txt", "checkpoint.bin"}
    assert "train.seed=3" in (out / "config.txt").read_text()


def test_train_is_byte_reproducible(trained, dataset):
    cfg = write_config(trained / "again.cfg", dataset, trained / "again")
    assert main(["train", "--config", str(cfg), "--log-every", "0"]) == 0
    for name in ("checkpoint.bin", "runlog.csv", "config.txt"):
        a, b = trained / "out" / name, trained / "again" / name
        assert sha256(a) == sha256(b), name


def test_missing_dataset_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", tmp_path / "nowhere", tmp_path / "out")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "not found" in capsys.readouterr().err


def test_unknown_config_key_names_the_line(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.cfg", dataset, tmp_path / "out")
    cfg.write_text(cfg.read_text() + "learning_rat = 0.1\n")
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(cfg)])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "c.cfg:11" in err and "learning_rat" in err


def test_divergence_exits_3(tmp_path, dataset):
    cfg = write_config(tmp_path / "c.cfg", dataset, tmp_path / "out", learning_rate=1e30, total_iterations=100)
    with pytest.warns(RuntimeWarning):
        assert main(["train", "--config", str(cfg)]) == 3


def test_eval_defaults_and_seeds(trained, dataset, capsys):
    out = trained / "eval"
    args = ["eval", "--checkpoint", str(trained / "out" / "checkpoint.bin"), "--dataset", str(dataset),
            "--out", str(out), "--steps", "2", "--seeds", "2"]
    assert main(args) == 0
    text = (out / "eval_report.txt").read_text()
    assert text.startswith("cfg_scale 2.0") and "seeds 2" in text and "diversity" in text
    header, row = (out / "eval_report.csv").read_text().splitlines()
    assert float(row.split(",")[header.split(",").index("diversity")]) > 0


def test_sample_writes_one_clip_per_seed(trained, dataset):
    out = trained / "samples"
    assert main(["sample", "--checkpoint", str(trained / "out" / "checkpoint.bin"), "--dataset", str(dataset),
                 "--out", str(out), "--steps", "2", "--seeds", "3", "--cfg-scale", "1"]) == 0
    assert len(list(out.glob("seed*_sample*.bin"))) == 3
    assert json.loads((out / "manifest.json").read_text())["cfg_scale"] == 1.0


def test_checkpoint_version_mismatch(trained, dataset, tmp_path, capsys):
    raw = bytearray((trained / "out" / "checkpoint.bin").read_bytes())
    raw[8:12] = struct.pack("<I", 7)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", str(bad), "--dataset", str(dataset), "--out", str(tmp_path / "e")])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "version 7" in err and "version 1" in err


def test_ablate_and_report(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", dataset, tmp_path / "out", total_iterations=3, tau=2)
    assert main(["ablate", "--kind", "warmup", "--config", str(cfg), "--seeds", "0,1"]) == 0
    root = tmp_path / "out" / "ablate_warmup"
    verdict = (root / "verdict.txt").read_text().splitlines()
    assert verdict[-1].startswith("VERDICT warmup: expected ordering held for ")
    assert verdict[-1].endswith("of 2 seeds")
    assert len(list(root.rglob("runlog.csv"))) == 6
    assert (root / "curves_seed0.svg").read_text().startswith("<svg")
    assert main(["report", "--dir", str(root)]) == 0
    assert len((root / "report.txt").read_text().splitlines()) == 6
