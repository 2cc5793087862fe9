import csv
from pathlib import Path

import numpy as np
import pytest
import yaml

from s3tta import cli, synthdata
from s3tta.synthdata import DomainSpec, save_dataset

TINY_DOMAIN = {"size": [24, 24], "cell_radius_range": [3.0, 5.0], "cell_count_range": [1, 3]}
TINY_TRAIN = {"widths": [4, 8], "seg_base": 4, "seg_levels": 2, "batch_size": 2,
              "pretrain_steps": 10, "encoder_warmup_steps": 5, "joint_steps": 3, "plain_steps": 3}


def write_config(path: Path, **kw) -> str:
    base = {"n_train": 4, "n_test": 3, "train_domain": TINY_DOMAIN, "test_domain": TINY_DOMAIN,
            "train": TINY_TRAIN, "scales": [1.0, 2.0], "n_styles": 3}
    base.update(kw)
    path.write_text(yaml.safe_dump(base))
    return str(path)


def run(argv, capsys=None):
    code = cli.dispatch(argv)
    out = capsys.readouterr() if capsys else None
    return code, out


def last_dir(root: Path, command: str) -> Path:
    (d,) = list((root / command).iterdir())
    return d


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain-st -> train on a tiny configuration."""
    root = tmp_path_factory.mktemp("runs")
    cfg = write_config(root / "base.yaml")
    assert cli.dispatch(["gen-data", "--config", cfg, "--out", str(root)]) == 0
    data = last_dir(root, "gen-data") / "data"
    cfg = write_config(root / "pre.yaml", data_dir=str(data))
    assert cli.dispatch(["pretrain-st", "--config", cfg, "--out", str(root)]) == 0
    pre = last_dir(root, "pretrain-st")
    cfg = write_config(root / "train.yaml", data_dir=str(data), st_checkpoint=str(pre / "style_transfer.pt"),
                       style_bank=str(pre / "style_bank"))
    assert cli.dispatch(["train", "--config", cfg, "--out", str(root)]) == 0
    trained = last_dir(root, "train")
    models = dict(test_dir=str(data), st_checkpoint=str(trained / "style_transfer.pt"),
                  seg_checkpoint=str(trained / "segnet.pt"), style_bank=str(trained / "style_bank"))
    return root, data, trained, models


def test_no_arguments_prints_usage(capsys):
    code, out = run([], capsys)
    assert code == cli.EXIT_USAGE and "usage" in out.err


def test_unknown_command(capsys):
    code, _ = run(["fly"], capsys)
    assert code == cli.EXIT_USAGE


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", learning_rate=3)
    code, out = run(["gen-data", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_CONFIG and "learning_rate" in out.err


def test_unknown_train_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", train={"momentum": 0.9}, data_dir=str(tmp_path))
    save_dataset(tmp_path, synthdata.generate_many(DomainSpec(**{k: tuple(v) for k, v in TINY_DOMAIN.items()}), 2, 0))
    code, _ = run(["pretrain-st", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == cli.EXIT_CONFIG


def test_missing_config_key(tmp_path, capsys):
    code, out = run(["predict", "--config", write_config(tmp_path / "c.yaml"), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_CONFIG and "test_dir" in out.err


def test_missing_checkpoint(tmp_path, capsys):
    save_dataset(tmp_path / "d", synthdata.generate_many(DomainSpec(size=(24, 24), cell_radius_range=(3, 5)), 1, 0))
    cfg = write_config(tmp_path / "c.yaml", method="baseline", test_dir=str(tmp_path / "d"),
                       seg_checkpoint=str(tmp_path / "nope.pt"))
    code, out = run(["predict", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_MISSING and "nope.pt" in out.err


def test_missing_config_file(tmp_path, capsys):
    code, _ = run(["gen-data", "--config", str(tmp_path / "absent.yaml")], capsys)
    assert code == cli.EXIT_MISSING


def test_bad_method_is_config_error(tmp_path, capsys):
    code, _ = run(["gen-data", "--config", write_config(tmp_path / "c.yaml", method="magic"),
                   "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_CONFIG


def test_runtime_failure_exit_code(tmp_path, capsys, monkeypatch):
    def boom(run):
        raise RuntimeError("exploded")

    monkeypatch.setitem(cli.HANDLERS, "gen-data", boom)
    code, out = run(["gen-data", "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_RUNTIME and "exploded" in out.err
    assert len(out.err.strip().splitlines()) == 1


def test_pipeline_layout(pipeline):
    root, data, trained, _ = pipeline
    assert len(synthdata.load_dataset(data, "train")) == 4
    assert len(synthdata.load_dataset(data, "test")) == 3
    for name in ("config.yaml", "style_transfer.pt", "segnet.pt", "segnet_plain.pt", "train_log.csv"):
        assert (trained / name).exists()
    resolved = yaml.safe_load((trained / "config.yaml").read_text())
    assert resolved["seed"] == 0 and resolved["scales"] == [1.0, 2.0]


def test_run_id_depends_on_config_and_seed(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.dispatch(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert cli.dispatch(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert cli.dispatch(["gen-data", "--config", cfg, "--out", str(tmp_path), "--seed", "9"]) == 0
    assert len(list((tmp_path / "gen-data").iterdir())) == 2


def test_gen_data_reproducible(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    cli.dispatch(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")])
    cli.dispatch(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")])
    a = sorted((tmp_path / "a").rglob("*.png"))
    b = sorted((tmp_path / "b").rglob("*.png"))
    assert len(a) == len(b) == 14
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))


def test_evaluate_identical_prediction_is_perfect(pipeline, tmp_path, capsys):
    _, data, _, _ = pipeline
    cfg = write_config(tmp_path / "c.yaml", method="baseline", pred_dir=str(data), test_dir=str(data))
    code, out = run(["evaluate", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == 0
    lines = (last_dir(tmp_path, "evaluate") / "metrics.csv").read_text().splitlines()
    summary = [line for line in lines if line.startswith("ALL,")]
    assert summary == [f"ALL,baseline,{t},100.0,100.0,100.0" for t in (0.5, 0.6, 0.7)]
    assert "baseline F1@0.5: 100.0" in out.out


@pytest.mark.parametrize("method", ["baseline", "aggregate_all", "s3tta"])
def test_predict_then_evaluate(pipeline, tmp_path, method):
    _, data, _, models = pipeline
    cfg = write_config(tmp_path / "p.yaml", method=method, **models)
    assert cli.dispatch(["predict", "--config", cfg, "--out", str(tmp_path)]) == 0
    pred_run = last_dir(tmp_path, "predict")
    preds = synthdata.load_dataset(pred_run / "predictions")
    assert len(preds) == 3 and all(p.labels.shape == (24, 24) for p in preds)
    assert (pred_run / "selection_scores.csv").exists() == (method == "s3tta")
    cfg = write_config(tmp_path / "e.yaml", method=method, pred_dir=str(pred_run / "predictions"),
                       test_dir=str(data))
    assert cli.dispatch(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 0


def test_predict_is_reproducible(pipeline, tmp_path):
    _, _, _, models = pipeline
    cfg = write_config(tmp_path / "p.yaml", method="s3tta", **models)
    cli.dispatch(["predict", "--config", cfg, "--out", str(tmp_path / "a")])
    cli.dispatch(["predict", "--config", cfg, "--out", str(tmp_path / "b")])
    a, b = last_dir(tmp_path / "a", "predict"), last_dir(tmp_path / "b", "predict")
    for f in ("selection_scores.csv", "config.yaml"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    for x, y in zip(sorted(a.rglob("labels/*.png")), sorted(b.rglob("labels/*.png"))):
        assert x.read_bytes() == y.read_bytes()


def test_ablate_grid_shape(pipeline, tmp_path):
    _, _, _, models = pipeline
    cfg = write_config(tmp_path / "a.yaml", **models)
    assert cli.dispatch(["ablate", "--config", cfg, "--out", str(tmp_path)]) == 0
    with open(last_dir(tmp_path, "ablate") / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert [(r["scales"], r["n_styles"]) for r in rows] == [
        (s, n) for n in ("1", "3") for s in ("1", "1|2", "1|1.5|2", "0.7|1|1.5|2")
    ]
    assert all(0 <= float(r["f1@0.5"]) <= 100 for r in rows)


def test_visualize_embedding(pipeline, tmp_path, capsys):
    _, _, _, models = pipeline
    cfg = write_config(tmp_path / "v.yaml", **models)
    code, out = run(["visualize-embedding", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == 0
    d = last_dir(tmp_path, "visualize-embedding")
    assert (d / "embedding.png").stat().st_size > 0
    with open(d / "embedding.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 7
    assert np.isfinite([float(r["x"]) for r in rows]).all()
    assert "mean pairwise distance" in out.out
