import json
import os
from pathlib import Path

import numpy as np
import pytest

from ddtseg import dataio
from ddtseg.cli import (EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_NO_PAIRS, EXIT_NO_SAMPLES,
                        EXIT_TOO_FEW, EXIT_UNWRITABLE, instances_for, main, subsample_means)
from ddtseg.config import NetConfig, RunConfig, load_config
from ddtseg.errors import ConfigError
from ddtseg.morphology import btgt, dtgt, inverse_normalize
from ddtseg.nn.training import PipelineKind, TrainConfig

TINY = {"net": {"depth": 1, "base_filters": 4}, "train": {"epochs": 2, "batch_size": 4}}


def write_config(path, **fields):
    obj = json.loads(json.dumps(TINY))
    obj.update(fields)
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "4", "--size", "32", "--seed", "3"]) == 0
    assert main(["prepare", str(root / "data"), "--out", str(root / "prep")]) == 0
    cfg = write_config(root / "cfg.json", pipeline="UNet1", prepared_dir=str(root / "prep"),
                       output_dir=str(root / "run"))
    assert main(["train", "--config", cfg]) == 0
    return root, cfg


# -- config ---------------------------------------------------------------------------


def test_init_round_trip(tmp_path):
    out = tmp_path / "c.json"
    assert main(["init", "--out", str(out)]) == 0
    cfg = load_config(out)
    assert cfg.to_json() == RunConfig().to_json()
    assert cfg.wdmc_weights == (0.3, 0.3, 0.4)


@pytest.mark.parametrize("obj, field", [
    ({"pipeline": "nope"}, "pipeline"),
    ({"net": {"depth": 0}}, "net.depth"),
    ({"train": {"batch_size": 0}}, "train.batch_size"),
    ({"wdmc_weights": [0.5, 0.5, 0.5]}, "wdmc_weights"),
    ({"colour": 1}, "colour"),
])
def test_config_errors_name_the_field(obj, field):
    with pytest.raises(ConfigError, match=f"^{field}"):
        RunConfig.from_json(obj)


def test_seed_drives_training_seed():
    cfg = RunConfig(seed=9, train=TrainConfig(seed=1))
    assert cfg.train_config.seed == 9
    assert "seed" not in cfg.to_json()["train"]
    assert NetConfig().ddt_activation == "linear"


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"tile_size": 0}')
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG


# -- synth / prepare --------------------------------------------------------------------


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n", "2", "--size", "32", "--seed", "5"]) == 0
    for sub in ("images", "ground_truth"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()


def test_synth_zero_then_prepare_finds_nothing(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "0"]) == 0
    assert main(["prepare", str(tmp_path / "d"), "--out", str(tmp_path / "p")]) == EXIT_NO_SAMPLES


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--n", "1"]) == EXIT_UNWRITABLE


def test_prepare_outputs_and_idempotence(workspace, tmp_path):
    root, _ = workspace
    prep = root / "prep"
    index = json.loads((prep / "index.json").read_text())
    assert len(index["samples"]) == 4 and index["errors"] == []
    s = index["samples"][0]
    gt = dataio.read_labels_tiff(s["ground_truth"])
    d, role = dataio.read_map(s["dtgt"])
    assert role == "distance" and np.array_equal(d, dtgt(gt))
    c, role = dataio.read_map(s["btgt"])
    assert role == "class" and np.array_equal(c, btgt(gt))
    assert main(["prepare", str(root / "data"), "--out", str(tmp_path / "again")]) == 0
    for f in sorted((prep / "maps").iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / "maps" / f.name).read_bytes()


def test_train_without_prepare(tmp_path):
    cfg = write_config(tmp_path / "c.json", prepared_dir=str(tmp_path / "none"))
    assert main(["train", "--config", cfg]) == EXIT_NO_SAMPLES


# -- train / predict ----------------------------------------------------------------------


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    assert (run / "top.ckpt").is_file()
    lines = (run / "history.csv").read_text().splitlines()
    assert lines[0] == "stage,epoch,loss" and len(lines) == 3


def test_train_is_deterministic(workspace, tmp_path):
    root, _ = workspace
    cfg = write_config(tmp_path / "c.json", pipeline="UNet1", prepared_dir=str(root / "prep"),
                       output_dir=str(tmp_path / "run"))
    assert main(["train", "--config", cfg]) == 0
    assert (tmp_path / "run" / "history.csv").read_bytes() == (root / "run" / "history.csv").read_bytes()


def test_predict_writes_maps(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "pred"
    assert main(["predict", "--config", cfg, "--out", str(out), "--watershed", str(root / "data")]) == 0
    cls, role = dataio.read_map(out / "synth_0000.class.map")
    assert role == "class" and cls.shape == (32, 32) and set(np.unique(cls)) <= {0, 1, 2}
    assert dataio.read_map(out / "synth_0000.instances.map")[1] == "instance"
    assert (out / "synth_0000.class.png").is_file()


def test_predict_checkpoint_errors(workspace, tmp_path):
    root, cfg = workspace
    image = str(root / "data" / "images" / "synth_0000.tif")
    args = ["predict", "--config", cfg, "--out", str(tmp_path / "p")]
    assert main(args + ["--checkpoints", str(tmp_path / "empty"), image]) == EXIT_CHECKPOINT
    assert main(args + ["--pipeline", "DDT_UNet1", image]) == EXIT_CHECKPOINT
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "top.ckpt").write_bytes(b"DDTCKPT\0garbage")
    assert main(args + ["--checkpoints", str(broken), image]) == EXIT_CHECKPOINT
    assert main(args + [str(tmp_path / "missing.tif")]) == EXIT_NO_SAMPLES


def test_watershed_splits_touching_pair_from_classes():
    _, gt = dataio.synth_touching_pair(48, seed=1)
    labels = instances_for(PipelineKind.UNET1, btgt(gt), None, 0.1)
    assert len(np.unique(labels[labels > 0])) >= 2
    ddt = inverse_normalize(dtgt(gt), gt)
    labels = instances_for(PipelineKind.DDT_UNET2, btgt(gt), ddt, 0.1)
    assert len(np.unique(labels[labels > 0])) >= 2


# -- eval / cv / wilcoxon / render ------------------------------------------------------------


def _gt_class_dir(root, dest):
    for s in json.loads((root / "prep" / "index.json").read_text())["samples"]:
        cls, _ = dataio.read_map(s["btgt"])
        dataio.write_map(dest / f"{s['stem']}.class.map", cls, "class")
    return dest


def test_eval_self_is_perfect(workspace, tmp_path):
    root, _ = workspace
    gt = _gt_class_dir(root, tmp_path / "gt")
    assert main(["eval", str(gt), str(gt), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["aggregate"]["wdmc"]["mean"] == 1.0 and rep["aggregate"]["bde"]["mean"] == 0.0
    assert (tmp_path / "r.csv").is_file()


def test_eval_no_pairs(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    assert main(["eval", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "r")]) == EXIT_NO_PAIRS


def test_wilcoxon_codes(workspace, tmp_path):
    root, _ = workspace
    gt = _gt_class_dir(root, tmp_path / "gt")
    main(["eval", str(gt), str(gt), "--out", str(tmp_path / "r")])
    rep = str(tmp_path / "r.json")
    out = str(tmp_path / "w.json")
    assert main(["wilcoxon", rep, rep, "--sample-size", "10", "--out", out]) == EXIT_TOO_FEW
    assert main(["wilcoxon", rep, rep, "--sample-size", "2", "--n-samples", "5", "--out", out]) == EXIT_DEGENERATE


def test_subsample_means_draws_without_replacement():
    a = {f"i{k}": float(k) for k in range(10)}
    b = {f"i{k}": 0.0 for k in range(10)}
    ma, mb = subsample_means(a, b, 6, 10, seed=0)
    assert ma == [4.5] * 6 and mb == [0.0] * 6
    ma1, _ = subsample_means(a, b, 6, 3, seed=1)
    assert ma1 == subsample_means(a, b, 6, 3, seed=1)[0]
    mr, _ = subsample_means(a, b, 50, 10, seed=0, with_replacement=True)
    assert len(set(mr)) > 1  # repeats make the subset means vary


def test_cv_two_folds(workspace, tmp_path):
    root, _ = workspace
    cfg = write_config(tmp_path / "c.json", pipeline="UNet1", prepared_dir=str(root / "prep"),
                       output_dir=str(tmp_path / "cv"))
    assert main(["cv", "--config", cfg, "--k", "2"]) == 0
    summary = json.loads((tmp_path / "cv" / "summary.json").read_text())
    assert summary["k"] == 2 and summary["pooled"]["wdmc"]["n"] == 4
    folds = json.loads((tmp_path / "cv" / "folds.json").read_text())
    assert sorted(folds["assignments"]) == [f"synth_{i:04d}" for i in range(4)]
    assert sorted(folds["assignments"].values()) == [0, 0, 1, 1]
    assert main(["cv", "--config", cfg, "--pipeline", "DDT"]) == EXIT_CONFIG


def test_render(workspace, tmp_path):
    root, _ = workspace
    src = next((root / "prep" / "maps").glob("*.btgt.map"))
    out = tmp_path / "x.png"
    assert main(["render", str(src), "--out", str(out)]) == 0
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
