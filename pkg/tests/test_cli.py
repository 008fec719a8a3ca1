"""Command-line surface: happy path, exit codes, config merging."""

import json
import subprocess
import sys

import numpy as np
import pytest

from loffta import __version__
from loffta.cli import main
from loffta.model import load_checkpoint
from loffta.store import load_manifest

EXTRACT_SMALL = ["extract", "--classes", "2", "--per-class", "10",
                 "--d", "8", "--h", "4", "--w", "4", "--seed", "1"]
MODEL_FLAGS = ["--embed-dim", "16", "--depth", "1", "--heads", "2"]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_version_subprocess():
    proc = subprocess.run([sys.executable, "-m", "loffta.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert __version__ in proc.stdout


def test_full_pipeline_happy_path(tmp_path, capsys):
    cache = str(tmp_path / "cache")
    pooled = str(tmp_path / "pooled")
    run = str(tmp_path / "run")

    assert main(EXTRACT_SMALL + ["--out", cache]) == 0
    assert main(["validate", "--cache", cache]) == 0

    assert main(["pool", "--in", cache, "--out", pooled,
                 "--mode", "average", "--kernel", "2", "--stride", "2"]) == 0
    assert main(["validate", "--cache", pooled]) == 0
    assert load_manifest(pooled).h == 2

    assert main(["train", "--cache", cache, "--out", run,
                 "--max-epochs", "2", "--batch-size", "8",
                 "--seed", "3"] + MODEL_FLAGS) == 0
    ckpt = tmp_path / "run" / "checkpoint-best.lftc"
    assert ckpt.exists()
    assert (tmp_path / "run" / "metrics.ndjson").exists()

    capsys.readouterr()
    assert main(["eval", "--cache", cache, "--split", "val",
                 "--checkpoint", str(ckpt)]) == 0
    line = capsys.readouterr().out.strip()
    payload = json.loads(line)
    assert set(payload) == {"split", "accuracy", "mean_class_recall", "loss"}
    assert 0.0 <= payload["accuracy"] <= 1.0

    assert main(["bench", "train", "--cache", cache, "--steps", "10",
                 "--batch-size", "4"] + MODEL_FLAGS) == 0
    json_out = tmp_path / "bench.json"
    assert main(["bench", "infer", "--cache", cache, "--split", "test",
                 "--checkpoint", str(ckpt), "--batch-size", "4",
                 "--json", str(json_out)]) == 0
    report = json.loads(json_out.read_text())
    assert report["mode"] == "infer" and report["images_per_sec"] > 0


def test_train_on_missing_cache_exits_1(tmp_path, capsys):
    missing = str(tmp_path / "nonexistent")
    code = main(["train", "--cache", missing, "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert "nonexistent" in err
    assert err.startswith("error:")


def test_validate_failure_exits_1(tmp_path, capsys):
    cache = tmp_path / "cache"
    assert main(EXTRACT_SMALL + ["--out", str(cache)]) == 0
    shard = cache / "train-0000.lfta"
    shard.write_bytes(b"XXXX" + shard.read_bytes()[4:])
    assert main(["validate", "--cache", str(cache)]) == 1


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["pool", "--in", "a", "--out", "b", "--kernel", "0"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["--bogus-flag"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["bench", "nonsense", "--cache", "x"])
    assert info.value.code == 2


def test_bench_infer_without_checkpoint_exits_1(tmp_path, capsys):
    cache = str(tmp_path / "cache")
    assert main(EXTRACT_SMALL + ["--out", cache]) == 0
    assert main(["bench", "infer", "--cache", cache]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_config_file_with_flag_overrides(tmp_path):
    cache = str(tmp_path / "cache")
    assert main(EXTRACT_SMALL + ["--out", cache]) == 0
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({
        "max_epochs": 1, "batch_size": 4, "seed": 9, "peak_lr": 2e-3,
        "policy": {"enable_noise": False},
        "model": {"embed_dim": 16, "depth": 1, "heads": 2},
    }))
    run = tmp_path / "run"
    assert main(["train", "--cache", cache, "--config", str(cfg_file),
                 "--out", str(run), "--batch-size", "8"]) == 0
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["train"]["batch_size"] == 8  # flag beats file
    assert echoed["train"]["seed"] == 9
    assert echoed["train"]["peak_lr"] == 2e-3
    assert echoed["train"]["policy"]["enable_noise"] is False
    assert echoed["model"]["embed_dim"] == 16
    _, cfg, _, _ = load_checkpoint(run / "checkpoint-final.lftc")
    assert cfg.embed_dim == 16 and cfg.depth == 1


def test_cli_train_matches_library_call(tmp_path):
    # the subcommand is a thin wrapper: same config, same result bits
    from loffta.augment import AugmentationPolicy
    from loffta.model import ModelConfig, param_order
    from loffta.trainer import TrainConfig, train

    cache = str(tmp_path / "cache")
    assert main(EXTRACT_SMALL + ["--out", cache]) == 0
    run = tmp_path / "run"
    assert main(["train", "--cache", cache, "--out", str(run),
                 "--max-epochs", "2", "--batch-size", "8",
                 "--seed", "5"] + MODEL_FLAGS) == 0
    cli_params, cli_cfg, _, _ = load_checkpoint(run / "checkpoint-final.lftc")

    cfg = TrainConfig(max_epochs=2, batch_size=8, seed=5)
    model_cfg = ModelConfig(feature_dim=8, grid_h=4, grid_w=4, num_classes=2,
                            embed_dim=16, depth=1, heads=2)
    result = train(cache, cfg, model_config=model_cfg)
    assert cli_cfg == model_cfg
    for name in param_order(model_cfg):
        assert np.array_equal(cli_params[name],
                              result.params[name].astype(np.float32)), name
