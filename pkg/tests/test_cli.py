import json

import numpy as np
import pytest

from erf.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from erf.config import Config, apply_overrides, dump_config, load_config
from erf.serialize import load_model

FAST = ["--set", "sh_bands=1", "--set", "init_depth=2", "--set", "pixel_batch=128",
        "--set", "prior_batch=128", "--set", "phase_iterations=10", "--set", "log_every=5"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--scene", "checkered_cube", "--out", str(data), "--views", "4",
                 "--test-views", "2", "--res", "16"]) == EXIT_OK
    model = root / "m.erf"
    assert main(["train", "--data", str(data), "--out", str(model), "--iters", "20",
                 "--phases", "2", "--deterministic"] + FAST) == EXIT_OK
    return root, data, model


def test_synth_writes_transforms_and_images(workspace):
    _, data, _ = workspace
    meta = json.loads((data / "transforms_train.json").read_text())
    assert len(meta["frames"]) == 4
    assert meta["aabb"] == [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
    assert len(list((data / "train").glob("*.png"))) == 4
    assert len(list((data / "test").glob("*.png"))) == 2


def test_train_writes_model_stats_and_checkpoints(workspace):
    root, _, model = workspace
    assert load_model(model).svo.n_nodes >= 1
    lines = (root / "m.erf.jsonl").read_text().splitlines()
    records = [json.loads(x) for x in lines]
    assert any("photo_loss" in r for r in records)
    phases = [r["phase"] for r in records if "phase" in r]
    assert phases and phases == list(range(1, len(phases) + 1))
    names = sorted(p.name for p in (root / "m.erf.phases").iterdir())
    assert names == [f"phase_{k:02d}.erf" for k in phases]


def test_deterministic_training_is_bitwise_reproducible(workspace, tmp_path):
    _, data, model = workspace
    again = tmp_path / "again.erf"
    assert main(["train", "--data", str(data), "--out", str(again), "--iters", "20",
                 "--phases", "2", "--deterministic"] + FAST) == EXIT_OK
    assert again.read_bytes() == model.read_bytes()


def test_init_and_info(workspace, tmp_path, capsys):
    _, data, _ = workspace
    out = tmp_path / "init.erf"
    assert main(["init", "--data", str(data), "--out", str(out), "--depth", "2",
                 "--set", "sh_bands=2"]) == EXIT_OK
    capsys.readouterr()
    assert main(["info", "--model", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "nodes=73" in text and "max_depth=2" in text and "sh_bands=2" in text


@pytest.mark.parametrize("mode", ["color", "depth", "normal", "opacity"])
def test_render_modes(workspace, tmp_path, mode):
    _, data, model = workspace
    out = tmp_path / "views"
    assert main(["render", "--model", str(model), "--data", str(data), "--out", str(out),
                 "--mode", mode, "--views", "0"]) == EXIT_OK
    assert len(list(out.glob(f"*_{mode}.png"))) == 1


def test_eval_prints_metrics(workspace, capsys):
    _, data, model = workspace
    assert main(["eval", "--model", str(model), "--data", str(data)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    keys = dict(x.split("=", 1) for x in lines if x.startswith(("psnr=", "ssim=")))
    assert float(keys["psnr"]) > 0 and -1 <= float(keys["ssim"]) <= 1
    assert sum(x.startswith("view=") for x in lines) == 2


def test_edit_recolor_and_cut(workspace, tmp_path):
    _, _, model = workspace
    box = "-2 -2 -2 2 2 2"
    swapped = tmp_path / "swap.erf"
    assert main(["edit", "--model", str(model), "--out", str(swapped), "--op", "recolor",
                 "--box", box, "--matrix", "0 0 1 0 1 0 1 0 0"]) == EXIT_OK
    cut = tmp_path / "cut.erf"
    assert main(["edit", "--model", str(model), "--out", str(cut), "--op", "cut",
                 "--box", box]) == EXIT_OK
    m = load_model(cut)
    np.testing.assert_array_equal(m.svo.params[:, 0], m.svo.border[0])
    assert main(["edit", "--model", str(model), "--out", str(cut), "--op", "recolor",
                 "--box", box]) == EXIT_USAGE


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--tol", "1e-4", "--rays", "4", "--max-params", "300"]) == EXIT_OK
    assert "gradcheck=pass" in capsys.readouterr().out


def test_gradcheck_on_a_dataset(workspace):
    _, data, _ = workspace
    assert main(["gradcheck", "--data", str(data), "--tol", "1e-4", "--rays", "4",
                 "--max-params", "200"]) == EXIT_OK


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["fly"]) == EXIT_USAGE
    assert main(["info"]) == EXIT_USAGE
    assert main(["info", "--model", "x", "--bogus"]) == EXIT_USAGE
    assert main(["info", "--model", "x", "--set", "nonsense=1"]) == EXIT_USAGE
    assert main(["edit", "--model", "x", "--out", "y", "--op", "cut", "--box", "1 2"]) \
        == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_data_errors(tmp_path):
    assert main(["info", "--model", str(tmp_path / "missing.erf")]) == EXIT_DATA
    bad = tmp_path / "bad.erf"
    bad.write_bytes(b"not a model")
    assert main(["info", "--model", str(bad)]) == EXIT_DATA
    assert main(["init", "--data", str(tmp_path / "nowhere"), "--out",
                 str(tmp_path / "o.erf")]) == EXIT_DATA


def test_numerical_failure_exit_code(workspace, tmp_path):
    _, data, _ = workspace
    code = main(["train", "--data", str(data), "--out", str(tmp_path / "nan.erf"),
                 "--iters", "20", "--set", "lr=1e300"] + FAST)
    assert code == EXIT_NUMERIC


def test_config_file_round_trip(tmp_path):
    cfg = Config().replace(sh_bands=2, lr=0.01, renderer="exp-softplus",
                           importance_sampling=False)
    path = tmp_path / "c.txt"
    path.write_text("# comment\n" + dump_config(cfg))
    assert load_config(path) == cfg


def test_config_rejects_unknown_keys_and_bad_lines(tmp_path):
    with pytest.raises(KeyError):
        apply_overrides(Config(), {"wings": "2"})
    path = tmp_path / "c.txt"
    path.write_text("sh_bands 2\n")
    with pytest.raises(ValueError):
        load_config(path)
    assert main(["info", "--model", "x", "--config", str(path)]) == EXIT_USAGE


def test_config_defaults():
    cfg = Config()
    assert (cfg.samples_per_side, cfg.max_samples, cfg.max_samples_opacity) == (8, 256, 32)
    assert (cfg.prior_strength, cfg.pixel_batch, cfg.prior_batch) == (1e-3, 4096, 4096)
    assert (cfg.hysteresis_high, cfg.hysteresis_low, cfg.cache_rebuild) == (0.75, 0.075, 5000)
    assert cfg.renderer == "opacity"
